#include "blockrg/lattice.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "blockrg/rng.hpp"

namespace blockrg {

namespace {

std::int64_t ipow(std::int64_t base, int exp) {
    std::int64_t r = 1;
    for (int i = 0; i < exp; ++i) r *= base;
    return r;
}

}  // namespace

TorusLattice::TorusLattice(int d, int L, int side_exponent, int k, std::int64_t site_cap)
    : d_(d), L_(L), side_exponent_(side_exponent), k_(k) {
    if (d < 1 || d > 3) throw validation_error("lattice dimension must be 1, 2 or 3");
    if (L < 2) throw validation_error("scale factor must be >= 2");
    if (side_exponent + k < 0)
        throw validation_error("side_exponent + k must be >= 0 (no sites otherwise)");
    n_ = ipow(L, side_exponent + k);
    num_sites_ = 1;
    for (int i = 0; i < d; ++i) {
        if (num_sites_ > site_cap / n_ + 1) throw size_error("lattice exceeds site cap");
        num_sites_ *= n_;
    }
    if (num_sites_ > site_cap) throw size_error("lattice exceeds site cap");
    spacing_ = std::pow(static_cast<double>(L), -k);
}

TorusLattice build_torus(int d, int L, int side_exponent, int k, std::int64_t site_cap) {
    if (side_exponent < 1) throw validation_error("side_exponent must be >= 1");
    if (k < 0) throw validation_error("fine exponent k must be >= 0");
    return TorusLattice(d, L, side_exponent, k, site_cap);
}

std::int64_t TorusLattice::index(const std::array<std::int64_t, 3>& coord) const {
    std::int64_t idx = 0;
    for (int i = 0; i < d_; ++i) idx = idx * n_ + wrap(coord[i]);
    return idx;
}

std::array<std::int64_t, 3> TorusLattice::coord(std::int64_t index) const {
    std::array<std::int64_t, 3> c{0, 0, 0};
    for (int i = d_ - 1; i >= 0; --i) {
        c[i] = index % n_;
        index /= n_;
    }
    return c;
}

std::int64_t TorusLattice::neighbor(std::int64_t index, int axis, std::int64_t delta) const {
    auto c = coord(index);
    c[axis] = wrap(c[axis] + delta);
    return this->index(c);
}

TorusLattice TorusLattice::coarser() const {
    if (n_ % L_ != 0)
        throw validation_error("cannot coarsen: fewer than L sites per side");
    return TorusLattice(d_, L_, side_exponent_, k_ - 1);
}

TorusLattice TorusLattice::finer() const { return TorusLattice(d_, L_, side_exponent_, k_ + 1); }

LatticeField::LatticeField(const TorusLattice& lat, const Vec& v) : lattice(lat), values(v) {
    if (v.size() != lat.num_sites())
        throw validation_error("field value count does not match site count");
    if (!v.allFinite()) throw validation_error("field contains non-finite values");
}

LatticeField::LatticeField(const TorusLattice& lat)
    : lattice(lat), values(Vec::Zero(lat.num_sites())) {}

LatticeField LatticeField::constant(const TorusLattice& lat, double c) {
    return LatticeField(lat, Vec::Constant(lat.num_sites(), c));
}

LatticeField LatticeField::random_normal(const TorusLattice& lat, Rng& rng, double sigma) {
    Vec v(lat.num_sites());
    for (std::int64_t i = 0; i < v.size(); ++i) v[i] = sigma * rng.normal();
    return LatticeField(lat, v);
}

nlohmann::json field_to_json(const LatticeField& f) {
    nlohmann::json j;
    j["dimension"] = f.lattice.dimension();
    j["L"] = f.lattice.scale_factor();
    j["k"] = f.lattice.fine_exponent();
    j["side_exponent"] = f.lattice.side_exponent();
    j["values"] = std::vector<double>(f.values.data(), f.values.data() + f.values.size());
    return j;
}

LatticeField field_from_json(const nlohmann::json& j) {
    TorusLattice lat(j.at("dimension").get<int>(), j.at("L").get<int>(),
                     j.at("side_exponent").get<int>(), j.at("k").get<int>());
    auto vals = j.at("values").get<std::vector<double>>();
    Vec v = Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    return LatticeField(lat, v);
}

LatticeField block_average(const LatticeField& fine) {
    const TorusLattice& lat = fine.lattice;
    TorusLattice coarse = lat.coarser();
    const int d = lat.dimension();
    const int L = lat.scale_factor();
    const double inv_block = 1.0 / ipow(L, d);
    Vec out = Vec::Zero(coarse.num_sites());
    // Accumulate fine values into their block; one pass over fine sites.
    for (std::int64_t i = 0; i < lat.num_sites(); ++i) {
        auto c = lat.coord(i);
        std::array<std::int64_t, 3> b{0, 0, 0};
        for (int a = 0; a < d; ++a) b[a] = c[a] / L;
        out[coarse.index(b)] += fine.values[i];
    }
    return LatticeField(coarse, out * inv_block);
}

LatticeField block_average_k(const LatticeField& fine, int levels) {
    if (levels < 1) throw validation_error("levels must be >= 1");
    LatticeField f = fine;
    for (int i = 0; i < levels; ++i) f = block_average(f);
    return f;
}

LatticeField adjoint_average(const LatticeField& coarse, const TorusLattice& fine) {
    if (!fine.coarser().same_geometry(coarse.lattice))
        throw validation_error("adjoint_average: coarse field does not sit on block centers");
    const int d = fine.dimension();
    const int L = fine.scale_factor();
    const double w = 1.0 / ipow(L, d);
    Vec out(fine.num_sites());
    for (std::int64_t i = 0; i < fine.num_sites(); ++i) {
        auto c = fine.coord(i);
        std::array<std::int64_t, 3> b{0, 0, 0};
        for (int a = 0; a < d; ++a) b[a] = c[a] / L;
        out[i] = w * coarse.values[coarse.lattice.index(b)];
    }
    return LatticeField(fine, out);
}

LatticeField rescale_field(const LatticeField& f, RescaleDirection dir) {
    const TorusLattice& lat = f.lattice;
    const double ex = 0.5 * (lat.dimension() - 2);
    const double L = lat.scale_factor();
    if (dir == RescaleDirection::down) {
        TorusLattice out(lat.dimension(), lat.scale_factor(), lat.side_exponent() + 1,
                         lat.fine_exponent() - 1);
        return LatticeField(out, f.values * std::pow(L, -ex));
    }
    TorusLattice out(lat.dimension(), lat.scale_factor(), lat.side_exponent() - 1,
                     lat.fine_exponent() + 1);
    return LatticeField(out, f.values * std::pow(L, ex));
}

std::vector<Bond> lattice_bonds(const TorusLattice& lat) {
    std::vector<Bond> bonds;
    const std::int64_t n = lat.sites_per_side();
    if (n < 2) return bonds;
    bonds.reserve(lat.num_sites() * lat.dimension());
    for (std::int64_t i = 0; i < lat.num_sites(); ++i) {
        const auto c = lat.coord(i);
        for (int a = 0; a < lat.dimension(); ++a) {
            if (n == 2 && c[a] == 1) continue;  // pair already listed from the other end
            bonds.push_back(Bond{i, lat.neighbor(i, a, 1), a});
        }
    }
    return bonds;
}

double neumann_gradient_norm(const LatticeField& f, const std::vector<std::uint8_t>& mask) {
    const TorusLattice& lat = f.lattice;
    if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != lat.num_sites())
        throw validation_error("gradient mask size mismatch");
    const double w = std::pow(lat.spacing(), lat.dimension() - 2);
    double sum = 0.0;
    for (const Bond& b : lattice_bonds(lat)) {
        if (!mask.empty() && (!mask[b.a] || !mask[b.b])) continue;
        const double diff = f.values[b.b] - f.values[b.a];
        sum += diff * diff;
    }
    return w * sum;
}

double neumann_gradient_norm(const LatticeField& f) {
    return neumann_gradient_norm(f, std::vector<std::uint8_t>());
}

}  // namespace blockrg
