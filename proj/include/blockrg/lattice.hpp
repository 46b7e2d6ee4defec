#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace blockrg {

// Thrown on precondition violations (bad parameters, mismatched scales, ...).
class validation_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown when an instance exceeds a configured size cap.
class size_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Vec = Eigen::VectorXd;

class Rng;

// Periodic d-dimensional lattice with sites_per_side = L^(side_exponent + k)
// integer sites per axis. Conceptually the spacing is L^-k and the physical
// side length is L^side_exponent. k may be negative (spacing coarser than 1);
// block-center lattices produced by averaging have k one lower than their fine
// lattice. Sites are enumerated lexicographically, first coordinate slowest.
class TorusLattice {
public:
    TorusLattice(int d, int L, int side_exponent, int k, std::int64_t site_cap = 1 << 22);

    int dimension() const { return d_; }
    int scale_factor() const { return L_; }
    int side_exponent() const { return side_exponent_; }
    int fine_exponent() const { return k_; }
    std::int64_t sites_per_side() const { return n_; }
    std::int64_t num_sites() const { return num_sites_; }
    double spacing() const { return spacing_; }

    std::int64_t index(const std::array<std::int64_t, 3>& coord) const;
    std::array<std::int64_t, 3> coord(std::int64_t index) const;
    std::int64_t wrap(std::int64_t c) const {
        c %= n_;
        return c < 0 ? c + n_ : c;
    }
    // Site shifted by `delta` along `axis`, with periodic wrap.
    std::int64_t neighbor(std::int64_t index, int axis, std::int64_t delta) const;

    bool same_geometry(const TorusLattice& other) const {
        return d_ == other.d_ && L_ == other.L_ && side_exponent_ == other.side_exponent_ &&
               k_ == other.k_;
    }

    // Block-center lattice: spacing L times coarser, same physical side.
    TorusLattice coarser() const;
    TorusLattice finer() const;

private:
    int d_, L_, side_exponent_, k_;
    std::int64_t n_, num_sites_;
    double spacing_;
};

// Public builder enforcing the documented parameter ranges
// (d in {1,2,3}, L >= 2, side_exponent >= 1, k >= 0, site count under cap).
TorusLattice build_torus(int d, int L, int side_exponent, int k,
                         std::int64_t site_cap = 1 << 22);

// Real field with one value per lattice site, enumerated in site order.
struct LatticeField {
    TorusLattice lattice;
    Vec values;

    LatticeField(const TorusLattice& lat, const Vec& v);
    explicit LatticeField(const TorusLattice& lat);

    static LatticeField constant(const TorusLattice& lat, double c);
    static LatticeField random_normal(const TorusLattice& lat, Rng& rng, double sigma = 1.0);
};

nlohmann::json field_to_json(const LatticeField& f);
LatticeField field_from_json(const nlohmann::json& j);

// Block averaging: each coarse value is the arithmetic mean of the L^d fine
// values in its block. Linear, preserves constants, sup-norm contraction.
LatticeField block_average(const LatticeField& fine);

// `levels`-fold composition of block_average.
LatticeField block_average_k(const LatticeField& fine, int levels);

// Adjoint of block_average for counting-measure inner products on both
// lattices: (adjoint(Psi))(x) = L^-d * Psi(block of x). Then Q(Q^T Psi) = Psi.
LatticeField adjoint_average(const LatticeField& coarse, const TorusLattice& fine);

enum class RescaleDirection { down, up };

// Unit rescaling with exponent (d-2)/2. Sites map one-to-one; only the unit of
// length changes. `down` re-expresses the field in units L times smaller
// (side_exponent+1, spacing exponent k-1, values scaled by L^-(d-2)/2); `up`
// is the exact inverse. The weighted bond-gradient norm below is invariant
// under both, and down then up is the identity.
LatticeField rescale_field(const LatticeField& f, RescaleDirection dir);

// Nearest-neighbor bond (unordered pair). With two sites per side the wrap
// bond coincides with the interior bond as a pair and is listed once; every
// consumer of the lattice graph (gradient norms, Laplacians) shares this list
// so quadratic forms and operators stay consistent.
struct Bond {
    std::int64_t a, b;
    int axis;
};
std::vector<Bond> lattice_bonds(const TorusLattice& lat);

// Sum of (difference)^2 over bonds with both endpoints in `mask` (Neumann
// restriction), weighted by spacing^(d-2). `mask` holds one flag per site; the
// overload without a mask sums over the whole torus.
double neumann_gradient_norm(const LatticeField& f, const std::vector<std::uint8_t>& mask);
double neumann_gradient_norm(const LatticeField& f);

}  // namespace blockrg
