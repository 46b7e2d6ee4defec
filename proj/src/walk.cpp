#include "blockrg/walk.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

namespace blockrg {

namespace {

constexpr std::int64_t kDenseSiteCap = 4096;

std::int64_t int_pow(std::int64_t base, int exp) {
  std::int64_t out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

// Deterministic power iteration for the largest singular value.
double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.rows() == 0 || m.cols() == 0) return 0.0;
  Vec v(m.cols());
  for (std::int64_t i = 0; i < m.cols(); ++i) {
    v[i] = std::sin(0.7 * static_cast<double>(i) + 0.3) + 1e-3;
  }
  v /= v.norm();
  double sigma = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    const Vec w = m * v;
    const Vec u = m.transpose() * w;
    const double nu = u.norm();
    if (nu == 0.0) return 0.0;
    sigma = std::sqrt(nu);
    v = u / nu;
  }
  return sigma;
}

std::vector<double> normalize_weakening(const RandomWalkExpansion& expansion,
                                        const std::vector<double>& s) {
  if (s.empty()) {
    return std::vector<double>(expansion.cubes.size(), 1.0);
  }
  if (s.size() != expansion.cubes.size()) {
    throw validation_error("one weakening factor per cover cube required");
  }
  for (double v : s) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw validation_error("weakening factors must lie in [0, 1]");
    }
  }
  return s;
}

// Positions of the core sites inside the halo list.
std::vector<std::int64_t> core_positions(const WalkCube& cube) {
  std::vector<std::int64_t> pos(cube.core.size());
  std::size_t h = 0;
  for (std::size_t c = 0; c < cube.core.size(); ++c) {
    while (h < cube.halo.size() && cube.halo[h] < cube.core[c]) ++h;
    if (h == cube.halo.size() || cube.halo[h] != cube.core[c]) {
      throw std::runtime_error("core site missing from halo");
    }
    pos[c] = static_cast<std::int64_t>(h);
  }
  return pos;
}

Eigen::MatrixXd weakened_parametrix(const RandomWalkExpansion& expansion,
                                    const std::vector<double>& s) {
  const std::int64_t n = static_cast<std::int64_t>(expansion.op.sites.size());
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t c = 0; c < expansion.cubes.size(); ++c) {
    if (s[c] == 0.0) continue;
    const WalkCube& cube = expansion.cubes[c];
    const std::vector<std::int64_t> pos = core_positions(cube);
    for (std::size_t j = 0; j < cube.core.size(); ++j) {
      for (std::size_t i = 0; i < cube.halo.size(); ++i) {
        p(cube.halo[i], cube.core[j]) +=
            s[c] * cube.local_inverse(static_cast<std::int64_t>(i), pos[j]);
      }
    }
  }
  return p;
}

Eigen::MatrixXd weakened_step(const RandomWalkExpansion& expansion,
                              const std::vector<double>& s,
                              const Eigen::MatrixXd& parametrix) {
  Eigen::MatrixXd k = expansion.op.matrix * parametrix;
  for (std::size_t c = 0; c < expansion.cubes.size(); ++c) {
    for (std::int64_t site : expansion.cubes[c].core) {
      k(site, site) -= s[c];
    }
  }
  return k;
}

std::vector<Eigen::MatrixXd> walk_terms(const RandomWalkExpansion& expansion,
                                        const std::vector<double>& s, int n_max,
                                        double* theta_out) {
  const Eigen::MatrixXd p = weakened_parametrix(expansion, s);
  const Eigen::MatrixXd k = weakened_step(expansion, s, p);
  if (theta_out != nullptr) *theta_out = spectral_norm(k);
  std::vector<Eigen::MatrixXd> terms;
  terms.reserve(static_cast<std::size_t>(n_max) + 1);
  terms.push_back(p);
  for (int m = 1; m <= n_max; ++m) {
    terms.push_back(-(terms.back() * k));
  }
  return terms;
}

}  // namespace

RandomWalkExpansion build_walk_expansion(const MultiscaleOperator& op,
                                         std::int64_t cube_side) {
  const TorusLattice& fine = op.regions.fine;
  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());
  if (n > kDenseSiteCap) {
    throw size_error("walk expansion capped at 4096 sites");
  }

  RandomWalkExpansion expansion{op, grid_for_lattice(fine, cube_side), cube_side, {}, {}, {}, 0.0};

  const double inv_h2 = 1.0 / (fine.spacing() * fine.spacing());
  const std::vector<Bond> bonds = lattice_bonds(fine);
  const int L = fine.scale_factor();

  for (std::int64_t cell = 0; cell < expansion.paving.num_cubes(); ++cell) {
    WalkCube cube;
    cube.cell = cell;
    for (std::int64_t site : cube_sites(fine, expansion.paving, cell)) {
      const std::int64_t rank = op.rank_of_site[static_cast<std::size_t>(site)];
      if (rank >= 0) cube.core.push_back(rank);
    }
    if (cube.core.empty()) continue;
    std::sort(cube.core.begin(), cube.core.end());

    const CubeRegion halo_region = enlarge(CubeRegion(expansion.paving, {cell}), 1);
    for (std::int64_t c : halo_region.cubes()) {
      for (std::int64_t site : cube_sites(fine, expansion.paving, c)) {
        const std::int64_t rank = op.rank_of_site[static_cast<std::size_t>(site)];
        if (rank >= 0) cube.halo.push_back(rank);
      }
    }
    std::sort(cube.halo.begin(), cube.halo.end());

    // Local operator on the halo: bonds cut at the halo boundary are dropped
    // from the diagonal, while bonds into the complement of the working
    // region keep their diagonal contribution.
    const std::int64_t hn = static_cast<std::int64_t>(cube.halo.size());
    std::vector<std::int64_t> halo_pos(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = 0; i < hn; ++i) {
      halo_pos[static_cast<std::size_t>(cube.halo[i])] = i;
    }
    Eigen::MatrixXd local = Eigen::MatrixXd::Zero(hn, hn);
    for (std::int64_t i = 0; i < hn; ++i) local(i, i) = op.couplings.mubar;
    for (const Bond& b : bonds) {
      const std::int64_t ra = op.rank_of_site[static_cast<std::size_t>(b.a)];
      const std::int64_t rb = op.rank_of_site[static_cast<std::size_t>(b.b)];
      const std::int64_t pa = ra >= 0 ? halo_pos[static_cast<std::size_t>(ra)] : -1;
      const std::int64_t pb = rb >= 0 ? halo_pos[static_cast<std::size_t>(rb)] : -1;
      if (pa >= 0 && pb >= 0) {
        local(pa, pa) += inv_h2;
        local(pb, pb) += inv_h2;
        local(pa, pb) -= inv_h2;
        local(pb, pa) -= inv_h2;
      } else if (pa >= 0 && rb < 0) {
        local(pa, pa) += inv_h2;
      } else if (pb >= 0 && ra < 0) {
        local(pb, pb) += inv_h2;
      }
    }
    for (int j = 1; j <= op.regions.depth(); ++j) {
      CubeRegion supp = op.regions.annulus(j);
      if (op.support == AverageSupport::annuli_with_top && j == op.regions.depth()) {
        supp = op.regions.levels.back();
      }
      const CubeGrid grid = grid_for_lattice(fine, int_pow(L, j));
      double weight = op.couplings.a[static_cast<std::size_t>(j - 1)];
      for (int i = 0; i < j * fine.dimension(); ++i) weight /= L;
      for (std::int64_t block : supp.cubes()) {
        std::vector<std::int64_t> present;
        for (std::int64_t site : cube_sites(fine, grid, block)) {
          const std::int64_t rank = op.rank_of_site[static_cast<std::size_t>(site)];
          if (rank < 0) continue;
          const std::int64_t p = halo_pos[static_cast<std::size_t>(rank)];
          if (p >= 0) present.push_back(p);
        }
        for (std::int64_t x : present) {
          for (std::int64_t y : present) {
            local(x, y) += weight;
          }
        }
      }
    }
    if (op.resolvent_shift > 0.0) {
      const double a_top = op.couplings.a.back();
      const CubeGrid grid = grid_for_lattice(fine, int_pow(L, op.regions.depth()));
      double weight = a_top * op.resolvent_shift / (a_top + op.resolvent_shift);
      for (int i = 0; i < op.regions.depth() * fine.dimension(); ++i) weight /= L;
      for (std::int64_t block : op.regions.top_hole.cubes()) {
        std::vector<std::int64_t> present;
        for (std::int64_t site : cube_sites(fine, grid, block)) {
          const std::int64_t rank = op.rank_of_site[static_cast<std::size_t>(site)];
          if (rank < 0) continue;
          const std::int64_t p = halo_pos[static_cast<std::size_t>(rank)];
          if (p >= 0) present.push_back(p);
        }
        for (std::int64_t x : present) {
          for (std::int64_t y : present) {
            local(x, y) += weight;
          }
        }
      }
    }

    Eigen::LLT<Eigen::MatrixXd> llt(local);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("local operator is not positive definite");
    }
    cube.local_inverse = llt.solve(Eigen::MatrixXd::Identity(hn, hn));
    cube.local_inverse = 0.5 * (cube.local_inverse + cube.local_inverse.transpose()).eval();
    expansion.cubes.push_back(std::move(cube));
  }

  const std::vector<double> ones(expansion.cubes.size(), 1.0);
  expansion.parametrix = weakened_parametrix(expansion, ones);
  expansion.step = weakened_step(expansion, ones, expansion.parametrix);
  expansion.theta = spectral_norm(expansion.step);
  return expansion;
}

Eigen::MatrixXd pairwise_tree_sum(std::vector<Eigen::MatrixXd> terms) {
  if (terms.empty()) {
    throw validation_error("tree sum of no terms");
  }
  while (terms.size() > 1) {
    std::vector<Eigen::MatrixXd> next;
    next.reserve((terms.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < terms.size(); i += 2) {
      next.push_back(terms[i] + terms[i + 1]);
    }
    if (terms.size() % 2 == 1) next.push_back(terms.back());
    terms = std::move(next);
  }
  return terms.front();
}

WalkPartialSum walk_partial_sum(const RandomWalkExpansion& expansion,
                                const std::vector<double>& s, int n_max) {
  if (n_max < 0) throw validation_error("walk length must be nonnegative");
  const std::vector<double> weights = normalize_weakening(expansion, s);
  WalkPartialSum out;
  std::vector<Eigen::MatrixXd> terms = walk_terms(expansion, weights, n_max, &out.theta);
  out.term_norms.reserve(terms.size());
  for (const Eigen::MatrixXd& t : terms) out.term_norms.push_back(t.norm());
  out.approx = pairwise_tree_sum(std::move(terms));
  return out;
}

Eigen::MatrixXd walk_term_enumeration(const RandomWalkExpansion& expansion,
                                      const std::vector<double>& s, int length) {
  if (length < 0) throw validation_error("walk length must be nonnegative");
  const std::vector<double> weights = normalize_weakening(expansion, s);
  const std::size_t nc = expansion.cubes.size();
  if (nc == 0) throw validation_error("walk cover is empty");
  const std::int64_t n = static_cast<std::int64_t>(expansion.op.sites.size());

  std::vector<Eigen::MatrixXd> piece(nc), step(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> indicator(nc, 0.0);
    indicator[c] = 1.0;
    piece[c] = weakened_parametrix(expansion, indicator);
    step[c] = weakened_step(expansion, indicator, piece[c]);
  }

  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(n, n);
  std::vector<std::size_t> seq(static_cast<std::size_t>(length) + 1, 0);
  while (true) {
    double factor = 1.0;
    for (std::size_t idx : seq) factor *= weights[idx];
    if (factor != 0.0) {
      Eigen::MatrixXd term = piece[seq[0]];
      for (std::size_t i = 1; i < seq.size(); ++i) {
        term = -(term * step[seq[i]]);
      }
      total += factor * term;
    }
    std::size_t pos = seq.size();
    while (pos > 0) {
      --pos;
      if (++seq[pos] < nc) break;
      seq[pos] = 0;
      if (pos == 0) return total;
    }
  }
}

WalkInverseReport random_walk_inverse(const MultiscaleRegions& regions,
                                      const MultiscaleCouplings& couplings,
                                      double resolvent_shift,
                                      const std::vector<double>& s,
                                      int n_max, std::int64_t cube_side) {
  if (n_max < 0) throw validation_error("walk length must be nonnegative");
  const MultiscaleOperator op =
      assemble_operator(regions, couplings, AverageSupport::annuli, resolvent_shift);
  const RandomWalkExpansion expansion = build_walk_expansion(op, cube_side);
  const std::vector<double> weights = normalize_weakening(expansion, s);

  WalkInverseReport report;
  std::vector<Eigen::MatrixXd> terms = walk_terms(expansion, weights, n_max, &report.theta);
  if (!(report.theta < 1.0)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "expansion divergent at this M: cube side %lld gives step norm %.6f",
                  static_cast<long long>(cube_side), report.theta);
    throw std::runtime_error(buf);
  }
  report.term_norms.reserve(terms.size());
  for (const Eigen::MatrixXd& t : terms) report.term_norms.push_back(t.norm());

  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());
  if (n <= kDenseSiteCap) {
    const Eigen::MatrixXd dense = Eigen::MatrixXd(op.matrix);
    Eigen::LLT<Eigen::MatrixXd> llt(dense);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("operator is not positive definite");
    }
    const Eigen::MatrixXd exact = llt.solve(Eigen::MatrixXd::Identity(n, n));
    Eigen::MatrixXd running = Eigen::MatrixXd::Zero(n, n);
    for (const Eigen::MatrixXd& t : terms) {
      running += t;
      report.error_per_length.push_back((exact - running).norm());
    }
  }
  report.approx = pairwise_tree_sum(std::move(terms));
  return report;
}

namespace {

struct HomeBlock {
  std::array<std::int64_t, 3> origin = {0, 0, 0};
  std::int64_t side = 1;
};

// Distance in fine steps between two axis-aligned periodic intervals.
std::int64_t interval_distance(std::int64_t o1, std::int64_t w1, std::int64_t o2,
                               std::int64_t w2, std::int64_t n) {
  const std::int64_t gap1 = ((o2 - (o1 + w1 - 1)) % n + n) % n;
  const std::int64_t gap2 = ((o1 - (o2 + w2 - 1)) % n + n) % n;
  // Overlap when either interval starts inside the other.
  const std::int64_t rel = ((o2 - o1) % n + n) % n;
  const std::int64_t rel2 = ((o1 - o2) % n + n) % n;
  if (rel < w1 || rel2 < w2) return 0;
  return std::min(gap1, gap2);
}

std::vector<HomeBlock> assign_home_blocks(const MultiscaleOperator& op) {
  const MultiscaleRegions& regions = op.regions;
  const TorusLattice& fine = regions.fine;
  const int L = fine.scale_factor();
  std::vector<HomeBlock> homes(op.sites.size());
  std::vector<std::uint8_t> assigned(op.sites.size(), 0);

  auto assign_region = [&](const CubeRegion& region, std::int64_t side) {
    const std::vector<std::uint8_t> mask = region_site_mask(fine, region);
    for (std::size_t i = 0; i < op.sites.size(); ++i) {
      if (assigned[i] || !mask[static_cast<std::size_t>(op.sites[i])]) continue;
      const std::array<std::int64_t, 3> c = fine.coord(op.sites[i]);
      HomeBlock h;
      h.side = side;
      for (int ax = 0; ax < fine.dimension(); ++ax) {
        h.origin[static_cast<std::size_t>(ax)] =
            (c[static_cast<std::size_t>(ax)] / side) * side;
      }
      homes[i] = h;
      assigned[i] = 1;
    }
  };

  for (int j = 1; j <= regions.depth(); ++j) {
    assign_region(regions.annulus(j), int_pow(L, j));
  }
  assign_region(regions.top_hole, int_pow(L, std::max(regions.depth(), 0)));
  for (std::size_t i = 0; i < assigned.size(); ++i) {
    if (!assigned[i]) throw std::runtime_error("site without a home block");
  }
  return homes;
}

}  // namespace

DecayCertificate decay_certificate(const Eigen::MatrixXd& greens,
                                   const MultiscaleOperator& op) {
  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());
  if (greens.rows() != n || greens.cols() != n) {
    throw validation_error("matrix size does not match the operator");
  }
  const TorusLattice& fine = op.regions.fine;
  const std::vector<HomeBlock> homes = assign_home_blocks(op);

  std::map<std::int64_t, double> bucket;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      std::int64_t steps = 0;
      for (int ax = 0; ax < fine.dimension(); ++ax) {
        const std::size_t a = static_cast<std::size_t>(ax);
        steps = std::max(steps, interval_distance(homes[static_cast<std::size_t>(i)].origin[a],
                                                  homes[static_cast<std::size_t>(i)].side,
                                                  homes[static_cast<std::size_t>(j)].origin[a],
                                                  homes[static_cast<std::size_t>(j)].side,
                                                  fine.sites_per_side()));
      }
      double& slot = bucket[steps];
      slot = std::max(slot, std::abs(greens(i, j)));
    }
  }

  DecayCertificate cert;
  for (const auto& [steps, value] : bucket) {
    DecayTableRow row;
    row.distance = static_cast<double>(steps) * fine.spacing();
    row.max_abs_entry = value;
    cert.table.push_back(row);
  }

  const double max_distance = cert.table.back().distance;
  const bool restrict_range = cert.table.size() >= 6;
  std::vector<std::size_t> fit_rows;
  for (std::size_t i = 0; i < cert.table.size(); ++i) {
    if (cert.table[i].max_abs_entry <= 0.0) continue;
    if (restrict_range && cert.table[i].distance > 0.5 * max_distance) continue;
    fit_rows.push_back(i);
  }
  if (fit_rows.size() < 3) {
    fit_rows.clear();
    for (std::size_t i = 0; i < cert.table.size(); ++i) {
      if (cert.table[i].max_abs_entry > 0.0) fit_rows.push_back(i);
    }
  }

  if (fit_rows.size() >= 2) {
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i : fit_rows) {
      const double x = cert.table[i].distance;
      const double y = std::log(cert.table[i].max_abs_entry);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      cert.table[i].used_in_fit = true;
    }
    const double m = static_cast<double>(fit_rows.size());
    const double denom = sxx - sx * sx / m;
    if (denom > 0.0) {
      const double slope = (sxy - sx * sy / m) / denom;
      cert.gamma = -slope;
      cert.prefactor = std::exp(sy / m - slope * sx / m);
    }
  }

  double min_entry = 0.0, max_entry = 0.0;
  bool first = true;
  for (std::size_t i : fit_rows) {
    const double v = cert.table[i].max_abs_entry;
    if (first) {
      min_entry = max_entry = v;
      first = false;
    } else {
      min_entry = std::min(min_entry, v);
      max_entry = std::max(max_entry, v);
    }
  }
  cert.conclusive = fit_rows.size() >= 3 && min_entry > 0.0 && max_entry >= 10.0 * min_entry;

  if (cert.conclusive && op.couplings.mubar >= 1.0 && !(cert.gamma > 0.0)) {
    throw std::runtime_error("no decay measured despite unit mass");
  }
  return cert;
}

nlohmann::json decay_certificate_json(const DecayCertificate& cert) {
  nlohmann::json table = nlohmann::json::array();
  for (const DecayTableRow& row : cert.table) {
    table.push_back({{"distance", row.distance},
                     {"max_abs_entry", row.max_abs_entry},
                     {"used_in_fit", row.used_in_fit}});
  }
  return nlohmann::json{{"fit", {{"gamma", cert.gamma}, {"C", cert.prefactor}}},
                        {"conclusive", cert.conclusive},
                        {"table", table}};
}

LocalizedFieldResult localized_field(const RandomWalkExpansion& expansion,
                                     const Vec& source, std::int64_t box,
                                     std::int64_t radius, int n_max) {
  const std::int64_t n = static_cast<std::int64_t>(expansion.op.sites.size());
  if (source.size() != n) {
    throw validation_error("source size does not match the operator");
  }
  if (box < 0 || box >= static_cast<std::int64_t>(expansion.cubes.size())) {
    throw validation_error("cube index out of range");
  }
  if (radius < 0 || n_max < 0) {
    throw validation_error("radius and walk length must be nonnegative");
  }

  const std::size_t nc = expansion.cubes.size();
  const auto apply_terms = [](const std::vector<Eigen::MatrixXd>& p_and_k, const Vec& f,
                              int n_max_inner) {
    const Eigen::MatrixXd& p = p_and_k[0];
    const Eigen::MatrixXd& k = p_and_k[1];
    std::vector<Eigen::MatrixXd> terms;
    Vec u = f;
    for (int m = 0; m <= n_max_inner; ++m) {
      terms.push_back(p * u);
      u = -(k * u);
    }
    return pairwise_tree_sum(std::move(terms));
  };

  const auto build_ps_ks = [&](const std::vector<double>& s) {
    std::vector<Eigen::MatrixXd> out;
    out.push_back(weakened_parametrix(expansion, s));
    out.push_back(weakened_step(expansion, s, out[0]));
    return out;
  };

  LocalizedFieldResult result;
  const std::vector<double> ones(nc, 1.0);
  result.phi = apply_terms(build_ps_ks(ones), source, n_max);

  result.phi_loc = Vec::Zero(n);
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> s_c(nc, 0.0);
    for (std::size_t c2 = 0; c2 < nc; ++c2) {
      if (expansion.paving.chebyshev(expansion.cubes[c].cell, expansion.cubes[c2].cell) <=
          radius) {
        s_c[c2] = 1.0;
      }
    }
    Vec masked = Vec::Zero(n);
    for (std::int64_t rank : expansion.cubes[c].core) masked[rank] = source[rank];
    const Vec piece = apply_terms(build_ps_ks(s_c), masked, n_max);
    if (static_cast<std::int64_t>(c) == box) result.phi_box = piece;
    result.phi_loc += piece;
  }
  result.delta_sup = (result.phi - result.phi_loc).lpNorm<Eigen::Infinity>();
  return result;
}

Eigen::MatrixXd localized_inverse(const RandomWalkExpansion& expansion,
                                  std::int64_t radius, int n_max) {
  if (radius < 0 || n_max < 0) {
    throw validation_error("radius and walk length must be nonnegative");
  }
  const std::int64_t n = static_cast<std::int64_t>(expansion.op.sites.size());
  const std::size_t nc = expansion.cubes.size();
  Eigen::MatrixXd result = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> s_c(nc, 0.0);
    for (std::size_t c2 = 0; c2 < nc; ++c2) {
      if (expansion.paving.chebyshev(expansion.cubes[c].cell, expansion.cubes[c2].cell) <=
          radius) {
        s_c[c2] = 1.0;
      }
    }
    const WalkPartialSum sum = walk_partial_sum(expansion, s_c, n_max);
    for (std::int64_t rank : expansion.cubes[c].core) {
      result.col(rank) = sum.approx.col(rank);
    }
  }
  return result;
}

}  // namespace blockrg
