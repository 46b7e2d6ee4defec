#include "blockrg/small_factors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <future>
#include <limits>
#include <stdexcept>
#include <thread>
#include <unordered_set>
#include <utility>

#include "blockrg/rng.hpp"

namespace blockrg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPi = 3.14159265358979323846;

nlohmann::json two_sided_json(const SmallFactorReport& r) {
  return nlohmann::json{{"log_lhs", r.log_lhs},
                        {"log_rhs", r.log_rhs},
                        {"on_support", r.on_support},
                        {"holds", r.holds},
                        {"cube_count", r.cube_count}};
}

// Exceedance test and squared-sum tally shared by the two deviation bounds.
SmallFactorReport exceedance_bound(const CubeRegion& region, const LatticeField& values,
                                   double strength, double threshold) {
  if (!(strength > 0.0)) throw validation_error("deviation bound: strength must be positive");
  if (!(threshold > 0.0)) throw validation_error("deviation bound: threshold must be positive");
  SmallFactorReport report;
  report.cube_count = region.size();
  report.on_support = true;
  double sum = 0.0;
  for (std::int64_t cube : region.cubes()) {
    double cube_max = 0.0;
    for (std::int64_t site : cube_sites(values.lattice, region.grid(), cube)) {
      cube_max = std::max(cube_max, std::abs(values.values[site]));
      sum += values.values[site] * values.values[site];
    }
    if (cube_max < threshold) report.on_support = false;
  }
  report.log_rhs = -0.25 * strength * threshold * threshold *
                   static_cast<double>(report.cube_count);
  report.log_lhs = report.on_support ? -0.25 * strength * sum : -kInf;
  report.holds = report.log_lhs <= report.log_rhs;
  return report;
}

}  // namespace

LatticeField sample_exceedance_field(const TorusLattice& lat, const CubeRegion& region,
                                     double threshold, double sigma, Rng& rng) {
  if (!(threshold > 0.0) || !(sigma > 0.0)) {
    throw validation_error("exceedance sampling: threshold and sigma must be positive");
  }
  LatticeField field(lat);
  for (std::int64_t i = 0; i < lat.num_sites(); ++i) field.values[i] = sigma * rng.normal();
  for (std::int64_t cube : region.cubes()) {
    const auto sites = cube_sites(lat, region.grid(), cube);
    for (int attempt = 0;; ++attempt) {
      bool exceeds = false;
      for (std::int64_t site : sites) {
        if (std::abs(field.values[site]) >= threshold) {
          exceeds = true;
          break;
        }
      }
      if (exceeds) break;
      if (attempt >= 10000) {
        throw std::runtime_error("exceedance sampling: threshold unreachable from the proposal");
      }
      for (std::int64_t site : sites) field.values[site] = sigma * rng.normal();
    }
  }
  return field;
}

SmallFactorReport small_factor_p(const CubeRegion& p_region, const LatticeField& phi_next,
                                 const LatticeField& phi, double a_scaled, double p_threshold) {
  const LatticeField averaged = block_average(phi);
  if (!averaged.lattice.same_geometry(phi_next.lattice)) {
    throw validation_error("deviation bound: phi must coarsen onto the lattice of phi_next");
  }
  LatticeField deviation = phi_next;
  deviation.values -= averaged.values;
  return exceedance_bound(p_region, deviation, a_scaled, p_threshold);
}

SmallFactorReport small_factor_w(const CubeRegion& r_region, const LatticeField& w,
                                 double p0_threshold) {
  return exceedance_bound(r_region, w, 1.0, p0_threshold);
}

nlohmann::json small_factor_json(const SmallFactorReport& r) { return two_sided_json(r); }

ActionFactorReport small_factor_action(const CubeRegion& delta_lambda,
                                       const CubeRegion& q_region,
                                       const LatticeField& phi_block,
                                       const LatticeField& phi_fine, const CouplingSet& prev,
                                       const CouplingSet& cur, const CharacteristicSpec& spec,
                                       const BoundConstants& constants, double c_bound) {
  spec.validate();
  prev.validate();
  cur.validate();
  const TorusLattice& unit = phi_block.lattice;
  if (delta_lambda.grid().dimension != unit.dimension() ||
      delta_lambda.grid().cubes_per_side != unit.sites_per_side()) {
    throw validation_error("action bound: the cell region must have one cube per block site");
  }
  if (q_region.grid().dimension != unit.dimension() ||
      unit.sites_per_side() % q_region.grid().cubes_per_side != 0) {
    throw validation_error("action bound: the large-field grid must divide the block lattice");
  }
  for (std::int64_t cube : q_region.cubes()) {
    for (std::int64_t site : cube_sites(unit, q_region.grid(), cube)) {
      if (!delta_lambda.contains(site)) {
        throw validation_error("action bound: large-field cubes must lie in the cell region");
      }
    }
  }

  {
    const auto mask = region_site_mask(unit, delta_lambda);
    double max_field = 0.0, max_gradient = 0.0;
    for (std::int64_t i = 0; i < unit.num_sites(); ++i) {
      if (mask[static_cast<std::size_t>(i)]) {
        max_field = std::max(max_field, std::abs(phi_block.values[i]));
      }
    }
    for (const Bond& b : lattice_bonds(unit)) {
      if (mask[static_cast<std::size_t>(b.a)] && mask[static_cast<std::size_t>(b.b)]) {
        max_gradient =
            std::max(max_gradient, std::abs(phi_block.values[b.a] - phi_block.values[b.b]));
      }
    }
    if (max_field > spec.field_limit(CharFamily::widened_plus) ||
        max_gradient > spec.gradient_limit(CharFamily::widened_plus)) {
      throw validation_error("action bound: block field violates the declared entry limits");
    }
  }

  ActionFactorReport report;
  const auto bonds = lattice_bonds(unit);
  const bool mubar_branch = std::sqrt(cur.mubar) >= std::pow(cur.lambda, 0.25);
  const double fine_cell = std::pow(phi_fine.lattice.spacing(), phi_fine.lattice.dimension());
  report.on_support = true;
  for (std::int64_t cube : q_region.cubes()) {
    const auto sites = cube_sites(unit, q_region.grid(), cube);
    std::unordered_set<std::int64_t> in_cube(sites.begin(), sites.end());
    ActionCubeDiagnostic diag;
    for (std::int64_t site : sites) {
      diag.max_field = std::max(diag.max_field, std::abs(phi_block.values[site]));
      double quartic = 0.0;
      for (std::int64_t fs : cube_sites(phi_fine.lattice, delta_lambda.grid(), site)) {
        quartic += fine_cell * std::pow(phi_fine.values[fs], 4);
      }
      diag.quartic_integral += 0.25 * cur.lambda * quartic;
    }
    for (const Bond& b : bonds) {
      if (in_cube.count(b.a) && in_cube.count(b.b)) {
        diag.max_gradient =
            std::max(diag.max_gradient, std::abs(phi_block.values[b.a] - phi_block.values[b.b]));
      }
    }
    const bool fired = diag.max_field > spec.field_limit(CharFamily::core) ||
                       diag.max_gradient > spec.gradient_limit(CharFamily::core);
    if (!fired) {
      diag.fired_case = 'C';
      report.on_support = false;
    } else if (diag.max_gradient >= constants.c1 * spec.p) {
      diag.fired_case = 'D';
    } else if (mubar_branch) {
      diag.fired_case = 'E';
    } else {
      diag.fired_case = 'F';
    }
    report.cubes.push_back(diag);
  }

  const double action =
      action_unrenorm(delta_lambda, phi_block, phi_fine, prev, cur).total();
  report.log_lhs = report.on_support ? -action : -kInf;

  const double a_l = cur.a * phi_fine.lattice.scale_factor();
  report.c2 = BoundConstants::c2_formula(constants.c0, constants.c1, constants.big_r2, a_l,
                                         unit.dimension());
  const auto cells = static_cast<double>(delta_lambda.size());
  report.log_rhs = c_bound * std::pow(cur.lambda, constants.beta) * cells -
                   report.c2 * spec.p * spec.p * static_cast<double>(q_region.size());

  const std::int64_t block_side = phi_fine.lattice.sites_per_side() / unit.sites_per_side();
  const double block_vol =
      std::pow(phi_fine.lattice.spacing() * static_cast<double>(block_side),
               phi_fine.lattice.dimension());
  const double eps_u = std::pow(static_cast<double>(phi_fine.lattice.scale_factor()),
                                phi_fine.lattice.dimension()) *
                       prev.epsilon;
  const double mu_u = static_cast<double>(phi_fine.lattice.scale_factor()) *
                      static_cast<double>(phi_fine.lattice.scale_factor()) * prev.mu;
  report.potential_floor =
      -(std::abs(eps_u) + mu_u * mu_u / (4.0 * cur.lambda)) * cells * block_vol;
  report.holds = report.log_lhs <= report.log_rhs;
  return report;
}

nlohmann::json action_factor_json(const ActionFactorReport& r) {
  nlohmann::json cubes = nlohmann::json::array();
  for (const auto& c : r.cubes) {
    cubes.push_back(nlohmann::json{{"case", std::string(1, c.fired_case)},
                                   {"max_field", c.max_field},
                                   {"max_gradient", c.max_gradient},
                                   {"quartic_integral", c.quartic_integral}});
  }
  return nlohmann::json{{"log_lhs", r.log_lhs},   {"log_rhs", r.log_rhs},
                        {"on_support", r.on_support}, {"holds", r.holds},
                        {"c2", r.c2},             {"potential_floor", r.potential_floor},
                        {"cubes", std::move(cubes)}};
}

FinalIntegralsReport final_integrals(const RegionHierarchy& h, const BoundConstants& constants,
                                     const std::vector<double>& neg_log_lambdas, double a,
                                     double c_constant, std::int64_t m_cells,
                                     const CubeRegion* lambda0) {
  const auto& levels = h.levels();
  const std::size_t k = levels.size();
  if (k == 0) throw validation_error("residual integrals: hierarchy has no levels");
  if (neg_log_lambdas.size() != k + 1) {
    throw validation_error("residual integrals: need one coupling log per level 0..K");
  }
  for (double nl : neg_log_lambdas) {
    if (!(nl > 0.0)) throw validation_error("residual integrals: coupling logs must be positive");
  }
  if (!(a > 0.0)) throw validation_error("residual integrals: kernel strength must be positive");
  if (m_cells < 1) throw validation_error("residual integrals: cells per cube must be >= 1");
  const CubeGrid base = levels.front().omega.grid();
  const CubeRegion base_region = lambda0 ? *lambda0 : CubeRegion::full(base);
  if (!(base_region.grid() == base)) {
    throw validation_error("residual integrals: base region must use the base grid");
  }
  const double l = static_cast<double>(h.scale_factor());
  const int d = base.dimension;
  const double cube_cells = std::pow(static_cast<double>(m_cells), d);
  const double mubar0 = std::pow(l, -2.0 * static_cast<double>(k - 1));
  const double log2 = std::log(2.0);

  FinalIntegralsReport report;
  report.levels.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    FinalIntegralLevel& lv = report.levels[j];
    const double nl = neg_log_lambdas[j];
    const double fine_ratio = j >= 1 ? std::pow(l, d) : 1.0;

    const CubeRegion strip = levels[j].omega.subtract(levels[j].lambda);
    lv.cells_w = static_cast<std::int64_t>(strip.size() * cube_cells * fine_ratio);
    lv.log_w = 0.5 * static_cast<double>(lv.cells_w) * log2;

    CubeRegion excluded = j == 0 ? base_region.subtract(levels[0].omega)
                                 : levels[j - 1].omega.subtract(refine_region(
                                       levels[j].omega, h.scale_factor()));
    lv.cells_chi = static_cast<std::int64_t>(excluded.size() * cube_cells);
    lv.log_chi = static_cast<double>(lv.cells_chi) * (log2 + (0.25 + constants.delta) * nl);

    const CubeRegion outside =
        j == 0 ? base_region.complement() : levels[j - 1].omega.complement();
    lv.cells_gaussian = static_cast<std::int64_t>(outside.size() * cube_cells);
    const double strength = j == 0 ? mubar0 : a;
    lv.log_gaussian =
        0.5 * static_cast<double>(lv.cells_gaussian) * std::log(4.0 * kPi / strength);

    report.exact_log_total += lv.log_w + lv.log_chi + lv.log_gaussian;
  }

  report.complement_weight =
      neg_log_lambdas[0] * static_cast<double>(base_region.complement().size()) * cube_cells;
  for (std::size_t j = 0; j < k; ++j) {
    report.complement_weight += neg_log_lambdas[j + 1] *
                                static_cast<double>(levels[j].lambda.complement().size()) *
                                cube_cells;
  }
  report.assembled_bound = c_constant * report.complement_weight;
  report.smallest_c =
      report.complement_weight > 0.0 ? report.exact_log_total / report.complement_weight : 0.0;
  report.dominated = report.exact_log_total <= report.assembled_bound + 1e-9;
  return report;
}

nlohmann::json final_integrals_json(const FinalIntegralsReport& r) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& lv : r.levels) {
    levels.push_back(nlohmann::json{{"log_w", lv.log_w},
                                    {"log_chi", lv.log_chi},
                                    {"log_gaussian", lv.log_gaussian},
                                    {"cells_w", lv.cells_w},
                                    {"cells_chi", lv.cells_chi},
                                    {"cells_gaussian", lv.cells_gaussian}});
  }
  return nlohmann::json{{"levels", std::move(levels)},
                        {"exact_log_total", r.exact_log_total},
                        {"complement_weight", r.complement_weight},
                        {"assembled_bound", r.assembled_bound},
                        {"smallest_c", r.smallest_c},
                        {"dominated", r.dominated}};
}

namespace {

// Immutable data shared by every enumeration branch.
struct KprimeContext {
  CubeRegion theta;
  std::vector<CubeGrid> grids;            // one per level
  std::vector<std::vector<std::int64_t>> admissible;
  std::vector<std::int64_t> layers;       // recursion layers per level
  std::vector<double> level_exponent_nl;  // -log lambda_{t+1} per level t
  std::vector<double> p0sq;               // squared sampling threshold per level t
  double c2 = 0.0;
  double c_constant = 0.0;
  double cube_cells = 0.0;
  std::int64_t scale_factor = 2;
};

struct KprimeTally {
  double sum = 0.0;
  std::int64_t assignments = 0;
  std::int64_t enumerated = 0;
};

std::int64_t project_cube(const CubeGrid& from, const CubeGrid& final_grid, std::int64_t cube) {
  const std::int64_t ratio = from.cubes_per_side / final_grid.cubes_per_side;
  auto c = from.coord(cube);
  for (int axis = 0; axis < from.dimension; ++axis) {
    c[static_cast<std::size_t>(axis)] /= ratio;
  }
  return final_grid.index(c);
}

bool projects_within(const CubeRegion& x, const CubeGrid& final_grid, const CubeRegion& theta) {
  for (std::int64_t cube : x.cubes()) {
    if (!theta.contains(project_cube(x.grid(), final_grid, cube))) return false;
  }
  return true;
}

std::vector<std::int64_t> intersect_sorted(const std::vector<std::int64_t>& candidates,
                                           const CubeRegion& allowed) {
  std::vector<std::int64_t> out;
  for (std::int64_t cube : candidates) {
    if (allowed.contains(cube)) out.push_back(cube);
  }
  return out;
}

CubeRegion subset_region(const CubeGrid& grid, const std::vector<std::int64_t>& candidates,
                         std::uint64_t mask) {
  std::vector<std::int64_t> cubes;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if ((mask >> i) & 1u) cubes.push_back(candidates[i]);
  }
  return CubeRegion(grid, std::move(cubes));
}

void check_candidate_cap(std::size_t count) {
  if (count > 18) throw size_error("enumeration: more than 18 candidate cubes per generator");
}

void kprime_level(const KprimeContext& ctx, std::size_t level, const CubeRegion& prev,
                  double exponent, bool any_generator, KprimeTally& tally,
                  std::atomic<std::int64_t>& budget);

void kprime_triples(const KprimeContext& ctx, std::size_t level, const CubeRegion& prev,
                    const CubeRegion& p_set, double exponent, bool any_generator,
                    KprimeTally& tally, std::atomic<std::int64_t>& budget) {
  const CubeGrid& final_grid = ctx.grids.back();
  const RecursionStep probe =
      region_recursion(prev, GeneratorTriple{p_set, CubeRegion::empty(ctx.grids[level]),
                                             CubeRegion::empty(ctx.grids[level])},
                       ctx.layers[level]);
  if (!projects_within(probe.omega_next.complement(), final_grid, ctx.theta)) return;

  const auto q_cands =
      intersect_sorted(ctx.admissible[level], shrink(probe.omega_next, ctx.layers[level]));
  const auto r_cands = intersect_sorted(ctx.admissible[level], probe.omega_next);
  check_candidate_cap(q_cands.size());
  check_candidate_cap(r_cands.size());

  for (std::uint64_t qm = 0; qm < (std::uint64_t{1} << q_cands.size()); ++qm) {
    const CubeRegion q_set = subset_region(ctx.grids[level], q_cands, qm);
    for (std::uint64_t rm = 0; rm < (std::uint64_t{1} << r_cands.size()); ++rm) {
      if (budget.fetch_sub(1) <= 0) {
        throw size_error("enumeration: generator assignment budget exhausted");
      }
      ++tally.enumerated;
      const CubeRegion r_set = subset_region(ctx.grids[level], r_cands, rm);
      const RecursionStep step = region_recursion(
          prev, GeneratorTriple{p_set, q_set, r_set}, ctx.layers[level]);
      const CubeRegion lam_c = step.lambda_next.complement();
      if (!projects_within(lam_c, final_grid, ctx.theta)) continue;
      const double gen_cubes =
          static_cast<double>(p_set.size() + q_set.size() + r_set.size());
      const double next_exponent =
          exponent +
          ctx.c_constant * ctx.level_exponent_nl[level] *
              static_cast<double>(lam_c.size()) * ctx.cube_cells -
          ctx.c2 * ctx.p0sq[level] * gen_cubes;
      kprime_level(ctx, level + 1, step.lambda_next, next_exponent,
                   any_generator || gen_cubes > 0.0, tally, budget);
    }
  }
}

void kprime_level(const KprimeContext& ctx, std::size_t level, const CubeRegion& prev,
                  double exponent, bool any_generator, KprimeTally& tally,
                  std::atomic<std::int64_t>& budget) {
  if (level == ctx.grids.size()) {
    if (any_generator && prev.complement() == ctx.theta) {
      tally.sum += std::exp(exponent);
      ++tally.assignments;
    }
    return;
  }
  const std::int64_t ratio = level == 0 ? 1 : ctx.scale_factor;
  const CubeRegion bar = ratio == 1 ? prev : coarse_cover(prev, ratio);
  const auto p_cands = intersect_sorted(ctx.admissible[level], bar);
  check_candidate_cap(p_cands.size());
  for (std::uint64_t pm = 0; pm < (std::uint64_t{1} << p_cands.size()); ++pm) {
    kprime_triples(ctx, level, prev, subset_region(ctx.grids[level], p_cands, pm), exponent,
                   any_generator, tally, budget);
  }
}

}  // namespace

KprimeReport kprime_sum(const CubeGrid& base_grid, const CubeRegion& theta,
                        const std::vector<double>& neg_log_lambdas,
                        const BoundConstants& constants, std::int64_t scale_factor,
                        std::int64_t m_cells, double c_constant) {
  if (neg_log_lambdas.size() < 2 || neg_log_lambdas.size() > 4) {
    throw size_error("enumeration: between 1 and 3 levels");
  }
  const std::size_t k = neg_log_lambdas.size() - 1;
  for (double nl : neg_log_lambdas) {
    if (!(nl > 0.0)) throw validation_error("enumeration: coupling logs must be positive");
  }
  if (scale_factor < 2) throw validation_error("enumeration: scale factor must be at least 2");
  if (m_cells < 1) throw validation_error("enumeration: cells per cube must be >= 1");
  if (theta.size() > 8) throw size_error("enumeration: capped at 8 target cubes");

  KprimeContext ctx;
  ctx.theta = theta;
  ctx.c2 = constants.c2;
  ctx.c_constant = c_constant;
  ctx.cube_cells = std::pow(static_cast<double>(m_cells), base_grid.dimension);
  ctx.scale_factor = scale_factor;
  ctx.grids.resize(k);
  ctx.layers.resize(k);
  ctx.level_exponent_nl.resize(k);
  ctx.p0sq.resize(k);
  ctx.admissible.resize(k);
  std::int64_t cps = base_grid.cubes_per_side;
  for (std::size_t t = 0; t < k; ++t) {
    if (t >= 1) {
      if (cps % scale_factor != 0) {
        throw validation_error("enumeration: base grid not divisible across the levels");
      }
      cps /= scale_factor;
    }
    ctx.grids[t] = CubeGrid{base_grid.dimension, cps};
    const double nl = neg_log_lambdas[t + 1];
    ctx.layers[t] = std::max<std::int64_t>(1, constants.r_layers(nl));
    ctx.level_exponent_nl[t] = nl;
    const double p0 = constants.p0_k(nl);
    ctx.p0sq[t] = p0 * p0;
  }
  if (!(theta.grid() == ctx.grids.back())) {
    throw validation_error("enumeration: target region must use the last-level grid");
  }
  for (std::size_t t = 0; t < k; ++t) {
    for (std::int64_t cube = 0; cube < ctx.grids[t].num_cubes(); ++cube) {
      if (theta.contains(project_cube(ctx.grids[t], ctx.grids.back(), cube))) {
        ctx.admissible[t].push_back(cube);
      }
    }
    check_candidate_cap(ctx.admissible[t].size());
  }

  const CubeRegion start = CubeRegion::full(base_grid);
  const auto p_cands = intersect_sorted(ctx.admissible[0], start);
  check_candidate_cap(p_cands.size());
  const std::uint64_t total_first = std::uint64_t{1} << p_cands.size();
  const unsigned workers =
      std::max(1u, std::min(std::thread::hardware_concurrency(),
                            static_cast<unsigned>(std::min<std::uint64_t>(total_first, 16))));
  std::atomic<std::int64_t> budget{std::int64_t{1} << 22};

  std::vector<std::future<KprimeTally>> futures;
  for (unsigned wk = 0; wk < workers; ++wk) {
    futures.push_back(std::async(std::launch::async, [&, wk]() {
      KprimeTally tally;
      for (std::uint64_t pm = wk; pm < total_first; pm += workers) {
        kprime_triples(ctx, 0, start, subset_region(ctx.grids[0], p_cands, pm), 0.0, false,
                       tally, budget);
      }
      return tally;
    }));
  }
  KprimeReport report;
  for (auto& f : futures) {
    const KprimeTally tally = f.get();
    report.exact_sum += tally.sum;
    report.assignments += tally.assignments;
    report.enumerated += tally.enumerated;
  }

  const double nl_final = neg_log_lambdas[k - 1];
  report.bound = std::exp(-static_cast<double>(constants.n0) * nl_final -
                          constants.kappa_prime() * static_cast<double>(theta.size()));
  report.holds = report.exact_sum <= report.bound;
  const double c2_prime = constants.c2 / (3.0 * ctx.cube_cells);
  report.regime_threshold =
      0.5 * c2_prime *
      std::pow(nl_final, 2.0 * constants.p0_exp - 3.0 * constants.r_exp);
  report.regime_ok = constants.kappa_prime() <= report.regime_threshold;
  return report;
}

nlohmann::json kprime_json(const KprimeReport& r) {
  return nlohmann::json{{"exact_sum", r.exact_sum},
                        {"bound", r.bound},
                        {"holds", r.holds},
                        {"regime_ok", r.regime_ok},
                        {"regime_threshold", r.regime_threshold},
                        {"assignments", r.assignments},
                        {"enumerated", r.enumerated}};
}

}  // namespace blockrg
