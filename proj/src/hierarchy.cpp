#include "blockrg/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace blockrg {

namespace {

std::string cube_list(const CubeRegion& r, std::size_t cap = 8) {
  std::string out;
  for (std::size_t i = 0; i < r.cubes().size() && i < cap; ++i) {
    if (!out.empty()) out += ",";
    out += std::to_string(r.cubes()[i]);
  }
  if (r.cubes().size() > cap) out += ",...";
  return out;
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0)) {
    throw validation_error(std::string("constants: ") + name +
                           " must be positive");
  }
}

}  // namespace

void BoundConstants::validate() const {
  require_positive(kappa, "kappa");
  require_positive(kappa0, "kappa0");
  require_positive(beta, "beta");
  require_positive(delta, "delta");
  require_positive(b0, "b0");
  require_positive(c_w, "c_w");
  require_positive(b_w, "b_w");
  require_positive(c_tilde, "c_tilde");
  require_positive(gamma0, "gamma0");
  require_positive(gamma, "gamma");
  require_positive(c0, "c0");
  require_positive(c1, "c1");
  require_positive(c2, "c2");
  for (const auto c : c_seq) {
    if (c < 0.0) throw validation_error("constants: c_seq entries must be >= 0");
  }
  if (n0 < 4) throw validation_error("constants: n0 must be at least 4");
  if (!(kappa - 11.0 * kappa0 - 11.0 >= kappa0)) {
    throw validation_error(
        "constants: kappa - 11*kappa0 - 11 >= kappa0 violated");
  }
  if (!(p0_exp < p_exp)) {
    throw validation_error("constants: p0 < p violated");
  }
  if (!(3.0 * r_exp + 2.0 < 2.0 * p0_exp)) {
    throw validation_error("constants: 3r + 2 < 2*p0 violated");
  }
  if (big_r < 1 || big_r1 != 2 * big_r + 1 || big_r2 != 2 * big_r1 + 1) {
    throw validation_error(
        "constants: radii must satisfy R >= 1, R1 = 2R+1, R2 = 2R1+1");
  }
}

double BoundConstants::p_k(double neg_log_lambda) const {
  return std::pow(neg_log_lambda, p_exp);
}

double BoundConstants::p0_k(double neg_log_lambda) const {
  return std::pow(neg_log_lambda, p0_exp);
}

double BoundConstants::r_k(double neg_log_lambda) const {
  return std::pow(neg_log_lambda, r_exp);
}

std::int64_t BoundConstants::r_layers(double neg_log_lambda) const {
  if (!(neg_log_lambda > 0.0)) {
    throw validation_error("r_layers: -log(lambda) must be positive");
  }
  return static_cast<std::int64_t>(std::floor(r_k(neg_log_lambda)));
}

double BoundConstants::alpha_k(double lambda, double mubar) const {
  return std::max(std::pow(lambda, 0.25), std::sqrt(mubar));
}

double BoundConstants::c2_formula(double c0, double c1, int big_r2, double a_l,
                                  int dimension) {
  const double rpow = std::pow(static_cast<double>(big_r2), dimension);
  return std::min(std::min(0.25, 0.25 * a_l),
                  std::min(c0 * c1 * c1 / rpow, std::pow(c1, 4) / (128.0 * rpow)));
}

nlohmann::json constants_to_json(const BoundConstants& c) {
  return nlohmann::json{
      {"kappa", c.kappa},     {"kappa0", c.kappa0}, {"beta", c.beta},
      {"delta", c.delta},     {"n0", c.n0},         {"b0", c.b0},
      {"c_w", c.c_w},         {"b_w", c.b_w},       {"c_tilde", c.c_tilde},
      {"gamma0", c.gamma0},   {"gamma", c.gamma},   {"c0", c.c0},
      {"c1", c.c1},           {"c2", c.c2},         {"c_seq", c.c_seq},
      {"big_r", c.big_r},     {"big_r1", c.big_r1}, {"big_r2", c.big_r2},
      {"p_exp", c.p_exp},     {"p0_exp", c.p0_exp}, {"r_exp", c.r_exp}};
}

BoundConstants constants_from_json(const nlohmann::json& j) {
  BoundConstants c;
  c.kappa = j.value("kappa", c.kappa);
  c.kappa0 = j.value("kappa0", c.kappa0);
  c.beta = j.value("beta", c.beta);
  c.delta = j.value("delta", c.delta);
  c.n0 = j.value("n0", c.n0);
  c.b0 = j.value("b0", c.b0);
  c.c_w = j.value("c_w", c.c_w);
  c.b_w = j.value("b_w", c.b_w);
  c.c_tilde = j.value("c_tilde", c.c_tilde);
  c.gamma0 = j.value("gamma0", c.gamma0);
  c.gamma = j.value("gamma", c.gamma);
  c.c0 = j.value("c0", c.c0);
  c.c1 = j.value("c1", c.c1);
  c.c2 = j.value("c2", c.c2);
  if (j.contains("c_seq")) c.c_seq = j.at("c_seq").get<std::vector<double>>();
  c.big_r = j.value("big_r", c.big_r);
  c.big_r1 = j.value("big_r1", c.big_r1);
  c.big_r2 = j.value("big_r2", c.big_r2);
  c.p_exp = j.value("p_exp", c.p_exp);
  c.p0_exp = j.value("p0_exp", c.p0_exp);
  c.r_exp = j.value("r_exp", c.r_exp);
  return c;
}

RecursionStep region_recursion(const CubeRegion& lambda_prev,
                               const GeneratorTriple& gen,
                               std::int64_t r_layers) {
  if (r_layers < 0) throw validation_error("region_recursion: negative layers");
  const CubeGrid fine = lambda_prev.grid();
  const CubeGrid coarse = gen.p.grid();
  if (!(gen.q.grid() == coarse) || !(gen.r.grid() == coarse)) {
    throw validation_error("region_recursion: generator grids differ");
  }
  if (coarse.dimension != fine.dimension ||
      fine.cubes_per_side % coarse.cubes_per_side != 0) {
    throw validation_error("region_recursion: grids are not nested");
  }
  const std::int64_t ratio = fine.cubes_per_side / coarse.cubes_per_side;
  const CubeRegion bar =
      ratio == 1 ? lambda_prev : coarse_cover(lambda_prev, ratio);
  if (!bar.contains(gen.p)) {
    throw validation_error("region_recursion: P cubes " +
                           cube_list(gen.p.subtract(bar)) +
                           " leave the coarsened region");
  }
  const CubeRegion omega_c = enlarge(bar.complement(), 5 * r_layers)
                                 .unite(enlarge(gen.p, 5 * r_layers));
  const CubeRegion omega = omega_c.complement();
  if (!shrink(omega, r_layers).contains(gen.q)) {
    throw validation_error(
        "region_recursion: Q cubes " +
        cube_list(gen.q.subtract(shrink(omega, r_layers))) +
        " leave the shrunken next region");
  }
  if (!omega.contains(gen.r)) {
    throw validation_error("region_recursion: R cubes " +
                           cube_list(gen.r.subtract(omega)) +
                           " leave the next region");
  }
  const CubeRegion lambda_c = enlarge(omega_c, 5 * r_layers)
                                  .unite(enlarge(gen.q, 5 * r_layers))
                                  .unite(enlarge(gen.r, 5 * r_layers));
  return RecursionStep{omega, lambda_c.complement()};
}

RegionHierarchy RegionHierarchy::build(
    const CubeGrid& base_grid, const std::vector<GeneratorTriple>& gens,
    const std::vector<std::int64_t>& r_layers, std::int64_t scale_factor) {
  if (gens.size() != r_layers.size()) {
    throw validation_error("hierarchy: one layer count per generator triple");
  }
  if (scale_factor < 2) {
    throw validation_error("hierarchy: scale factor must be at least 2");
  }
  RegionHierarchy h;
  h.scale_factor_ = scale_factor;
  CubeRegion prev = CubeRegion::full(base_grid);
  for (std::size_t j = 0; j < gens.size(); ++j) {
    const std::int64_t want =
        j == 0 ? base_grid.cubes_per_side
               : h.levels_.back().lambda.grid().cubes_per_side / scale_factor;
    if (gens[j].p.grid().cubes_per_side != want ||
        gens[j].p.grid().dimension != base_grid.dimension) {
      throw validation_error("hierarchy: level " + std::to_string(j) +
                             " generators expected on a grid of " +
                             std::to_string(want) + " cubes per side");
    }
    if (j > 0 && prev.grid().cubes_per_side % scale_factor != 0) {
      throw size_error("hierarchy: grid no longer divisible by the factor");
    }
    if (r_layers[j] < 1) {
      throw validation_error("hierarchy: layer counts must be >= 1");
    }
    const RecursionStep step = region_recursion(prev, gens[j], r_layers[j]);
    if (j > 0) {
      const CubeRegion refined = refine_region(step.omega_next, scale_factor);
      if (!prev.contains(refined)) {
        throw validation_error("hierarchy: level " + std::to_string(j) +
                               " is not nested in its predecessor");
      }
    }
    h.levels_.push_back(
        Level{step.omega_next, step.lambda_next, gens[j], r_layers[j]});
    prev = step.lambda_next;
  }
  return h;
}

nlohmann::json hierarchy_to_json(const RegionHierarchy& h) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& lv : h.levels()) {
    levels.push_back(nlohmann::json{{"omega", region_to_json(lv.omega)},
                                    {"lambda", region_to_json(lv.lambda)},
                                    {"p", region_to_json(lv.gen.p)},
                                    {"q", region_to_json(lv.gen.q)},
                                    {"r", region_to_json(lv.gen.r)},
                                    {"r_layers", lv.r_layers}});
  }
  return nlohmann::json{{"scale_factor", h.scale_factor()},
                        {"levels", std::move(levels)}};
}

namespace {

// Aligns a periodic interval outward to multiples of `align`, then pads both
// ends, clamping to a full period. Expects lo in [0, period).
void align_and_pad(std::int64_t& lo, std::int64_t& len, std::int64_t align,
                   std::int64_t pad, std::int64_t period) {
  const std::int64_t hi = lo + len;
  const std::int64_t lo_al = (lo / align) * align;
  const std::int64_t hi_al = ((hi + align - 1) / align) * align;
  const std::int64_t new_len = (hi_al - lo_al) + 2 * pad;
  if (new_len >= period) {
    lo = 0;
    len = period;
    return;
  }
  std::int64_t new_lo = (lo_al - pad) % period;
  if (new_lo < 0) new_lo += period;
  lo = new_lo;
  len = new_len;
}

bool cube_covers_cell(const CoverCube& cube,
                      const std::array<std::int64_t, 3>& cell, int dimension,
                      std::int64_t period) {
  for (int ax = 0; ax < dimension; ++ax) {
    const auto i = static_cast<std::size_t>(ax);
    std::int64_t off = (cell[i] - cube.lo[i]) % period;
    if (off < 0) off += period;
    if (off >= cube.len[i]) return false;
  }
  return true;
}

}  // namespace

CoveringReport covering_bound(const CubeGrid& base_grid,
                              const std::vector<GeneratorTriple>& gens,
                              const BoundConstants& constants,
                              const std::vector<double>& neg_log_lambdas,
                              std::int64_t scale_factor,
                              std::int64_t cells_per_cube_side) {
  if (gens.size() != neg_log_lambdas.size() || gens.empty()) {
    throw validation_error(
        "covering_bound: one coupling per generator triple required");
  }
  const auto m_cells = cells_per_cube_side;
  if (m_cells < 1) throw validation_error("covering_bound: cube side < 1");
  std::vector<std::int64_t> layers;
  layers.reserve(gens.size());
  for (const auto nll : neg_log_lambdas)
    layers.push_back(constants.r_layers(nll));
  const RegionHierarchy hier =
      RegionHierarchy::build(base_grid, gens, layers, scale_factor);
  const int d = base_grid.dimension;
  const std::size_t k = gens.size() - 1;

  CoveringReport report;
  report.collections.resize(gens.size());
  std::int64_t period = base_grid.cubes_per_side * m_cells;
  for (std::size_t j = 0; j <= k; ++j) {
    if (j > 0) {
      const std::int64_t align = scale_factor * m_cells;
      const std::int64_t pad = 10 * layers[j] * align;
      for (std::size_t i = 0; i < j; ++i) {
        for (auto& cube : report.collections[i].cubes) {
          for (int ax = 0; ax < d; ++ax) {
            const auto a = static_cast<std::size_t>(ax);
            align_and_pad(cube.lo[a], cube.len[a], align, pad, period);
            cube.lo[a] /= scale_factor;
            cube.len[a] /= scale_factor;
          }
        }
      }
      period /= scale_factor;
    }
    CoverCollection& coll = report.collections[j];
    coll.level = static_cast<int>(j);
    const auto add_cubes = [&](const CubeRegion& gen_region,
                               std::int64_t pad_layers) {
      for (const auto cube : gen_region.cubes()) {
        const auto c = gen_region.grid().coord(cube);
        CoverCube cc;
        for (int ax = 0; ax < d; ++ax) {
          const auto a = static_cast<std::size_t>(ax);
          cc.lo[a] = c[a] * m_cells - pad_layers * m_cells;
          cc.len[a] = m_cells + 2 * pad_layers * m_cells;
          if (cc.len[a] >= period) {
            cc.lo[a] = 0;
            cc.len[a] = period;
          } else if (cc.lo[a] < 0) {
            cc.lo[a] += period;
          }
        }
        coll.cubes.push_back(cc);
      }
    };
    add_cubes(gens[j].p, 10 * layers[j]);
    add_cubes(gens[j].q, 5 * layers[j]);
    add_cubes(gens[j].r, 5 * layers[j]);
  }

  // Width limits at the final stage.
  report.widths_ok = true;
  for (std::size_t j = 0; j <= k; ++j) {
    CoverCollection& coll = report.collections[j];
    double limit = std::pow(static_cast<double>(scale_factor),
                            -static_cast<double>(k - j)) *
                   (1.0 + 22.0 * static_cast<double>(layers[j]));
    for (std::size_t i = j + 1; i <= k; ++i) {
      limit += 22.0 *
               std::pow(static_cast<double>(scale_factor),
                        -static_cast<double>(k - i)) *
               static_cast<double>(layers[i]);
    }
    coll.width_limit_cells = static_cast<double>(m_cells) * limit;
    for (const auto& cube : coll.cubes) {
      for (int ax = 0; ax < d; ++ax)
        coll.max_width_cells =
            std::max(coll.max_width_cells, cube.len[static_cast<std::size_t>(ax)]);
    }
    if (static_cast<double>(coll.max_width_cells) >
        coll.width_limit_cells + 1e-9) {
      report.widths_ok = false;
    }
    report.cover_count += gens[j].p.size() + gens[j].q.size() + gens[j].r.size();
  }

  // Cell-by-cell coverage of the final complement.
  const CubeRegion final_c = hier.levels().back().lambda.complement();
  std::int64_t span = 1;
  for (int ax = 0; ax < d; ++ax) span *= m_cells;
  report.volume_cells = final_c.size() * span;
  report.covers = true;
  for (const auto cube : final_c.cubes()) {
    const auto c = final_c.grid().coord(cube);
    for (std::int64_t sub = 0; sub < span && report.covers; ++sub) {
      std::array<std::int64_t, 3> cell{0, 0, 0};
      std::int64_t rem = sub;
      for (int ax = d - 1; ax >= 0; --ax) {
        const auto a = static_cast<std::size_t>(ax);
        cell[a] = c[a] * m_cells + rem % m_cells;
        rem /= m_cells;
      }
      bool hit = false;
      for (const auto& coll : report.collections) {
        for (const auto& cc : coll.cubes) {
          if (cube_covers_cell(cc, cell, d, period)) {
            hit = true;
            break;
          }
        }
        if (hit) break;
      }
      if (!hit) report.covers = false;
    }
  }

  report.r_final = constants.r_k(neg_log_lambdas.back());
  if (report.volume_cells == 0) {
    report.smallest_admissible_c = 0.0;
  } else if (report.cover_count == 0) {
    report.smallest_admissible_c = std::numeric_limits<double>::infinity();
  } else {
    report.smallest_admissible_c =
        static_cast<double>(report.volume_cells) /
        (std::pow(static_cast<double>(m_cells) * report.r_final, d) *
         static_cast<double>(report.cover_count));
  }
  return report;
}

TreeJoinReport tree_join_check(const std::vector<CubeRegion>& theta_comps,
                               const std::vector<CubeRegion>& xs,
                               const std::vector<CubeRegion>& ys,
                               const CubeRegion& u) {
  if (theta_comps.empty() && xs.empty() && ys.empty()) {
    throw validation_error("tree_join_check: no pieces given");
  }
  CubeRegion all = CubeRegion::empty(u.grid());
  for (const auto& t : theta_comps) all = all.unite(t);
  CubeRegion theta = all;
  for (const auto& x : xs) all = all.unite(x);
  for (const auto& y : ys) all = all.unite(y);
  if (!(all == u)) {
    throw validation_error("tree_join_check: U differs from the piece union");
  }
  if (components(u).size() != 1) {
    throw validation_error("tree_join_check: U is disconnected");
  }
  TreeJoinReport report;
  for (const auto& t : theta_comps) report.lhs += tree_distance(t) + 1.0;
  for (const auto& x : xs) report.lhs += tree_distance(x) + 1.0;
  for (const auto& y : ys) report.lhs += tree_distance_mod(y, theta) + 1.0;
  report.rhs = tree_distance(u);
  report.holds = report.lhs >= report.rhs - 1e-12;
  return report;
}

}  // namespace blockrg
