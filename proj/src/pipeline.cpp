#include "blockrg/pipeline.hpp"

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include "blockrg/rng.hpp"
#include "blockrg/walk.hpp"

namespace blockrg {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

// Per-axis Gauss-Legendre rule rescaled to [-half_width, half_width].
struct AxisRule {
  std::vector<double> nodes, weights;
};

AxisRule axis_rule(int n, double half_width) {
  auto [x, w] = gauss_legendre(n);
  AxisRule rule;
  rule.nodes.resize(x.size());
  rule.weights.resize(w.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    rule.nodes[i] = half_width * x[i];
    rule.weights[i] = half_width * w[i];
  }
  return rule;
}

std::int64_t tensor_size(int sites, const CallableSpec& spec) {
  std::int64_t total = 1;
  for (int i = 0; i < sites; ++i) {
    total *= spec.nodes_per_axis;
    if (total > spec.max_total_nodes) {
      throw size_error("callable density: tensor quadrature exceeds the node cap");
    }
  }
  return total;
}

// Columns enumerate the tensor-product nodes, odometer order with the last
// axis fastest; the weight vector carries the product weights.
void tensor_grid(int sites, const CallableSpec& spec, Eigen::MatrixXd& nodes,
                 Eigen::VectorXd& weights) {
  const std::int64_t total = tensor_size(sites, spec);
  const AxisRule rule = axis_rule(spec.nodes_per_axis, spec.half_width);
  nodes.resize(sites, total);
  weights.resize(total);
  std::vector<int> idx(static_cast<std::size_t>(sites), 0);
  for (std::int64_t col = 0; col < total; ++col) {
    double w = 1.0;
    for (int s = 0; s < sites; ++s) {
      nodes(s, col) = rule.nodes[static_cast<std::size_t>(idx[static_cast<std::size_t>(s)])];
      w *= rule.weights[static_cast<std::size_t>(idx[static_cast<std::size_t>(s)])];
    }
    weights[col] = w;
    for (int s = sites - 1; s >= 0; --s) {
      auto& v = idx[static_cast<std::size_t>(s)];
      if (++v < spec.nodes_per_axis) break;
      v = 0;
    }
  }
}

CouplingSet stepped_couplings(const CouplingSet& c, int scale_factor, int dimension) {
  CouplingSet out = c;
  const double l = static_cast<double>(scale_factor);
  out.lambda *= l;
  out.mu *= l * l;
  out.mubar *= l * l;
  out.epsilon *= std::pow(l, dimension);
  return out;
}

double field_scale_factor(const TorusLattice& lat) {
  const double l = static_cast<double>(lat.scale_factor());
  return std::pow(l, -0.5 * (lat.dimension() - 2));
}

double log_det_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
}

Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s is not positive definite", what);
    throw std::runtime_error(buf);
  }
  return llt;
}

// Largest absolute value and largest nearest-neighbor difference of the
// field over the masked sites, with plain value differences.
struct FieldExtrema {
  double max_field = 0.0;
  double max_gradient = 0.0;
};

FieldExtrema field_extrema(const LatticeField& phi, const std::vector<std::uint8_t>& mask) {
  FieldExtrema out;
  for (std::int64_t i = 0; i < phi.lattice.num_sites(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      out.max_field = std::max(out.max_field, std::abs(phi.values[i]));
    }
  }
  for (const Bond& b : lattice_bonds(phi.lattice)) {
    if (mask[static_cast<std::size_t>(b.a)] && mask[static_cast<std::size_t>(b.b)]) {
      out.max_gradient = std::max(out.max_gradient, std::abs(phi.values[b.a] - phi.values[b.b]));
    }
  }
  return out;
}

// Block-lattice site holding the value of one grid cube, valid when the grid
// has one cube per block-lattice site.
std::int64_t block_site_of_cube(const TorusLattice& block_lat, const CubeGrid& grid,
                                std::int64_t cube) {
  return block_lat.index(grid.coord(cube));
}

void check_block_grid(const TorusLattice& block_lat, const CubeGrid& grid, const char* what) {
  if (grid.dimension != block_lat.dimension() ||
      grid.cubes_per_side != block_lat.sites_per_side()) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s: grid does not have one cube per block-lattice site",
                  what);
    throw validation_error(buf);
  }
}

}  // namespace

void CallableSpec::validate() const {
  if (max_sites < 1 || max_sites > 8) {
    throw validation_error("callable density: site cap must be between 1 and 8");
  }
  if (nodes_per_axis < 2) throw validation_error("callable density: need at least 2 nodes");
  if (!(half_width > 0.0)) throw validation_error("callable density: box must be positive");
  if (max_total_nodes < nodes_per_axis) {
    throw validation_error("callable density: node cap below one axis");
  }
}

void DensityState::validate() const {
  if (!std::isfinite(log_prefactor)) {
    throw validation_error("density state: log prefactor must be finite");
  }
  switch (mode) {
    case DensityMode::quadratic:
      if (precision.rows() != lattice.num_sites() || precision.cols() != lattice.num_sites()) {
        throw validation_error("density state: precision shape must match the site count");
      }
      break;
    case DensityMode::callable:
      callable_spec.validate();
      if (!density) throw validation_error("density state: callable mode needs a function");
      if (lattice.num_sites() > callable_spec.max_sites) {
        throw size_error("density state: lattice exceeds the callable site cap");
      }
      break;
    case DensityMode::ledger:
      if (!ledger.is_array()) throw validation_error("density state: ledger must be an array");
      break;
  }
}

DensityState quadratic_state(const TorusLattice& lat, const Eigen::MatrixXd& precision,
                             const CouplingSet& couplings, double log_prefactor, int level) {
  DensityState s{DensityMode::quadratic, level, lat,      couplings,
                 log_prefactor,          precision, nullptr, CallableSpec{},
                 nlohmann::json::array()};
  s.validate();
  return s;
}

DensityState callable_state(const TorusLattice& lat, std::function<double(const Vec&)> density,
                            const CouplingSet& couplings, const CallableSpec& spec, int level) {
  DensityState s{DensityMode::callable, level, lat,  couplings, 0.0,
                 Eigen::MatrixXd(),     std::move(density), spec, nlohmann::json::array()};
  s.validate();
  return s;
}

DensityState ledger_state(const TorusLattice& lat, const CouplingSet& couplings, int level) {
  DensityState s{DensityMode::ledger, level,          lat, couplings, 0.0, Eigen::MatrixXd(),
                 nullptr,             CallableSpec{}, nlohmann::json::array()};
  s.validate();
  return s;
}

double density_value(const DensityState& state, const Vec& phi) {
  state.validate();
  if (phi.size() != state.lattice.num_sites()) {
    throw validation_error("density value: argument size must match the site count");
  }
  switch (state.mode) {
    case DensityMode::quadratic:
      return std::exp(state.log_prefactor - 0.5 * phi.dot(state.precision * phi));
    case DensityMode::callable:
      return state.density(phi);
    case DensityMode::ledger:
      break;
  }
  throw validation_error("density value: ledger densities have no pointwise values");
}

double log_partition(const DensityState& state) {
  state.validate();
  const auto n = state.lattice.num_sites();
  switch (state.mode) {
    case DensityMode::quadratic: {
      const auto llt = checked_llt(state.precision, "log partition: precision");
      return state.log_prefactor + 0.5 * n * kLogTwoPi - 0.5 * log_det_llt(llt);
    }
    case DensityMode::callable: {
      Eigen::MatrixXd nodes;
      Eigen::VectorXd weights;
      tensor_grid(static_cast<int>(n), state.callable_spec, nodes, weights);
      double sum = 0.0;
      for (std::int64_t col = 0; col < weights.size(); ++col) {
        sum += weights[col] * state.density(nodes.col(col));
      }
      if (!(sum > 0.0)) {
        throw std::runtime_error("log partition: quadrature total is not positive");
      }
      return std::log(sum);
    }
    case DensityMode::ledger:
      break;
  }
  throw validation_error("log partition: ledger densities have no integral");
}

Eigen::MatrixXd block_mean_matrix(const TorusLattice& fine) {
  const TorusLattice coarse = fine.coarser();
  const int l = fine.scale_factor();
  const double inv = std::pow(static_cast<double>(l), -fine.dimension());
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(coarse.num_sites(), fine.num_sites());
  for (std::int64_t x = 0; x < fine.num_sites(); ++x) {
    auto c = fine.coord(x);
    for (int axis = 0; axis < fine.dimension(); ++axis) {
      c[static_cast<std::size_t>(axis)] /= l;
    }
    q(coarse.index(c), x) = inv;
  }
  return q;
}

namespace {

DensityState quadratic_step(const DensityState& state) {
  const TorusLattice coarse = state.lattice.coarser();
  const auto nf = state.lattice.num_sites();
  const auto nc = coarse.num_sites();
  const int d = state.lattice.dimension();
  const double l = static_cast<double>(state.lattice.scale_factor());
  const double al = state.couplings.a * l;

  const Eigen::MatrixXd q = block_mean_matrix(state.lattice);
  const Eigen::MatrixXd m = state.precision + al * q.transpose() * q;
  const auto llt = checked_llt(m, "coarsening step: augmented precision");
  Eigen::MatrixXd tilde =
      al * Eigen::MatrixXd::Identity(nc, nc) - al * al * q * llt.solve(q.transpose());
  tilde = 0.5 * (tilde + tilde.transpose()).eval();
  const double log_tilde = state.log_prefactor + 0.5 * nf * kLogTwoPi - 0.5 * log_det_llt(llt) -
                           0.5 * nc * (kLogTwoPi - std::log(al));

  const double s = field_scale_factor(state.lattice);
  const Eigen::MatrixXd next_precision = s * s * tilde;
  const double next_prefactor = log_tilde + nc * std::log(s);
  return quadratic_state(coarse, next_precision,
                         stepped_couplings(state.couplings, state.lattice.scale_factor(), d),
                         next_prefactor, state.level + 1);
}

DensityState callable_step(const DensityState& state) {
  const TorusLattice coarse = state.lattice.coarser();
  const auto nf = state.lattice.num_sites();
  const auto nc = coarse.num_sites();
  const double l = static_cast<double>(state.lattice.scale_factor());
  const double al = state.couplings.a * l;
  const double s = field_scale_factor(state.lattice);

  // Cached inner quadrature: node fields, their block means, and the density
  // values. The returned callable only sums Gaussian kernel factors.
  struct StepCache {
    Eigen::MatrixXd block_means;
    Eigen::VectorXd weighted_density;
    double al = 0.0;
    double scale = 0.0;
    double log_front = 0.0;
  };
  auto cache = std::make_shared<StepCache>();
  Eigen::MatrixXd nodes;
  Eigen::VectorXd weights;
  tensor_grid(static_cast<int>(nf), state.callable_spec, nodes, weights);
  const Eigen::MatrixXd q = block_mean_matrix(state.lattice);
  cache->block_means = q * nodes;
  cache->weighted_density.resize(weights.size());
  for (std::int64_t col = 0; col < weights.size(); ++col) {
    cache->weighted_density[col] = weights[col] * state.density(nodes.col(col));
  }
  cache->al = al;
  cache->scale = s;
  cache->log_front = nc * std::log(s) + 0.5 * nc * (std::log(al) - kLogTwoPi);

  auto next = [cache](const Vec& phi) {
    const Eigen::VectorXd scaled = cache->scale * phi;
    const Eigen::ArrayXd sq =
        (cache->block_means.colwise() - scaled).colwise().squaredNorm().transpose();
    const double sum = (cache->weighted_density.array() * (-0.5 * cache->al * sq).exp()).sum();
    return std::exp(cache->log_front) * sum;
  };
  return callable_state(coarse, std::move(next),
                        stepped_couplings(state.couplings, state.lattice.scale_factor(),
                                          state.lattice.dimension()),
                        state.callable_spec, state.level + 1);
}

DensityState ledger_step(const DensityState& state) {
  const TorusLattice coarse = state.lattice.coarser();
  const auto nf = state.lattice.num_sites();
  const auto nc = coarse.num_sites();
  const double al = state.couplings.a * state.lattice.scale_factor();
  const double s = field_scale_factor(state.lattice);
  DensityState out = ledger_state(
      coarse,
      stepped_couplings(state.couplings, state.lattice.scale_factor(), state.lattice.dimension()),
      state.level + 1);
  out.ledger = state.ledger;
  out.ledger.push_back(nlohmann::json{{"level", state.level},
                                      {"fine_sites", nf},
                                      {"coarse_sites", nc},
                                      {"log_kernel_normalization", -0.5 * nc * (kLogTwoPi - std::log(al))},
                                      {"log_measure_factor", nc * std::log(s)}});
  return out;
}

}  // namespace

DensityState rg_block_step(const DensityState& state) {
  state.validate();
  switch (state.mode) {
    case DensityMode::quadratic:
      return quadratic_step(state);
    case DensityMode::callable:
      return callable_step(state);
    case DensityMode::ledger:
      return ledger_step(state);
  }
  throw validation_error("coarsening step: unknown mode");
}

void CharacteristicSpec::validate() const {
  if (!(p > 0.0) || !(p_prev > 0.0) || !(p0 > 0.0) || !(alpha > 0.0) || !(cw > 0.0)) {
    throw validation_error("characteristic spec: thresholds must be positive");
  }
  if (!(scale >= 2.0)) {
    throw validation_error("characteristic spec: block ratio must be at least 2");
  }
}

double CharacteristicSpec::field_limit(CharFamily family) const {
  switch (family) {
    case CharFamily::core:
      return 2.0 * p / alpha;
    case CharFamily::widened:
      return 2.0 * p_prev * std::sqrt(scale) / alpha;
    case CharFamily::widened_plus:
      return 3.0 * p_prev * std::sqrt(scale) / alpha;
    case CharFamily::fluctuation:
      break;
  }
  throw validation_error("characteristic spec: the fluctuation family has no field limit");
}

double CharacteristicSpec::gradient_limit(CharFamily family) const {
  switch (family) {
    case CharFamily::core:
      return 3.0 * p;
    case CharFamily::widened:
      return 3.0 * p_prev * scale * std::sqrt(scale);
    case CharFamily::widened_plus:
      return 4.0 * p_prev * scale * std::sqrt(scale);
    case CharFamily::fluctuation:
      break;
  }
  throw validation_error("characteristic spec: the fluctuation family has no gradient limit");
}

double CharacteristicSpec::w_limit(CharFamily family) const {
  switch (family) {
    case CharFamily::fluctuation:
      return p0;
    case CharFamily::widened_plus:
      return cw * p_prev * std::sqrt(scale);
    default:
      break;
  }
  throw validation_error("characteristic spec: this family has no fluctuation limit");
}

double char_indicator(const CharacteristicSpec& spec, CharFamily family,
                      const LatticeField& phi, const CubeRegion& region) {
  spec.validate();
  const double flim = spec.field_limit(family);
  const double glim = spec.gradient_limit(family);
  const auto mask = region_site_mask(phi.lattice, region);
  const FieldExtrema ex = field_extrema(phi, mask);
  return (ex.max_field <= flim && ex.max_gradient <= glim) ? 1.0 : 0.0;
}

double zeta_indicator(const CharacteristicSpec& spec, CharFamily family,
                      const LatticeField& phi, const CubeRegion& region) {
  return 1.0 - char_indicator(spec, family, phi, region);
}

double w_indicator(const CharacteristicSpec& spec, CharFamily family, const LatticeField& w,
                   const CubeRegion& region) {
  spec.validate();
  const double wlim = spec.w_limit(family);
  const auto mask = region_site_mask(w.lattice, region);
  for (std::int64_t i = 0; i < w.lattice.num_sites(); ++i) {
    if (mask[static_cast<std::size_t>(i)] && std::abs(w.values[i]) > wlim) return 0.0;
  }
  return 1.0;
}

double w_zeta_indicator(const CharacteristicSpec& spec, CharFamily family, const LatticeField& w,
                        const CubeRegion& region) {
  return 1.0 - w_indicator(spec, family, w, region);
}

CubeRegion last_step_hole(const CubeRegion& lambda, std::int64_t r_layers) {
  if (r_layers < 0) throw validation_error("deep region: negative layer count");
  const CubeRegion hole = shrink(lambda, 5 * r_layers);
  if (hole.is_empty()) {
    throw validation_error("deep region: empty after shrinking by five rings per layer");
  }
  return hole;
}

namespace {

struct WidenedSolve {
  LatticeField phi;
  double objective = 0.0;
  double residual = 0.0;
};

WidenedSolve solve_widened(const MultiscaleRegions& regions,
                           const std::vector<LatticeField>& block_data,
                           const LatticeField& exterior, const MultiscaleCouplings& couplings) {
  const MultiscaleOperator op =
      assemble_operator(regions, couplings, AverageSupport::annuli_with_top);
  const Vec rhs = minimizer_rhs(op, block_data, exterior);
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(op.matrix);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("deep translation: widened operator failed to factor");
  }
  const Vec x = solver.solve(rhs);
  WidenedSolve out{exterior, 0.0, 0.0};
  const double scale = std::max(rhs.norm(), 1.0);
  out.residual = (op.matrix * x - rhs).norm() / scale;
  for (std::size_t r = 0; r < op.sites.size(); ++r) {
    out.phi.values[op.sites[r]] = x[static_cast<Eigen::Index>(r)];
  }
  out.objective = minimizer_objective(regions, block_data, out.phi, couplings,
                                      AverageSupport::annuli_with_top);
  return out;
}

}  // namespace

LastStepReport last_step_translate(const MultiscaleRegions& regions,
                                   const std::vector<LatticeField>& block_data,
                                   const LatticeField& exterior,
                                   const MultiscaleCouplings& couplings, const LatticeField& z,
                                   const LastStepOptions& options) {
  const int depth = regions.depth();
  if (depth < 1) throw validation_error("deep translation: needs at least one level");
  const TorusLattice block_lat = regions.level_lattice(depth);
  if (!z.lattice.same_geometry(block_lat)) {
    throw validation_error("deep translation: z must live on the deepest block lattice");
  }
  const CubeGrid top_grid = regions.top_hole.grid();
  check_block_grid(block_lat, top_grid, "deep translation");
  std::vector<std::uint8_t> hole_block(static_cast<std::size_t>(block_lat.num_sites()), 0);
  for (std::int64_t cube : regions.top_hole.cubes()) {
    hole_block[static_cast<std::size_t>(block_site_of_cube(block_lat, top_grid, cube))] = 1;
  }
  for (std::int64_t i = 0; i < block_lat.num_sites(); ++i) {
    if (!hole_block[static_cast<std::size_t>(i)] && z.values[i] != 0.0) {
      throw validation_error("deep translation: z must vanish off the deep blocks");
    }
  }

  LastStepReport report;
  const MinimizerResult base = solve_minimizer(regions, block_data, exterior, couplings);
  const double base_objective =
      minimizer_objective(regions, block_data, base.phi, couplings, AverageSupport::annuli);

  const TorusLattice& fine = regions.fine;
  const auto hole_mask = region_site_mask(fine, regions.top_hole);
  const double cell = std::pow(fine.spacing(), fine.dimension());
  double hole_mass = 0.0;
  for (std::int64_t i = 0; i < fine.num_sites(); ++i) {
    if (hole_mask[static_cast<std::size_t>(i)]) {
      hole_mass += base.phi.values[i] * base.phi.values[i];
    }
  }
  report.hole_term = 0.5 * neumann_gradient_norm(base.phi, hole_mask) +
                     0.5 * couplings.mubar * cell * hole_mass;
  report.exterior_term = base_objective - report.hole_term;

  const DenseGreens greens =
      greens_exact(regions, couplings, 0.0, AverageSupport::annuli_with_top);
  const Eigen::MatrixXd sandwich = block_sandwich(greens);
  const double a_top = couplings.a.back();
  const double cell_top =
      std::pow(fine.spacing() * std::pow(fine.scale_factor(), depth), fine.dimension());
  const Eigen::MatrixXd hessian =
      cell_top * (a_top * Eigen::MatrixXd::Identity(sandwich.rows(), sandwich.cols()) -
                  a_top * a_top * sandwich);

  const auto& cubes = regions.top_hole.cubes();
  const auto nb = static_cast<Eigen::Index>(cubes.size());
  Eigen::VectorXd z_vec(nb), psi_star(nb);
  for (Eigen::Index i = 0; i < nb; ++i) {
    const std::int64_t sb =
        block_site_of_cube(block_lat, top_grid, cubes[static_cast<std::size_t>(i)]);
    z_vec[i] = z.values[sb];
    psi_star[i] = base.psi.values[sb];
  }
  report.quadratic_term = 0.5 * z_vec.dot(hessian * z_vec);
  report.z_sup = z_vec.size() > 0 ? z_vec.cwiseAbs().maxCoeff() : 0.0;

  Eigen::VectorXd psi_arg = psi_star;
  if (options.localized) {
    const MultiscaleOperator op_a =
        assemble_operator(regions, couplings, AverageSupport::annuli);
    const RandomWalkExpansion expansion = build_walk_expansion(op_a, options.cube_side);
    const Vec rhs = minimizer_rhs(op_a, block_data, exterior);
    const LocalizedFieldResult loc =
        localized_field(expansion, rhs, 0, options.radius, options.n_max);
    LatticeField phi_loc = exterior;
    for (std::size_t r = 0; r < op_a.sites.size(); ++r) {
      phi_loc.values[op_a.sites[r]] = loc.phi_loc[static_cast<Eigen::Index>(r)];
    }
    for (Eigen::Index i = 0; i < nb; ++i) {
      const auto sites = cube_sites(fine, top_grid, cubes[static_cast<std::size_t>(i)]);
      double mean = 0.0;
      for (std::int64_t site : sites) mean += phi_loc.values[site];
      psi_arg[i] = mean / static_cast<double>(sites.size());
    }
  }
  const Eigen::VectorXd shift = psi_arg - psi_star;
  report.shift_sup = shift.size() > 0 ? shift.cwiseAbs().maxCoeff() : 0.0;

  const int deep = depth - 1;
  std::vector<LatticeField> with_z = block_data;
  std::vector<LatticeField> without_z = block_data;
  for (Eigen::Index i = 0; i < nb; ++i) {
    const std::int64_t sb =
        block_site_of_cube(block_lat, top_grid, cubes[static_cast<std::size_t>(i)]);
    with_z[static_cast<std::size_t>(deep)].values[sb] = psi_arg[i] + z_vec[i];
    without_z[static_cast<std::size_t>(deep)].values[sb] = psi_arg[i];
  }
  const WidenedSolve at_z = solve_widened(regions, with_z, exterior, couplings);
  const WidenedSolve at_zero = solve_widened(regions, without_z, exterior, couplings);

  report.total = at_z.objective;
  report.cross_term = at_z.objective - at_zero.objective - report.quadratic_term;
  report.remainder = report.total - base_objective - report.quadratic_term;
  const double op_norm = hessian.size() > 0 ? hessian.operatorNorm() : 0.0;
  report.remainder_bound =
      op_norm * (shift.norm() * z_vec.norm() + 0.5 * shift.norm() * shift.norm());
  report.residual = std::max({base.residual, at_z.residual, at_zero.residual});
  return report;
}

nlohmann::json last_step_report_json(const LastStepReport& r) {
  return nlohmann::json{{"total", r.total},
                        {"exterior_term", r.exterior_term},
                        {"hole_term", r.hole_term},
                        {"quadratic_term", r.quadratic_term},
                        {"cross_term", r.cross_term},
                        {"remainder", r.remainder},
                        {"remainder_bound", r.remainder_bound},
                        {"z_sup", r.z_sup},
                        {"shift_sup", r.shift_sup},
                        {"residual", r.residual}};
}

SubstitutionReport fluctuation_substitution(const Eigen::MatrixXd& precision,
                                            const Eigen::MatrixXd& transform) {
  if (transform.rows() != transform.cols() || transform.rows() == 0) {
    throw validation_error("fluctuation substitution: transform must be square and nonempty");
  }
  if (precision.rows() != transform.rows() || precision.cols() != transform.cols()) {
    throw validation_error("fluctuation substitution: shapes must match");
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(transform);
  const Eigen::VectorXd& sv = svd.singularValues();
  SubstitutionReport report;
  report.dimension = transform.rows();
  report.min_singular = sv[sv.size() - 1];
  if (!(report.min_singular > 1e-12 * sv[0])) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "fluctuation substitution: transform is singular (smallest singular value %.3e)",
                  report.min_singular);
    throw validation_error(buf);
  }
  report.log_jacobian = sv.array().log().sum();
  const Eigen::MatrixXd whitened = transform.transpose() * precision * transform;
  report.whitening_gap =
      (whitened - Eigen::MatrixXd::Identity(whitened.rows(), whitened.cols()))
          .cwiseAbs()
          .maxCoeff();
  return report;
}

SubstitutionReport fluctuation_substitution(const CovarianceBundle& bundle, bool localized) {
  return fluctuation_substitution(bundle.precision,
                                  localized ? bundle.sqrt_localized : bundle.sqrt);
}

nlohmann::json substitution_report_json(const SubstitutionReport& r) {
  return nlohmann::json{{"log_jacobian", r.log_jacobian},
                        {"whitening_gap", r.whitening_gap},
                        {"min_singular", r.min_singular},
                        {"dimension", r.dimension}};
}

CharInsertResult char_insert(const TorusLattice& block_lat, const CubeRegion& omega,
                             const LatticeField& w, double p0, std::int64_t r_layers) {
  if (!(p0 > 0.0)) throw validation_error("partition insertion: threshold must be positive");
  if (r_layers < 0) throw validation_error("partition insertion: negative layer count");
  if (!w.lattice.same_geometry(block_lat)) {
    throw validation_error("partition insertion: w must live on the block lattice");
  }
  const auto& cubes = omega.cubes();
  const std::size_t n = cubes.size();
  if (n > 16) throw size_error("partition insertion: capped at 16 cubes");

  std::vector<std::uint8_t> exceeds(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::int64_t site : cube_sites(block_lat, omega.grid(), cubes[i])) {
      if (std::abs(w.values[site]) > p0) {
        exceeds[i] = 1;
        break;
      }
    }
  }

  const CubeRegion shrunk = shrink(omega, 5 * r_layers);
  CharInsertResult result;
  result.terms.reserve(std::size_t{1} << n);
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    double weight = 1.0;
    std::vector<std::int64_t> picked;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_r = (mask >> i) & 1u;
      if (in_r) picked.push_back(cubes[i]);
      if (in_r != static_cast<bool>(exceeds[i])) weight = 0.0;
    }
    const CubeRegion large(omega.grid(), std::move(picked));
    CharInsertTerm term{large, shrunk.subtract(enlarge(large, 5 * r_layers)), weight};
    result.weight_sum += weight;
    if (weight > 0.0) ++result.surviving_terms;
    result.terms.push_back(std::move(term));
  }
  return result;
}

SupportCheckReport support_check(const MultiscaleRegions& regions,
                                 const MultiscaleCouplings& couplings,
                                 const std::vector<LatticeField>& block_data,
                                 const LatticeField& exterior, const CubeRegion& lambda_next,
                                 const CubeRegion& check_region, const CharacteristicSpec& spec,
                                 int num_samples, std::uint64_t seed,
                                 const QuadratureSpec& quad, const LocalizationSpec& loc) {
  spec.validate();
  if (num_samples < 1) throw validation_error("support check: need at least one sample");
  if (!(lambda_next.grid() == regions.top_hole.grid()) ||
      !(check_region.grid() == regions.top_hole.grid())) {
    throw validation_error("support check: regions must use the deep grid");
  }
  if (!regions.top_hole.contains(lambda_next) || !regions.top_hole.contains(check_region)) {
    throw validation_error("support check: regions must lie inside the deep region");
  }

  const CovarianceBundle bundle = covariance_build(regions, couplings, quad, loc);
  const Eigen::MatrixXd& t = bundle.sqrt_localized;
  const TorusLattice block_lat = regions.level_lattice(regions.depth());
  const CubeGrid grid = regions.top_hole.grid();
  const auto nb = static_cast<Eigen::Index>(bundle.blocks.size());

  std::vector<std::int64_t> block_site(static_cast<std::size_t>(nb));
  std::unordered_map<std::int64_t, Eigen::Index> position;
  for (Eigen::Index i = 0; i < nb; ++i) {
    block_site[static_cast<std::size_t>(i)] =
        block_site_of_cube(block_lat, grid, bundle.blocks[static_cast<std::size_t>(i)]);
    position[bundle.blocks[static_cast<std::size_t>(i)]] = i;
  }

  const LatticeField psi = solve_minimizer(regions, block_data, exterior, couplings).psi;
  const auto check_mask = region_site_mask(block_lat, check_region);
  const double flim = spec.field_limit(CharFamily::core);
  const double glim = spec.gradient_limit(CharFamily::core);

  Eigen::Index max_row = 0;
  double max_row_sum = 0.0;
  for (Eigen::Index i = 0; i < nb; ++i) {
    const double s = t.row(i).cwiseAbs().sum();
    if (s > max_row_sum) {
      max_row_sum = s;
      max_row = i;
    }
  }

  SupportCheckReport report;
  report.margin_factor = max_row_sum * spec.p0 / spec.p;
  report.samples_checked = num_samples;
  Rng rng(seed);

  auto composite = [&](const Eigen::VectorXd& w) {
    LatticeField phi = psi;
    const Eigen::VectorXd tw = t * w;
    for (Eigen::Index i = 0; i < nb; ++i) {
      phi.values[block_site[static_cast<std::size_t>(i)]] += tw[i];
    }
    return phi;
  };

  for (int sample = 0; sample < num_samples; ++sample) {
    Eigen::VectorXd w(nb);
    if (sample == 0) {
      for (Eigen::Index j = 0; j < nb; ++j) {
        w[j] = t(max_row, j) >= 0.0 ? spec.p0 : -spec.p0;
      }
    } else {
      for (Eigen::Index j = 0; j < nb; ++j) w[j] = rng.uniform(-spec.p0, spec.p0);
    }
    const LatticeField phi = composite(w);
    const FieldExtrema ex = field_extrema(phi, check_mask);
    report.max_field_ratio = std::max(report.max_field_ratio, ex.max_field / flim);
    report.max_gradient_ratio = std::max(report.max_gradient_ratio, ex.max_gradient / glim);
    const bool inside = ex.max_field <= flim && ex.max_gradient <= glim;
    report.all_inside = report.all_inside && inside;

    Eigen::VectorXd resampled = w;
    for (std::int64_t cube : lambda_next.cubes()) {
      resampled[position.at(cube)] = rng.uniform(-spec.p0, spec.p0);
    }
    const FieldExtrema ex2 = field_extrema(composite(resampled), check_mask);
    const bool inside2 = ex2.max_field <= flim && ex2.max_gradient <= glim;
    report.interior_independent = report.interior_independent && (inside == inside2);
  }
  return report;
}

nlohmann::json support_check_json(const SupportCheckReport& r) {
  return nlohmann::json{{"all_inside", r.all_inside},
                        {"interior_independent", r.interior_independent},
                        {"max_field_ratio", r.max_field_ratio},
                        {"max_gradient_ratio", r.max_gradient_ratio},
                        {"margin_factor", r.margin_factor},
                        {"samples_checked", r.samples_checked}};
}

}  // namespace blockrg
