#include "blockrg/fluctuation.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "blockrg/walk.hpp"

namespace blockrg {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr std::int64_t kDenseCap = 4096;

std::int64_t int_pow(std::int64_t base, int exp) {
  std::int64_t out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

double log_det_spd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s is not positive definite (smallest eigenvalue %.3e)",
                  what, es.eigenvalues().minCoeff());
    throw std::runtime_error(buf);
  }
  double out = 0.0;
  const auto& l = llt.matrixL();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out += 2.0 * std::log(l(i, i));
  return out;
}

void check_and_symmetrize(Eigen::MatrixXd& m, const char* what) {
  const double scale = m.cwiseAbs().maxCoeff();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * (1.0 + scale)) {
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%s deviates from symmetry by %.3e", what, asym);
    throw std::runtime_error(buf);
  }
  m = ((m + m.transpose()) * 0.5).eval();
}

// Mean over each top-hole block of the matrix applied to block indicators.
Eigen::MatrixXd sandwich_matrix(const MultiscaleOperator& op,
                                const Eigen::MatrixXd& dense) {
  const std::vector<std::int64_t>& blocks = op.regions.top_hole.cubes();
  const std::int64_t b = static_cast<std::int64_t>(blocks.size());
  const std::int64_t n = dense.rows();
  const CubeGrid grid = op.regions.top_hole.grid();

  std::vector<std::vector<std::int64_t>> block_ranks(static_cast<std::size_t>(b));
  Eigen::MatrixXd indicators = Eigen::MatrixXd::Zero(n, b);
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t site : cube_sites(op.regions.fine, grid, blocks[static_cast<std::size_t>(i)])) {
      const std::int64_t rank = op.rank_of_site[static_cast<std::size_t>(site)];
      if (rank < 0) throw std::runtime_error("top-hole block outside the working region");
      block_ranks[static_cast<std::size_t>(i)].push_back(rank);
      indicators(rank, i) = 1.0;
    }
  }

  const Eigen::MatrixXd applied = dense * indicators;
  Eigen::MatrixXd out(b, b);
  for (std::int64_t y = 0; y < b; ++y) {
    const auto& ranks = block_ranks[static_cast<std::size_t>(y)];
    for (std::int64_t yp = 0; yp < b; ++yp) {
      double mean = 0.0;
      for (std::int64_t rank : ranks) mean += applied(rank, yp);
      out(y, yp) = mean / static_cast<double>(ranks.size());
    }
  }
  return out;
}

Eigen::MatrixXd sqrt_quadrature_eval(const Eigen::MatrixXd& spd, int nodes) {
  const auto [x, w] = gauss_legendre(nodes);
  const Eigen::Index n = spd.rows();
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, n);
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
  for (int i = 0; i < nodes; ++i) {
    const double theta = 0.25 * kPi * (x[static_cast<std::size_t>(i)] + 1.0);
    const double c2 = std::cos(theta) * std::cos(theta);
    const double s2 = 1.0 - c2;
    Eigen::LLT<Eigen::MatrixXd> llt(c2 * identity + s2 * spd);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("resolvent node is not positive definite");
    }
    sum += 0.5 * w[static_cast<std::size_t>(i)] * llt.solve(spd);
  }
  return sum;
}

Eigen::MatrixXd sqrt_covariance_counted(const Eigen::MatrixXd& spd,
                                        const QuadratureSpec& spec, int* nodes_used) {
  if (spd.rows() == 0 || spd.rows() != spd.cols()) {
    throw validation_error("square root needs a nonempty square matrix");
  }
  if (spec.initial_nodes < 1 || spec.max_nodes < spec.initial_nodes ||
      !(spec.tolerance > 0.0)) {
    throw validation_error("quadrature spec must have positive nodes and tolerance");
  }
  const double asym = (spd - spd.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-10 * (1.0 + spd.cwiseAbs().maxCoeff())) {
    throw validation_error("square root needs a symmetric matrix");
  }
  log_det_spd(spd, "square-root input");

  int nodes = spec.initial_nodes;
  Eigen::MatrixXd previous = sqrt_quadrature_eval(spd, nodes);
  while (true) {
    const int next = 2 * nodes;
    if (next > spec.max_nodes) {
      char buf[140];
      std::snprintf(buf, sizeof(buf),
                    "square-root quadrature did not stabilize within %d nodes", spec.max_nodes);
      throw std::runtime_error(buf);
    }
    Eigen::MatrixXd current = sqrt_quadrature_eval(spd, next);
    const double change = (current - previous).cwiseAbs().maxCoeff();
    if (change <= spec.tolerance) {
      if (nodes_used != nullptr) *nodes_used = next;
      return current;
    }
    previous = std::move(current);
    nodes = next;
  }
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n) {
  if (n < 1) throw validation_error("quadrature rule needs at least one node");
  if (n == 1) return {{0.0}, {2.0}};
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double b = i / std::sqrt(4.0 * i * i - 1.0);
    jacobi(i, i - 1) = b;
    jacobi(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
  std::vector<double> nodes(static_cast<std::size_t>(n));
  std::vector<double> weights(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    nodes[static_cast<std::size_t>(i)] = es.eigenvalues()[i];
    const double v0 = es.eigenvectors()(0, i);
    weights[static_cast<std::size_t>(i)] = 2.0 * v0 * v0;
  }
  return {std::move(nodes), std::move(weights)};
}

Eigen::MatrixXd sqrt_covariance(const Eigen::MatrixXd& spd, const QuadratureSpec& spec) {
  return sqrt_covariance_counted(spd, spec, nullptr);
}

Eigen::MatrixXd block_sandwich(const DenseGreens& greens) {
  return sandwich_matrix(greens.op, greens.inverse);
}

Eigen::MatrixXd covariance_resolvent(const MultiscaleRegions& regions,
                                     const MultiscaleCouplings& couplings, double r) {
  if (regions.depth() < 1) {
    throw validation_error("covariance needs at least one averaging level");
  }
  if (!(r >= 0.0)) throw validation_error("resolvent parameter must be nonnegative");
  const double a = couplings.a.back();
  const DenseGreens greens = greens_exact(regions, couplings, r, AverageSupport::annuli);
  const std::int64_t b = static_cast<std::int64_t>(regions.top_hole.cubes().size());
  const double ratio = a / (a + r);
  return Eigen::MatrixXd::Identity(b, b) / (a + r) +
         ratio * ratio * block_sandwich(greens);
}

CovarianceBundle covariance_build(const MultiscaleRegions& regions,
                                  const MultiscaleCouplings& couplings,
                                  const QuadratureSpec& quad,
                                  const LocalizationSpec& loc) {
  if (regions.depth() < 1) {
    throw validation_error("covariance needs at least one averaging level");
  }
  if (regions.top_hole.cubes().empty()) {
    throw validation_error("covariance needs a nonempty top-level hole");
  }
  if (loc.radius < 0 || loc.n_max < 0 || loc.cube_side < 1) {
    throw validation_error("localization parameters must be nonnegative");
  }
  couplings.validate(regions.depth());
  const double a = couplings.a.back();

  CovarianceBundle bundle{regions, couplings, regions.top_hole.cubes(),
                          {},      {},        {},
                          {},      0.0,       0};

  const DenseGreens annuli_greens =
      greens_exact(regions, couplings, 0.0, AverageSupport::annuli);
  const std::int64_t b = static_cast<std::int64_t>(bundle.blocks.size());
  bundle.covariance =
      Eigen::MatrixXd::Identity(b, b) / a + block_sandwich(annuli_greens);
  check_and_symmetrize(bundle.covariance, "covariance");

  const DenseGreens widened =
      greens_exact(regions, couplings, 0.0, AverageSupport::annuli_with_top);
  bundle.precision = a * Eigen::MatrixXd::Identity(b, b) -
                     a * a * block_sandwich(widened);
  check_and_symmetrize(bundle.precision, "covariance inverse");

  bundle.log_det_covariance = -log_det_spd(bundle.precision, "covariance inverse");
  bundle.sqrt = sqrt_covariance_counted(bundle.covariance, quad, &bundle.sqrt_nodes_used);

  const auto [x, w] = gauss_legendre(bundle.sqrt_nodes_used);
  bundle.sqrt_localized = Eigen::MatrixXd::Zero(b, b);
  for (int i = 0; i < bundle.sqrt_nodes_used; ++i) {
    const double theta = 0.25 * kPi * (x[static_cast<std::size_t>(i)] + 1.0);
    const double c2 = std::cos(theta) * std::cos(theta);
    const double s2 = 1.0 - c2;
    const double r = s2 / c2;
    const MultiscaleOperator op =
        assemble_operator(regions, couplings, AverageSupport::annuli, r);
    const RandomWalkExpansion expansion = build_walk_expansion(op, loc.cube_side);
    const Eigen::MatrixXd greens_loc =
        localized_inverse(expansion, loc.radius, loc.n_max);
    const double ratio = a / (a + r);
    const Eigen::MatrixXd node_value =
        Eigen::MatrixXd::Identity(b, b) / (a + r) +
        ratio * ratio * sandwich_matrix(op, greens_loc);
    bundle.sqrt_localized += (0.5 * w[static_cast<std::size_t>(i)] / c2) * node_value;
  }
  return bundle;
}

SqrtBoundsReport sqrt_bounds_check(const CovarianceBundle& bundle) {
  SqrtBoundsReport report;
  const auto sup_op_norm = [](const Eigen::MatrixXd& m) {
    double best = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      best = std::max(best, m.row(i).cwiseAbs().sum());
    }
    return best;
  };
  report.bound_plain = sup_op_norm(bundle.sqrt);
  report.bound_localized = sup_op_norm(bundle.sqrt_localized);
  report.delta_norm = sup_op_norm(bundle.sqrt - bundle.sqrt_localized);
  report.column_sup.resize(static_cast<std::size_t>(bundle.sqrt.cols()));
  for (Eigen::Index j = 0; j < bundle.sqrt.cols(); ++j) {
    report.column_sup[static_cast<std::size_t>(j)] =
        bundle.sqrt.col(j).cwiseAbs().maxCoeff();
  }
  return report;
}

double z_recursion(double log_z, std::int64_t coarse_sites, std::int64_t fine_sites,
                   double a, double log_det_c) {
  if (coarse_sites < 1 || fine_sites < 1) {
    throw validation_error("site counts must be positive");
  }
  if (!(a > 0.0)) throw validation_error("averaging strength must be positive");
  return log_z - 0.5 * static_cast<double>(fine_sites) * (kLogTwoPi - std::log(a)) +
         0.5 * static_cast<double>(coarse_sites) * kLogTwoPi + 0.5 * log_det_c;
}

double z_recursion(double log_z, const TorusLattice& lattice, double a,
                   double log_det_c) {
  return z_recursion(log_z, lattice.coarser().num_sites(), lattice.num_sites(), a,
                     log_det_c);
}

BarePartitionReport bare_partition_identity(const TorusLattice& fine,
                                            const MultiscaleCouplings& step_strengths) {
  const int depth = fine.fine_exponent();
  if (depth < 0) throw validation_error("lattice must not be coarser than unit blocks");
  step_strengths.validate(depth);
  const int d = fine.dimension();
  const int L = fine.scale_factor();
  const std::int64_t block_factor = int_pow(L, d);

  std::vector<TorusLattice> lats{fine};
  for (int j = 1; j <= depth; ++j) lats.push_back(lats.back().coarser());
  std::vector<std::int64_t> offsets{0};
  for (int j = 0; j <= depth; ++j) {
    offsets.push_back(offsets.back() + lats[static_cast<std::size_t>(j)].num_sites());
  }
  const std::int64_t total = offsets.back();
  if (total > kDenseCap) {
    throw size_error("joint field system exceeds the dense solver cap");
  }

  // Region stack with every level full, so the assembled operator carries no
  // averaging term under annuli support and the full deepest-level term
  // under widened support.
  std::vector<CubeRegion> full_levels;
  for (int j = 1; j <= depth; ++j) {
    full_levels.push_back(CubeRegion::full(grid_for_lattice(fine, int_pow(L, j))));
  }
  const CubeRegion full_top = depth == 0
                                  ? CubeRegion::full(grid_for_lattice(fine, 1))
                                  : full_levels.back();
  const MultiscaleRegions full_regions =
      build_nested_regions(fine, full_levels, full_top);

  const double cell0 = std::pow(fine.spacing(), d);
  const MultiscaleOperator bare_op =
      assemble_operator(full_regions, step_strengths, AverageSupport::annuli);

  Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(total, total);
  joint.topLeftCorner(offsets[1], offsets[1]) =
      cell0 * Eigen::MatrixXd(bare_op.matrix);

  for (int j = 1; j <= depth; ++j) {
    const TorusLattice& child = lats[static_cast<std::size_t>(j - 1)];
    const TorusLattice& parent = lats[static_cast<std::size_t>(j)];
    const CubeGrid grid = grid_for_lattice(child, L);
    const double cell_j = std::pow(parent.spacing(), d);
    const double strength = step_strengths.a[static_cast<std::size_t>(j - 1)] * cell_j;
    const double inv_b = 1.0 / static_cast<double>(block_factor);
    for (std::int64_t y = 0; y < parent.num_sites(); ++y) {
      const std::int64_t row = offsets[static_cast<std::size_t>(j)] + y;
      joint(row, row) += strength;
      const std::vector<std::int64_t> children =
          cube_sites(child, grid, grid.index(parent.coord(y)));
      for (std::int64_t x : children) {
        const std::int64_t col = offsets[static_cast<std::size_t>(j - 1)] + x;
        joint(row, col) -= strength * inv_b;
        joint(col, row) -= strength * inv_b;
        for (std::int64_t xp : children) {
          joint(col, offsets[static_cast<std::size_t>(j - 1)] + xp) +=
              strength * inv_b * inv_b;
        }
      }
    }
  }

  BarePartitionReport report;
  report.log_direct =
      0.5 * static_cast<double>(total) * kLogTwoPi - 0.5 * log_det_spd(joint, "joint form");

  double log_z = 0.0;
  Eigen::MatrixXd running = joint;
  for (int j = 0; j < depth; ++j) {
    const std::int64_t m = lats[static_cast<std::size_t>(j)].num_sites();
    const std::int64_t rest = running.rows() - m;
    const Eigen::MatrixXd head = running.topLeftCorner(m, m);
    log_z += 0.5 * static_cast<double>(m) * kLogTwoPi -
             0.5 * log_det_spd(head, "integrated field block");
    const Eigen::MatrixXd cross = running.topRightCorner(m, rest);
    Eigen::LLT<Eigen::MatrixXd> llt(head);
    running = (running.bottomRightCorner(rest, rest) -
               cross.transpose() * llt.solve(cross))
                  .eval();
  }

  const TorusLattice& top_lat = lats.back();
  const double cell_top = std::pow(top_lat.spacing(), d);
  if (depth == 0) {
    report.delta = joint;
    report.effective_a = 0.0;
    report.schur_gap = 0.0;
    report.log_recursed = 0.5 * static_cast<double>(total) * kLogTwoPi -
                          0.5 * log_det_spd(report.delta, "bare form");
  } else {
    double inv_sum = 0.0;
    for (double aj : step_strengths.a) inv_sum += 1.0 / aj;
    report.effective_a = 1.0 / inv_sum;

    MultiscaleCouplings effective = step_strengths;
    for (double& aj : effective.a) aj = report.effective_a;
    const DenseGreens greens =
        greens_exact(full_regions, effective, 0.0, AverageSupport::annuli_with_top);
    const Eigen::MatrixXd sandwich = block_sandwich(greens);

    const std::vector<std::int64_t>& blocks = full_regions.top_hole.cubes();
    const std::int64_t b = static_cast<std::int64_t>(blocks.size());
    const CubeGrid top_grid = full_regions.top_hole.grid();
    std::vector<std::int64_t> site_of_block(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
      site_of_block[static_cast<std::size_t>(i)] =
          top_lat.index(top_grid.coord(blocks[static_cast<std::size_t>(i)]));
    }
    report.delta.resize(b, b);
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t k = 0; k < b; ++k) {
        report.delta(site_of_block[static_cast<std::size_t>(i)],
                     site_of_block[static_cast<std::size_t>(k)]) =
            report.effective_a * (i == k ? 1.0 : 0.0) -
            report.effective_a * report.effective_a * sandwich(i, k);
      }
    }
    report.schur_gap = (running - cell_top * report.delta).cwiseAbs().maxCoeff();
    report.log_recursed =
        log_z + 0.5 * static_cast<double>(top_lat.num_sites()) * kLogTwoPi -
        0.5 * log_det_spd(cell_top * report.delta, "deepest-scale block operator");
  }
  report.rel_err = std::abs(report.log_direct - report.log_recursed) /
                   (1.0 + std::abs(report.log_direct));
  return report;
}

WMeasureConstants w_measure_constants(std::int64_t num_sites, double p0) {
  if (num_sites < 0) throw validation_error("site count must be nonnegative");
  if (!(p0 > 0.0)) throw validation_error("threshold must be positive");
  const double mass = std::erf(p0 / std::sqrt(2.0));
  WMeasureConstants out;
  out.epsilon0 = -std::log(mass);
  out.log_nw = -static_cast<double>(num_sites) * out.epsilon0;
  return out;
}

double w_integral_halved(const std::vector<std::int64_t>& counts) {
  std::int64_t total = 0;
  for (std::int64_t c : counts) {
    if (c < 0) throw validation_error("region sizes must be nonnegative");
    total += c;
  }
  return 0.5 * static_cast<double>(total) * std::log(2.0);
}

nlohmann::json normalization_ledger_json(const std::vector<double>& log_z,
                                         const std::vector<double>& log_det,
                                         double epsilon0) {
  return nlohmann::json{
      {"log_z", log_z}, {"log_det", log_det}, {"epsilon0", epsilon0}};
}

}  // namespace blockrg
