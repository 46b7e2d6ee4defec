#include "blockrg/minimizer.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>

namespace blockrg {

namespace {

constexpr std::int64_t kDenseSiteCap = 4096;

std::int64_t int_pow(std::int64_t base, int exp) {
  std::int64_t out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

// Region carrying the level-j averaging term under the given support rule.
CubeRegion support_region(const MultiscaleRegions& regions, AverageSupport support, int level) {
  if (support == AverageSupport::annuli_with_top && level == regions.depth()) {
    return regions.levels.back();
  }
  return regions.annulus(level);
}

std::vector<std::uint8_t> domain_mask(const MultiscaleRegions& regions) {
  return region_site_mask(regions.fine, regions.domain());
}

}  // namespace

TorusLattice MultiscaleRegions::level_lattice(int level) const {
  if (level < 0 || level > depth()) {
    throw validation_error("level out of range for level_lattice");
  }
  TorusLattice lat = fine;
  for (int i = 0; i < level; ++i) lat = lat.coarser();
  return lat;
}

CubeRegion MultiscaleRegions::annulus(int level) const {
  if (level < 1 || level > depth()) {
    throw validation_error("level out of range for annulus");
  }
  const CubeRegion& outer = levels[static_cast<std::size_t>(level - 1)];
  if (level == depth()) {
    return outer.subtract(top_hole);
  }
  const CubeRegion& inner = levels[static_cast<std::size_t>(level)];
  return outer.subtract(refine_region(inner, fine.scale_factor()));
}

std::vector<std::int64_t> MultiscaleRegions::domain_sites() const {
  const std::vector<std::uint8_t> mask = region_site_mask(fine, domain());
  std::vector<std::int64_t> sites;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(mask.size()); ++i) {
    if (mask[static_cast<std::size_t>(i)]) sites.push_back(i);
  }
  return sites;
}

MultiscaleRegions build_nested_regions(const TorusLattice& fine,
                                       std::vector<CubeRegion> levels,
                                       CubeRegion top_hole) {
  const int depth = static_cast<int>(levels.size());
  if (depth != fine.fine_exponent()) {
    throw validation_error("number of levels must equal the fine exponent");
  }
  const int L = fine.scale_factor();
  for (int j = 1; j <= depth; ++j) {
    const CubeGrid expected = grid_for_lattice(fine, int_pow(L, j));
    if (!(levels[static_cast<std::size_t>(j - 1)].grid() == expected)) {
      throw validation_error("level region on wrong grid at level " + std::to_string(j));
    }
  }
  const CubeGrid top_grid = grid_for_lattice(fine, int_pow(L, depth));
  if (!(top_hole.grid() == top_grid)) {
    throw validation_error("top hole on wrong grid");
  }
  for (int j = 1; j < depth; ++j) {
    const CubeRegion refined = refine_region(levels[static_cast<std::size_t>(j)], L);
    if (!levels[static_cast<std::size_t>(j - 1)].contains(refined)) {
      throw validation_error("levels are not nested at level " + std::to_string(j + 1));
    }
  }
  if (depth >= 1 && !levels.back().contains(top_hole)) {
    throw validation_error("top hole escapes the deepest level");
  }
  MultiscaleRegions out{fine, std::move(levels), std::move(top_hole)};
  if (out.domain().is_empty()) {
    throw validation_error("working region is empty");
  }
  return out;
}

void MultiscaleCouplings::validate(int depth) const {
  if (!(mubar > 0.0) || !std::isfinite(mubar)) {
    throw validation_error("mubar must be positive and finite");
  }
  if (static_cast<int>(a.size()) != depth) {
    throw validation_error("one averaging strength per level required");
  }
  for (double aj : a) {
    if (!(aj > 0.0) || !std::isfinite(aj)) {
      throw validation_error("averaging strengths must be positive and finite");
    }
  }
}

MultiscaleCouplings uniform_couplings(int depth, double mubar, double a) {
  MultiscaleCouplings c;
  c.mubar = mubar;
  c.a.assign(static_cast<std::size_t>(depth), a);
  c.validate(depth);
  return c;
}

MultiscaleOperator assemble_operator(const MultiscaleRegions& regions,
                                     const MultiscaleCouplings& couplings,
                                     AverageSupport support,
                                     double resolvent_shift) {
  const int depth = regions.depth();
  couplings.validate(depth);
  if (!(resolvent_shift >= 0.0) || !std::isfinite(resolvent_shift)) {
    throw validation_error("resolvent shift must be nonnegative and finite");
  }
  if (resolvent_shift > 0.0 && depth == 0) {
    throw validation_error("resolvent shift requires at least one level");
  }

  MultiscaleOperator op{regions, couplings, support, resolvent_shift, {}, {}, {}};

  const TorusLattice& fine = regions.fine;
  const std::vector<std::uint8_t> mask = domain_mask(regions);
  op.rank_of_site.assign(static_cast<std::size_t>(fine.num_sites()), -1);
  for (std::int64_t i = 0; i < fine.num_sites(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      op.rank_of_site[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(op.sites.size());
      op.sites.push_back(i);
    }
  }
  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());

  const double inv_h2 = 1.0 / (fine.spacing() * fine.spacing());
  std::vector<Eigen::Triplet<double>> trips;
  for (std::int64_t i = 0; i < n; ++i) {
    trips.emplace_back(i, i, couplings.mubar);
  }
  for (const Bond& b : lattice_bonds(fine)) {
    const std::int64_t ra = op.rank_of_site[static_cast<std::size_t>(b.a)];
    const std::int64_t rb = op.rank_of_site[static_cast<std::size_t>(b.b)];
    if (ra >= 0) trips.emplace_back(ra, ra, inv_h2);
    if (rb >= 0) trips.emplace_back(rb, rb, inv_h2);
    if (ra >= 0 && rb >= 0) {
      trips.emplace_back(ra, rb, -inv_h2);
      trips.emplace_back(rb, ra, -inv_h2);
    }
  }

  const int L = fine.scale_factor();
  for (int j = 1; j <= depth; ++j) {
    const CubeRegion supp = support_region(regions, support, j);
    const CubeGrid grid = grid_for_lattice(fine, int_pow(L, j));
    double weight = couplings.a[static_cast<std::size_t>(j - 1)];
    for (int i = 0; i < j * fine.dimension(); ++i) weight /= L;
    for (std::int64_t cube : supp.cubes()) {
      const std::vector<std::int64_t> sites = cube_sites(fine, grid, cube);
      for (std::int64_t x : sites) {
        const std::int64_t rx = op.rank_of_site[static_cast<std::size_t>(x)];
        if (rx < 0) throw validation_error("averaged block leaves the working region");
        for (std::int64_t y : sites) {
          const std::int64_t ry = op.rank_of_site[static_cast<std::size_t>(y)];
          trips.emplace_back(rx, ry, weight);
        }
      }
    }
  }
  if (resolvent_shift > 0.0) {
    const double a_top = couplings.a.back();
    const CubeGrid grid = grid_for_lattice(fine, int_pow(L, depth));
    double weight = a_top * resolvent_shift / (a_top + resolvent_shift);
    for (int i = 0; i < depth * fine.dimension(); ++i) weight /= L;
    for (std::int64_t cube : regions.top_hole.cubes()) {
      const std::vector<std::int64_t> sites = cube_sites(fine, grid, cube);
      for (std::int64_t x : sites) {
        const std::int64_t rx = op.rank_of_site[static_cast<std::size_t>(x)];
        if (rx < 0) throw validation_error("shifted block leaves the working region");
        for (std::int64_t y : sites) {
          const std::int64_t ry = op.rank_of_site[static_cast<std::size_t>(y)];
          trips.emplace_back(rx, ry, weight);
        }
      }
    }
  }

  op.matrix.resize(n, n);
  op.matrix.setFromTriplets(trips.begin(), trips.end());
  op.matrix.makeCompressed();

  const Eigen::SparseMatrix<double> diff =
      Eigen::SparseMatrix<double>(op.matrix.transpose()) - op.matrix;
  double scale = 0.0;
  for (int k = 0; k < op.matrix.outerSize(); ++k) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(op.matrix, k); it; ++it) {
      scale = std::max(scale, std::abs(it.value()));
    }
  }
  double asym = 0.0;
  for (int k = 0; k < diff.outerSize(); ++k) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(diff, k); it; ++it) {
      asym = std::max(asym, std::abs(it.value()));
    }
  }
  if (asym > 1e-12 * std::max(1.0, scale)) {
    throw std::runtime_error("assembled operator is not symmetric");
  }
  return op;
}

double smallest_eigenvalue(const MultiscaleOperator& op) {
  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());
  if (n > kDenseSiteCap) {
    throw size_error("dense eigenvalue check capped at 4096 sites");
  }
  const Eigen::MatrixXd dense = Eigen::MatrixXd(op.matrix);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("eigenvalue computation failed");
  }
  return es.eigenvalues().minCoeff();
}

namespace {

void check_block_data(const MultiscaleRegions& regions,
                      const std::vector<LatticeField>& block_data) {
  if (static_cast<int>(block_data.size()) != regions.depth()) {
    throw validation_error("one block-data field per level required");
  }
  for (int j = 1; j <= regions.depth(); ++j) {
    if (!block_data[static_cast<std::size_t>(j - 1)].lattice.same_geometry(
            regions.level_lattice(j))) {
      throw validation_error("block data on wrong lattice at level " + std::to_string(j));
    }
  }
}

}  // namespace

Vec minimizer_rhs(const MultiscaleOperator& op,
                  const std::vector<LatticeField>& block_data,
                  const LatticeField& exterior) {
  const MultiscaleRegions& regions = op.regions;
  const TorusLattice& fine = regions.fine;
  check_block_data(regions, block_data);
  if (!exterior.lattice.same_geometry(fine)) {
    throw validation_error("exterior field on wrong lattice");
  }

  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());
  Vec rhs = Vec::Zero(n);

  const int L = fine.scale_factor();
  for (int j = 1; j <= regions.depth(); ++j) {
    const CubeRegion supp = support_region(regions, op.support, j);
    const CubeGrid grid = grid_for_lattice(fine, int_pow(L, j));
    const TorusLattice block_lat = block_data[static_cast<std::size_t>(j - 1)].lattice;
    const double aj = op.couplings.a[static_cast<std::size_t>(j - 1)];
    for (std::int64_t cube : supp.cubes()) {
      const double value =
          block_data[static_cast<std::size_t>(j - 1)].values[block_lat.index(grid.coord(cube))];
      for (std::int64_t x : cube_sites(fine, grid, cube)) {
        rhs[op.rank_of_site[static_cast<std::size_t>(x)]] += aj * value;
      }
    }
  }

  const double inv_h2 = 1.0 / (fine.spacing() * fine.spacing());
  for (const Bond& b : lattice_bonds(fine)) {
    const std::int64_t ra = op.rank_of_site[static_cast<std::size_t>(b.a)];
    const std::int64_t rb = op.rank_of_site[static_cast<std::size_t>(b.b)];
    if (ra >= 0 && rb < 0) rhs[ra] += inv_h2 * exterior.values[b.b];
    if (rb >= 0 && ra < 0) rhs[rb] += inv_h2 * exterior.values[b.a];
  }
  return rhs;
}

double minimizer_objective(const MultiscaleRegions& regions,
                           const std::vector<LatticeField>& block_data,
                           const LatticeField& phi,
                           const MultiscaleCouplings& couplings,
                           AverageSupport support) {
  couplings.validate(regions.depth());
  check_block_data(regions, block_data);
  const TorusLattice& fine = regions.fine;
  if (!phi.lattice.same_geometry(fine)) {
    throw validation_error("field on wrong lattice");
  }

  const double cell = std::pow(fine.spacing(), fine.dimension());
  double total = 0.5 * neumann_gradient_norm(phi);
  total += 0.5 * couplings.mubar * cell * phi.values.squaredNorm();

  const int L = fine.scale_factor();
  for (int j = 1; j <= regions.depth(); ++j) {
    const CubeRegion supp = support_region(regions, support, j);
    const CubeGrid grid = grid_for_lattice(fine, int_pow(L, j));
    const TorusLattice block_lat = block_data[static_cast<std::size_t>(j - 1)].lattice;
    const double cell_j = std::pow(block_lat.spacing(), fine.dimension());
    const double aj = couplings.a[static_cast<std::size_t>(j - 1)];
    for (std::int64_t cube : supp.cubes()) {
      const std::vector<std::int64_t> sites = cube_sites(fine, grid, cube);
      double mean = 0.0;
      for (std::int64_t x : sites) mean += phi.values[x];
      mean /= static_cast<double>(sites.size());
      const double data =
          block_data[static_cast<std::size_t>(j - 1)].values[block_lat.index(grid.coord(cube))];
      const double diff = data - mean;
      total += 0.5 * aj * cell_j * diff * diff;
    }
  }
  return total;
}

namespace {

MinimizerResult solve_with_support(const MultiscaleRegions& regions,
                                   const std::vector<LatticeField>& block_data,
                                   const LatticeField& exterior,
                                   const MultiscaleCouplings& couplings,
                                   AverageSupport support) {
  const MultiscaleOperator op = assemble_operator(regions, couplings, support);
  const Vec rhs = minimizer_rhs(op, block_data, exterior);

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
  solver.compute(op.matrix);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("interior solve failed to factorize");
  }
  const Vec x = solver.solve(rhs);
  const double residual = (op.matrix * x - rhs).norm() / (1.0 + rhs.norm());
  if (!(residual <= 1e-10)) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "interior solve residual %.3e exceeds 1e-10", residual);
    throw std::runtime_error(buf);
  }

  MinimizerResult out{LatticeField(regions.fine), LatticeField(regions.level_lattice(regions.depth())),
                      residual};
  out.phi.values = exterior.values;
  for (std::size_t i = 0; i < op.sites.size(); ++i) {
    out.phi.values[op.sites[i]] = x[static_cast<std::int64_t>(i)];
  }

  const CubeGrid top_grid = grid_for_lattice(regions.fine, int_pow(regions.fine.scale_factor(),
                                                                   regions.depth()));
  for (std::int64_t cube : regions.top_hole.cubes()) {
    const std::vector<std::int64_t> sites = cube_sites(regions.fine, top_grid, cube);
    double mean = 0.0;
    for (std::int64_t s : sites) mean += out.phi.values[s];
    mean /= static_cast<double>(sites.size());
    out.psi.values[out.psi.lattice.index(top_grid.coord(cube))] = mean;
  }
  return out;
}

}  // namespace

MinimizerResult solve_minimizer(const MultiscaleRegions& regions,
                                const std::vector<LatticeField>& block_data,
                                const LatticeField& exterior,
                                const MultiscaleCouplings& couplings) {
  return solve_with_support(regions, block_data, exterior, couplings, AverageSupport::annuli);
}

double minimizer_identity_check(const MultiscaleRegions& regions,
                                const std::vector<LatticeField>& block_data,
                                const LatticeField& exterior,
                                const MultiscaleCouplings& couplings) {
  const MinimizerResult first =
      solve_with_support(regions, block_data, exterior, couplings, AverageSupport::annuli);
  if (regions.depth() == 0) return 0.0;

  std::vector<LatticeField> merged = block_data;
  LatticeField& deepest = merged[static_cast<std::size_t>(regions.depth() - 1)];
  const CubeGrid top_grid = regions.top_hole.grid();
  for (std::int64_t cube : regions.top_hole.cubes()) {
    const std::int64_t site = deepest.lattice.index(top_grid.coord(cube));
    deepest.values[site] = first.psi.values[site];
  }

  const MinimizerResult second = solve_with_support(regions, merged, exterior, couplings,
                                                    AverageSupport::annuli_with_top);
  double max_dev = 0.0;
  for (std::int64_t site : regions.domain_sites()) {
    max_dev = std::max(max_dev, std::abs(first.phi.values[site] - second.phi.values[site]));
  }
  return max_dev;
}

DenseGreens greens_exact(const MultiscaleRegions& regions,
                         const MultiscaleCouplings& couplings,
                         double resolvent_shift,
                         AverageSupport support) {
  MultiscaleOperator op = assemble_operator(regions, couplings, support, resolvent_shift);
  const std::int64_t n = static_cast<std::int64_t>(op.sites.size());
  if (n > kDenseSiteCap) {
    throw size_error("dense inverse capped at 4096 sites");
  }
  const Eigen::MatrixXd dense = Eigen::MatrixXd(op.matrix);
  Eigen::LLT<Eigen::MatrixXd> llt(dense);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("operator is not positive definite");
  }
  Eigen::MatrixXd inverse = llt.solve(Eigen::MatrixXd::Identity(n, n));
  inverse = 0.5 * (inverse + inverse.transpose()).eval();
  return DenseGreens{std::move(op), std::move(inverse)};
}

FieldSwapReport field_swap_check(const MultiscaleRegions& regions,
                                 std::int64_t shrink_layers,
                                 const std::vector<LatticeField>& block_data,
                                 const LatticeField& exterior,
                                 const MultiscaleCouplings& couplings,
                                 const CubeRegion& probe,
                                 double threshold) {
  if (regions.depth() < 1) {
    throw validation_error("field swap needs at least one level");
  }
  if (shrink_layers < 0) {
    throw validation_error("shrink layers must be nonnegative");
  }
  if (!(threshold > 0.0)) {
    throw validation_error("threshold must be positive");
  }
  if (!(probe.grid() == regions.top_hole.grid())) {
    throw validation_error("probe must live on the top-level grid");
  }

  const CubeRegion hole_interior = shrink(regions.top_hole, shrink_layers);
  const int L = regions.fine.scale_factor();

  std::vector<CubeRegion> shrunk_levels = regions.levels;
  for (int j = 1; j <= regions.depth(); ++j) {
    const std::int64_t factor = int_pow(L, regions.depth() - j);
    const CubeRegion removed =
        factor == 1 ? hole_interior : refine_region(hole_interior, factor);
    shrunk_levels[static_cast<std::size_t>(j - 1)] =
        shrunk_levels[static_cast<std::size_t>(j - 1)].subtract(removed);
  }
  const MultiscaleRegions shrunk = build_nested_regions(
      regions.fine, std::move(shrunk_levels), regions.top_hole.subtract(hole_interior));

  LatticeField exterior2 = exterior;
  const std::vector<std::uint8_t> removed_mask = region_site_mask(regions.fine, hole_interior);
  for (std::int64_t i = 0; i < regions.fine.num_sites(); ++i) {
    if (removed_mask[static_cast<std::size_t>(i)]) exterior2.values[i] = 0.0;
  }

  const MinimizerResult base = solve_minimizer(regions, block_data, exterior, couplings);
  const MinimizerResult reduced = solve_minimizer(shrunk, block_data, exterior2, couplings);

  const std::vector<std::uint8_t> probe_mask = region_site_mask(regions.fine, probe);
  FieldSwapReport report{0.0, 0.0, threshold, false, shrunk};
  for (std::int64_t site : shrunk.domain_sites()) {
    const double diff = std::abs(base.phi.values[site] - reduced.phi.values[site]);
    report.max_diff_domain = std::max(report.max_diff_domain, diff);
    if (probe_mask[static_cast<std::size_t>(site)]) {
      report.max_diff_probe = std::max(report.max_diff_probe, diff);
    }
  }
  report.within_threshold = report.max_diff_probe <= threshold;
  return report;
}

}  // namespace blockrg
