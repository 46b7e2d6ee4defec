#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <cstdint>
#include <vector>

#include "blockrg/lattice.hpp"
#include "blockrg/region.hpp"

namespace blockrg {

// Nested regions on one fine torus, one region per averaging level. Level j
// (1-based) collects blocks of side L^j fine sites; levels[j-1] stores the
// level-j region on the matching cube grid. The nesting is sitewise:
// levels[0] contains levels[1] contains ... contains top_hole. The top hole
// is the deepest region, given on the last level's grid, and carries no
// averaging term of its own. With fine_exponent 0 there are no levels and
// top_hole (on the site grid) is the whole working region.
struct MultiscaleRegions {
  TorusLattice fine;
  std::vector<CubeRegion> levels;
  CubeRegion top_hole;

  int depth() const { return static_cast<int>(levels.size()); }
  // Region the operators act on, as a site mask source: levels[0], or the
  // top hole when there are no levels.
  const CubeRegion& domain() const { return levels.empty() ? top_hole : levels.front(); }
  // Block-center lattice of level j; level 0 is the fine lattice itself.
  TorusLattice level_lattice(int level) const;
  // Level-j region minus the next deeper region, on the level-j grid.
  CubeRegion annulus(int level) const;
  // Sorted fine-lattice indices of the working region.
  std::vector<std::int64_t> domain_sites() const;
};

// Validates grids, nesting, and the depth / fine_exponent match.
MultiscaleRegions build_nested_regions(const TorusLattice& fine,
                                       std::vector<CubeRegion> levels,
                                       CubeRegion top_hole);

// Mass and per-level averaging strengths for the quadratic forms below.
struct MultiscaleCouplings {
  double mubar = 1.0;
  std::vector<double> a;

  void validate(int depth) const;
};

MultiscaleCouplings uniform_couplings(int depth, double mubar, double a);

// Which blocks carry averaging terms. `annuli` puts the level-j term on
// annulus(j) for every level. `annuli_with_top` widens the deepest level's
// support to the whole deepest region, so the top hole is averaged as well.
enum class AverageSupport { annuli, annuli_with_top };

// Quadratic-form matrix of
//   (scaled graph Laplacian) + mubar + per-level block-average penalties
//   (+ optional resolvent penalty on the top hole)
// restricted to the working region. Row i corresponds to sites[i]; entries
// follow the convention in which the site-value vector is acted on directly
// and inner products carry the cell volume separately.
struct MultiscaleOperator {
  MultiscaleRegions regions;
  MultiscaleCouplings couplings;
  AverageSupport support = AverageSupport::annuli;
  double resolvent_shift = 0.0;
  std::vector<std::int64_t> sites;
  std::vector<std::int64_t> rank_of_site;
  Eigen::SparseMatrix<double> matrix;
};

// Assembles the operator. The resolvent shift r adds
// a_top * r / (a_top + r) times the deepest-level block mean projector over
// top-hole blocks; it requires at least one level.
MultiscaleOperator assemble_operator(const MultiscaleRegions& regions,
                                     const MultiscaleCouplings& couplings,
                                     AverageSupport support,
                                     double resolvent_shift = 0.0);

// Dense smallest eigenvalue of the assembled matrix; capped at 4096 sites.
double smallest_eigenvalue(const MultiscaleOperator& op);

// Right-hand side of the interior stationarity equations for given per-level
// block data and exterior site values. block_data[j-1] lives on the level-j
// block lattice and is read on the blocks carrying a level-j term; exterior
// is read on fine sites outside the working region.
Vec minimizer_rhs(const MultiscaleOperator& op,
                  const std::vector<LatticeField>& block_data,
                  const LatticeField& exterior);

// Total quadratic energy of a fine field with fixed block data: half the
// weighted gradient and mass sums over the whole torus plus the per-level
// average penalties (a_j / 2) * cell_j * sum over supported blocks of
// (data - block mean)^2.
double minimizer_objective(const MultiscaleRegions& regions,
                           const std::vector<LatticeField>& block_data,
                           const LatticeField& phi,
                           const MultiscaleCouplings& couplings,
                           AverageSupport support);

struct MinimizerResult {
  // Fine field equal to the interior solution on the working region and to
  // the exterior data elsewhere.
  LatticeField phi;
  // Deepest-level block means of phi on the top-hole blocks, zero elsewhere.
  LatticeField psi;
  // Relative residual of the interior linear system.
  double residual = 0.0;
};

// Minimizes the objective with annuli support over the interior sites,
// holding exterior values fixed. Throws when the solve residual exceeds
// 1e-10 relative.
MinimizerResult solve_minimizer(const MultiscaleRegions& regions,
                                const std::vector<LatticeField>& block_data,
                                const LatticeField& exterior,
                                const MultiscaleCouplings& couplings);

// Solves once with annuli support, feeds the resulting top-hole block means
// back as deepest-level data with widened support, solves again, and returns
// the maximum site deviation between the two interior solutions.
double minimizer_identity_check(const MultiscaleRegions& regions,
                                const std::vector<LatticeField>& block_data,
                                const LatticeField& exterior,
                                const MultiscaleCouplings& couplings);

struct DenseGreens {
  MultiscaleOperator op;
  Eigen::MatrixXd inverse;
};

// Dense inverse of the assembled operator; capped at 4096 sites.
DenseGreens greens_exact(const MultiscaleRegions& regions,
                         const MultiscaleCouplings& couplings,
                         double resolvent_shift,
                         AverageSupport support = AverageSupport::annuli);

struct FieldSwapReport {
  double max_diff_probe = 0.0;
  double max_diff_domain = 0.0;
  double threshold = 0.0;
  bool within_threshold = false;
  MultiscaleRegions shrunk;
};

// Removes the interior of the top hole (shrunk by `shrink_layers` rings of
// top-level blocks) from every level, solves the minimizer on the original
// and on the reduced region with zero substitute values on the removed
// sites, and compares the two solutions. The probe region is given on the
// top-level grid; the maximum deviation over probe sites is tested against
// the threshold, and the maximum over the whole reduced region is reported
// alongside.
FieldSwapReport field_swap_check(const MultiscaleRegions& regions,
                                 std::int64_t shrink_layers,
                                 const std::vector<LatticeField>& block_data,
                                 const LatticeField& exterior,
                                 const MultiscaleCouplings& couplings,
                                 const CubeRegion& probe,
                                 double threshold);

}  // namespace blockrg
