#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrg/region.hpp"

namespace blockrg {

// Global constants entering the bound checks. The exponents p, p0, r act on
// -log(lambda): p_k(nl) = nl^p and so on. All checks in the library read
// these from one shared instance so a single configuration drives a run.
struct BoundConstants {
  double kappa = 25.0;
  double kappa0 = 1.0;
  double beta = 0.25;
  double delta = 0.05;
  int n0 = 4;
  double b0 = 1.0;
  double c_w = 2.0;
  double b_w = 1.0;
  double c_tilde = 1.0;
  double gamma0 = 1.0;
  double gamma = 0.5;
  double c0 = 0.05;
  double c1 = 1.0;
  double c2 = 0.01;
  std::vector<double> c_seq = {1.0, 1.0, 1.0, 1.0};
  int big_r = 1;
  int big_r1 = 3;
  int big_r2 = 7;
  double p_exp = 2.0;
  double p0_exp = 1.5;
  double r_exp = 0.25;

  void validate() const;

  double kappa_prime() const { return kappa - 7.0 * kappa0 - 7.0; }
  double p_k(double neg_log_lambda) const;
  double p0_k(double neg_log_lambda) const;
  double r_k(double neg_log_lambda) const;
  std::int64_t r_layers(double neg_log_lambda) const;
  double alpha_k(double lambda, double mubar) const;

  // Smallest of the four admissible choices for c2 given the kinetic
  // coefficient aL and the dimension.
  static double c2_formula(double c0, double c1, int big_r2, double a_l,
                           int dimension);
};

nlohmann::json constants_to_json(const BoundConstants& c);
BoundConstants constants_from_json(const nlohmann::json& j);

// One step of the region recursion consumes a triple of generator regions on
// the coarse grid and the small-field region of the previous level on the
// fine grid (the ratio of the two grids is the block factor; ratio 1 is
// allowed and is used for the base level and the final level).
struct GeneratorTriple {
  CubeRegion p, q, r;
};

struct RecursionStep {
  CubeRegion omega_next, lambda_next;
};

RecursionStep region_recursion(const CubeRegion& lambda_prev,
                               const GeneratorTriple& gen,
                               std::int64_t r_layers);

// Decreasing family of regions obtained by iterating the recursion from the
// full torus. Level j lives on a grid with base/scale_factor^j cubes per
// side.
class RegionHierarchy {
 public:
  struct Level {
    CubeRegion omega, lambda;
    GeneratorTriple gen;
    std::int64_t r_layers = 1;
  };

  static RegionHierarchy build(const CubeGrid& base_grid,
                               const std::vector<GeneratorTriple>& gens,
                               const std::vector<std::int64_t>& r_layers,
                               std::int64_t scale_factor);

  const std::vector<Level>& levels() const { return levels_; }
  std::int64_t scale_factor() const { return scale_factor_; }

 private:
  std::vector<Level> levels_;
  std::int64_t scale_factor_ = 2;
};

nlohmann::json hierarchy_to_json(const RegionHierarchy& h);

// Axis-aligned box of cells with periodic wraparound, used by the covering
// construction. Unused axes keep lo 0 and len 1.
struct CoverCube {
  std::array<std::int64_t, 3> lo{0, 0, 0};
  std::array<std::int64_t, 3> len{1, 1, 1};
};

struct CoverCollection {
  int level = 0;
  std::vector<CoverCube> cubes;
  double width_limit_cells = 0.0;
  std::int64_t max_width_cells = 0;
};

struct CoveringReport {
  std::vector<CoverCollection> collections;
  std::int64_t volume_cells = 0;
  std::int64_t cover_count = 0;
  double r_final = 0.0;
  double smallest_admissible_c = 0.0;
  bool covers = false;
  bool widths_ok = false;
};

// Builds the inductive cover of the complement of the last small-field
// region and evaluates the volume bound
//   volume <= C * (M * r_final)^d * (total cover cardinality),
// reporting the smallest admissible C.
CoveringReport covering_bound(const CubeGrid& base_grid,
                              const std::vector<GeneratorTriple>& gens,
                              const BoundConstants& constants,
                              const std::vector<double>& neg_log_lambdas,
                              std::int64_t scale_factor,
                              std::int64_t cells_per_cube_side);

struct TreeJoinReport {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

// Checks that per-piece tree lengths (plus one per piece) dominate the tree
// length of the connected union.
TreeJoinReport tree_join_check(const std::vector<CubeRegion>& theta_comps,
                               const std::vector<CubeRegion>& xs,
                               const std::vector<CubeRegion>& ys,
                               const CubeRegion& u);

// Weighted sum over regions, keyed by connected-mod-complement supports.
using RegionTerm = std::pair<CubeRegion, double>;

struct ResummationResult {
  std::vector<RegionTerm> output;
  double input_total = 0.0;
  double output_total = 0.0;
  double reported_c = 0.0;
  bool totals_match = false;
};

// Regroups an activity indexed by regions connected mod the complement of
// omega into one indexed by regions connected mod the complement of lambda,
// attaching to each input region the components of lambda's complement it
// touches. The grand total is preserved term by term.
ResummationResult resummation(const std::vector<RegionTerm>& activity,
                              const CubeRegion& omega,
                              const CubeRegion& lambda, double b0,
                              double kappa, double kappa0);

}  // namespace blockrg
