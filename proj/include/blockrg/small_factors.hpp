#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrg/action.hpp"
#include "blockrg/hierarchy.hpp"
#include "blockrg/lattice.hpp"
#include "blockrg/pipeline.hpp"
#include "blockrg/region.hpp"

namespace blockrg {

class Rng;

// Draws every site from a centered Gaussian with the given sigma, then
// redraws each cube of the region until it holds at least one site with
// |value| >= threshold. Sites outside the region keep their first draw.
LatticeField sample_exceedance_field(const TorusLattice& lat, const CubeRegion& region,
                                     double threshold, double sigma, Rng& rng);

// Two sides of a per-cube exceedance bound in log form. log_lhs is -infinity
// when some cube of the region lacks the required exceedance, since the
// accompanying indicator kills the term.
struct SmallFactorReport {
  double log_lhs = 0.0;
  double log_rhs = 0.0;
  bool on_support = false;
  bool holds = false;
  std::int64_t cube_count = 0;
};

// Deviation bound for one coarsening kernel: with D = phi_next - (block mean
// of phi), on the support where every cube of p_region holds a site with
// |D| >= p_threshold,
//   exp(-a_scaled |D|^2_P / 4) <= exp(-a_scaled p_threshold^2 #cubes / 4).
SmallFactorReport small_factor_p(const CubeRegion& p_region, const LatticeField& phi_next,
                                 const LatticeField& phi, double a_scaled,
                                 double p_threshold);

// Same bound for a fluctuation field with unit kernel strength and
// threshold p0.
SmallFactorReport small_factor_w(const CubeRegion& r_region, const LatticeField& w,
                                 double p0_threshold);

nlohmann::json small_factor_json(const SmallFactorReport& r);

// Which branch of the case split fired for one cube of the large-field set:
// C when field and gradient both stay under the c1-scaled thresholds, D when
// the gradient is large, E when the field is large and the mass coupling
// dominates, F when the field is large and the quartic coupling dominates.
struct ActionCubeDiagnostic {
  char fired_case = 'C';
  double max_field = 0.0;
  double max_gradient = 0.0;
  double quartic_integral = 0.0;
};

struct ActionFactorReport {
  double log_lhs = 0.0;
  double log_rhs = 0.0;
  bool on_support = false;
  bool holds = false;
  double c2 = 0.0;
  double potential_floor = 0.0;
  std::vector<ActionCubeDiagnostic> cubes;
};

// Bound on the action factor with a large-field indicator: on the support
// where every cube of q_region violates the core thresholds,
//   exp(-S(delta_lambda)) <= exp(c_bound lambda^beta #cells
//                                - c2 p^2 #cubes),
// with S the unrenormalized two-field action and c2 from the admissible-
// constant formula. Entry fields must obey the widened_plus limits of the
// spec on delta_lambda; violations throw.
ActionFactorReport small_factor_action(const CubeRegion& delta_lambda,
                                       const CubeRegion& q_region,
                                       const LatticeField& phi_block,
                                       const LatticeField& phi_fine,
                                       const CouplingSet& prev, const CouplingSet& cur,
                                       const CharacteristicSpec& spec,
                                       const BoundConstants& constants, double c_bound);

nlohmann::json action_factor_json(const ActionFactorReport& r);

// Exact log values of the residual field integrals of one hierarchy level:
// the halved-exponent count over the fluctuation strip, the amplitude box
// over the newly excluded cells, and the Gaussian kernel normalization over
// the complement.
struct FinalIntegralLevel {
  double log_w = 0.0;
  double log_chi = 0.0;
  double log_gaussian = 0.0;
  std::int64_t cells_w = 0;
  std::int64_t cells_chi = 0;
  std::int64_t cells_gaussian = 0;
};

struct FinalIntegralsReport {
  std::vector<FinalIntegralLevel> levels;
  double exact_log_total = 0.0;
  // Sum over levels of (-log lambda_j) times the complement cell count.
  double complement_weight = 0.0;
  // c_constant times complement_weight.
  double assembled_bound = 0.0;
  // exact_log_total / complement_weight when the weight is positive.
  double smallest_c = 0.0;
  bool dominated = false;
};

// Evaluates the exact residual integrals of a region hierarchy level by
// level and compares their total with the assembled complement-weighted
// bound. neg_log_lambdas supplies one positive value per level j = 0..K
// where K is the number of generator triples; `a` is the kernel strength,
// m_cells the cube side in cells, and lambda0 an optional base region
// replacing the full torus in the level-0 branch. The level-0 Gaussian uses
// the mass value with -log mass = 2 (K - 1) log L.
FinalIntegralsReport final_integrals(const RegionHierarchy& h,
                                     const BoundConstants& constants,
                                     const std::vector<double>& neg_log_lambdas,
                                     double a, double c_constant, std::int64_t m_cells,
                                     const CubeRegion* lambda0 = nullptr);

nlohmann::json final_integrals_json(const FinalIntegralsReport& r);

// Enumeration of every generator assignment whose region recursion ends with
// the prescribed complement, with the weighted sum over assignments and the
// closed-form bound it must not exceed.
struct KprimeReport {
  double exact_sum = 0.0;
  double bound = 0.0;
  bool holds = false;
  bool regime_ok = false;
  double regime_threshold = 0.0;
  std::int64_t assignments = 0;
  std::int64_t enumerated = 0;
};

// Sums exp(sum_j c_constant (-log lambda_j) |complement cells at level j|
//          - c2 p0_j^2 (#generator cubes at level j))
// over all generator triples {P, Q, R} per level whose final complement
// equals theta, excluding the all-empty assignment. theta lives on the grid
// of the last level; neg_log_lambdas has one value per level j = 0..K.
// The bound is lambda^n0 exp(-kappa' #theta) at the final coupling. The
// enumeration runs in parallel over first-level choices with a fixed
// reduction order. Caps: 8 theta cubes, 3 levels, 18 candidate cubes per
// generator.
KprimeReport kprime_sum(const CubeGrid& base_grid, const CubeRegion& theta,
                        const std::vector<double>& neg_log_lambdas,
                        const BoundConstants& constants, std::int64_t scale_factor,
                        std::int64_t m_cells, double c_constant);

nlohmann::json kprime_json(const KprimeReport& r);

}  // namespace blockrg
