#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrg/action.hpp"
#include "blockrg/fluctuation.hpp"
#include "blockrg/lattice.hpp"
#include "blockrg/minimizer.hpp"
#include "blockrg/region.hpp"

namespace blockrg {

// How a density over block fields is represented while it moves through the
// coarsening steps. A callable density stores the function itself and is
// limited to tiny site counts; a quadratic density stores a precision matrix
// and a log prefactor; a ledger density stores only the bookkeeping entries
// each step would add.
enum class DensityMode { callable, quadratic, ledger };

// Limits and quadrature settings for callable densities. Integrals use a
// tensor Gauss-Legendre rule with `nodes_per_axis` points per site on the
// box [-half_width, half_width]; `max_total_nodes` caps the tensor grid.
struct CallableSpec {
  std::int64_t max_sites = 8;
  int nodes_per_axis = 16;
  double half_width = 8.0;
  std::int64_t max_total_nodes = std::int64_t{1} << 22;

  void validate() const;
};

// A density over fields on one block lattice, together with the level index,
// the running couplings, and the representation payload for its mode. In
// quadratic mode the density is exp(log_prefactor - phi' P phi / 2); in
// callable mode every constant is folded into the stored function and
// log_prefactor stays zero.
struct DensityState {
  DensityMode mode;
  int level = 0;
  TorusLattice lattice;
  CouplingSet couplings;
  double log_prefactor = 0.0;
  Eigen::MatrixXd precision;
  std::function<double(const Vec&)> density;
  CallableSpec callable_spec;
  nlohmann::json ledger = nlohmann::json::array();

  void validate() const;
};

DensityState quadratic_state(const TorusLattice& lat, const Eigen::MatrixXd& precision,
                             const CouplingSet& couplings, double log_prefactor = 0.0,
                             int level = 0);
DensityState callable_state(const TorusLattice& lat, std::function<double(const Vec&)> density,
                            const CouplingSet& couplings, const CallableSpec& spec = {},
                            int level = 0);
DensityState ledger_state(const TorusLattice& lat, const CouplingSet& couplings, int level = 0);

// Value of the density at a site-value vector. Ledger densities have no
// pointwise values and throw.
double density_value(const DensityState& state, const Vec& phi);

// Log of the integral of the density over all site values: closed form in
// quadratic mode, tensor quadrature in callable mode. Ledger densities
// throw. The coarsening step leaves this value unchanged.
double log_partition(const DensityState& state);

// Dense block-mean matrix from a lattice to its coarsening: row y has
// L^-d on the fine sites of block y and zero elsewhere.
Eigen::MatrixXd block_mean_matrix(const TorusLattice& fine);

// One coarsening step: convolve with the normalized Gaussian kernel
// exp(-aL |Phi' - Q Phi|^2 / 2) over the current field, then rescale site
// values by L^-(d-2)/2 with the matching measure factor, so the integral of
// the density is preserved exactly. Couplings update geometrically: the
// quartic coupling gains a factor L, both mass slots gain L^2, and the
// energy-density slot gains L^d. Quadratic mode updates the precision matrix
// in closed form; callable mode builds a cached-quadrature callable; ledger
// mode appends the normalization bookkeeping.
DensityState rg_block_step(const DensityState& state);

// Threshold families for the characteristic functions. `core` carries the
// per-level field and gradient bounds; `widened` and `widened_plus` relax
// them by the half-integer powers of the block ratio used between levels;
// `fluctuation` bounds the fluctuation variable only.
enum class CharFamily { core, widened, widened_plus, fluctuation };

struct CharacteristicSpec {
  double p = 1.0;
  double p_prev = 1.0;
  double p0 = 1.0;
  double alpha = 1.0;
  double cw = 2.0;
  double scale = 2.0;

  // All thresholds must be positive and the block ratio at least 2.
  void validate() const;

  // core: 2 p / alpha.  widened: 2 p_prev sqrt(scale) / alpha.
  // widened_plus: 3 p_prev sqrt(scale) / alpha.
  double field_limit(CharFamily family) const;
  // core: 3 p.  widened: 3 p_prev scale^(3/2).  widened_plus: 4 p_prev scale^(3/2).
  double gradient_limit(CharFamily family) const;
  // fluctuation: p0.  widened_plus: cw p_prev sqrt(scale).
  double w_limit(CharFamily family) const;
};

// 1 when every site of the region obeys the field limit and every
// nearest-neighbor difference with both ends in the region obeys the
// gradient limit, else 0. Differences are plain value differences without
// spacing weights.
double char_indicator(const CharacteristicSpec& spec, CharFamily family,
                      const LatticeField& phi, const CubeRegion& region);

// Exactly 1 - char_indicator for the same arguments.
double zeta_indicator(const CharacteristicSpec& spec, CharFamily family,
                      const LatticeField& phi, const CubeRegion& region);

// 1 when every site of the region obeys the w limit of the family, else 0.
double w_indicator(const CharacteristicSpec& spec, CharFamily family,
                   const LatticeField& w, const CubeRegion& region);

// Exactly 1 - w_indicator for the same arguments.
double w_zeta_indicator(const CharacteristicSpec& spec, CharFamily family,
                        const LatticeField& w, const CubeRegion& region);

// The deep region entering the final coarsening step: the input shrunk by
// five rings of its own cubes per layer count. Throws when the result is
// empty.
CubeRegion last_step_hole(const CubeRegion& lambda, std::int64_t r_layers);

struct LastStepOptions {
  // Replace the exact deep block means with the glued confined-walk solve.
  bool localized = false;
  std::int64_t cube_side = 4;
  std::int64_t radius = 2;
  int n_max = 8;
};

// Pieces of the translated quadratic energy. The energy at deep data
// (block means + z) splits into the part outside the deep region, the free
// part inside it, a pure quadratic in z, and a remainder that vanishes when
// the exact block means are used.
struct LastStepReport {
  double total = 0.0;
  double exterior_term = 0.0;
  double hole_term = 0.0;
  double quadratic_term = 0.0;
  // Linear-in-z part measured as total - (total at z = 0) - quadratic_term.
  double cross_term = 0.0;
  double remainder = 0.0;
  // Operator-norm bound |H| (|shift| |z| + |shift|^2 / 2) on the remainder
  // caused by replacing the exact means with localized ones.
  double remainder_bound = 0.0;
  double z_sup = 0.0;
  // Largest deviation between localized and exact deep block means.
  double shift_sup = 0.0;
  double residual = 0.0;
};

// Evaluates the minimum energy with the deep data translated by z and splits
// it per the report fields. z lives on the deepest block lattice and must
// vanish off the top-hole blocks.
LastStepReport last_step_translate(const MultiscaleRegions& regions,
                                   const std::vector<LatticeField>& block_data,
                                   const LatticeField& exterior,
                                   const MultiscaleCouplings& couplings,
                                   const LatticeField& z,
                                   const LastStepOptions& options = {});

nlohmann::json last_step_report_json(const LastStepReport& r);

// Change of variables z = T w for the fluctuation integral: the log Jacobian
// enters the normalization ledger and the whitening gap measures how far
// T' P T is from the identity.
struct SubstitutionReport {
  double log_jacobian = 0.0;
  double whitening_gap = 0.0;
  double min_singular = 0.0;
  std::int64_t dimension = 0;
};

// Throws when the transform is singular or the shapes mismatch.
SubstitutionReport fluctuation_substitution(const Eigen::MatrixXd& precision,
                                            const Eigen::MatrixXd& transform);

// Convenience overload using the bundle's own square root (localized or
// exact) against its independently assembled precision matrix.
SubstitutionReport fluctuation_substitution(const CovarianceBundle& bundle,
                                            bool localized = false);

nlohmann::json substitution_report_json(const SubstitutionReport& r);

// One term of the partition of unity over large-fluctuation cube sets: the
// cube set whose indicator product fired, its weight for the sampled values
// (0 or 1), and the next-level region it induces.
struct CharInsertTerm {
  CubeRegion large_field;
  CubeRegion lambda_next;
  double weight = 0.0;
};

struct CharInsertResult {
  std::vector<CharInsertTerm> terms;
  double weight_sum = 0.0;
  std::size_t surviving_terms = 0;
};

// Enumerates every cube subset R of the region with weight
// (each R cube holds a site with |w| > p0) * (each other cube holds none),
// so the weights sum to one for any w. Each term records
// lambda_next = shrink(region, 5 layers) minus enlarge(R, 5 layers).
// Capped at 16 cubes.
CharInsertResult char_insert(const TorusLattice& block_lat, const CubeRegion& omega,
                             const LatticeField& w, double p0, std::int64_t r_layers);

// Samples fluctuation values within the |w| <= p0 box, forms the composite
// deep field (exact block means plus localized square root times w), and
// checks the core small-field indicator on the check region, including that
// it is unchanged when the w values inside the deep interior are resampled.
struct SupportCheckReport {
  bool all_inside = true;
  bool interior_independent = true;
  double max_field_ratio = 0.0;
  double max_gradient_ratio = 0.0;
  // Row-sum norm of the localized square root times p0 / p.
  double margin_factor = 0.0;
  int samples_checked = 0;
};

SupportCheckReport support_check(const MultiscaleRegions& regions,
                                 const MultiscaleCouplings& couplings,
                                 const std::vector<LatticeField>& block_data,
                                 const LatticeField& exterior,
                                 const CubeRegion& lambda_next,
                                 const CubeRegion& check_region,
                                 const CharacteristicSpec& spec, int num_samples,
                                 std::uint64_t seed, const QuadratureSpec& quad = {},
                                 const LocalizationSpec& loc = {});

nlohmann::json support_check_json(const SupportCheckReport& r);

}  // namespace blockrg
