#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <utility>
#include <vector>

#include "blockrg/minimizer.hpp"

namespace blockrg {

// Gauss-Legendre nodes and weights on [-1, 1], computed from the eigenvalues
// of the Jacobi matrix.
std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n);

struct QuadratureSpec {
  int initial_nodes = 16;
  int max_nodes = 4096;
  // Node doubling stops once the max-entry change falls below this.
  double tolerance = 1e-10;
};

// Principal square root of a symmetric positive definite matrix through the
// resolvent integral (2/pi) int_0^{pi/2} (cos^2 I + sin^2 C)^-1 C dtheta,
// which is the arc substitution r = tan^2(theta) of the half-line integral
// (1/pi) int_0^inf dr/sqrt(r) (C^-1 + r)^-1. Nodes are doubled until stable;
// throws when the doubling never stabilizes within the node budget.
Eigen::MatrixXd sqrt_covariance(const Eigen::MatrixXd& spd,
                                const QuadratureSpec& spec = {});

// Fluctuation covariance data on the top-hole blocks of a region stack.
struct CovarianceBundle {
  MultiscaleRegions regions;
  MultiscaleCouplings couplings;
  // Top-hole cube ids indexing the rows and columns below.
  std::vector<std::int64_t> blocks;
  // Covariance 1/a + [Q G Q^T] with the annuli Green's function.
  Eigen::MatrixXd covariance;
  // Its inverse a - a^2 [Q G'' Q^T] with the widened-support Green's
  // function, assembled independently rather than by inversion.
  Eigen::MatrixXd precision;
  Eigen::MatrixXd sqrt;
  Eigen::MatrixXd sqrt_localized;
  double log_det_covariance = 0.0;
  int sqrt_nodes_used = 0;
};

// Block-average sandwich [Q G Q^T] over the top-hole blocks: entry (y, y')
// is the mean over block y of the Green's function applied to the indicator
// of block y'.
Eigen::MatrixXd block_sandwich(const DenseGreens& greens);

// Walk parameters for the localized square root; the glued confined inverse
// replaces the exact Green's function at every quadrature node.
struct LocalizationSpec {
  std::int64_t cube_side = 4;
  std::int64_t radius = 2;
  int n_max = 6;
};

// Assembles the covariance and its precision by the two independent
// representations, takes the square root by quadrature, and builds the
// localized square root with confined walks. Requires depth >= 1 and a
// nonempty top hole; throws a numerical error with the smallest eigenvalue
// when the assembled covariance is not positive definite.
CovarianceBundle covariance_build(const MultiscaleRegions& regions,
                                  const MultiscaleCouplings& couplings,
                                  const QuadratureSpec& quad = {},
                                  const LocalizationSpec& loc = {});

// Resolvent of the covariance through the Green's function route: the block
// matrix 1/(a+r) + (a/(a+r))^2 [Q G_r Q^T] with the shifted annuli Green's
// function. Agrees with (precision + r)^-1.
Eigen::MatrixXd covariance_resolvent(const MultiscaleRegions& regions,
                                     const MultiscaleCouplings& couplings,
                                     double r);

struct SqrtBoundsReport {
  // Smallest constants C with |M f|_inf <= C |f|_inf, that is the largest
  // row absolute sum, for the plain and localized square roots and for
  // their difference.
  double bound_plain = 0.0;
  double bound_localized = 0.0;
  double delta_norm = 0.0;
  // Sup norm of each column of the plain square root (response to a unit
  // mass at one block).
  std::vector<double> column_sup;
};

SqrtBoundsReport sqrt_bounds_check(const CovarianceBundle& bundle);

// One step of the log-domain normalization recursion: subtracts the Gaussian
// normalizer (2 pi / a)^(fine/2), adds (2 pi)^(coarse/2) and half the
// covariance log-determinant.
double z_recursion(double log_z, std::int64_t coarse_sites,
                   std::int64_t fine_sites, double a, double log_det_c);

// Convenience overload reading the two site counts from a lattice and its
// block-center coarsening.
double z_recursion(double log_z, const TorusLattice& lattice, double a,
                   double log_det_c);

struct BarePartitionReport {
  // Log of the Gaussian integral over all fields at once.
  double log_direct = 0.0;
  // Log of the same integral composed step by step, ending with the
  // determinant of the deepest-scale block operator a - a^2 Q G Q^T.
  double log_recursed = 0.0;
  double rel_err = 0.0;
  // Harmonic composition of the per-step averaging strengths.
  double effective_a = 0.0;
  // Deepest-scale block operator from the Green's function route.
  Eigen::MatrixXd delta;
  // Max-entry gap between the stepwise Schur complement and `delta` in
  // matching units.
  double schur_gap = 0.0;
};

// Free-field partition bookkeeping on the full torus: couples the fine field
// to a chain of block fields, one per scale, with volume-weighted averaging
// penalties, and integrates everything out twice. `step_strengths.a[j-1]` is
// the strength of the scale-j averaging kernel; the number of scales is the
// fine_exponent of the lattice.
BarePartitionReport bare_partition_identity(const TorusLattice& fine,
                                            const MultiscaleCouplings& step_strengths);

struct WMeasureConstants {
  // Per-site cost -log P(|W| <= p0) for a standard normal W.
  double epsilon0 = 0.0;
  // num_sites * -epsilon0.
  double log_nw = 0.0;
};

WMeasureConstants w_measure_constants(std::int64_t num_sites, double p0);

// Exact log value of the Gaussian integrals with the exponent halved on the
// given per-level site counts: sum of count/2 * log 2.
double w_integral_halved(const std::vector<std::int64_t>& counts);

nlohmann::json normalization_ledger_json(const std::vector<double>& log_z,
                                         const std::vector<double>& log_det,
                                         double epsilon0);

}  // namespace blockrg
