#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "blockrg/minimizer.hpp"

namespace blockrg {

// One cube of the walk cover. `core` and `halo` hold row indices into the
// operator (positions within op.sites); the halo is the cube plus one ring
// of neighboring cubes, intersected with the working region. The local
// inverse is the dense inverse of the operator truncated to the halo with
// the cuts at the halo boundary dropped from the diagonal.
struct WalkCube {
  std::int64_t cell = 0;
  std::vector<std::int64_t> core;
  std::vector<std::int64_t> halo;
  Eigen::MatrixXd local_inverse;
};

// Cover of the working region by equal fine-site cubes together with the
// ingredients of the inverse expansion: the parametrix P (sum over cubes of
// local inverse times core indicator) and the step matrix K with
// operator * P = identity + K. Partial sums of P * (-K)^n approximate the
// inverse; theta is the measured spectral norm of K.
struct RandomWalkExpansion {
  MultiscaleOperator op;
  CubeGrid paving;
  std::int64_t cube_side = 0;
  std::vector<WalkCube> cubes;
  Eigen::MatrixXd parametrix;
  Eigen::MatrixXd step;
  double theta = 0.0;
};

RandomWalkExpansion build_walk_expansion(const MultiscaleOperator& op,
                                         std::int64_t cube_side);

// Adds the matrices pairwise in rounds until one remains. Empty input is
// rejected.
Eigen::MatrixXd pairwise_tree_sum(std::vector<Eigen::MatrixXd> terms);

struct WalkPartialSum {
  Eigen::MatrixXd approx;
  // Frobenius norm of each length-n term, n = 0..n_max.
  std::vector<double> term_norms;
  // Measured spectral norm of the weakened step matrix.
  double theta = 0.0;
};

// Partial sum of the expansion with per-cube weakening factors s in [0, 1];
// an empty s means all ones. Each walk multiplies by s for every cube it
// visits, so s = 0 on a cube removes all walks through it.
WalkPartialSum walk_partial_sum(const RandomWalkExpansion& expansion,
                                const std::vector<double>& s, int n_max);

// Sum over all explicit cube sequences of the given length, in lexicographic
// sequence order. Matches the corresponding term of walk_partial_sum and is
// meant for small cross-checks.
Eigen::MatrixXd walk_term_enumeration(const RandomWalkExpansion& expansion,
                                      const std::vector<double>& s, int length);

struct WalkInverseReport {
  Eigen::MatrixXd approx;
  double theta = 0.0;
  std::vector<double> term_norms;
  // Frobenius distance between the exact inverse and each partial sum,
  // lengths 0..n_max.
  std::vector<double> error_per_length;
};

// Builds the cover, measures theta, and returns the weakened partial sum
// together with the error series against the dense inverse. Throws a
// diagnostic error when theta >= 1.
WalkInverseReport random_walk_inverse(const MultiscaleRegions& regions,
                                      const MultiscaleCouplings& couplings,
                                      double resolvent_shift,
                                      const std::vector<double>& s,
                                      int n_max, std::int64_t cube_side);

struct DecayTableRow {
  double distance = 0.0;
  double max_abs_entry = 0.0;
  bool used_in_fit = false;
};

struct DecayCertificate {
  double gamma = 0.0;
  double prefactor = 0.0;
  bool conclusive = false;
  std::vector<DecayTableRow> table;
};

// Groups matrix entries by the physical distance between the home blocks of
// their row and column sites, records the largest magnitude per distance,
// and fits log(max_abs_entry) against distance by least squares. Home blocks
// are the blocks of the level whose annulus contains the site, or top-level
// blocks inside the top hole. When at least six distances are present the
// fit uses only the lower half of the distance range. The certificate is
// conclusive when the fit has at least three points spanning a factor of ten
// in magnitude.
DecayCertificate decay_certificate(const Eigen::MatrixXd& greens,
                                   const MultiscaleOperator& op);

nlohmann::json decay_certificate_json(const DecayCertificate& cert);

struct LocalizedFieldResult {
  // Walk solution with all weakening factors one.
  Vec phi;
  // Walk solution from sources in the chosen cube, with walks confined to
  // cubes within `radius` of it.
  Vec phi_box;
  // Sum of the confined solutions over all cubes.
  Vec phi_loc;
  double delta_sup = 0.0;
};

// Splits the source by cover cube, solves each piece with walks confined to
// a neighborhood of its cube, and glues the pieces. All solves use the same
// truncation length, so with a single-cube cover phi_loc equals phi exactly.
LocalizedFieldResult localized_field(const RandomWalkExpansion& expansion,
                                     const Vec& source, std::int64_t box,
                                     std::int64_t radius, int n_max);

// Matrix form of the glued confined solve: for every cover cube, the columns
// with sources in that cube come from the partial sum whose walks stay
// within `radius` cubes of it. Applying the result to a source vector gives
// the same field as gluing localized_field pieces.
Eigen::MatrixXd localized_inverse(const RandomWalkExpansion& expansion,
                                  std::int64_t radius, int n_max);

}  // namespace blockrg
