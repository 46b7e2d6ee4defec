#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>

#include "blockrg/lattice.hpp"
#include "blockrg/region.hpp"

namespace blockrg {

class Rng;

// Per-level coupling values. A schedule ties the level-k quartic and curvature
// couplings to their final values by lambda_k = L^-(N-k)*lambda and
// mubar_k = L^-2(N-k)*mubar; the counterterm slots epsilon and mu are free
// inputs, as is the averaging strength a. The curvature slot mubar and the
// counterterm slot mu are kept separate everywhere and never merged.
struct CouplingSet {
  double lambda = 0.0;
  double mu = 0.0;
  double epsilon = 0.0;
  double mubar = 0.0;
  double a = 1.0;

  // Enforces lambda > 0, 0 < mubar <= 1, a > 0.
  void validate() const;
};

// Level-k values of the geometric schedule described above.
CouplingSet scheduled_couplings(int level, int total_levels, int scale_factor,
                                double lambda_final, double mubar_final, double epsilon,
                                double mu, double a);

nlohmann::json couplings_to_json(const CouplingSet& c);
CouplingSet couplings_from_json(const nlohmann::json& j);

// Additive pieces of an action evaluation, kept separate for reporting.
struct ActionBreakdown {
  double average_term = 0.0;
  double gradient_term = 0.0;
  double curvature_term = 0.0;
  double epsilon_term = 0.0;
  double mu_term = 0.0;
  double quartic_term = 0.0;

  double starred() const { return average_term + gradient_term + curvature_term; }
  double potential() const { return epsilon_term + mu_term + quartic_term; }
  double total() const { return starred() + potential(); }
};

nlohmann::json breakdown_to_json(const ActionBreakdown& b);

// Action of a unit-lattice field over the whole torus:
//   (1/2)||d Phi||^2 + (1/2) mubar ||Phi||^2
//   + epsilon Vol + (1/2) mu ||Phi||^2 + (1/4) lambda sum Phi^4.
ActionBreakdown bare_action(const LatticeField& phi_unit, const CouplingSet& c);

// Action of a block field and a fine field over a union of unit blocks:
//   (a/2)||Phi - Q phi||^2 + (1/2)||d phi||^2 + (1/2) mubar ||phi||^2
//   + epsilon Vol + (1/2) mu ||phi||^2 + (1/4) lambda int phi^4,
// all restricted to `blocks`; Q is the iterated block mean taking `phi_fine`
// to the unit lattice, the gradient norm keeps only bonds inside the region
// (Neumann convention), and fine-lattice integrals carry the spacing^d weight.
ActionBreakdown action_splus(const CubeRegion& blocks, const LatticeField& phi_block,
                             const LatticeField& phi_fine, const CouplingSet& c);

// Same quadratic part as action_splus, with the potential built from the
// previous level's counterterms scaled one step up:
//   L^d * prev.epsilon, L^2 * prev.mu, and the current quartic coupling.
ActionBreakdown action_unrenorm(const CubeRegion& blocks, const LatticeField& phi_block,
                                const LatticeField& phi_fine, const CouplingSet& prev,
                                const CouplingSet& cur);

// Value of epsilon Vol + (1/2) mu int phi^2 + (1/4) lambda int phi^4 over the
// region, with the spacing^d integral weight.
double potential_value(const CubeRegion& region, const LatticeField& phi, double epsilon,
                       double mu, double lambda);

struct PotentialBoundReport {
  // -(|epsilon| + mu^2 / (4 lambda)) * Vol(region).
  double bound = 0.0;
  // Smallest potential value over the sampled fields.
  double min_sampled = 0.0;
  // True when every sample respected the bound.
  bool verified = false;
};

// Closed-form lower bound for the potential over a region, checked against
// sampled fields including the per-site analytic minimizer. Requires
// lambda > 0.
PotentialBoundReport potential_lower_bound(const TorusLattice& lat, const CubeRegion& region,
                                           double epsilon, double mu, double lambda, Rng& rng,
                                           int samples = 64);

struct QuadraticBoundResult {
  // Minimum of the quadratic quotient described below; infinity when the
  // denominator form vanishes identically on the region.
  double c0 = 0.0;
  // True when the denominator kernel (per-component constants at mu = 0) was
  // projected out before the eigensolve.
  bool restricted = false;
  // Dimension of the quotient space actually solved.
  std::int64_t quotient_dimension = 0;
};

// Smallest constant c0 with
//   (1/2)||Phi - Q phi||^2_X + (1/2)||d phi||^2_X + (1/2) mu ||phi||^2_X
//     >= c0 * ( ||d Phi||^2_X + mu ||Phi||^2_X )
// for all unit-lattice Phi and fine-lattice phi, where X is a union of unit
// blocks of the fine lattice and both gradient norms keep only bonds inside X.
// Computed by eliminating phi exactly and solving a generalized symmetric
// eigenproblem in Phi. Requires 0 <= mu <= 1 and a nonempty region.
QuadraticBoundResult quadratic_lower_bound_constant(const TorusLattice& fine,
                                                    const CubeRegion& blocks, double mu);

}  // namespace blockrg
