#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "blockrg/lattice.hpp"

namespace blockrg {

// Nodes and weights of an n-point rule, computed by the Golub-Welsch
// eigenvalue method (no tabulated coefficients).
struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

// Rule for integrals over the whole real line against exp(-x^2); the returned
// weights already include the exp(+x_i^2) factor, so
// integral f(t) dt ~= sum_i weights[i] * f(nodes[i]).
QuadratureRule gauss_hermite(int n);

// Rule for integrals over [0, 1].
QuadratureRule gauss_legendre01(int n);

struct QuadratureSpec {
    int nodes = 20;
    // Per-axis scale: substitution t = sigma * x before applying the rule.
    double sigma = 1.0;
    // When true the integral is recomputed at doubled node count; the result
    // uses the doubled rule and the difference is reported as error estimate.
    bool doubled_error = true;
    std::int64_t site_cap = 8;
};

struct QuadratureResult {
    double value = 0.0;
    double error_estimate = 0.0;
};

// Tensor-product Gauss-Hermite integral of `rho` over R^num_sites. Refuses
// (size_error) above the site cap instead of degrading to sampling.
QuadratureResult integrate_density(const std::function<double(const Vec&)>& rho,
                                   std::int64_t num_sites, const QuadratureSpec& spec);

}  // namespace blockrg
