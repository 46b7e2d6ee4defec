#include "blockrg/quadrature.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace blockrg {

namespace {

// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix of the orthogonal
// polynomial recurrence, weights are mu0 * (first eigenvector component)^2.
QuadratureRule golub_welsch(const std::vector<double>& offdiag, double mu0) {
    const int n = static_cast<int>(offdiag.size()) + 1;
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sub(n - 1);
    for (int i = 0; i < n - 1; ++i) sub[i] = offdiag[i];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, sub);
    QuadratureRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    for (int i = 0; i < n; ++i) {
        rule.nodes[i] = es.eigenvalues()[i];
        const double v0 = es.eigenvectors()(0, i);
        rule.weights[i] = mu0 * v0 * v0;
    }
    return rule;
}

}  // namespace

QuadratureRule gauss_hermite(int n) {
    if (n < 1) throw validation_error("quadrature needs at least one node");
    std::vector<double> off(n - 1);
    for (int i = 1; i < n; ++i) off[i - 1] = std::sqrt(i / 2.0);
    QuadratureRule rule = golub_welsch(off, std::sqrt(M_PI));
    // Fold exp(+x^2) into the weights so the rule integrates plain densities.
    for (int i = 0; i < n; ++i)
        rule.weights[i] = std::exp(std::log(rule.weights[i]) + rule.nodes[i] * rule.nodes[i]);
    return rule;
}

QuadratureRule gauss_legendre01(int n) {
    if (n < 1) throw validation_error("quadrature needs at least one node");
    std::vector<double> off(n - 1);
    for (int i = 1; i < n; ++i) off[i - 1] = i / std::sqrt(4.0 * i * i - 1.0);
    QuadratureRule rule = golub_welsch(off, 2.0);
    // Map [-1, 1] to [0, 1].
    for (int i = 0; i < n; ++i) {
        rule.nodes[i] = 0.5 * (rule.nodes[i] + 1.0);
        rule.weights[i] *= 0.5;
    }
    return rule;
}

namespace {

double tensor_integrate(const std::function<double(const Vec&)>& rho, std::int64_t num_sites,
                        const QuadratureRule& rule, double sigma) {
    const int n = static_cast<int>(rule.nodes.size());
    std::vector<int> idx(num_sites, 0);
    Vec x(num_sites);
    double sum = 0.0;
    while (true) {
        double w = 1.0;
        for (std::int64_t s = 0; s < num_sites; ++s) {
            x[s] = sigma * rule.nodes[idx[s]];
            w *= sigma * rule.weights[idx[s]];
        }
        sum += w * rho(x);
        std::int64_t s = 0;
        for (; s < num_sites; ++s) {
            if (++idx[s] < n) break;
            idx[s] = 0;
        }
        if (s == num_sites) break;
    }
    return sum;
}

}  // namespace

QuadratureResult integrate_density(const std::function<double(const Vec&)>& rho,
                                   std::int64_t num_sites, const QuadratureSpec& spec) {
    if (num_sites < 1) throw validation_error("integrate_density needs >= 1 site");
    if (num_sites > spec.site_cap)
        throw size_error("integrate_density: site count exceeds tensor-quadrature cap");
    const QuadratureRule base = gauss_hermite(spec.nodes);
    QuadratureResult res;
    if (spec.doubled_error) {
        const QuadratureRule fine = gauss_hermite(2 * spec.nodes);
        const double coarse = tensor_integrate(rho, num_sites, base, spec.sigma);
        res.value = tensor_integrate(rho, num_sites, fine, spec.sigma);
        res.error_estimate = std::abs(res.value - coarse);
    } else {
        res.value = tensor_integrate(rho, num_sites, base, spec.sigma);
        res.error_estimate = 0.0;
    }
    return res;
}

}  // namespace blockrg
