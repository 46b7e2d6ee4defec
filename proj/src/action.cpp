#include "blockrg/action.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "blockrg/rng.hpp"

namespace blockrg {

namespace {

int ipow_int(int base, int exp) {
  int r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

// Unit-block grid of a fine lattice: one cube per unit cell.
CubeGrid unit_block_grid(const TorusLattice& fine) {
  const int k = fine.fine_exponent();
  if (k < 0) throw validation_error("unit blocks need a fine exponent >= 0");
  std::int64_t side = 1;
  for (int i = 0; i < k; ++i) side *= fine.scale_factor();
  return grid_for_lattice(fine, side);
}

TorusLattice unit_lattice_of(const TorusLattice& fine) {
  TorusLattice unit = fine;
  for (int i = 0; i < fine.fine_exponent(); ++i) unit = unit.coarser();
  return unit;
}

void require_block_setup(const CubeRegion& blocks, const LatticeField& phi_block,
                         const LatticeField& phi_fine, const char* where) {
  const TorusLattice& fine = phi_fine.lattice;
  if (fine.fine_exponent() < 0)
    throw validation_error(std::string(where) + ": fine field has negative fine exponent");
  const TorusLattice unit = unit_lattice_of(fine);
  if (!phi_block.lattice.same_geometry(unit))
    throw validation_error(std::string(where) + ": block field is not on the unit lattice");
  const CubeGrid grid = unit_block_grid(fine);
  if (!(blocks.grid() == grid))
    throw validation_error(std::string(where) + ": region grid does not match unit blocks");
}

// Sum of phi^p over the fine sites of the region, weighted by spacing^d.
double weighted_power_sum(const CubeRegion& region, const LatticeField& phi, int power) {
  const auto mask = region_site_mask(phi.lattice, region);
  const double cell = std::pow(phi.lattice.spacing(), phi.lattice.dimension());
  double acc = 0.0;
  for (std::int64_t i = 0; i < phi.lattice.num_sites(); ++i) {
    if (!mask[std::size_t(i)]) continue;
    double term = 1.0;
    for (int p = 0; p < power; ++p) term *= phi.values[i];
    acc += term;
  }
  return acc * cell;
}

double region_volume(const CubeRegion& blocks) {
  return static_cast<double>(blocks.size());
}

}  // namespace

void CouplingSet::validate() const {
  if (!(lambda > 0.0)) throw validation_error("couplings: lambda must be positive");
  if (!(mubar > 0.0) || mubar > 1.0)
    throw validation_error("couplings: mubar must lie in (0, 1]");
  if (!(a > 0.0)) throw validation_error("couplings: a must be positive");
}

CouplingSet scheduled_couplings(int level, int total_levels, int scale_factor,
                                double lambda_final, double mubar_final, double epsilon,
                                double mu, double a) {
  if (scale_factor < 2) throw validation_error("couplings: scale factor must be >= 2");
  if (level < 0 || level > total_levels)
    throw validation_error("couplings: level must lie in [0, total_levels]");
  if (!(lambda_final > 0.0))
    throw validation_error("couplings: final lambda must be positive");
  if (!(mubar_final > 0.0) || mubar_final > 1.0)
    throw validation_error("couplings: final mubar must lie in (0, 1]");
  CouplingSet c;
  const double down = std::pow(double(scale_factor), -double(total_levels - level));
  c.lambda = down * lambda_final;
  c.mubar = down * down * mubar_final;
  c.epsilon = epsilon;
  c.mu = mu;
  c.a = a;
  c.validate();
  return c;
}

nlohmann::json couplings_to_json(const CouplingSet& c) {
  return nlohmann::json{{"lambda", c.lambda},
                        {"mu", c.mu},
                        {"epsilon", c.epsilon},
                        {"mubar", c.mubar},
                        {"a", c.a}};
}

CouplingSet couplings_from_json(const nlohmann::json& j) {
  CouplingSet c;
  c.lambda = j.at("lambda").get<double>();
  c.mu = j.at("mu").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.mubar = j.at("mubar").get<double>();
  c.a = j.at("a").get<double>();
  return c;
}

nlohmann::json breakdown_to_json(const ActionBreakdown& b) {
  return nlohmann::json{{"average_term", b.average_term},
                        {"gradient_term", b.gradient_term},
                        {"curvature_term", b.curvature_term},
                        {"epsilon_term", b.epsilon_term},
                        {"mu_term", b.mu_term},
                        {"quartic_term", b.quartic_term},
                        {"total", b.total()}};
}

ActionBreakdown bare_action(const LatticeField& phi_unit, const CouplingSet& c) {
  if (phi_unit.lattice.fine_exponent() != 0)
    throw validation_error("bare_action: field must live on a unit lattice");
  ActionBreakdown b;
  b.gradient_term = 0.5 * neumann_gradient_norm(phi_unit);
  const double sum2 = phi_unit.values.squaredNorm();
  double sum4 = 0.0;
  for (std::int64_t i = 0; i < phi_unit.lattice.num_sites(); ++i) {
    const double v = phi_unit.values[i];
    sum4 += v * v * v * v;
  }
  b.curvature_term = 0.5 * c.mubar * sum2;
  b.epsilon_term = c.epsilon * static_cast<double>(phi_unit.lattice.num_sites());
  b.mu_term = 0.5 * c.mu * sum2;
  b.quartic_term = 0.25 * c.lambda * sum4;
  return b;
}

ActionBreakdown action_splus(const CubeRegion& blocks, const LatticeField& phi_block,
                             const LatticeField& phi_fine, const CouplingSet& c) {
  require_block_setup(blocks, phi_block, phi_fine, "action_splus");
  ActionBreakdown b;
  const LatticeField averaged = block_average_k(phi_fine, phi_fine.lattice.fine_exponent());
  double avg = 0.0;
  for (std::int64_t cube : blocks.cubes()) {
    const auto co = blocks.grid().coord(cube);
    const std::int64_t site = phi_block.lattice.index(co);
    const double diff = phi_block.values[site] - averaged.values[site];
    avg += diff * diff;
  }
  b.average_term = 0.5 * c.a * avg;
  const auto fine_mask = region_site_mask(phi_fine.lattice, blocks);
  b.gradient_term = 0.5 * neumann_gradient_norm(phi_fine, fine_mask);
  const double sum2 = weighted_power_sum(blocks, phi_fine, 2);
  b.curvature_term = 0.5 * c.mubar * sum2;
  b.epsilon_term = c.epsilon * region_volume(blocks);
  b.mu_term = 0.5 * c.mu * sum2;
  b.quartic_term = 0.25 * c.lambda * weighted_power_sum(blocks, phi_fine, 4);
  return b;
}

ActionBreakdown action_unrenorm(const CubeRegion& blocks, const LatticeField& phi_block,
                                const LatticeField& phi_fine, const CouplingSet& prev,
                                const CouplingSet& cur) {
  require_block_setup(blocks, phi_block, phi_fine, "action_unrenorm");
  const int d = phi_fine.lattice.dimension();
  const double L = phi_fine.lattice.scale_factor();
  CouplingSet shifted = cur;
  shifted.epsilon = std::pow(L, d) * prev.epsilon;
  shifted.mu = L * L * prev.mu;
  return action_splus(blocks, phi_block, phi_fine, shifted);
}

double potential_value(const CubeRegion& region, const LatticeField& phi, double epsilon,
                       double mu, double lambda) {
  return epsilon * region_volume(region) + 0.5 * mu * weighted_power_sum(region, phi, 2) +
         0.25 * lambda * weighted_power_sum(region, phi, 4);
}

PotentialBoundReport potential_lower_bound(const TorusLattice& lat, const CubeRegion& region,
                                           double epsilon, double mu, double lambda, Rng& rng,
                                           int samples) {
  if (!(lambda > 0.0))
    throw validation_error("potential_lower_bound: lambda must be positive");
  PotentialBoundReport rep;
  rep.bound = -(std::abs(epsilon) + 0.25 * mu * mu / lambda) * region_volume(region);
  rep.min_sampled = std::numeric_limits<double>::infinity();
  const double stationary = mu < 0.0 ? std::sqrt(-mu / lambda) : 0.0;
  std::vector<LatticeField> trial;
  trial.push_back(LatticeField::constant(lat, 0.0));
  trial.push_back(LatticeField::constant(lat, stationary));
  trial.push_back(LatticeField::constant(lat, -stationary));
  for (int s = 0; s < samples; ++s) {
    const double sigma = std::exp(double(s % 5) - 2.0);
    trial.push_back(LatticeField::random_normal(lat, rng, sigma));
  }
  rep.verified = true;
  const double tol = 1e-9 * (1.0 + std::abs(rep.bound));
  for (const auto& phi : trial) {
    const double v = potential_value(region, phi, epsilon, mu, lambda);
    rep.min_sampled = std::min(rep.min_sampled, v);
    if (v < rep.bound - tol) rep.verified = false;
  }
  return rep;
}

QuadraticBoundResult quadratic_lower_bound_constant(const TorusLattice& fine,
                                                    const CubeRegion& blocks, double mu) {
  if (mu < 0.0 || mu > 1.0)
    throw validation_error("quadratic_lower_bound_constant: mu must lie in [0, 1]");
  if (blocks.is_empty())
    throw validation_error("quadratic_lower_bound_constant: empty region");
  const CubeGrid grid = unit_block_grid(fine);
  if (!(blocks.grid() == grid))
    throw validation_error(
        "quadratic_lower_bound_constant: region grid does not match unit blocks");
  const TorusLattice unit = unit_lattice_of(fine);
  const int d = fine.dimension();
  const double eta = fine.spacing();
  const double cell = std::pow(eta, d);
  const double bond_weight = std::pow(eta, d - 2);
  const int block_side = ipow_int(fine.scale_factor(), fine.fine_exponent());
  const double inv_block = 1.0 / std::pow(double(block_side), d);

  // Local indexing of the fine sites and unit sites inside the region.
  const auto fine_mask = region_site_mask(fine, blocks);
  std::vector<std::int64_t> fine_local(std::size_t(fine.num_sites()), -1);
  std::vector<std::int64_t> fine_sites;
  for (std::int64_t i = 0; i < fine.num_sites(); ++i) {
    if (fine_mask[std::size_t(i)]) {
      fine_local[std::size_t(i)] = std::int64_t(fine_sites.size());
      fine_sites.push_back(i);
    }
  }
  const std::int64_t nf = std::int64_t(fine_sites.size());
  const std::int64_t nc = std::int64_t(blocks.size());
  if (nf > 4096)
    throw size_error("quadratic_lower_bound_constant: region has " + std::to_string(nf) +
                     " fine sites, above the dense-solver cap of 4096");

  std::vector<std::int64_t> unit_sites(static_cast<std::size_t>(nc));
  std::vector<std::int64_t> unit_local(std::size_t(unit.num_sites()), -1);
  for (std::int64_t b = 0; b < nc; ++b) {
    const auto co = grid.coord(blocks.cubes()[std::size_t(b)]);
    unit_sites[std::size_t(b)] = unit.index(co);
    unit_local[std::size_t(unit_sites[std::size_t(b)])] = b;
  }

  // Block-mean matrix from fine sites to block centers.
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(nc, nf);
  for (std::int64_t b = 0; b < nc; ++b) {
    for (std::int64_t site : cube_sites(fine, grid, blocks.cubes()[std::size_t(b)]))
      q(b, fine_local[std::size_t(site)]) = inv_block;
  }

  // Fine-field form: Q^T Q + weighted bond Laplacian + mu * cell * identity.
  Eigen::MatrixXd a_mat = q.transpose() * q;
  for (const Bond& bond : lattice_bonds(fine)) {
    const std::int64_t la = fine_local[std::size_t(bond.a)];
    const std::int64_t lb = fine_local[std::size_t(bond.b)];
    if (la < 0 || lb < 0) continue;
    a_mat(la, la) += bond_weight;
    a_mat(lb, lb) += bond_weight;
    a_mat(la, lb) -= bond_weight;
    a_mat(lb, la) -= bond_weight;
  }
  a_mat.diagonal().array() += mu * cell;

  // Numerator after eliminating the fine field: (1/2) Phi^T s Phi.
  const Eigen::MatrixXd solved = a_mat.ldlt().solve(q.transpose());
  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(nc, nc) - q * solved;
  s = 0.5 * (s + s.transpose());

  // Denominator: unit-bond Laplacian inside the region plus mu * identity.
  Eigen::MatrixXd den = Eigen::MatrixXd::Zero(nc, nc);
  for (const Bond& bond : lattice_bonds(unit)) {
    const std::int64_t la = unit_local[std::size_t(bond.a)];
    const std::int64_t lb = unit_local[std::size_t(bond.b)];
    if (la < 0 || lb < 0) continue;
    den(la, la) += 1.0;
    den(lb, lb) += 1.0;
    den(la, lb) -= 1.0;
    den(lb, la) -= 1.0;
  }
  den.diagonal().array() += mu;

  QuadraticBoundResult res;
  if (mu > 0.0) {
    res.quotient_dimension = nc;
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(0.5 * s, den);
    if (solver.info() != Eigen::Success)
      throw std::runtime_error("quadratic_lower_bound_constant: eigensolver failed");
    res.c0 = solver.eigenvalues().minCoeff();
  } else {
    res.restricted = true;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> den_eig(den);
    const double scale = std::max(1.0, den_eig.eigenvalues().cwiseAbs().maxCoeff());
    std::vector<std::int64_t> keep;
    for (std::int64_t i = 0; i < nc; ++i)
      if (den_eig.eigenvalues()[i] > 1e-12 * scale) keep.push_back(i);
    res.quotient_dimension = std::int64_t(keep.size());
    if (keep.empty()) {
      res.c0 = std::numeric_limits<double>::infinity();
      return res;
    }
    Eigen::MatrixXd v(nc, std::int64_t(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) v.col(std::int64_t(i)) = den_eig.eigenvectors().col(keep[i]);
    const Eigen::MatrixXd s_red = v.transpose() * (0.5 * s) * v;
    const Eigen::MatrixXd den_red = v.transpose() * den * v;
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(s_red, den_red);
    if (solver.info() != Eigen::Success)
      throw std::runtime_error("quadratic_lower_bound_constant: eigensolver failed");
    res.c0 = solver.eigenvalues().minCoeff();
  }
  if (!(res.c0 > 0.0))
    throw std::runtime_error(
        "quadratic_lower_bound_constant: computed constant is not positive");
  return res;
}

}  // namespace blockrg
