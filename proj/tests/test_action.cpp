#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest/doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrg/action.hpp"
#include "blockrg/lattice.hpp"
#include "blockrg/region.hpp"
#include "blockrg/rng.hpp"

using namespace blockrg;

namespace {

// Independent sum of all six action terms using forward site-axis differences
// (valid for lattices with more than two sites per side).
double oracle_action_terms(const CubeRegion& blocks, const LatticeField& phi_block,
                           const LatticeField& phi_fine, const CouplingSet& c) {
  const TorusLattice& fine = phi_fine.lattice;
  const int d = fine.dimension();
  const double cell = std::pow(fine.spacing(), d);
  const double bond_w = std::pow(fine.spacing(), d - 2);
  const auto mask = region_site_mask(fine, blocks);

  double avg = 0.0;
  for (std::int64_t cube : blocks.cubes()) {
    const auto sites = cube_sites(fine, blocks.grid(), cube);
    double mean = 0.0;
    for (std::int64_t s : sites) mean += phi_fine.values[s];
    mean /= double(sites.size());
    const std::int64_t y = phi_block.lattice.index(blocks.grid().coord(cube));
    const double diff = phi_block.values[y] - mean;
    avg += diff * diff;
  }

  double grad = 0.0, sum2 = 0.0, sum4 = 0.0;
  for (std::int64_t i = 0; i < fine.num_sites(); ++i) {
    if (!mask[std::size_t(i)]) continue;
    const double v = phi_fine.values[i];
    sum2 += v * v;
    sum4 += v * v * v * v;
    for (int axis = 0; axis < d; ++axis) {
      const std::int64_t j = fine.neighbor(i, axis, 1);
      if (!mask[std::size_t(j)]) continue;
      const double dv = phi_fine.values[j] - v;
      grad += dv * dv;
    }
  }

  return 0.5 * c.a * avg + 0.5 * bond_w * grad + 0.5 * c.mubar * cell * sum2 +
         c.epsilon * double(blocks.size()) + 0.5 * c.mu * cell * sum2 +
         0.25 * c.lambda * cell * sum4;
}

struct JointForms {
  Eigen::MatrixXd num;
  Eigen::MatrixXd den;
};

// Joint quadratic forms in (Phi, phi) over the region, assembled directly.
JointForms oracle_joint_forms(const TorusLattice& fine, const CubeRegion& blocks,
                              double mu) {
  const int d = fine.dimension();
  const double cell = std::pow(fine.spacing(), d);
  const double bond_w = std::pow(fine.spacing(), d - 2);
  TorusLattice unit = fine;
  for (int i = 0; i < fine.fine_exponent(); ++i) unit = unit.coarser();

  const auto mask = region_site_mask(fine, blocks);
  std::vector<std::int64_t> floc(std::size_t(fine.num_sites()), -1);
  std::int64_t nf = 0;
  for (std::int64_t i = 0; i < fine.num_sites(); ++i)
    if (mask[std::size_t(i)]) floc[std::size_t(i)] = nf++;
  const std::int64_t nc = blocks.size();
  std::vector<std::int64_t> uloc(std::size_t(unit.num_sites()), -1);
  for (std::int64_t b = 0; b < nc; ++b)
    uloc[std::size_t(unit.index(blocks.grid().coord(blocks.cubes()[std::size_t(b)])))] = b;

  const std::int64_t n = nc + nf;
  Eigen::MatrixXd num = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd den = Eigen::MatrixXd::Zero(n, n);

  for (std::int64_t b = 0; b < nc; ++b) {
    const auto sites = cube_sites(fine, blocks.grid(), blocks.cubes()[std::size_t(b)]);
    const double w = 1.0 / double(sites.size());
    // (1/2)(Phi_b - mean phi)^2 expanded.
    num(b, b) += 0.5;
    for (std::int64_t s : sites) {
      const std::int64_t x = nc + floc[std::size_t(s)];
      num(b, x) -= 0.5 * w;
      num(x, b) -= 0.5 * w;
      for (std::int64_t t : sites) {
        const std::int64_t y = nc + floc[std::size_t(t)];
        num(x, y) += 0.5 * w * w;
      }
    }
  }
  for (std::int64_t i = 0; i < fine.num_sites(); ++i) {
    if (!mask[std::size_t(i)]) continue;
    const std::int64_t x = nc + floc[std::size_t(i)];
    num(x, x) += 0.5 * mu * cell;
    for (int axis = 0; axis < d; ++axis) {
      const std::int64_t j = fine.neighbor(i, axis, 1);
      if (!mask[std::size_t(j)]) continue;
      const std::int64_t y = nc + floc[std::size_t(j)];
      num(x, x) += 0.5 * bond_w;
      num(y, y) += 0.5 * bond_w;
      num(x, y) -= 0.5 * bond_w;
      num(y, x) -= 0.5 * bond_w;
    }
  }
  for (std::int64_t i = 0; i < unit.num_sites(); ++i) {
    if (uloc[std::size_t(i)] < 0) continue;
    const std::int64_t b = uloc[std::size_t(i)];
    den(b, b) += mu;
    for (int axis = 0; axis < d; ++axis) {
      const std::int64_t j = unit.neighbor(i, axis, 1);
      if (uloc[std::size_t(j)] < 0) continue;
      const std::int64_t b2 = uloc[std::size_t(j)];
      den(b, b) += 1.0;
      den(b2, b2) += 1.0;
      den(b, b2) -= 1.0;
      den(b2, b) -= 1.0;
    }
  }
  return {num, den};
}

// Largest c with num - c*den positive semidefinite, by bisection. Returns the
// cap when every tested c is feasible.
double oracle_c0_bisect(const TorusLattice& fine, const CubeRegion& blocks, double mu,
                        double cap = 1e6) {
  const auto forms = oracle_joint_forms(fine, blocks, mu);
  const auto feasible = [&](double c) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(forms.num - c * forms.den);
    return es.eigenvalues().minCoeff() >= -1e-11 * (1.0 + c);
  };
  double lo = 0.0, hi = 1e-3;
  while (hi < cap && feasible(hi)) {
    lo = hi;
    hi *= 2.0;
  }
  if (hi >= cap) return cap;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (feasible(mid) ? lo : hi) = mid;
  }
  return lo;
}

double eval_quotient_forms(const JointForms& forms, const Eigen::VectorXd& z, double* den) {
  *den = z.dot(forms.den * z);
  return z.dot(forms.num * z);
}

CubeRegion random_block_subset(Rng& rng, const CubeGrid& grid) {
  std::vector<std::int64_t> cubes;
  for (std::int64_t c = 0; c < grid.num_cubes(); ++c)
    if (rng.below(3) == 0) cubes.push_back(c);
  if (cubes.empty()) cubes.push_back(std::int64_t(rng.below(grid.num_cubes())));
  return CubeRegion(grid, cubes);
}

}  // namespace

TEST_CASE("coupling schedule and validation") {
  const CouplingSet c1 = scheduled_couplings(1, 3, 2, 0.1, 0.5, 0.01, -0.02, 2.0);
  CHECK(c1.lambda == doctest::Approx(0.1 / 4.0));
  CHECK(c1.mubar == doctest::Approx(0.5 / 16.0));
  CHECK(c1.epsilon == doctest::Approx(0.01));
  CHECK(c1.mu == doctest::Approx(-0.02));
  CHECK(c1.a == doctest::Approx(2.0));
  const CouplingSet top = scheduled_couplings(3, 3, 2, 0.1, 0.5, 0.0, 0.0, 1.0);
  CHECK(top.lambda == doctest::Approx(0.1));
  CHECK(top.mubar == doctest::Approx(0.5));

  CHECK_THROWS_AS(scheduled_couplings(1, 3, 2, 0.0, 0.5, 0.0, 0.0, 1.0), validation_error);
  CHECK_THROWS_AS(scheduled_couplings(1, 3, 2, 0.1, 1.5, 0.0, 0.0, 1.0), validation_error);
  CHECK_THROWS_AS(scheduled_couplings(1, 3, 2, 0.1, 0.5, 0.0, 0.0, 0.0), validation_error);
  CHECK_THROWS_AS(scheduled_couplings(4, 3, 2, 0.1, 0.5, 0.0, 0.0, 1.0), validation_error);

  const auto j = couplings_to_json(c1);
  const CouplingSet back = couplings_from_json(j);
  CHECK(back.lambda == c1.lambda);
  CHECK(back.mubar == c1.mubar);
  CHECK(back.epsilon == c1.epsilon);
  CHECK(back.mu == c1.mu);
  CHECK(back.a == c1.a);
}

TEST_CASE("bare action closed forms and oracle") {
  const auto lat = build_torus(1, 2, 2, 0);
  CouplingSet c;
  SUBCASE("zero field with zero epsilon gives zero") {
    c.lambda = 3.0;
    c.mu = -1.0;
    c.mubar = 0.5;
    CHECK(bare_action(LatticeField::constant(lat, 0.0), c).total() == 0.0);
  }
  SUBCASE("pure quartic on the constant field") {
    c.lambda = 4.0;
    CHECK(bare_action(LatticeField::constant(lat, 1.0), c).total() ==
          doctest::Approx(4.0));
  }
  SUBCASE("random field against the independent term sums") {
    Rng rng(11);
    for (int d : {1, 2}) {
      const auto ul = build_torus(d, 2, 2, 0);
      const CubeGrid grid = grid_for_lattice(ul, 1);
      const CubeRegion whole = CubeRegion::full(grid);
      for (int t = 0; t < 10; ++t) {
        const LatticeField f = LatticeField::random_normal(ul, rng);
        CouplingSet cc;
        cc.lambda = 0.3;
        cc.mu = -0.2;
        cc.epsilon = 0.05;
        cc.mubar = 0.7;
        const double direct = bare_action(f, cc).total();
        // The unit lattice is its own fine lattice with unit blocks.
        const double oracle = oracle_action_terms(whole, f, f, [&] {
          CouplingSet shifted = cc;
          shifted.a = 1.0;
          return shifted;
        }());
        // The oracle's averaging term vanishes because each block mean is the
        // site value itself.
        CHECK(direct == doctest::Approx(oracle).epsilon(1e-12));
      }
    }
  }
  SUBCASE("non-unit lattice is rejected") {
    const auto fine = build_torus(1, 2, 2, 1);
    CouplingSet cc;
    CHECK_THROWS_AS(bare_action(LatticeField::constant(fine, 0.0), cc), validation_error);
  }
}

TEST_CASE("starred action closed forms and oracle") {
  const auto fine = build_torus(1, 2, 2, 1);
  const auto unit = build_torus(1, 2, 2, 0);
  const CubeGrid grid = grid_for_lattice(fine, 2);
  const CubeRegion whole = CubeRegion::full(grid);
  CouplingSet c;
  c.lambda = 0.4;
  c.mu = 0.3;
  c.epsilon = 0.2;
  c.mubar = 0.1;
  c.a = 1.5;

  SUBCASE("all-zero fields with zero epsilon give zero") {
    CouplingSet cz = c;
    cz.epsilon = 0.0;
    CHECK(action_splus(whole, LatticeField::constant(unit, 0.0),
                       LatticeField::constant(fine, 0.0), cz)
              .total() == 0.0);
  }
  SUBCASE("matched averages and a flat field kill the quadratic part") {
    CouplingSet cz = c;
    cz.mubar = 0.0;
    const LatticeField phi = LatticeField::constant(fine, 2.0);
    const LatticeField block = block_average_k(phi, 1);
    const ActionBreakdown b = action_splus(whole, block, phi, cz);
    CHECK(b.starred() == doctest::Approx(0.0));
    CHECK(b.quartic_term == doctest::Approx(0.25 * 0.4 * 16.0 * 4.0));
  }
  SUBCASE("random fields against the independent term sums") {
    Rng rng(12);
    for (int t = 0; t < 20; ++t) {
      const LatticeField phi = LatticeField::random_normal(fine, rng);
      const LatticeField block = LatticeField::random_normal(unit, rng);
      const CubeRegion region = random_block_subset(rng, grid);
      const double direct = action_splus(region, block, phi, c).total();
      const double oracle = oracle_action_terms(region, block, phi, c);
      CHECK(direct == doctest::Approx(oracle).epsilon(1e-12));
    }
  }
  SUBCASE("mismatched block lattice is rejected") {
    CHECK_THROWS_AS(action_splus(whole, LatticeField::constant(fine, 0.0),
                                 LatticeField::constant(fine, 0.0), c),
                    validation_error);
  }
}

TEST_CASE("action evaluations are additive over separated regions") {
  const auto fine = build_torus(2, 2, 2, 1);
  const auto unit = build_torus(2, 2, 2, 0);
  const CubeGrid grid = grid_for_lattice(fine, 2);
  const CubeRegion x(grid, {grid.index({0, 0, 0}), grid.index({0, 1, 0})});
  const CubeRegion y(grid, {grid.index({2, 2, 0}), grid.index({2, 3, 0})});
  REQUIRE(enlarge(x, 1).intersect(y).is_empty());
  CouplingSet c;
  c.lambda = 0.2;
  c.mu = -0.1;
  c.epsilon = 0.3;
  c.mubar = 0.6;
  c.a = 1.2;
  Rng rng(13);
  for (int t = 0; t < 10; ++t) {
    const LatticeField phi = LatticeField::random_normal(fine, rng);
    const LatticeField block = LatticeField::random_normal(unit, rng);
    const double whole = action_splus(x.unite(y), block, phi, c).total();
    const double parts =
        action_splus(x, block, phi, c).total() + action_splus(y, block, phi, c).total();
    CHECK(whole == doctest::Approx(parts).epsilon(1e-12));
  }
}

TEST_CASE("unrenormalized action rescales the previous counterterms") {
  const auto fine = build_torus(1, 2, 2, 1);
  const auto unit = build_torus(1, 2, 2, 0);
  const CubeGrid grid = grid_for_lattice(fine, 2);
  CouplingSet prev;
  prev.epsilon = 0.07;
  prev.mu = -0.3;
  CouplingSet cur;
  cur.lambda = 0.4;
  cur.mubar = 0.25;
  cur.a = 1.1;

  SUBCASE("empty region gives zero") {
    const CubeRegion none = CubeRegion::empty(grid);
    CHECK(action_unrenorm(none, LatticeField::constant(unit, 0.0),
                          LatticeField::constant(fine, 0.0), prev, cur)
              .total() == 0.0);
  }
  SUBCASE("zero fields leave only the scaled volume counterterm") {
    const CubeRegion delta(grid, {0, 1, 3});
    const double v = action_unrenorm(delta, LatticeField::constant(unit, 0.0),
                                     LatticeField::constant(fine, 0.0), prev, cur)
                         .total();
    CHECK(v == doctest::Approx(2.0 * prev.epsilon * 3.0).epsilon(1e-12));
  }
  SUBCASE("random fields against the independent term sums with scaled slots") {
    Rng rng(14);
    for (int t = 0; t < 20; ++t) {
      const LatticeField phi = LatticeField::random_normal(fine, rng);
      const LatticeField block = LatticeField::random_normal(unit, rng);
      const CubeRegion region = random_block_subset(rng, grid);
      const double direct = action_unrenorm(region, block, phi, prev, cur).total();
      CouplingSet scaled = cur;
      scaled.epsilon = 2.0 * prev.epsilon;
      scaled.mu = 4.0 * prev.mu;
      const double oracle = oracle_action_terms(region, block, phi, scaled);
      CHECK(direct == doctest::Approx(oracle).epsilon(1e-12));
    }
  }
}

TEST_CASE("potential lower bound matches the per-site minimum") {
  Rng rng(15);
  SUBCASE("single site with negative mass attains the bound") {
    const auto lat = build_torus(1, 2, 1, 0);
    const CubeGrid grid = grid_for_lattice(lat, 1);
    const CubeRegion site(grid, {0});
    const auto rep = potential_lower_bound(lat, site, 0.0, -2.0, 1.0, rng);
    CHECK(rep.bound == doctest::Approx(-1.0));
    CHECK(rep.min_sampled == doctest::Approx(-1.0));
    CHECK(rep.verified);
  }
  SUBCASE("nonnegative mass gives a zero bound") {
    const auto lat = build_torus(1, 2, 2, 0);
    const CubeRegion whole = CubeRegion::full(grid_for_lattice(lat, 1));
    const auto rep = potential_lower_bound(lat, whole, 0.0, 0.5, 0.3, rng);
    CHECK(rep.bound <= 0.0);
    CHECK(rep.min_sampled >= std::min(0.0, rep.bound));
    CHECK(rep.verified);
  }
  SUBCASE("random parameters never break the bound") {
    const auto lat = build_torus(2, 2, 2, 1);
    const CubeGrid grid = grid_for_lattice(lat, 2);
    for (int t = 0; t < 15; ++t) {
      const double eps = rng.normal();
      const double mu = 2.0 * rng.normal();
      const double lambda = 0.05 + 2.0 * rng.uniform();
      const CubeRegion region = random_block_subset(rng, grid);
      const auto rep = potential_lower_bound(lat, region, eps, mu, lambda, rng);
      CHECK(rep.verified);
      CHECK(rep.min_sampled >= rep.bound - 1e-9 * (1.0 + std::abs(rep.bound)));
    }
  }
  SUBCASE("tight when epsilon vanishes") {
    const auto lat = build_torus(1, 2, 1, 0);
    const CubeGrid grid = grid_for_lattice(lat, 1);
    const CubeRegion site(grid, {0});
    const double mu = -1.3, lambda = 0.7;
    double grid_min = std::numeric_limits<double>::infinity();
    for (double x = -3.0; x <= 3.0; x += 1e-3) {
      const LatticeField f = LatticeField::constant(lat, x);
      grid_min = std::min(grid_min, potential_value(site, f, 0.0, mu, lambda));
    }
    CHECK(grid_min == doctest::Approx(-0.25 * mu * mu / lambda).epsilon(1e-5));
  }
  SUBCASE("nonpositive quartic coupling is rejected") {
    const auto lat = build_torus(1, 2, 1, 0);
    const CubeRegion site(grid_for_lattice(lat, 1), {0});
    CHECK_THROWS_AS(potential_lower_bound(lat, site, 0.0, 1.0, 0.0, rng),
                    validation_error);
  }
}

TEST_CASE("quadratic lower bound constant against the bisection oracle") {
  SUBCASE("full line of blocks with unit mass") {
    const auto fine = build_torus(1, 2, 2, 1);
    const CubeRegion whole = CubeRegion::full(grid_for_lattice(fine, 2));
    const auto res = quadratic_lower_bound_constant(fine, whole, 1.0);
    CHECK(res.c0 > 0.0);
    CHECK_FALSE(res.restricted);
    const double oracle = oracle_c0_bisect(fine, whole, 1.0);
    CHECK(res.c0 == doctest::Approx(oracle).epsilon(1e-7));
  }
  SUBCASE("massless case projects out the constants") {
    const auto fine = build_torus(1, 2, 2, 1);
    const CubeRegion whole = CubeRegion::full(grid_for_lattice(fine, 2));
    const auto res = quadratic_lower_bound_constant(fine, whole, 0.0);
    CHECK(res.restricted);
    CHECK(res.quotient_dimension == 3);
    CHECK(res.c0 > 0.0);
    const double oracle = oracle_c0_bisect(fine, whole, 0.0);
    CHECK(res.c0 == doctest::Approx(oracle).epsilon(1e-7));
  }
  SUBCASE("isolated block with zero mass has no constraint") {
    const auto fine = build_torus(1, 2, 2, 1);
    const CubeRegion single(grid_for_lattice(fine, 2), {1});
    const auto res = quadratic_lower_bound_constant(fine, single, 0.0);
    CHECK(std::isinf(res.c0));
    CHECK(res.quotient_dimension == 0);
  }
  SUBCASE("two dimensional block patch") {
    const auto fine = build_torus(2, 2, 2, 1);
    const CubeGrid grid = grid_for_lattice(fine, 2);
    const CubeRegion patch(grid, {grid.index({0, 0, 0}), grid.index({0, 1, 0}),
                                  grid.index({1, 0, 0}), grid.index({1, 1, 0}),
                                  grid.index({2, 1, 0})});
    for (double mu : {0.1, 1.0}) {
      const auto res = quadratic_lower_bound_constant(fine, patch, mu);
      CHECK(res.c0 > 0.0);
      const double oracle = oracle_c0_bisect(fine, patch, mu);
      CHECK(res.c0 == doctest::Approx(oracle).epsilon(1e-7));
    }
  }
  SUBCASE("mu outside the unit interval is rejected") {
    const auto fine = build_torus(1, 2, 2, 1);
    const CubeRegion whole = CubeRegion::full(grid_for_lattice(fine, 2));
    CHECK_THROWS_AS(quadratic_lower_bound_constant(fine, whole, -0.1), validation_error);
    CHECK_THROWS_AS(quadratic_lower_bound_constant(fine, whole, 1.1), validation_error);
  }
}

TEST_CASE("quadratic bound holds on random fields across the test matrix") {
  Rng rng(16);
  for (int d : {1, 2}) {
    for (int k : {1, 2}) {
      const auto fine = build_torus(d, 2, 2, k);
      const CubeGrid grid = grid_for_lattice(fine, std::int64_t(1) << k);
      for (double mu : {0.0, 0.1, 1.0}) {
        const CubeRegion region = random_block_subset(rng, grid);
        const auto res = quadratic_lower_bound_constant(fine, region, mu);
        WARN_MESSAGE(res.c0 >= 0.01, "small quotient constant ", res.c0, " at d=", d,
                     " k=", k, " mu=", mu);
        const auto forms = oracle_joint_forms(fine, region, mu);
        const std::int64_t n = forms.num.rows();
        int checked = 0;
        for (int t = 0; t < 1000; ++t) {
          Eigen::VectorXd z(n);
          for (std::int64_t i = 0; i < n; ++i) z[i] = rng.normal();
          double den = 0.0;
          const double num = eval_quotient_forms(forms, z, &den);
          const double tol = 1e-10 * (1.0 + std::abs(num) + std::abs(den));
          if (std::isinf(res.c0)) {
            CHECK(num >= -tol);
          } else {
            CHECK(num + tol >= res.c0 * den);
          }
          ++checked;
        }
        CHECK(checked == 1000);
      }
    }
  }
}
