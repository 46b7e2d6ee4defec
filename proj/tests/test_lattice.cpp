#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest/doctest.h>

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "blockrg/lattice.hpp"
#include "blockrg/quadrature.hpp"
#include "blockrg/rng.hpp"

using namespace blockrg;

TEST_CASE("torus construction rejects bad parameters") {
  CHECK_THROWS_AS(build_torus(0, 2, 2, 0), validation_error);
  CHECK_THROWS_AS(build_torus(4, 2, 2, 0), validation_error);
  CHECK_THROWS_AS(build_torus(2, 1, 2, 0), validation_error);
  CHECK_THROWS_AS(build_torus(1, 2, 0, 0), validation_error);
  // 2^30 sites in d=3 blows the default cap.
  CHECK_THROWS_AS(build_torus(3, 2, 10, 0), size_error);
}

TEST_CASE("site enumeration is lexicographic with the first axis slowest") {
  const auto lat = build_torus(2, 2, 2, 0);
  REQUIRE(lat.sites_per_side() == 4);
  CHECK(lat.index({0, 0, 0}) == 0);
  CHECK(lat.index({0, 3, 0}) == 3);
  CHECK(lat.index({1, 2, 0}) == 6);
  CHECK(lat.index({-1, 4, 0}) == lat.index({3, 0, 0}));
  const auto c = lat.coord(6);
  CHECK(c[0] == 1);
  CHECK(c[1] == 2);
}

TEST_CASE("neighbor steps wrap around the torus") {
  const auto lat = build_torus(1, 2, 2, 0);
  CHECK(lat.neighbor(3, 0, 1) == 0);
  CHECK(lat.neighbor(0, 0, -1) == 3);
}

TEST_CASE("block average takes plain block means") {
  SUBCASE("one dimension") {
    const auto fine = build_torus(1, 2, 2, 0);
    LatticeField f(fine);
    f.values << 1.0, 3.0, -2.0, 6.0;
    const LatticeField coarse = block_average(f);
    REQUIRE(coarse.lattice.num_sites() == 2);
    CHECK(coarse.values[0] == doctest::Approx(2.0));
    CHECK(coarse.values[1] == doctest::Approx(2.0));
  }
  SUBCASE("two dimensions, hand-computed 2x2 blocks") {
    const auto fine = build_torus(2, 2, 2, 0);
    LatticeField f(fine);
    for (std::int64_t i = 0; i < 16; ++i) f.values[i] = double(i);
    const LatticeField coarse = block_average(f);
    // Block at (0,0) holds sites (0,0),(0,1),(1,0),(1,1) = 0,1,4,5.
    CHECK(coarse.values[0] == doctest::Approx((0.0 + 1.0 + 4.0 + 5.0) / 4));
    // Block at (1,1) holds sites 10,11,14,15.
    CHECK(coarse.values[3] == doctest::Approx((10.0 + 11.0 + 14.0 + 15.0) / 4));
  }
}

TEST_CASE("iterated block average matches the k-step operator") {
  const auto fine = build_torus(1, 2, 3, 0);
  Rng rng(11);
  LatticeField f = LatticeField::random_normal(fine, rng);
  const LatticeField two_steps = block_average(block_average(f));
  const LatticeField direct = block_average_k(f, 2);
  REQUIRE(two_steps.values.size() == direct.values.size());
  for (std::int64_t i = 0; i < direct.values.size(); ++i)
    CHECK(two_steps.values[i] == doctest::Approx(direct.values[i]));
}

TEST_CASE("averaging adjoint satisfies the pairing identity") {
  for (int d : {1, 2}) {
    const auto fine = build_torus(d, 2, 2, 0);
    Rng rng(5 + d);
    LatticeField phi = LatticeField::random_normal(fine, rng);
    const LatticeField qphi = block_average(phi);
    LatticeField psi = LatticeField::random_normal(qphi.lattice, rng);
    const LatticeField qt = adjoint_average(psi, fine);
    const double lhs = qphi.values.dot(psi.values);
    const double rhs = phi.values.dot(qt.values);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("rescale directions invert each other") {
  const auto lat = build_torus(2, 2, 2, 0);
  Rng rng(3);
  LatticeField f = LatticeField::random_normal(lat, rng);
  const LatticeField down = rescale_field(f, RescaleDirection::down);
  CHECK(down.lattice.fine_exponent() == -1);
  CHECK(down.lattice.num_sites() == lat.num_sites());
  const LatticeField back = rescale_field(down, RescaleDirection::up);
  CHECK(back.lattice.same_geometry(lat));
  for (std::int64_t i = 0; i < f.values.size(); ++i)
    CHECK(back.values[i] == doctest::Approx(f.values[i]).epsilon(1e-14));
}

TEST_CASE("gradient norm is invariant under rescaling") {
  for (int d : {1, 2, 3}) {
    const auto lat = build_torus(d, 2, 2, 0);
    Rng rng(17 * d);
    LatticeField f = LatticeField::random_normal(lat, rng);
    const double base = neumann_gradient_norm(f);
    const double after_down =
        neumann_gradient_norm(rescale_field(f, RescaleDirection::down));
    const double after_up =
        neumann_gradient_norm(rescale_field(f, RescaleDirection::up));
    CHECK(after_down == doctest::Approx(base).epsilon(1e-12));
    CHECK(after_up == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("bond lists deduplicate the two-site wrap") {
  const auto two = build_torus(1, 2, 1, 0);
  CHECK(lattice_bonds(two).size() == 1);
  const auto four = build_torus(1, 2, 2, 0);
  CHECK(lattice_bonds(four).size() == 4);
  const auto square = build_torus(2, 2, 1, 0);
  CHECK(lattice_bonds(square).size() == 4);
  // No duplicate unordered pairs anywhere.
  const auto lat = build_torus(2, 2, 2, 0);
  std::set<std::pair<std::int64_t, std::int64_t>> seen;
  for (const auto& b : lattice_bonds(lat)) {
    const auto key = std::minmax(b.a, b.b);
    CHECK(seen.insert({key.first, key.second}).second);
  }
  CHECK(seen.size() == 32);
}

TEST_CASE("gradient norm on the two-site chain") {
  const auto lat = build_torus(1, 2, 1, 0);
  LatticeField f(lat);
  f.values << 0.0, 1.0;
  CHECK(neumann_gradient_norm(f) == doctest::Approx(1.0));
}

TEST_CASE("masked gradient norm keeps only interior bonds") {
  const auto lat = build_torus(1, 2, 2, 0);
  LatticeField f(lat);
  f.values << 0.0, 2.0, 5.0, 9.0;
  std::vector<std::uint8_t> mask{1, 1, 1, 0};
  // Surviving bonds: (0,1) and (1,2).
  CHECK(neumann_gradient_norm(f, mask) == doctest::Approx(4.0 + 9.0));
  std::vector<std::uint8_t> all(4, 1);
  const double full = neumann_gradient_norm(f, all);
  CHECK(full == doctest::Approx(neumann_gradient_norm(f)));
}

TEST_CASE("field json round trip preserves geometry and values") {
  const auto base = build_torus(2, 3, 1, 0);
  Rng rng(9);
  const LatticeField f =
      rescale_field(LatticeField::random_normal(base, rng), RescaleDirection::down);
  const auto lat = f.lattice;
  const auto j = field_to_json(f);
  const LatticeField g = field_from_json(j);
  CHECK(g.lattice.same_geometry(lat));
  CHECK(g.lattice.fine_exponent() == -1);
  for (std::int64_t i = 0; i < f.values.size(); ++i)
    CHECK(g.values[i] == f.values[i]);
}

TEST_CASE("hermite rule reproduces gaussian moments exactly") {
  const auto rule = gauss_hermite(8);
  double mass = 0.0, second = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double x = rule.nodes[i];
    const double w = rule.weights[i] * std::exp(-x * x);
    mass += w;
    second += w * x * x;
  }
  const double root_pi = std::sqrt(M_PI);
  CHECK(mass == doctest::Approx(root_pi).epsilon(1e-13));
  CHECK(second == doctest::Approx(root_pi / 2).epsilon(1e-13));
}

TEST_CASE("unit interval rule integrates monomials exactly") {
  const auto rule = gauss_legendre01(6);
  for (int k = 0; k <= 11; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i)
      acc += rule.weights[i] * std::pow(rule.nodes[i], k);
    CHECK(acc == doctest::Approx(1.0 / (k + 1)).epsilon(1e-12));
  }
}

TEST_CASE("density integration recovers closed-form gaussians") {
  QuadratureSpec spec;
  spec.nodes = 20;
  SUBCASE("normalized two-site gaussian") {
    const auto rho = [](const Vec& x) {
      return std::exp(-0.5 * x.squaredNorm()) / (2.0 * M_PI);
    };
    const auto res = integrate_density(rho, 2, spec);
    CHECK(res.value == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(res.error_estimate < 1e-9);
  }
  SUBCASE("quartic density against the gamma-function value") {
    const auto rho = [](const Vec& x) { return std::exp(-std::pow(x[0], 4)); };
    QuadratureSpec wide;
    wide.nodes = 80;
    const auto res = integrate_density(rho, 1, wide);
    // Integral over the line equals Gamma(1/4)/2.
    CHECK(res.value == doctest::Approx(1.8128049541109541).epsilon(1e-9));
  }
  SUBCASE("site cap is enforced") {
    const auto rho = [](const Vec&) { return 1.0; };
    CHECK_THROWS_AS(integrate_density(rho, 9, spec), size_error);
  }
}

TEST_CASE("generator streams are deterministic per seed") {
  Rng a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && (va == vb);
    any_diff = any_diff || (va != vc);
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("normal samples have sane first moments") {
  Rng rng(2024);
  double sum = 0.0, sumsq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sumsq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(sumsq / n == doctest::Approx(1.0).epsilon(0.05));
}
