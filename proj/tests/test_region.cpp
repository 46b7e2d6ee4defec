#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest/doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrg/hierarchy.hpp"
#include "blockrg/region.hpp"
#include "blockrg/rng.hpp"

using namespace blockrg;

namespace {

// Independent shell oracle: scan every cube of the grid and keep those within
// the Chebyshev radius of some seed cube.
CubeRegion brute_ball(const CubeRegion& x, std::int64_t layers) {
  std::vector<std::int64_t> out;
  for (std::int64_t c = 0; c < x.grid().num_cubes(); ++c) {
    for (const auto seed : x.cubes()) {
      if (x.grid().chebyshev(c, seed) <= layers) {
        out.push_back(c);
        break;
      }
    }
  }
  return CubeRegion(x.grid(), std::move(out));
}

// Pairwise union-find oracle for connectivity.
std::vector<std::vector<std::int64_t>> uf_components(const CubeRegion& x) {
  const auto& cubes = x.cubes();
  std::vector<std::size_t> parent(cubes.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  const auto find = [&parent](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < cubes.size(); ++i)
    for (std::size_t j = i + 1; j < cubes.size(); ++j)
      if (x.grid().chebyshev(cubes[i], cubes[j]) <= 1)
        parent[find(i)] = find(j);
  std::vector<std::vector<std::int64_t>> comps;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    if (find(i) != i) continue;
    std::vector<std::int64_t> comp;
    for (std::size_t j = 0; j < cubes.size(); ++j)
      if (find(j) == i) comp.push_back(cubes[j]);
    comps.push_back(std::move(comp));
  }
  std::sort(comps.begin(), comps.end());
  return comps;
}

// Exhaustive spanning-tree oracle via Prufer sequences, n <= 7.
double prufer_min_tree(const std::vector<std::vector<double>>& w) {
  const std::size_t n = w.size();
  if (n <= 1) return 0.0;
  if (n == 2) return w[0][1];
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> seq(n - 2, 0);
  while (true) {
    std::vector<int> degree(n, 1);
    for (const auto s : seq) degree[s] += 1;
    std::vector<std::size_t> sq(seq.begin(), seq.end());
    double total = 0.0;
    std::vector<char> done(n, 0);
    for (std::size_t step = 0; step < n - 2; ++step) {
      std::size_t leaf = n;
      for (std::size_t v = 0; v < n; ++v) {
        if (!done[v] && degree[v] == 1) {
          leaf = v;
          break;
        }
      }
      total += w[leaf][sq[step]];
      done[leaf] = 1;
      degree[leaf] -= 1;
      degree[sq[step]] -= 1;
    }
    std::size_t last_a = n, last_b = n;
    for (std::size_t v = 0; v < n; ++v) {
      if (!done[v] && degree[v] == 1) {
        if (last_a == n)
          last_a = v;
        else
          last_b = v;
      }
    }
    total += w[last_a][last_b];
    best = std::min(best, total);
    std::size_t pos = 0;
    while (pos < seq.size() && seq[pos] == n - 1) seq[pos++] = 0;
    if (pos == seq.size()) break;
    seq[pos] += 1;
  }
  return best;
}

double oracle_tree_distance(const CubeRegion& x) {
  const auto& cubes = x.cubes();
  const std::size_t n = cubes.size();
  std::vector<std::vector<double>> w(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      w[i][j] = double(x.grid().chebyshev(cubes[i], cubes[j]));
  return prufer_min_tree(w);
}

double oracle_tree_distance_mod(const CubeRegion& x,
                                const CubeRegion& omega_c) {
  const CubeRegion inside = x.subtract(omega_c);
  if (inside.is_empty()) return 0.0;
  const auto holes = components(omega_c);
  const auto& cubes = inside.cubes();
  const std::size_t n = cubes.size();
  const std::size_t m = holes.size();
  const auto dist_cube_hole = [&](std::int64_t cube, const CubeRegion& hole) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto h : hole.cubes())
      best = std::min(best, double(x.grid().chebyshev(cube, h)));
    return best;
  };
  const auto dist_hole_hole = [&](const CubeRegion& a, const CubeRegion& b) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto ca : a.cubes())
      for (const auto cb : b.cubes())
        best = std::min(best, double(x.grid().chebyshev(ca, cb)));
    return best;
  };
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    std::vector<std::size_t> chosen;
    for (std::size_t h = 0; h < m; ++h)
      if (mask & (std::uint64_t{1} << h)) chosen.push_back(h);
    const std::size_t total = n + chosen.size();
    if (total > 7) continue;
    std::vector<std::vector<double>> w(total, std::vector<double>(total, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        w[i][j] = double(x.grid().chebyshev(cubes[i], cubes[j]));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < chosen.size(); ++a)
        w[i][n + a] = w[n + a][i] = dist_cube_hole(cubes[i], holes[chosen[a]]);
    for (std::size_t a = 0; a < chosen.size(); ++a)
      for (std::size_t b = 0; b < chosen.size(); ++b)
        if (a != b) w[n + a][n + b] = dist_hole_hole(holes[chosen[a]], holes[chosen[b]]);
    best = std::min(best, prufer_min_tree(w));
  }
  return best;
}

CubeRegion random_region(Rng& rng, const CubeGrid& grid, int count) {
  std::vector<std::int64_t> cubes;
  for (int i = 0; i < count; ++i)
    cubes.push_back(std::int64_t(rng.below(std::uint64_t(grid.num_cubes()))));
  return CubeRegion(grid, std::move(cubes));
}

CubeRegion random_connected(Rng& rng, const CubeGrid& grid, int count) {
  std::vector<std::int64_t> cubes{
      std::int64_t(rng.below(std::uint64_t(grid.num_cubes())))};
  while (std::int64_t(cubes.size()) <
         std::min<std::int64_t>(count, grid.num_cubes())) {
    const auto seed = cubes[rng.below(cubes.size())];
    const auto nbs = enlarge(CubeRegion(grid, {seed}), 1).cubes();
    cubes.push_back(nbs[rng.below(nbs.size())]);
    std::sort(cubes.begin(), cubes.end());
    cubes.erase(std::unique(cubes.begin(), cubes.end()), cubes.end());
  }
  return CubeRegion(grid, std::move(cubes));
}

}  // namespace

TEST_CASE("enlarge grows chebyshev shells") {
  const CubeGrid line{1, 8};
  const CubeRegion one(line, {3});
  CHECK(enlarge(one, 0) == one);
  CHECK(enlarge(one, 1).cubes() == std::vector<std::int64_t>{2, 3, 4});
  const CubeGrid plane{2, 8};
  const CubeRegion dot(plane, {0});
  CHECK(enlarge(dot, 2).size() == 25);
  // Wrap: radius 2 on a 4-cube axis covers everything.
  const CubeGrid tiny{1, 4};
  CHECK(enlarge(CubeRegion(tiny, {1}), 2).is_full());
  CHECK(enlarge(CubeRegion::empty(line), 3).is_empty());
}

TEST_CASE("enlarge agrees with the brute shell oracle") {
  Rng rng(71);
  for (int trial = 0; trial < 40; ++trial) {
    const int d = 1 + int(rng.below(3));
    const CubeGrid grid{d, d == 3 ? 4 : 8};
    const CubeRegion x = random_region(rng, grid, 1 + int(rng.below(4)));
    const auto layers = std::int64_t(rng.below(3));
    CHECK(enlarge(x, layers) == brute_ball(x, layers));
  }
}

TEST_CASE("enlarge composes additively and distributes over unions") {
  Rng rng(72);
  const CubeGrid grid{2, 16};
  for (int trial = 0; trial < 20; ++trial) {
    const CubeRegion x = random_region(rng, grid, 3);
    const CubeRegion y = random_region(rng, grid, 2);
    CHECK(enlarge(enlarge(x, 2), 3) == enlarge(x, 5));
    CHECK(enlarge(x.unite(y), 2) == enlarge(x, 2).unite(enlarge(y, 2)));
  }
}

TEST_CASE("shrink is the complement dual of enlarge") {
  const CubeGrid line{1, 8};
  CHECK(shrink(CubeRegion::full(line), 3).is_full());
  CHECK(shrink(CubeRegion(line, {2, 3, 4}), 1).cubes() ==
        std::vector<std::int64_t>{3});
  Rng rng(73);
  for (int trial = 0; trial < 40; ++trial) {
    const int d = 1 + int(rng.below(2));
    const CubeGrid grid{d, 8};
    const CubeRegion x = random_region(rng, grid, 1 + int(rng.below(8)));
    const auto layers = std::int64_t(rng.below(3));
    CHECK(shrink(x, layers) ==
          enlarge(x.complement(), layers).complement());
  }
}

TEST_CASE("components use closure contact and match union-find") {
  const CubeGrid plane{2, 8};
  // Corner contact joins diagonal cubes.
  const CubeRegion diag(plane, {plane.index({0, 0, 0}), plane.index({1, 1, 0})});
  CHECK(components(diag).size() == 1);
  Rng rng(74);
  for (int trial = 0; trial < 40; ++trial) {
    const CubeRegion x = random_region(rng, plane, 1 + int(rng.below(10)));
    const auto got = components(x);
    std::vector<std::vector<std::int64_t>> flat;
    for (const auto& c : got) flat.push_back(c.cubes());
    std::sort(flat.begin(), flat.end());
    CHECK(flat == uf_components(x));
    // Deterministic ordering by lowest cube.
    for (std::size_t i = 1; i < got.size(); ++i)
      CHECK(got[i - 1].cubes().front() < got[i].cubes().front());
  }
}

TEST_CASE("mod components identify cubes through shared holes") {
  const CubeGrid line{1, 16};
  // Two far cubes, both touching the same hole component.
  const CubeRegion x(line, {2, 9});
  const CubeRegion hole(line, {3, 4, 5, 6, 7, 8});
  CHECK(components(x).size() == 2);
  CHECK(components_mod(x, hole).size() == 1);
  CHECK(components_mod(x, CubeRegion::empty(line)).size() == 2);
}

TEST_CASE("tree length counts spanning-tree edges in cube units") {
  const CubeGrid plane{2, 8};
  CHECK(tree_distance(CubeRegion(plane, {5})) == doctest::Approx(0.0));
  const CubeRegion pair(plane, {plane.index({2, 2, 0}), plane.index({2, 3, 0})});
  CHECK(tree_distance(pair) == doctest::Approx(1.0));
  const CubeRegion row(plane, {plane.index({1, 1, 0}), plane.index({1, 2, 0}),
                               plane.index({1, 3, 0})});
  CHECK(tree_distance(row) == doctest::Approx(oracle_tree_distance(row)));
  CHECK(tree_distance(row) == doctest::Approx(2.0));
  const CubeRegion split(plane, {plane.index({0, 0, 0}), plane.index({4, 4, 0})});
  CHECK_THROWS_AS(tree_distance(split), validation_error);
}

TEST_CASE("tree length matches the exhaustive oracle on random regions") {
  Rng rng(75);
  for (int trial = 0; trial < 60; ++trial) {
    const int d = 1 + int(rng.below(2));
    const CubeGrid grid{d, 10};
    const CubeRegion x = random_connected(rng, grid, 2 + int(rng.below(5)));
    CHECK(tree_distance(x) == doctest::Approx(oracle_tree_distance(x)));
  }
}

TEST_CASE("tree length growth bound under cube additions") {
  Rng rng(76);
  for (int trial = 0; trial < 30; ++trial) {
    const CubeGrid grid{2, 10};
    const CubeRegion x = random_connected(rng, grid, 3);
    CubeRegion bigger = x;
    while (bigger.size() < 6) {
      const auto seed = bigger.cubes()[rng.below(bigger.cubes().size())];
      const auto nbs = enlarge(CubeRegion(grid, {seed}), 1).cubes();
      bigger = bigger.unite(CubeRegion(grid, {nbs[rng.below(nbs.size())]}));
    }
    CHECK(tree_distance(x) <=
          tree_distance(bigger) + double(bigger.size() - x.size()) + 1e-12);
  }
}

TEST_CASE("contracted tree length treats holes as free hubs") {
  const CubeGrid line{1, 16};
  const CubeRegion hole(line, {5, 6, 7});
  SUBCASE("region inside one hole costs nothing") {
    const CubeRegion x(line, {5, 6});
    CHECK(tree_distance_mod(x, hole) == doctest::Approx(0.0));
  }
  SUBCASE("empty contraction set reduces to the plain length") {
    const CubeRegion x(line, {2, 3, 4});
    CHECK(tree_distance_mod(x, CubeRegion::empty(line)) ==
          doctest::Approx(tree_distance(x)));
  }
  SUBCASE("travel through a hole shortens the tree") {
    const CubeRegion x(line, {4, 8});
    // Direct distance is 4; entering the hole costs 1 on each side.
    CHECK(tree_distance_mod(x, hole) == doctest::Approx(2.0));
  }
  SUBCASE("hub sharing: a central hole feeds several spokes") {
    const CubeGrid plane{2, 12};
    std::vector<std::int64_t> block;
    for (std::int64_t a = 5; a <= 7; ++a)
      for (std::int64_t b = 5; b <= 7; ++b) block.push_back(plane.index({a, b, 0}));
    const CubeRegion center(plane, block);
    const CubeRegion spokes(plane, {plane.index({4, 4, 0}), plane.index({8, 8, 0}),
                                    plane.index({4, 8, 0}), plane.index({8, 4, 0})});
    // Plain spanning cost would be 12; one unit edge per spoke into the hub wins.
    CHECK(tree_distance_mod(spokes, center) == doctest::Approx(4.0));
  }
}

TEST_CASE("contracted tree length matches the subset oracle") {
  Rng rng(77);
  int done = 0;
  while (done < 40) {
    const CubeGrid grid{1 + int(rng.below(2)), 10};
    const CubeRegion holes = random_region(rng, grid, 1 + int(rng.below(3)));
    const CubeRegion x =
        random_region(rng, grid, 1 + int(rng.below(4))).subtract(holes);
    if (x.is_empty()) continue;
    if (components_mod(x, holes).size() != 1) continue;
    if (x.size() + std::int64_t(components(holes).size()) > 7) continue;
    CHECK(tree_distance_mod(x, holes) ==
          doctest::Approx(oracle_tree_distance_mod(x, holes)));
    ++done;
  }
}

TEST_CASE("contracted tree length only drops when holes grow") {
  Rng rng(78);
  int done = 0;
  while (done < 60) {
    const CubeGrid grid{1 + int(rng.below(2)), 10};
    const CubeRegion omega_c = random_region(rng, grid, int(rng.below(3)));
    const CubeRegion lambda_c =
        omega_c.unite(random_region(rng, grid, 1 + int(rng.below(3))));
    const CubeRegion x = random_connected(rng, grid, 1 + int(rng.below(4)));
    if (x.intersect(lambda_c.complement()).is_empty()) continue;
    if (components_mod(x, omega_c).size() != 1) continue;
    CubeRegion y = x;
    for (const auto& hole : components(lambda_c)) {
      if (!enlarge(hole, 1).intersect(x).is_empty()) y = y.unite(hole);
    }
    const double before = tree_distance_mod(x, omega_c);
    const double after = tree_distance_mod(y, lambda_c);
    CHECK(after <= before + 1e-12);
    ++done;
  }
}

TEST_CASE("refinement and coarse maps are mutually consistent") {
  Rng rng(79);
  const CubeGrid grid{2, 8};
  for (int trial = 0; trial < 20; ++trial) {
    const CubeRegion x = random_region(rng, grid, 1 + int(rng.below(6)));
    const CubeRegion fine = refine_region(x, 2);
    CHECK(fine.size() == x.size() * 4);
    CHECK(coarse_cover(fine, 2) == x);
    CHECK(coarse_interior(fine, 2) == x);
    // Interior never exceeds cover.
    const CubeRegion y = random_region(rng, CubeGrid{2, 16}, 10);
    CHECK(coarse_cover(y, 2).contains(coarse_interior(y, 2)));
  }
}

TEST_CASE("region json round trip") {
  const CubeGrid grid{3, 4};
  Rng rng(80);
  const CubeRegion x = random_region(rng, grid, 7);
  CHECK(region_from_json(region_to_json(x)) == x);
}

TEST_CASE("constants validate their admissibility constraints") {
  BoundConstants c;
  c.validate();
  SUBCASE("kappa floor") {
    c.kappa = 12.0;
    CHECK_THROWS_AS(c.validate(), validation_error);
  }
  SUBCASE("exponent ordering") {
    c.p0_exp = 2.5;
    CHECK_THROWS_AS(c.validate(), validation_error);
  }
  SUBCASE("shell exponent window") {
    c.r_exp = 0.4;
    CHECK_THROWS_AS(c.validate(), validation_error);
  }
  SUBCASE("minimum power") {
    c.n0 = 3;
    CHECK_THROWS_AS(c.validate(), validation_error);
  }
  SUBCASE("radius ladder") {
    c.big_r2 = 9;
    CHECK_THROWS_AS(c.validate(), validation_error);
  }
  SUBCASE("derived quantities") {
    CHECK(c.kappa_prime() == doctest::Approx(c.kappa - 7.0 * c.kappa0 - 7.0));
    CHECK(c.r_layers(std::exp(1.0)) >= 1);
    CHECK(c.p_k(10.0) == doctest::Approx(100.0));
    CHECK(c.alpha_k(1e-4, 0.0) == doctest::Approx(0.1));
    CHECK(c.alpha_k(1e-4, 0.25) == doctest::Approx(0.5));
    CHECK(BoundConstants::c2_formula(0.05, 1.0, 7, 4.0, 3) <= 0.25);
  }
  SUBCASE("json round trip") {
    c.kappa = 30.0;
    c.c_seq = {0.5, 0.25};
    const BoundConstants d = constants_from_json(constants_to_json(c));
    CHECK(d.kappa == 30.0);
    CHECK(d.c_seq == std::vector<double>{0.5, 0.25});
  }
}

TEST_CASE("one recursion step separates the new regions") {
  const CubeGrid fine{1, 64};
  const CubeGrid coarse{1, 32};
  const CubeRegion lambda = CubeRegion::full(fine);
  SUBCASE("empty generators keep the full torus") {
    GeneratorTriple gen{CubeRegion::empty(coarse), CubeRegion::empty(coarse),
                        CubeRegion::empty(coarse)};
    const auto step = region_recursion(lambda, gen, 1);
    CHECK(step.omega_next.is_full());
    CHECK(step.lambda_next.is_full());
  }
  SUBCASE("a single P cube carves out its shell") {
    GeneratorTriple gen{CubeRegion(coarse, {10}), CubeRegion::empty(coarse),
                        CubeRegion::empty(coarse)};
    const auto step = region_recursion(lambda, gen, 1);
    const CubeRegion omega_c = step.omega_next.complement();
    CHECK(omega_c.contains(enlarge(CubeRegion(coarse, {10}), 5)));
    CHECK(omega_c.size() == 11);
    // Separation: the next small region stays five layers away.
    std::int64_t closest = 64;
    for (const auto a : step.lambda_next.cubes())
      for (const auto b : omega_c.cubes())
        closest = std::min(closest, coarse.chebyshev(a, b));
    CHECK(closest >= 6);
  }
  SUBCASE("generators outside their allowed homes are rejected") {
    GeneratorTriple bad{CubeRegion::empty(coarse), CubeRegion::empty(coarse),
                        CubeRegion::empty(coarse)};
    bad.p = CubeRegion(coarse, {4});
    const CubeRegion partial(fine, [] {
      std::vector<std::int64_t> cubes;
      for (std::int64_t c = 20; c < 40; ++c) cubes.push_back(c);
      return cubes;
    }());
    CHECK_THROWS_AS(region_recursion(partial, bad, 1), validation_error);
  }
}

TEST_CASE("recursion output matches the unrolled complement formula") {
  Rng rng(81);
  for (int trial = 0; trial < 25; ++trial) {
    const int d = 1 + int(rng.below(2));
    const CubeGrid fine{d, d == 1 ? 64 : 16};
    const CubeGrid coarse{d, fine.cubes_per_side / 2};
    const CubeRegion lambda_prev =
        random_region(rng, fine, int(rng.below(4))).complement();
    const CubeRegion bar = coarse_cover(lambda_prev, 2);
    GeneratorTriple gen{CubeRegion::empty(coarse), CubeRegion::empty(coarse),
                        CubeRegion::empty(coarse)};
    if (!bar.is_empty() && rng.below(2) == 0) {
      gen.p = CubeRegion(coarse, {bar.cubes()[rng.below(bar.cubes().size())]});
    }
    RecursionStep step;
    try {
      step = region_recursion(lambda_prev, gen, 1);
    } catch (const validation_error&) {
      continue;
    }
    const CubeRegion direct = enlarge(bar.complement(), 10)
                                  .unite(enlarge(gen.p, 10))
                                  .unite(enlarge(gen.q, 5))
                                  .unite(enlarge(gen.r, 5));
    CHECK(step.lambda_next.complement() == direct);
    CHECK(step.omega_next.contains(step.lambda_next));
    CHECK(bar.contains(step.omega_next));
  }
}

TEST_CASE("hierarchies stay nested across levels") {
  Rng rng(82);
  int built = 0;
  while (built < 15) {
    const CubeGrid base{1, 64};
    std::vector<GeneratorTriple> gens;
    std::vector<std::int64_t> layers{1, 1};
    CubeGrid g = base;
    for (int lvl = 0; lvl < 2; ++lvl) {
      if (lvl > 0) g = CubeGrid{1, g.cubes_per_side / 2};
      GeneratorTriple gen{CubeRegion::empty(g), CubeRegion::empty(g),
                          CubeRegion::empty(g)};
      if (rng.below(2) == 0) gen.q = random_region(rng, g, 1);
      gens.push_back(gen);
    }
    RegionHierarchy h;
    try {
      h = RegionHierarchy::build(base, gens, layers, 2);
    } catch (const validation_error&) {
      continue;
    }
    REQUIRE(h.levels().size() == 2);
    const auto& l0 = h.levels()[0];
    const auto& l1 = h.levels()[1];
    CHECK(l0.omega.contains(l0.lambda));
    CHECK(l1.omega.contains(l1.lambda));
    CHECK(l0.lambda.contains(refine_region(l1.omega, 2)));
    const auto j = hierarchy_to_json(h);
    CHECK(j.at("levels").size() == 2);
    ++built;
  }
}

TEST_CASE("covering construction certifies the complement volume") {
  BoundConstants constants;
  SUBCASE("single seed at the base level") {
    const CubeGrid base{1, 64};
    GeneratorTriple gen{CubeRegion::empty(base), CubeRegion(base, {7}),
                        CubeRegion::empty(base)};
    const auto report = covering_bound(base, {gen}, constants,
                                       {std::exp(1.0)}, 2, 4);
    REQUIRE(report.collections.size() == 1);
    REQUIRE(report.collections[0].cubes.size() == 1);
    // One layer each side of a 4-cell cube: width 4*(1+10).
    CHECK(report.collections[0].cubes[0].len[0] == 44);
    CHECK(report.covers);
    CHECK(report.widths_ok);
    CHECK(report.volume_cells == 44);
    CHECK(report.cover_count == 1);
  }
  SUBCASE("empty history is vacuous") {
    const CubeGrid base{1, 64};
    GeneratorTriple gen{CubeRegion::empty(base), CubeRegion::empty(base),
                        CubeRegion::empty(base)};
    const auto report = covering_bound(base, {gen}, constants,
                                       {std::exp(1.0)}, 2, 4);
    CHECK(report.volume_cells == 0);
    CHECK(report.smallest_admissible_c == 0.0);
    CHECK(report.covers);
  }
  SUBCASE("random multi-level histories stay covered") {
    Rng rng(83);
    int done = 0;
    while (done < 20) {
      const int d = 1 + int(rng.below(2));
      const CubeGrid base{d, d == 1 ? 64 : 32};
      std::vector<GeneratorTriple> gens;
      std::vector<double> nll;
      CubeGrid g = base;
      for (int lvl = 0; lvl < 3; ++lvl) {
        if (lvl > 0) g = CubeGrid{d, g.cubes_per_side / 2};
        GeneratorTriple gen{CubeRegion::empty(g), CubeRegion::empty(g),
                            CubeRegion::empty(g)};
        const auto which = rng.below(4);
        if (which == 1) gen.q = random_region(rng, g, 1);
        if (which == 2) gen.r = random_region(rng, g, 1);
        if (which == 3 && lvl > 0) gen.p = random_region(rng, g, 1);
        gens.push_back(gen);
        nll.push_back(std::exp(1.0) + double(2 - lvl));
      }
      CoveringReport report;
      try {
        report = covering_bound(base, gens, constants, nll, 2, 4);
      } catch (const validation_error&) {
        continue;
      }
      CHECK(report.covers);
      CHECK(report.widths_ok);
      if (report.volume_cells > 0) {
        CHECK(report.smallest_admissible_c > 0.0);
        CHECK(std::isfinite(report.smallest_admissible_c));
      }
      ++done;
    }
  }
}

TEST_CASE("joined trees are never shorter than their pieces") {
  const CubeGrid plane{2, 8};
  SUBCASE("one piece equal to the union") {
    Rng rng(84);
    const CubeRegion u = random_connected(rng, plane, 4);
    const auto report = tree_join_check({u}, {}, {}, u);
    CHECK(report.holds);
    CHECK(report.lhs == doctest::Approx(report.rhs + 1.0));
  }
  SUBCASE("two touching singletons") {
    const CubeRegion a(plane, {plane.index({2, 2, 0})});
    const CubeRegion b(plane, {plane.index({2, 3, 0})});
    const auto report = tree_join_check({}, {a, b}, {}, a.unite(b));
    CHECK(report.lhs == doctest::Approx(2.0));
    CHECK(report.rhs == doctest::Approx(1.0));
    CHECK(report.holds);
  }
  SUBCASE("disconnected unions are rejected") {
    const CubeRegion a(plane, {plane.index({0, 0, 0})});
    const CubeRegion b(plane, {plane.index({4, 4, 0})});
    CHECK_THROWS_AS(tree_join_check({}, {a, b}, {}, a.unite(b)),
                    validation_error);
  }
  SUBCASE("randomized configurations") {
    Rng rng(85);
    int done = 0;
    while (done < 1000) {
      const int d = 1 + int(rng.below(2));
      const CubeGrid grid{d, 6};
      std::vector<CubeRegion> thetas, xs, ys;
      CubeRegion u = CubeRegion::empty(grid);
      const int nt = int(rng.below(2));
      for (int i = 0; i < nt; ++i) {
        const CubeRegion t = random_connected(rng, grid, 1 + int(rng.below(3)));
        thetas.push_back(t);
        u = u.unite(t);
      }
      CubeRegion theta = u;
      const int nx = 1 + int(rng.below(2));
      for (int i = 0; i < nx; ++i) {
        const CubeRegion x = random_connected(rng, grid, 1 + int(rng.below(3)));
        xs.push_back(x);
        u = u.unite(x);
      }
      const int ny = int(rng.below(2));
      bool ok = true;
      for (int i = 0; i < ny; ++i) {
        const CubeRegion y = random_connected(rng, grid, 1 + int(rng.below(3)));
        if (components_mod(y, theta).size() != 1) {
          ok = false;
          break;
        }
        ys.push_back(y);
        u = u.unite(y);
      }
      if (!ok || components(u).size() != 1) continue;
      // Merge theta components that touch so the pieces stay disjoint trees.
      std::vector<CubeRegion> theta_comps = components(theta);
      const auto report = tree_join_check(theta_comps, xs, ys, u);
      CHECK(report.holds);
      ++done;
    }
  }
}

TEST_CASE("regrouping an activity preserves its grand total") {
  const CubeGrid line{1, 12};
  const BoundConstants constants;
  SUBCASE("identity when the regions coincide") {
    const CubeRegion omega(line, {2, 3, 4, 5, 6, 7});
    const auto acts = std::vector<RegionTerm>{{CubeRegion(line, {3}), 0.25},
                                              {CubeRegion(line, {5}), -0.5}};
    const auto res = resummation(acts, omega, omega, 1.0, constants.kappa,
                                 constants.kappa0);
    CHECK(res.totals_match);
    CHECK(res.output.size() == 2);
    CHECK(res.input_total == doctest::Approx(-0.25));
  }
  SUBCASE("a nearby hole is attached to the output region") {
    const CubeRegion omega = CubeRegion::full(line);
    const CubeRegion lambda(line, {0, 1, 2, 3, 4, 5, 6, 7});
    const auto acts = std::vector<RegionTerm>{{CubeRegion(line, {7}), 0.125}};
    const auto res =
        resummation(acts, omega, lambda, 1.0, constants.kappa, constants.kappa0);
    REQUIRE(res.output.size() == 1);
    // The hole {8,...,11} touches cube 7 and is absorbed.
    CHECK(res.output[0].first.size() == 5);
    CHECK(res.output[0].second == doctest::Approx(0.125));
  }
  SUBCASE("declared-bound violations are refused") {
    const CubeRegion omega = CubeRegion::full(line);
    const CubeRegion lambda(line, {0, 1, 2, 3});
    const auto acts =
        std::vector<RegionTerm>{{CubeRegion(line, {0, 1}), 100.0}};
    CHECK_THROWS_AS(resummation(acts, omega, lambda, 1.0, constants.kappa,
                                constants.kappa0),
                    validation_error);
  }
  SUBCASE("full enumeration on small universes") {
    Rng rng(86);
    for (int trial = 0; trial < 30; ++trial) {
      const CubeGrid grid{1, 6};
      const CubeRegion omega_c = random_region(rng, grid, int(rng.below(2)));
      const CubeRegion omega = omega_c.complement();
      const CubeRegion lambda =
          omega.subtract(random_region(rng, grid, int(rng.below(2))));
      std::vector<RegionTerm> acts;
      double total = 0.0;
      for (std::uint64_t mask = 1; mask < 64; ++mask) {
        std::vector<std::int64_t> cubes;
        for (int b = 0; b < 6; ++b)
          if (mask & (1u << b)) cubes.push_back(b);
        const CubeRegion x(grid, cubes);
        if (components_mod(x, omega_c).size() != 1) continue;
        if (x.intersect(lambda).is_empty()) continue;
        const double bound =
            std::exp(-constants.kappa * tree_distance_mod(x, omega_c));
        const double v = bound * rng.uniform(-1.0, 1.0);
        acts.push_back({x, v});
        total += v;
      }
      if (acts.empty()) continue;
      const auto res = resummation(acts, omega, lambda, 1.0, constants.kappa,
                                   constants.kappa0);
      CHECK(res.totals_match);
      CHECK(res.output_total == doctest::Approx(total).epsilon(1e-12));
      double regroup = 0.0;
      for (const auto& [y, v] : res.output) regroup += v;
      CHECK(regroup == doctest::Approx(total).epsilon(1e-12));
      CHECK(std::isfinite(res.reported_c));
    }
  }
}
