#include "blockrg/region.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>
#include <string>

namespace blockrg {

namespace {

std::int64_t checked_pow(std::int64_t base, int exp) {
  std::int64_t out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

void require_same_grid(const CubeGrid& a, const CubeGrid& b,
                       const char* where) {
  if (!(a == b)) {
    throw validation_error(std::string(where) + ": grid mismatch (" +
                           std::to_string(a.cubes_per_side) + " vs " +
                           std::to_string(b.cubes_per_side) +
                           " cubes per side)");
  }
}

// Offsets to scan along one axis for a Chebyshev ball of the given radius.
std::vector<std::int64_t> axis_offsets(std::int64_t radius, std::int64_t n) {
  std::vector<std::int64_t> out;
  if (2 * radius + 1 >= n) {
    out.resize(static_cast<std::size_t>(n));
    std::iota(out.begin(), out.end(), std::int64_t{0});
  } else {
    for (std::int64_t o = -radius; o <= radius; ++o) out.push_back(o);
  }
  return out;
}

}  // namespace

std::int64_t CubeGrid::num_cubes() const {
  return checked_pow(cubes_per_side, dimension);
}

std::int64_t CubeGrid::index(const std::array<std::int64_t, 3>& c) const {
  std::int64_t idx = 0;
  for (int ax = 0; ax < dimension; ++ax) {
    std::int64_t v = c[static_cast<std::size_t>(ax)] % cubes_per_side;
    if (v < 0) v += cubes_per_side;
    idx = idx * cubes_per_side + v;
  }
  return idx;
}

std::array<std::int64_t, 3> CubeGrid::coord(std::int64_t idx) const {
  std::array<std::int64_t, 3> c{0, 0, 0};
  for (int ax = dimension - 1; ax >= 0; --ax) {
    c[static_cast<std::size_t>(ax)] = idx % cubes_per_side;
    idx /= cubes_per_side;
  }
  return c;
}

std::int64_t CubeGrid::axis_distance(std::int64_t a, std::int64_t b) const {
  std::int64_t d = a - b;
  if (d < 0) d = -d;
  d %= cubes_per_side;
  return std::min(d, cubes_per_side - d);
}

std::int64_t CubeGrid::chebyshev(std::int64_t a, std::int64_t b) const {
  const auto ca = coord(a);
  const auto cb = coord(b);
  std::int64_t best = 0;
  for (int ax = 0; ax < dimension; ++ax) {
    const auto i = static_cast<std::size_t>(ax);
    best = std::max(best, axis_distance(ca[i], cb[i]));
  }
  return best;
}

CubeGrid grid_for_lattice(const TorusLattice& lat,
                          std::int64_t cube_side_sites) {
  if (cube_side_sites <= 0 || lat.sites_per_side() % cube_side_sites != 0) {
    throw validation_error("cube side " + std::to_string(cube_side_sites) +
                           " does not divide lattice side " +
                           std::to_string(lat.sites_per_side()));
  }
  return CubeGrid{lat.dimension(), lat.sites_per_side() / cube_side_sites};
}

CubeRegion::CubeRegion(CubeGrid grid, std::vector<std::int64_t> cubes)
    : grid_(grid), cubes_(std::move(cubes)) {
  if (grid_.dimension < 1 || grid_.dimension > 3 || grid_.cubes_per_side < 1) {
    throw validation_error("invalid cube grid");
  }
  std::sort(cubes_.begin(), cubes_.end());
  cubes_.erase(std::unique(cubes_.begin(), cubes_.end()), cubes_.end());
  const std::int64_t n = grid_.num_cubes();
  for (const auto c : cubes_) {
    if (c < 0 || c >= n) {
      throw validation_error("cube index " + std::to_string(c) +
                             " outside grid of " + std::to_string(n) +
                             " cubes");
    }
  }
}

CubeRegion CubeRegion::empty(const CubeGrid& grid) {
  return CubeRegion(grid, {});
}

CubeRegion CubeRegion::full(const CubeGrid& grid) {
  std::vector<std::int64_t> all(static_cast<std::size_t>(grid.num_cubes()));
  std::iota(all.begin(), all.end(), std::int64_t{0});
  return CubeRegion(grid, std::move(all));
}

bool CubeRegion::contains(std::int64_t cube) const {
  return std::binary_search(cubes_.begin(), cubes_.end(), cube);
}

bool CubeRegion::contains(const CubeRegion& other) const {
  require_same_grid(grid_, other.grid_, "contains");
  return std::includes(cubes_.begin(), cubes_.end(), other.cubes_.begin(),
                       other.cubes_.end());
}

CubeRegion CubeRegion::unite(const CubeRegion& other) const {
  require_same_grid(grid_, other.grid_, "unite");
  std::vector<std::int64_t> out;
  out.reserve(cubes_.size() + other.cubes_.size());
  std::set_union(cubes_.begin(), cubes_.end(), other.cubes_.begin(),
                 other.cubes_.end(), std::back_inserter(out));
  return CubeRegion(grid_, std::move(out));
}

CubeRegion CubeRegion::intersect(const CubeRegion& other) const {
  require_same_grid(grid_, other.grid_, "intersect");
  std::vector<std::int64_t> out;
  std::set_intersection(cubes_.begin(), cubes_.end(), other.cubes_.begin(),
                        other.cubes_.end(), std::back_inserter(out));
  return CubeRegion(grid_, std::move(out));
}

CubeRegion CubeRegion::subtract(const CubeRegion& other) const {
  require_same_grid(grid_, other.grid_, "subtract");
  std::vector<std::int64_t> out;
  std::set_difference(cubes_.begin(), cubes_.end(), other.cubes_.begin(),
                      other.cubes_.end(), std::back_inserter(out));
  return CubeRegion(grid_, std::move(out));
}

CubeRegion CubeRegion::complement() const {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(grid_.num_cubes()) - cubes_.size());
  std::int64_t next = 0;
  for (const auto c : cubes_) {
    for (; next < c; ++next) out.push_back(next);
    next = c + 1;
  }
  for (; next < grid_.num_cubes(); ++next) out.push_back(next);
  return CubeRegion(grid_, std::move(out));
}

CubeRegion enlarge(const CubeRegion& x, std::int64_t layers) {
  if (layers < 0) throw validation_error("enlarge: negative layer count");
  if (layers == 0 || x.is_empty()) return x;
  const CubeGrid& g = x.grid();
  const auto offsets = axis_offsets(layers, g.cubes_per_side);
  std::set<std::int64_t> out;
  for (const auto cube : x.cubes()) {
    const auto c = g.coord(cube);
    std::array<std::int64_t, 3> p{0, 0, 0};
    if (g.dimension == 1) {
      for (const auto o0 : offsets) {
        p[0] = c[0] + o0;
        out.insert(g.index(p));
      }
    } else if (g.dimension == 2) {
      for (const auto o0 : offsets)
        for (const auto o1 : offsets) {
          p[0] = c[0] + o0;
          p[1] = c[1] + o1;
          out.insert(g.index(p));
        }
    } else {
      for (const auto o0 : offsets)
        for (const auto o1 : offsets)
          for (const auto o2 : offsets) {
            p[0] = c[0] + o0;
            p[1] = c[1] + o1;
            p[2] = c[2] + o2;
            out.insert(g.index(p));
          }
    }
  }
  return CubeRegion(g, std::vector<std::int64_t>(out.begin(), out.end()));
}

CubeRegion shrink(const CubeRegion& x, std::int64_t layers) {
  if (layers < 0) throw validation_error("shrink: negative layer count");
  if (layers == 0) return x;
  return enlarge(x.complement(), layers).complement();
}

namespace {

std::vector<std::int64_t> adjacent_cubes(const CubeGrid& g,
                                         std::int64_t cube) {
  CubeRegion one(g, {cube});
  return enlarge(one, 1).cubes();
}

}  // namespace

std::vector<CubeRegion> components(const CubeRegion& x) {
  const CubeGrid& g = x.grid();
  std::vector<CubeRegion> out;
  std::set<std::int64_t> remaining(x.cubes().begin(), x.cubes().end());
  while (!remaining.empty()) {
    std::vector<std::int64_t> comp;
    std::vector<std::int64_t> stack{*remaining.begin()};
    remaining.erase(remaining.begin());
    while (!stack.empty()) {
      const auto cur = stack.back();
      stack.pop_back();
      comp.push_back(cur);
      for (const auto nb : adjacent_cubes(g, cur)) {
        const auto it = remaining.find(nb);
        if (it != remaining.end()) {
          remaining.erase(it);
          stack.push_back(nb);
        }
      }
    }
    out.emplace_back(g, std::move(comp));
  }
  std::sort(out.begin(), out.end(),
            [](const CubeRegion& a, const CubeRegion& b) {
              return a.cubes().front() < b.cubes().front();
            });
  return out;
}

std::vector<CubeRegion> components_mod(const CubeRegion& x,
                                       const CubeRegion& omega_c) {
  require_same_grid(x.grid(), omega_c.grid(), "components_mod");
  if (omega_c.is_empty()) return components(x);
  const auto plain = components(x);
  const auto holes = components(omega_c);
  // Union-find over the plain components, merging those that touch a common
  // component of omega_c. Touching means Chebyshev distance at most 1, which
  // also covers overlap.
  std::vector<std::size_t> parent(plain.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  const auto find = [&parent](std::size_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  };
  for (const auto& hole : holes) {
    const CubeRegion reach = enlarge(hole, 1);
    std::size_t first = plain.size();
    for (std::size_t i = 0; i < plain.size(); ++i) {
      if (reach.intersect(plain[i]).is_empty()) continue;
      if (first == plain.size()) {
        first = i;
      } else {
        parent[find(i)] = find(first);
      }
    }
  }
  std::vector<CubeRegion> merged;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    if (find(i) != i) continue;
    CubeRegion acc = plain[i];
    for (std::size_t j = i + 1; j < plain.size(); ++j) {
      if (find(j) == i) acc = acc.unite(plain[j]);
    }
    merged.push_back(std::move(acc));
  }
  std::sort(merged.begin(), merged.end(),
            [](const CubeRegion& a, const CubeRegion& b) {
              return a.cubes().front() < b.cubes().front();
            });
  return merged;
}

namespace {

// Prim on a dense symmetric weight matrix; weights[i][j] >= 0.
double mst_length(const std::vector<std::vector<double>>& w) {
  const std::size_t n = w.size();
  if (n <= 1) return 0.0;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> best(n, kInf);
  std::vector<char> used(n, 0);
  best[0] = 0.0;
  double total = 0.0;
  for (std::size_t round = 0; round < n; ++round) {
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i] && (pick == n || best[i] < best[pick])) pick = i;
    }
    used[pick] = 1;
    total += best[pick];
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i]) best[i] = std::min(best[i], w[pick][i]);
    }
  }
  return total;
}

double region_pair_distance(const CubeGrid& g, const CubeRegion& a,
                            const CubeRegion& b) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto ca : a.cubes())
    for (const auto cb : b.cubes())
      best = std::min(best, static_cast<double>(g.chebyshev(ca, cb)));
  return best;
}

double cube_region_distance(const CubeGrid& g, std::int64_t cube,
                            const CubeRegion& r) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto c : r.cubes())
    best = std::min(best, static_cast<double>(g.chebyshev(cube, c)));
  return best;
}

}  // namespace

double tree_distance(const CubeRegion& x) {
  if (x.is_empty()) throw validation_error("tree_distance: empty region");
  if (components(x).size() != 1) {
    throw validation_error(
        "tree_distance: region is disconnected; decompose it first");
  }
  const auto& cubes = x.cubes();
  const std::size_t n = cubes.size();
  std::vector<std::vector<double>> w(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      w[i][j] = w[j][i] =
          static_cast<double>(x.grid().chebyshev(cubes[i], cubes[j]));
  return mst_length(w);
}

double tree_distance_mod(const CubeRegion& x, const CubeRegion& omega_c) {
  require_same_grid(x.grid(), omega_c.grid(), "tree_distance_mod");
  if (x.is_empty()) throw validation_error("tree_distance_mod: empty region");
  if (components_mod(x, omega_c).size() != 1) {
    throw validation_error(
        "tree_distance_mod: region is disconnected mod the contraction set");
  }
  const CubeGrid& g = x.grid();
  const CubeRegion inside = x.subtract(omega_c);
  if (inside.is_empty()) return 0.0;
  const auto& cubes = inside.cubes();
  const std::size_t n = cubes.size();
  const auto holes = components(omega_c);
  const std::size_t m = holes.size();
  if (m > 20) {
    throw size_error("tree_distance_mod: " + std::to_string(m) +
                     " contraction components exceeds the supported 20");
  }
  // Precompute distances from cubes and holes to each other.
  std::vector<std::vector<double>> cube_cube(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      cube_cube[i][j] = cube_cube[j][i] =
          static_cast<double>(g.chebyshev(cubes[i], cubes[j]));
  std::vector<std::vector<double>> cube_hole(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < m; ++h)
      cube_hole[i][h] = cube_region_distance(g, cubes[i], holes[h]);
  std::vector<std::vector<double>> hole_hole(m, std::vector<double>(m, 0.0));
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b)
      hole_hole[a][b] = hole_hole[b][a] =
          region_pair_distance(g, holes[a], holes[b]);
  // Contracted components are optional attachment points: minimize the
  // spanning-tree length over every subset of them.
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    std::vector<std::size_t> chosen;
    for (std::size_t h = 0; h < m; ++h) {
      if (mask & (std::uint64_t{1} << h)) chosen.push_back(h);
    }
    const std::size_t total = n + chosen.size();
    std::vector<std::vector<double>> w(total,
                                       std::vector<double>(total, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i][j] = cube_cube[i][j];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < chosen.size(); ++a)
        w[i][n + a] = w[n + a][i] = cube_hole[i][chosen[a]];
    for (std::size_t a = 0; a < chosen.size(); ++a)
      for (std::size_t b = 0; b < chosen.size(); ++b)
        if (a != b) w[n + a][n + b] = hole_hole[chosen[a]][chosen[b]];
    best = std::min(best, mst_length(w));
    if (best == 0.0) break;
  }
  return best;
}

CubeRegion refine_region(const CubeRegion& x, std::int64_t factor) {
  if (factor < 1) throw validation_error("refine_region: factor must be >= 1");
  const CubeGrid& g = x.grid();
  const CubeGrid fine{g.dimension, g.cubes_per_side * factor};
  std::vector<std::int64_t> out;
  out.reserve(x.cubes().size() *
              static_cast<std::size_t>(checked_pow(factor, g.dimension)));
  std::array<std::int64_t, 3> p{0, 0, 0};
  for (const auto cube : x.cubes()) {
    const auto c = g.coord(cube);
    const std::int64_t span = checked_pow(factor, g.dimension);
    for (std::int64_t sub = 0; sub < span; ++sub) {
      std::int64_t rem = sub;
      for (int ax = g.dimension - 1; ax >= 0; --ax) {
        const auto i = static_cast<std::size_t>(ax);
        p[i] = c[i] * factor + rem % factor;
        rem /= factor;
      }
      out.push_back(fine.index(p));
    }
  }
  return CubeRegion(fine, std::move(out));
}

namespace {

CubeRegion coarse_map(const CubeRegion& x, std::int64_t factor, bool cover) {
  if (factor < 1) throw validation_error("coarse map: factor must be >= 1");
  const CubeGrid& g = x.grid();
  if (g.cubes_per_side % factor != 0) {
    throw validation_error("coarse map: factor " + std::to_string(factor) +
                           " does not divide " +
                           std::to_string(g.cubes_per_side));
  }
  const CubeGrid coarse{g.dimension, g.cubes_per_side / factor};
  if (cover) {
    std::set<std::int64_t> out;
    for (const auto cube : x.cubes()) {
      auto c = g.coord(cube);
      for (int ax = 0; ax < g.dimension; ++ax)
        c[static_cast<std::size_t>(ax)] /= factor;
      out.insert(coarse.index(c));
    }
    return CubeRegion(coarse,
                      std::vector<std::int64_t>(out.begin(), out.end()));
  }
  std::vector<std::int64_t> out;
  for (std::int64_t cube = 0; cube < coarse.num_cubes(); ++cube) {
    if (x.contains(refine_region(CubeRegion(coarse, {cube}), factor)))
      out.push_back(cube);
  }
  return CubeRegion(coarse, std::move(out));
}

}  // namespace

CubeRegion coarse_cover(const CubeRegion& x, std::int64_t factor) {
  return coarse_map(x, factor, true);
}

CubeRegion coarse_interior(const CubeRegion& x, std::int64_t factor) {
  return coarse_map(x, factor, false);
}

std::vector<std::int64_t> cube_sites(const TorusLattice& lat,
                                     const CubeGrid& grid, std::int64_t cube) {
  if (grid.dimension != lat.dimension() ||
      lat.sites_per_side() % grid.cubes_per_side != 0) {
    throw validation_error("cube_sites: grid does not match lattice");
  }
  const std::int64_t side = lat.sites_per_side() / grid.cubes_per_side;
  const auto c = grid.coord(cube);
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(checked_pow(side, lat.dimension())));
  std::array<std::int64_t, 3> p{0, 0, 0};
  const std::int64_t span = checked_pow(side, lat.dimension());
  for (std::int64_t sub = 0; sub < span; ++sub) {
    std::int64_t rem = sub;
    for (int ax = lat.dimension() - 1; ax >= 0; --ax) {
      const auto i = static_cast<std::size_t>(ax);
      p[i] = c[i] * side + rem % side;
      rem /= side;
    }
    out.push_back(lat.index(p));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::uint8_t> region_site_mask(const TorusLattice& lat,
                                           const CubeRegion& region) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(lat.num_sites()), 0);
  for (const auto cube : region.cubes()) {
    for (const auto s : cube_sites(lat, region.grid(), cube))
      mask[static_cast<std::size_t>(s)] = 1;
  }
  return mask;
}

nlohmann::json region_to_json(const CubeRegion& region) {
  nlohmann::json coords = nlohmann::json::array();
  for (const auto cube : region.cubes()) {
    const auto c = region.grid().coord(cube);
    nlohmann::json point = nlohmann::json::array();
    for (int ax = 0; ax < region.grid().dimension; ++ax)
      point.push_back(c[static_cast<std::size_t>(ax)]);
    coords.push_back(std::move(point));
  }
  return nlohmann::json{{"dimension", region.grid().dimension},
                        {"cubes_per_side", region.grid().cubes_per_side},
                        {"cubes", std::move(coords)}};
}

CubeRegion region_from_json(const nlohmann::json& j) {
  const CubeGrid grid{j.at("dimension").get<int>(),
                      j.at("cubes_per_side").get<std::int64_t>()};
  std::vector<std::int64_t> cubes;
  for (const auto& point : j.at("cubes")) {
    std::array<std::int64_t, 3> c{0, 0, 0};
    if (static_cast<int>(point.size()) != grid.dimension) {
      throw validation_error("region_from_json: coordinate arity mismatch");
    }
    for (int ax = 0; ax < grid.dimension; ++ax)
      c[static_cast<std::size_t>(ax)] = point[static_cast<std::size_t>(ax)]
                                            .get<std::int64_t>();
    cubes.push_back(grid.index(c));
  }
  return CubeRegion(grid, std::move(cubes));
}

}  // namespace blockrg
