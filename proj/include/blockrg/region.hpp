#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrg/lattice.hpp"

namespace blockrg {

// Periodic grid of equal cubes. A region module level stores its own grid, so
// regions created at different block scales can coexist on one torus.
struct CubeGrid {
  int dimension = 1;
  std::int64_t cubes_per_side = 1;

  bool operator==(const CubeGrid&) const = default;

  std::int64_t num_cubes() const;
  std::int64_t index(const std::array<std::int64_t, 3>& c) const;
  std::array<std::int64_t, 3> coord(std::int64_t idx) const;
  // Per-axis separation with wraparound, always in [0, cubes_per_side/2].
  std::int64_t axis_distance(std::int64_t a, std::int64_t b) const;
  // Chebyshev distance between two cubes with wraparound.
  std::int64_t chebyshev(std::int64_t a, std::int64_t b) const;
};

CubeGrid grid_for_lattice(const TorusLattice& lat, std::int64_t cube_side_sites);

// Set of cubes on a grid. Indices are kept sorted and unique.
class CubeRegion {
 public:
  CubeRegion() = default;
  CubeRegion(CubeGrid grid, std::vector<std::int64_t> cubes);

  static CubeRegion empty(const CubeGrid& grid);
  static CubeRegion full(const CubeGrid& grid);

  const CubeGrid& grid() const { return grid_; }
  const std::vector<std::int64_t>& cubes() const { return cubes_; }
  std::int64_t size() const { return static_cast<std::int64_t>(cubes_.size()); }
  bool is_empty() const { return cubes_.empty(); }
  bool is_full() const { return size() == grid_.num_cubes(); }

  bool contains(std::int64_t cube) const;
  bool contains(const CubeRegion& other) const;

  CubeRegion unite(const CubeRegion& other) const;
  CubeRegion intersect(const CubeRegion& other) const;
  CubeRegion subtract(const CubeRegion& other) const;
  CubeRegion complement() const;

  bool operator==(const CubeRegion&) const = default;

 private:
  CubeGrid grid_;
  std::vector<std::int64_t> cubes_;
};

// Adds `layers` shells of Chebyshev-adjacent cubes (corners included).
CubeRegion enlarge(const CubeRegion& x, std::int64_t layers);

// Removes every cube within `layers` shells of the complement, so that
// shrink(x, n) == enlarge(x.complement(), n).complement().
CubeRegion shrink(const CubeRegion& x, std::int64_t layers);

// Maximal components under closure contact: two cubes are adjacent when
// their Chebyshev distance is at most 1. Components are ordered by their
// lowest cube index.
std::vector<CubeRegion> components(const CubeRegion& x);

// Components of x after declaring all cubes that touch a common component of
// omega_c mutually connected.
std::vector<CubeRegion> components_mod(const CubeRegion& x,
                                       const CubeRegion& omega_c);

// Length of the minimum spanning tree over the cubes of x (complete graph,
// Chebyshev distances with wraparound), in units of the cube side.
// Requires x connected; refuses disconnected input.
double tree_distance(const CubeRegion& x);

// Tree length for x with each component of omega_c contracted to a single
// zero-cost vertex. Contracted components are optional attachment points:
// the result is the minimum over component subsets of the spanning-tree
// length on (x minus omega_c) plus the chosen components.
double tree_distance_mod(const CubeRegion& x, const CubeRegion& omega_c);

// Region on the grid refined by `factor` per axis covering exactly x.
CubeRegion refine_region(const CubeRegion& x, std::int64_t factor);
// Smallest union of coarse cubes containing x (grid shrunk by `factor`).
CubeRegion coarse_cover(const CubeRegion& x, std::int64_t factor);
// Largest union of coarse cubes contained in x.
CubeRegion coarse_interior(const CubeRegion& x, std::int64_t factor);

// Sites of the lattice belonging to one cube, in lexicographic order.
std::vector<std::int64_t> cube_sites(const TorusLattice& lat,
                                     const CubeGrid& grid, std::int64_t cube);
// 0/1 mask over lattice sites marking all cubes of the region.
std::vector<std::uint8_t> region_site_mask(const TorusLattice& lat,
                                           const CubeRegion& region);

nlohmann::json region_to_json(const CubeRegion& region);
CubeRegion region_from_json(const nlohmann::json& j);

}  // namespace blockrg
