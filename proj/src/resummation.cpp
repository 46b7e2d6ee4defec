#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "blockrg/hierarchy.hpp"

namespace blockrg {

namespace {

bool touches(const CubeRegion& a, const CubeRegion& b) {
  return !enlarge(a, 1).intersect(b).is_empty();
}

}  // namespace

ResummationResult resummation(const std::vector<RegionTerm>& activity,
                              const CubeRegion& omega,
                              const CubeRegion& lambda, double b0,
                              double kappa, double kappa0) {
  if (!omega.contains(lambda)) {
    throw validation_error("resummation: lambda must sit inside omega");
  }
  if (!(b0 > 0.0)) {
    throw validation_error("resummation: activity bound must be positive");
  }
  const CubeRegion omega_c = omega.complement();
  const CubeRegion lambda_c = lambda.complement();
  const auto lambda_holes = components(lambda_c);

  std::map<std::vector<std::int64_t>, std::pair<CubeRegion, double>> grouped;
  ResummationResult result;
  for (const auto& [x, value] : activity) {
    if (components_mod(x, omega_c).size() != 1) {
      throw validation_error(
          "resummation: input region disconnected mod the outer complement");
    }
    if (x.intersect(lambda).is_empty()) {
      throw validation_error(
          "resummation: input region misses the inner region");
    }
    const double allowed =
        b0 * std::exp(-kappa * tree_distance_mod(x, omega_c));
    if (std::abs(value) > allowed * (1.0 + 1e-9)) {
      throw validation_error(
          "resummation: activity exceeds its declared decay bound");
    }
    CubeRegion y = x;
    for (const auto& hole : lambda_holes) {
      if (touches(hole, x)) y = y.unite(hole);
    }
    result.input_total += value;
    auto [it, inserted] = grouped.try_emplace(
        y.cubes(), std::make_pair(y, 0.0));
    it->second.second += value;
  }

  result.reported_c = 0.0;
  const double exponent = kappa - kappa0 - 1.0;
  for (auto& [key, entry] : grouped) {
    auto& [y, total] = entry;
    result.output_total += total;
    const double reference =
        b0 * std::exp(-exponent * tree_distance_mod(y, lambda_c));
    if (reference > 0.0) {
      result.reported_c =
          std::max(result.reported_c, std::abs(total) / reference);
    }
    result.output.emplace_back(std::move(y), total);
  }
  const double scale =
      std::max(1.0, std::max(std::abs(result.input_total),
                             std::abs(result.output_total)));
  result.totals_match =
      std::abs(result.input_total - result.output_total) <= 1e-12 * scale;
  return result;
}

}  // namespace blockrg
