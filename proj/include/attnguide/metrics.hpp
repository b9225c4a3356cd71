// Spatial statistics for scattering and overlap: global Moran's I on the
// grid, top-mass overlap ratio, and region centroid spread.
#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "attnguide/core.hpp"
#include "attnguide/losses.hpp"
#include "attnguide/regions.hpp"

namespace attnguide {

struct MoranConfig {
  enum class Adjacency { rook, queen };
  Adjacency adjacency = Adjacency::rook;
};

// Global Moran's I with binary adjacency weights and no row standardization:
//   I = (N / S0) * sum_{i,j} w_ij (x_i - mean)(x_j - mean) / sum_i (x_i - mean)^2
// Values near 1 indicate spatially compact (unscattered) activation patterns.
inline double morans_i(const AttentionMap& map, const MoranConfig& cfg = {}) {
  const int h = map.height();
  const int w = map.width();
  const int n = h * w;

  double mean = 0.0, lo = map.values().front(), hi = lo;
  for (double v : map.values()) {
    mean += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  mean /= n;

  double denom = 0.0;
  for (double v : map.values()) denom += (v - mean) * (v - mean);
  if (denom == 0.0 || lo == hi)
    throw UndefinedMetricError("morans_i: constant map has no variance");

  static constexpr int rook_dh[] = {-1, 1, 0, 0};
  static constexpr int rook_dw[] = {0, 0, -1, 1};
  static constexpr int queen_dh[] = {-1, -1, -1, 0, 0, 1, 1, 1};
  static constexpr int queen_dw[] = {-1, 0, 1, -1, 1, -1, 0, 1};
  const int* dh = cfg.adjacency == MoranConfig::Adjacency::rook ? rook_dh : queen_dh;
  const int* dw = cfg.adjacency == MoranConfig::Adjacency::rook ? rook_dw : queen_dw;
  const int degree = cfg.adjacency == MoranConfig::Adjacency::rook ? 4 : 8;

  double cross = 0.0;
  double s0 = 0.0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double di = map.at(i, j) - mean;
      for (int k = 0; k < degree; ++k) {
        const int ni = i + dh[k];
        const int nj = j + dw[k];
        if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
        cross += di * (map.at(ni, nj) - mean);
        s0 += 1.0;
      }
    }
  }
  return (n / s0) * cross / denom;
}

namespace detail {

// Cells holding the map's top-q mass fraction: sorted by value (ties in
// row-major order), included while the cumulative mass stays within q. The
// top cell is always included so the set is never empty.
inline std::vector<int> top_mass_cells(const AttentionMap& map, double q) {
  const auto& vals = map.values();
  std::vector<int> order(vals.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return vals[static_cast<size_t>(a)] > vals[static_cast<size_t>(b)];
  });
  const double total = map.total();
  std::vector<int> cells;
  double acc = 0.0;
  for (int p : order) {
    const double share = total > 0.0 ? vals[static_cast<size_t>(p)] / total : 0.0;
    if (!cells.empty() && acc + share > q) break;
    cells.push_back(p);
    acc += share;
  }
  return cells;
}

}  // namespace detail

// Intersection-over-union of the two maps' top-q mass cell sets.
inline double overlap_ratio(const AttentionMap& map_m,
                            const AttentionMap& map_n, double q = 0.7) {
  if (map_m.height() != map_n.height() || map_m.width() != map_n.width())
    throw ShapeError("overlap_ratio: maps must share dimensions");
  if (!(q > 0.0) || !(q < 1.0))
    throw ValidationError("overlap_ratio: q must lie in (0,1)");

  const auto cm = detail::top_mass_cells(map_m, q);
  const auto cn = detail::top_mass_cells(map_n, q);
  std::vector<char> in_m(map_m.values().size(), 0);
  for (int p : cm) in_m[static_cast<size_t>(p)] = 1;
  int inter = 0;
  for (int p : cn) inter += in_m[static_cast<size_t>(p)];
  const int uni = static_cast<int>(cm.size() + cn.size()) - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

// Mean pairwise centroid distance, computed as agg_sub_loss / (N*(N-1)) so
// the algebraic tie to the aggregation loss holds by construction.
inline double centroid_spread(const std::vector<GroupingRegion>& regions) {
  const size_t n = regions.size();
  if (n == 0) throw ValidationError("centroid_spread: no regions");
  if (n < 2) return 0.0;
  return agg_sub_loss(regions) / static_cast<double>(n * (n - 1));
}

}  // namespace attnguide
