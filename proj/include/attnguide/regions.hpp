// Grouping-region identification: greedy circular masking around successive
// intensity peaks, plus the linear radius schedule.
#pragma once

#include <optional>
#include <vector>

#include "attnguide/core.hpp"

namespace attnguide {

// Discrete disk: cell (i,j) is a member iff (i-c.h)^2 + (j-c.w)^2 <= r^2,
// evaluated on integer offsets so membership is bit-exactly reproducible.
struct CircularMask {
  Cell center;
  double radius = 0.0;

  bool contains(int i, int j) const {
    const double di = i - center.h;
    const double dj = j - center.w;
    return di * di + dj * dj <= radius * radius;
  }
};

// Integer offsets of the disk of radius r around the origin, in row-major
// order. Every mask of the same radius shares this offset list, which fixes
// the within-mask cell order used by the cosine region vectors.
inline std::vector<Cell> disk_offsets(double radius) {
  if (radius <= 0.0) throw ValidationError("disk_offsets: radius must be > 0");
  const int reach = static_cast<int>(std::floor(radius));
  std::vector<Cell> offs;
  for (int di = -reach; di <= reach; ++di)
    for (int dj = -reach; dj <= reach; ++dj)
      if (di * di + dj * dj <= radius * radius) offs.push_back(Cell{di, dj});
  return offs;
}

// A circular-mask subset of one map's activations. `cells` holds exactly the
// in-bounds mask members (masks are clipped at map edges, so `count` varies
// across regions). The centroid is cached when the region carries mass.
struct GroupingRegion {
  CircularMask mask;
  std::vector<CellValue> cells;
  int count = 0;      // N^a: number of in-bounds cells
  double mass = 0.0;  // sum of cell values

  std::optional<Coord> cached_centroid;

  Coord centroid() const {
    if (!cached_centroid)
      throw ZeroMassError("GroupingRegion: zero-mass region has no centroid");
    return *cached_centroid;
  }
};

struct RegionConfig {
  int count = 3;       // N^c
  double radius = 5.0;  // r, in cell units

  void validate() const {
    if (count < 1) throw ValidationError("RegionConfig: count must be >= 1");
    if (!(radius > 0.0) || !std::isfinite(radius))
      throw ValidationError("RegionConfig: radius must be > 0");
  }
};

// Materializes the region under `mask` from the map's current values.
inline GroupingRegion build_region(const AttentionMap& map, CircularMask mask) {
  if (!map.in_bounds(mask.center.h, mask.center.w))
    throw ValidationError("build_region: mask center outside the map");
  GroupingRegion region;
  region.mask = mask;
  const int reach = static_cast<int>(std::floor(mask.radius));
  for (int di = -reach; di <= reach; ++di) {
    for (int dj = -reach; dj <= reach; ++dj) {
      if (di * di + dj * dj > mask.radius * mask.radius) continue;
      const int i = mask.center.h + di;
      const int j = mask.center.w + dj;
      if (!map.in_bounds(i, j)) continue;
      const double v = map.at(i, j);
      region.cells.push_back(CellValue{{i, j}, v});
      region.mass += v;
    }
  }
  region.count = static_cast<int>(region.cells.size());
  if (region.mass > 0.0)
    region.cached_centroid = weighted_centroid(region.cells);
  return region;
}

// Greedy peak search: repeatedly take the global maximum over cells not yet
// covered by any prior mask, drop a disk of radius cfg.radius there, and
// record the region. Stops early once every uncovered cell is zero, so an
// all-zero map yields no regions. Masks may overlap each other's cells, but
// a later center never lies inside an earlier mask.
inline std::vector<GroupingRegion> identify_regions(const AttentionMap& map,
                                                    const RegionConfig& cfg) {
  cfg.validate();
  const int h = map.height();
  const int w = map.width();
  std::vector<char> covered(static_cast<size_t>(h) * w, 0);
  std::vector<GroupingRegion> regions;
  regions.reserve(static_cast<size_t>(cfg.count));

  for (int n = 0; n < cfg.count; ++n) {
    double best = 0.0;
    Cell best_cell{-1, -1};
    bool found = false;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (covered[static_cast<size_t>(i) * w + j]) continue;
        const double v = map.at(i, j);
        if (v > 0.0 && (!found || v > best)) {
          best = v;
          best_cell = Cell{i, j};
          found = true;
        }
      }
    }
    if (!found) break;  // every uncovered cell is zero

    GroupingRegion region =
        build_region(map, CircularMask{best_cell, cfg.radius});
    for (const auto& cv : region.cells)
      covered[static_cast<size_t>(cv.cell.h) * w + cv.cell.w] = 1;
    regions.push_back(std::move(region));
  }
  return regions;
}

// Linear radius ramp across the optimization window; a one-step window sits
// at r_start.
inline double radius_schedule(int step_index, int total_opt_steps,
                              double r_start, double r_end) {
  if (total_opt_steps < 1)
    throw ValidationError("radius_schedule: total_opt_steps must be >= 1");
  if (step_index < 0 || step_index >= total_opt_steps)
    throw ValidationError("radius_schedule: step_index out of range");
  if (!(r_start > 0.0) || !(r_end > 0.0))
    throw ValidationError("radius_schedule: radii must be > 0");
  if (total_opt_steps == 1) return r_start;
  return r_start + (r_end - r_start) * static_cast<double>(step_index) /
                       static_cast<double>(total_opt_steps - 1);
}

}  // namespace attnguide
