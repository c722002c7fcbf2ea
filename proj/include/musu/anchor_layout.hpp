// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "musu/geometry.hpp"
#include "musu/random.hpp"

namespace musu {

struct LevelSpec {
  int grid_h = 0;
  int grid_w = 0;
  double stride = 0.0;
};

// Grid geometry of the dense head. Anchors are flattened level-major,
// then row, column, slot: index = base(level) + (row*grid_w + col)*A + slot.
struct AnchorLayout {
  std::vector<LevelSpec> levels;
  int anchors_per_location = 1;
  std::vector<double> scales; // sigma per slot, in [1, 2]
  std::vector<double> ratios; // rho per slot (width/height), in [1/2, 2]

  std::size_t num_anchors() const {
    std::size_t n = 0;
    for (const auto& lv : levels) {
      n += static_cast<std::size_t>(lv.grid_h) * lv.grid_w * anchors_per_location;
    }
    return n;
  }

  struct AnchorId {
    int level = 0;
    int row = 0;
    int col = 0;
    int slot = 0;
    bool operator==(const AnchorId&) const = default;
  };

  AnchorId unflatten(std::size_t index) const {
    std::size_t rest = index;
    for (int lv = 0; lv < static_cast<int>(levels.size()); ++lv) {
      const auto& l = levels[lv];
      const std::size_t count =
          static_cast<std::size_t>(l.grid_h) * l.grid_w * anchors_per_location;
      if (rest < count) {
        const int slot = static_cast<int>(rest % anchors_per_location);
        const std::size_t cell = rest / anchors_per_location;
        return {lv, static_cast<int>(cell / l.grid_w),
                static_cast<int>(cell % l.grid_w), slot};
      }
      rest -= count;
    }
    throw std::out_of_range("anchor index out of range");
  }

  std::size_t flatten(const AnchorId& id) const {
    std::size_t base = 0;
    for (int lv = 0; lv < id.level; ++lv) {
      base += static_cast<std::size_t>(levels[lv].grid_h) * levels[lv].grid_w *
              anchors_per_location;
    }
    return base +
           (static_cast<std::size_t>(id.row) * levels[id.level].grid_w + id.col) *
               anchors_per_location +
           id.slot;
  }

  // Center of grid cell (row, col) at a level: ((col+0.5)s, (row+0.5)s).
  std::vector<Vec2> anchor_centers() const {
    std::vector<Vec2> centers;
    centers.reserve(num_anchors());
    for (const auto& lv : levels) {
      for (int r = 0; r < lv.grid_h; ++r) {
        for (int c = 0; c < lv.grid_w; ++c) {
          const Vec2 p{(c + 0.5) * lv.stride, (r + 0.5) * lv.stride};
          for (int a = 0; a < anchors_per_location; ++a) centers.push_back(p);
        }
      }
    }
    return centers;
  }

  double stride_of(std::size_t index) const { return levels[unflatten(index).level].stride; }
  int slot_of(std::size_t index) const {
    return static_cast<int>(index % anchors_per_location);
  }
};

// Slot scales/ratios: the single-anchor configuration is the plain
// FCOS-like 2s x 2s prior (sigma = rho = 1); with more slots each gets a
// random scale from [1,2] and aspect ratio from [1/2,2].
inline AnchorLayout make_anchor_layout(std::vector<LevelSpec> levels,
                                       int anchors_per_location,
                                       std::uint64_t seed) {
  if (levels.empty()) throw std::invalid_argument("anchor layout needs at least one level");
  if (anchors_per_location < 1) throw std::invalid_argument("anchors_per_location must be >= 1");
  for (const auto& lv : levels) {
    if (lv.grid_h < 1 || lv.grid_w < 1 || lv.stride <= 0.0) {
      throw std::invalid_argument("invalid level spec");
    }
  }

  AnchorLayout layout;
  layout.levels = std::move(levels);
  layout.anchors_per_location = anchors_per_location;
  if (anchors_per_location == 1) {
    layout.scales = {1.0};
    layout.ratios = {1.0};
  } else {
    Rng rng(seed);
    layout.scales.resize(anchors_per_location);
    layout.ratios.resize(anchors_per_location);
    for (int a = 0; a < anchors_per_location; ++a) layout.scales[a] = rng.uniform(1.0, 2.0);
    for (int a = 0; a < anchors_per_location; ++a) layout.ratios[a] = rng.uniform(0.5, 2.0);
  }
  return layout;
}

} // namespace musu
