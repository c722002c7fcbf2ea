// SPDX-License-Identifier: Apache-2.0
//
// Naive reference implementations used as independent oracles. These are
// deliberately written as plain loops over the published formulas, with
// ranks obtained by counting rather than sorting, and share no code with
// the library paths they check.
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "musu/assignment.hpp"
#include "musu/geometry.hpp"

namespace oracle {

inline double iou_ref(const musu::Box& a, const musu::Box& b) {
  const double ix1 = a.x1 > b.x1 ? a.x1 : b.x1;
  const double iy1 = a.y1 > b.y1 ? a.y1 : b.y1;
  const double ix2 = a.x2 < b.x2 ? a.x2 : b.x2;
  const double iy2 = a.y2 < b.y2 ? a.y2 : b.y2;
  double inter = 0.0;
  if (ix2 > ix1 && iy2 > iy1) inter = (ix2 - ix1) * (iy2 - iy1);
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct MemberRef {
  std::size_t anchor = 0;
  double p = 0.0;
  double q = 0.0;
  double joint = 0.0;
  double v_cls = 0.0;
  double v_reg = 0.0;
  int rank_cls = 0;
  int rank_reg = 0;
  double w_cls = 0.0;
  double w_reg = 0.0;
};

struct BagRef {
  std::vector<MemberRef> members;
  double threshold = 0.0;
  double tau_cls = 0.0;
  double tau_reg = 0.0;
  bool degenerate = false;
};

struct AssignRef {
  std::vector<std::optional<std::size_t>> match; // per anchor
  std::vector<BagRef> bags;                      // per object
};

// Rank of element m = number of strictly larger values, plus the number
// of equal values at a smaller position.
inline int rank_by_count(const std::vector<double>& values, std::size_t m) {
  int rank = 0;
  for (std::size_t o = 0; o < values.size(); ++o) {
    if (values[o] > values[m]) ++rank;
    if (values[o] == values[m] && o < m) ++rank;
  }
  return rank;
}

inline AssignRef assign_ref(const musu::PredictionSnapshot& snapshot,
                            const std::vector<musu::LabeledBox>& gt,
                            const std::vector<musu::Vec2>& centers,
                            const musu::AssignConfig& cfg) {
  const std::size_t n = snapshot.num_anchors();
  AssignRef out;
  out.match.resize(n);

  // highest-IoU object among boxes strictly containing the center;
  // ties broken by smaller GT area, then smaller index
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const musu::Box& gb = gt[j].box;
      const bool inside = centers[i].x > gb.x1 && centers[i].x < gb.x2 &&
                          centers[i].y > gb.y1 && centers[i].y < gb.y2;
      if (!inside) continue;
      if (!best) {
        best = j;
        continue;
      }
      const double cur = iou_ref(snapshot.boxes[i], gb);
      const double prev = iou_ref(snapshot.boxes[i], gt[*best].box);
      if (cur > prev) {
        best = j;
      } else if (cur == prev) {
        const double cur_area = (gb.x2 - gb.x1) * (gb.y2 - gb.y1);
        const double prev_area = (gt[*best].box.x2 - gt[*best].box.x1) *
                                 (gt[*best].box.y2 - gt[*best].box.y1);
        if (cur_area < prev_area) best = j;
      }
    }
    out.match[i] = best;
  }

  out.bags.resize(gt.size());
  for (std::size_t j = 0; j < gt.size(); ++j) {
    BagRef& bag = out.bags[j];

    std::vector<MemberRef> matched;
    double max_joint = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!out.match[i] || *out.match[i] != j) continue;
      MemberRef m;
      m.anchor = i;
      m.p = snapshot.prob(i, gt[j].category);
      m.q = std::pow(iou_ref(snapshot.boxes[i], gt[j].box), cfg.theta);
      m.joint = m.p * m.q;
      if (m.joint > max_joint) max_joint = m.joint;
      matched.push_back(m);
    }
    if (matched.empty()) continue;

    bag.degenerate = max_joint == 0.0;
    bag.threshold = bag.degenerate ? 0.0 : cfg.bag_threshold * max_joint;
    for (const MemberRef& m : matched) {
      if (bag.degenerate || m.joint >= bag.threshold) bag.members.push_back(m);
    }

    std::vector<double> v_cls(bag.members.size());
    std::vector<double> v_reg(bag.members.size());
    for (std::size_t m = 0; m < bag.members.size(); ++m) {
      if (bag.degenerate) {
        const double raw = iou_ref(snapshot.boxes[bag.members[m].anchor], gt[j].box);
        v_cls[m] = raw;
        v_reg[m] = raw;
      } else {
        v_cls[m] = bag.members[m].q * std::pow(bag.members[m].p, cfg.alpha);
        v_reg[m] = bag.members[m].p * std::pow(bag.members[m].q, cfg.alpha);
      }
      bag.members[m].v_cls = v_cls[m];
      bag.members[m].v_reg = v_reg[m];
    }

    bag.tau_cls = cfg.fixed_tau ? *cfg.fixed_tau
                                : std::sqrt(static_cast<double>(bag.members.size()));
    bag.tau_reg = cfg.tau_ratio * bag.tau_cls;

    for (std::size_t m = 0; m < bag.members.size(); ++m) {
      MemberRef& mem = bag.members[m];
      mem.rank_cls = rank_by_count(v_cls, m);
      mem.rank_reg = rank_by_count(v_reg, m);
      if (cfg.hard_targets) {
        mem.w_cls = mem.rank_cls < bag.tau_cls ? 1.0 : 0.0;
        mem.w_reg = mem.rank_reg < bag.tau_reg ? 1.0 : 0.0;
      } else {
        mem.w_cls = std::exp(-mem.rank_cls / bag.tau_cls);
        mem.w_reg = std::exp(-mem.rank_reg / bag.tau_reg);
      }
    }
  }
  return out;
}

} // namespace oracle
