// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "musu/anchor_layout.hpp"
#include "musu/geometry.hpp"

namespace musu {

inline constexpr int kNoObject = -1;

struct AssignConfig {
  double theta = 4.0;          // IoU rescaling exponent
  double bag_threshold = 0.1;  // coefficient b in t = b * max P
  double alpha = 1.0 / 3.0;    // criteria regularizer
  double tau_ratio = 0.5;      // tau_reg = tau_ratio * tau_cls
  bool hard_targets = false;   // w = 1[R < tau] instead of exp(-R/tau)
  std::optional<double> fixed_tau; // disables the adaptive sqrt(|C|) temperature
};

// Frozen per-anchor predictions fed into assignment. Probabilities are
// the merged (category * objectness) scores, row-major [num_anchors][K].
struct PredictionSnapshot {
  int num_categories = 0;
  std::vector<double> probabilities;
  std::vector<Box> boxes;

  std::size_t num_anchors() const { return boxes.size(); }
  double prob(std::size_t anchor, int category) const {
    return probabilities[anchor * num_categories + category];
  }
  double& prob(std::size_t anchor, int category) {
    return probabilities[anchor * num_categories + category];
  }
};

struct CandidateBag {
  int object_index = kNoObject;
  std::vector<std::size_t> members;      // anchor indices, ascending
  double threshold = 0.0;                // t = b * max_i P_i
  std::vector<double> joint_likelihoods; // P_i per member
  // max P was zero: every matched anchor kept, ranked by raw IoU.
  bool degenerate = false;

  bool ignored() const { return members.empty(); }
};

// Per-object ranking detail; vectors are aligned with bag.members.
struct ObjectAssignment {
  CandidateBag bag;
  double tau_cls = 0.0;
  double tau_reg = 0.0;
  std::vector<double> v_cls;
  std::vector<double> v_reg;
  std::vector<int> rank_cls;
  std::vector<int> rank_reg;
  std::vector<double> w_cls;
  std::vector<double> w_reg;
};

struct AssignmentOutput {
  // Flat per-anchor views; kNoObject / -1 / 0 outside all bags.
  std::vector<int> object;
  std::vector<int> category;
  std::vector<int> rank_cls;
  std::vector<int> rank_reg;
  std::vector<double> w_cls;
  std::vector<double> w_reg;
  std::vector<ObjectAssignment> objects; // one entry per GT object

  std::size_t num_anchors() const { return object.size(); }
  bool assigned(std::size_t anchor) const { return object[anchor] != kNoObject; }
};

// Highest-IoU object per anchor, restricted to objects whose box strictly
// contains the anchor center. IoU ties prefer the smaller GT area, then
// the smaller object index.
inline std::vector<int> match_gt(std::span<const Vec2> anchor_centers,
                                 std::span<const Box> predicted_boxes,
                                 std::span<const Box> gt_boxes) {
  if (anchor_centers.size() != predicted_boxes.size()) {
    throw std::invalid_argument("match_gt: anchor/box count mismatch");
  }
  std::vector<int> matches(anchor_centers.size(), kNoObject);
  for (std::size_t i = 0; i < anchor_centers.size(); ++i) {
    int best = kNoObject;
    double best_iou = -1.0;
    double best_area = 0.0;
    for (int j = 0; j < static_cast<int>(gt_boxes.size()); ++j) {
      if (!gt_boxes[j].contains(anchor_centers[i])) continue;
      const double ov = iou(predicted_boxes[i], gt_boxes[j]);
      const double area = gt_boxes[j].area();
      if (ov > best_iou || (ov == best_iou && best != kNoObject && area < best_area)) {
        best = j;
        best_iou = ov;
        best_area = area;
      }
    }
    matches[i] = best;
  }
  return matches;
}

// Candidate bag per object: over its matched anchors, P_i = p_i * IoU_i^theta
// with p_i the merged score of the object's category, t = b * max P, and
// members = {i : P_i >= t}. A zero max P keeps all matched anchors.
inline std::vector<CandidateBag> build_candidate_bags(
    const PredictionSnapshot& snapshot, std::span<const int> matches,
    std::span<const LabeledBox> gt, const AssignConfig& cfg) {
  if (matches.size() != snapshot.num_anchors()) {
    throw std::invalid_argument("build_candidate_bags: matches/snapshot mismatch");
  }
  std::vector<CandidateBag> bags(gt.size());
  std::vector<std::vector<std::size_t>> matched(gt.size());
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (matches[i] != kNoObject) matched[matches[i]].push_back(i);
  }

  for (std::size_t j = 0; j < gt.size(); ++j) {
    CandidateBag& bag = bags[j];
    bag.object_index = static_cast<int>(j);
    if (matched[j].empty()) continue; // ignored object

    std::vector<double> joint(matched[j].size());
    double max_p = 0.0;
    for (std::size_t m = 0; m < matched[j].size(); ++m) {
      const std::size_t i = matched[j][m];
      const double q = std::pow(iou(snapshot.boxes[i], gt[j].box), cfg.theta);
      joint[m] = snapshot.prob(i, gt[j].category) * q;
      max_p = std::max(max_p, joint[m]);
    }

    if (max_p == 0.0) {
      bag.degenerate = true;
      bag.threshold = 0.0;
      bag.members = matched[j];
      bag.joint_likelihoods = joint;
      continue;
    }

    bag.threshold = cfg.bag_threshold * max_p;
    for (std::size_t m = 0; m < matched[j].size(); ++m) {
      if (joint[m] >= bag.threshold) {
        bag.members.push_back(matched[j][m]);
        bag.joint_likelihoods.push_back(joint[m]);
      }
    }
  }
  return bags;
}

struct CriteriaPair {
  double cls = 0.0;
  double reg = 0.0;
};

// Regularized mutual criteria: v_cls = q * p^alpha, v_reg = p * q^alpha.
// std::pow(0, 0) == 1, which is the wanted convention at alpha = 0.
inline CriteriaPair mutual_criteria(double p, double q, double alpha) {
  return {q * std::pow(p, alpha), p * std::pow(q, alpha)};
}

struct RankedWeights {
  std::vector<int> ranks;      // rank of each input position, 0 = best
  std::vector<double> weights;
};

// Ranks by descending value (ties by ascending position, stable), then
// soft weights exp(-R/tau) or hard weights 1[R < tau].
inline RankedWeights rank_to_weights(std::span<const double> values, double tau,
                                     bool hard) {
  if (tau <= 0.0) throw std::invalid_argument("rank_to_weights: tau must be > 0");
  for (const double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("rank_to_weights: non-finite value");
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });

  RankedWeights out;
  out.ranks.resize(values.size());
  out.weights.resize(values.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    out.ranks[order[r]] = static_cast<int>(r);
    out.weights[order[r]] =
        hard ? (static_cast<double>(r) < tau ? 1.0 : 0.0)
             : std::exp(-static_cast<double>(r) / tau);
  }
  return out;
}

// Full per-image pipeline: match, bag construction, per-bag mutual
// criteria, per-head ranking with tau_cls = sqrt(|C_j|) (or fixed_tau)
// and tau_reg = tau_ratio * tau_cls, weights per the rank translation.
inline AssignmentOutput musu_assign(const PredictionSnapshot& snapshot,
                                    std::span<const LabeledBox> gt,
                                    std::span<const Vec2> anchor_centers,
                                    const AssignConfig& cfg) {
  const std::size_t n = snapshot.num_anchors();
  AssignmentOutput out;
  out.object.assign(n, kNoObject);
  out.category.assign(n, -1);
  out.rank_cls.assign(n, -1);
  out.rank_reg.assign(n, -1);
  out.w_cls.assign(n, 0.0);
  out.w_reg.assign(n, 0.0);

  std::vector<Box> gt_boxes(gt.size());
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (gt[j].category < 0 || gt[j].category >= snapshot.num_categories) {
      throw std::invalid_argument("musu_assign: gt category outside [0, K)");
    }
    gt_boxes[j] = gt[j].box;
  }

  const std::vector<int> matches = match_gt(anchor_centers, snapshot.boxes, gt_boxes);
  std::vector<CandidateBag> bags = build_candidate_bags(snapshot, matches, gt, cfg);

  out.objects.reserve(bags.size());
  for (std::size_t j = 0; j < bags.size(); ++j) {
    ObjectAssignment oa;
    oa.bag = std::move(bags[j]);
    const std::size_t size = oa.bag.members.size();
    if (size > 0) {
      oa.v_cls.resize(size);
      oa.v_reg.resize(size);
      for (std::size_t m = 0; m < size; ++m) {
        const std::size_t i = oa.bag.members[m];
        const double raw_iou = iou(snapshot.boxes[i], gt[j].box);
        if (oa.bag.degenerate) {
          oa.v_cls[m] = raw_iou;
          oa.v_reg[m] = raw_iou;
        } else {
          const double p = snapshot.prob(i, gt[j].category);
          const double q = std::pow(raw_iou, cfg.theta);
          const CriteriaPair v = mutual_criteria(p, q, cfg.alpha);
          oa.v_cls[m] = v.cls;
          oa.v_reg[m] = v.reg;
        }
      }

      oa.tau_cls = cfg.fixed_tau ? *cfg.fixed_tau : std::sqrt(static_cast<double>(size));
      oa.tau_reg = cfg.tau_ratio * oa.tau_cls;

      RankedWeights cls = rank_to_weights(oa.v_cls, oa.tau_cls, cfg.hard_targets);
      RankedWeights reg = rank_to_weights(oa.v_reg, oa.tau_reg, cfg.hard_targets);
      oa.rank_cls = std::move(cls.ranks);
      oa.w_cls = std::move(cls.weights);
      oa.rank_reg = std::move(reg.ranks);
      oa.w_reg = std::move(reg.weights);

      for (std::size_t m = 0; m < size; ++m) {
        const std::size_t i = oa.bag.members[m];
        out.object[i] = static_cast<int>(j);
        out.category[i] = gt[j].category;
        out.rank_cls[i] = oa.rank_cls[m];
        out.rank_reg[i] = oa.rank_reg[m];
        out.w_cls[i] = oa.w_cls[m];
        out.w_reg[i] = oa.w_reg[m];
      }
    }
    out.objects.push_back(std::move(oa));
  }
  return out;
}

inline AssignmentOutput musu_assign(const PredictionSnapshot& snapshot,
                                    std::span<const LabeledBox> gt,
                                    const AnchorLayout& layout,
                                    const AssignConfig& cfg) {
  const std::vector<Vec2> centers = layout.anchor_centers();
  return musu_assign(snapshot, gt, std::span<const Vec2>(centers), cfg);
}

} // namespace musu
