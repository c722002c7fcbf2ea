// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "musu/assignment.hpp"
#include "musu/geometry.hpp"

namespace musu {

struct FocalParams {
  double gamma = 2.0;   // focusing
  double balance = 0.25;
  double beta = 4.0;    // penalty decay on (1 - w)
};

// Raw (pre-normalization) classification sums plus the normalized
// regression value; l_cls() divides the three parts by n_cls.
struct LossBreakdown {
  double l_cls_pos = 0.0;
  double l_cls_neg_penalty = 0.0;
  double l_cls_background = 0.0;
  double l_reg = 0.0;
  double l_total = 0.0;
  double n_cls = 1.0;
  double n_reg = 1.0;

  double l_cls() const {
    return (l_cls_pos + l_cls_neg_penalty + l_cls_background) / n_cls;
  }
};

namespace detail {

inline constexpr double kProbClamp = 1e-6;

inline double clamp_prob(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument("classification_loss: probability outside [0, 1]");
  }
  return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

// Positive focal term balance*(1-p)^g*(-log p) and its derivative.
struct TermValueGrad {
  double value;
  double grad;
};

inline TermValueGrad focal_pos(double p, const FocalParams& fp) {
  const double om = 1.0 - p;
  const double pow_om = std::pow(om, fp.gamma);
  const double value = fp.balance * pow_om * (-std::log(p));
  const double grad =
      fp.balance * (fp.gamma * std::pow(om, fp.gamma - 1.0) * std::log(p) - pow_om / p);
  return {value, grad};
}

// Negative focal term (1-balance)*p^g*(-log(1-p)) and its derivative.
inline TermValueGrad focal_neg(double p, const FocalParams& fp) {
  const double pow_p = std::pow(p, fp.gamma);
  const double value = (1.0 - fp.balance) * pow_p * (-std::log(1.0 - p));
  const double grad = (1.0 - fp.balance) *
                      (-fp.gamma * std::pow(p, fp.gamma - 1.0) * std::log(1.0 - p) +
                       pow_p / (1.0 - p));
  return {value, grad};
}

} // namespace detail

struct ClassificationLossResult {
  double pos_sum = 0.0;
  double neg_penalty_sum = 0.0;
  double background_sum = 0.0;
  double normalizer = 1.0; // N = max(sum w_cls, 1)
  std::vector<double> grad_probabilities; // d l_cls / d p, row-major [N][K]

  double value() const { return (pos_sum + neg_penalty_sum + background_sum) / normalizer; }
};

// Three-part weighted focal loss. A bag member with assigned category c
// and weight w contributes w*FL+(p_ic) + (1-w)^beta*FL-(p_ic) plus the
// background term over the other categories; every other anchor is pure
// background over all K categories. The whole sum is divided by
// N = max(sum_i w_cls_i, 1).
inline ClassificationLossResult classification_loss(const PredictionSnapshot& snapshot,
                                                    const AssignmentOutput& assign,
                                                    const FocalParams& params) {
  const std::size_t n = snapshot.num_anchors();
  const int k = snapshot.num_categories;
  if (assign.num_anchors() != n) {
    throw std::invalid_argument("classification_loss: assignment/snapshot mismatch");
  }

  ClassificationLossResult out;
  out.grad_probabilities.assign(n * static_cast<std::size_t>(k), 0.0);

  double weight_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) weight_sum += assign.w_cls[i];
  out.normalizer = std::max(weight_sum, 1.0);

  for (std::size_t i = 0; i < n; ++i) {
    const int assigned = assign.assigned(i) ? assign.category[i] : -1;
    if (assigned >= k) {
      throw std::invalid_argument("classification_loss: assigned category outside [0, K)");
    }
    const double w = assign.w_cls[i];
    for (int c = 0; c < k; ++c) {
      const double p = detail::clamp_prob(snapshot.prob(i, c));
      if (c == assigned) {
        const auto pos = detail::focal_pos(p, params);
        const auto neg = detail::focal_neg(p, params);
        const double penalty_coeff = std::pow(1.0 - w, params.beta);
        out.pos_sum += w * pos.value;
        out.neg_penalty_sum += penalty_coeff * neg.value;
        out.grad_probabilities[i * k + c] +=
            (w * pos.grad + penalty_coeff * neg.grad) / out.normalizer;
      } else {
        const auto neg = detail::focal_neg(p, params);
        out.background_sum += neg.value;
        out.grad_probabilities[i * k + c] += neg.grad / out.normalizer;
      }
    }
  }
  return out;
}

struct RegressionLossResult {
  double value = 0.0;
  double normalizer = 1.0; // sum of w_reg, or 1 when no anchor is weighted
  std::vector<std::array<double, 4>> grad_boxes; // d l_reg / d pred coords
};

// Weighted GIoU loss: sum_i w_reg_i * giou_loss_i / N with N the weight
// sum (1 when empty). Gradients land on the weighted anchors only.
inline RegressionLossResult regression_loss(std::span<const Box> predicted_boxes,
                                            const AssignmentOutput& assign,
                                            std::span<const LabeledBox> gt) {
  const std::size_t n = predicted_boxes.size();
  if (assign.num_anchors() != n) {
    throw std::invalid_argument("regression_loss: assignment/boxes mismatch");
  }

  RegressionLossResult out;
  out.grad_boxes.assign(n, {0.0, 0.0, 0.0, 0.0});

  double weight_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) weight_sum += assign.w_reg[i];
  out.normalizer = weight_sum > 0.0 ? weight_sum : 1.0;

  for (std::size_t i = 0; i < n; ++i) {
    const double w = assign.w_reg[i];
    if (w <= 0.0 || !assign.assigned(i)) continue;
    if (assign.object[i] >= static_cast<int>(gt.size())) {
      throw std::invalid_argument("regression_loss: assignment references a missing object");
    }
    const GiouLossResult g = giou_loss(predicted_boxes[i], gt[assign.object[i]].box);
    out.value += w * g.loss / out.normalizer;
    for (int c = 0; c < 4; ++c) out.grad_boxes[i][c] = w * g.grad[c] / out.normalizer;
  }
  return out;
}

struct TotalLossResult {
  LossBreakdown breakdown;
  std::vector<double> grad_probabilities;
  std::vector<std::array<double, 4>> grad_boxes;
};

// L_det = L_cls + L_reg; assignment weights are constants here
// (stop-gradient contract), so the gradients are the plain sums of the
// part gradients.
inline TotalLossResult total_loss(const PredictionSnapshot& snapshot,
                                  const AssignmentOutput& assign,
                                  std::span<const LabeledBox> gt,
                                  const FocalParams& params) {
  ClassificationLossResult cls = classification_loss(snapshot, assign, params);
  RegressionLossResult reg = regression_loss(snapshot.boxes, assign, gt);

  TotalLossResult out;
  out.breakdown.l_cls_pos = cls.pos_sum;
  out.breakdown.l_cls_neg_penalty = cls.neg_penalty_sum;
  out.breakdown.l_cls_background = cls.background_sum;
  out.breakdown.n_cls = cls.normalizer;
  out.breakdown.l_reg = reg.value;
  out.breakdown.n_reg = reg.normalizer;
  out.breakdown.l_total = out.breakdown.l_cls() + out.breakdown.l_reg;
  out.grad_probabilities = std::move(cls.grad_probabilities);
  out.grad_boxes = std::move(reg.grad_boxes);
  return out;
}

} // namespace musu
