// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

namespace musu {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Axis-aligned box in image coordinates, corner form.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  Vec2 center() const { return {0.5 * (x1 + x2), 0.5 * (y1 + y2)}; }
  bool valid() const { return x1 <= x2 && y1 <= y2; }

  // Strict interior test; points on the border do not count.
  bool contains(const Vec2& p) const {
    return p.x > x1 && p.x < x2 && p.y > y1 && p.y < y2;
  }

  bool operator==(const Box&) const = default;
};

struct LabeledBox {
  Box box;
  int category = 0;
};

struct Detection {
  Box box;
  int category = 0;
  double score = 0.0;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

struct GiouLossResult {
  double loss = 0.0;
  // d loss / d (pred.x1, pred.y1, pred.x2, pred.y2)
  std::array<double, 4> grad{};
};

// loss = 1 - GIoU = 2 - I/U - U/C with C the smallest enclosing box.
// At kinks (touching edges) the subgradient from the interior side is
// used: the pred edge is taken as active on ties.
inline GiouLossResult giou_loss(const Box& pred, const Box& gt) {
  const double pw = pred.width();
  const double ph = pred.height();

  const double iw = std::min(pred.x2, gt.x2) - std::max(pred.x1, gt.x1);
  const double ih = std::min(pred.y2, gt.y2) - std::max(pred.y1, gt.y1);
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = pred.area() + gt.area() - inter;

  const double cw = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
  const double ch = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
  const double encl = cw * ch;

  GiouLossResult out;
  out.loss = 2.0 - inter / uni - uni / encl;

  // dA/dp
  const std::array<double, 4> darea = {-ph, -pw, ph, pw};

  // dI/dp (one-sided: zero unless the boxes overlap)
  std::array<double, 4> dinter{};
  if (overlap) {
    if (pred.x1 >= gt.x1) dinter[0] = -ih;
    if (pred.y1 >= gt.y1) dinter[1] = -iw;
    if (pred.x2 <= gt.x2) dinter[2] = ih;
    if (pred.y2 <= gt.y2) dinter[3] = iw;
  }

  // dC/dp
  std::array<double, 4> dencl{};
  if (pred.x1 <= gt.x1) dencl[0] = -ch;
  if (pred.y1 <= gt.y1) dencl[1] = -cw;
  if (pred.x2 >= gt.x2) dencl[2] = ch;
  if (pred.y2 >= gt.y2) dencl[3] = cw;

  for (int c = 0; c < 4; ++c) {
    const double duni = darea[c] - dinter[c];
    out.grad[c] = -(dinter[c] * uni - inter * duni) / (uni * uni)
                  - (duni * encl - uni * dencl[c]) / (encl * encl);
  }
  return out;
}

// Greedy class-wise NMS. Detections below score_threshold are dropped,
// the rest are processed by descending score (stable on ties) and any
// same-category detection with IoU > iou_threshold against a kept one
// is suppressed. Output is sorted by descending score.
inline std::vector<Detection> nms(const std::vector<Detection>& detections,
                                  double iou_threshold,
                                  double score_threshold) {
  std::vector<std::size_t> order;
  order.reserve(detections.size());
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (detections[i].score >= score_threshold) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<Detection> kept;
  for (const std::size_t i : order) {
    const Detection& cand = detections[i];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.category == cand.category && iou(k.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

} // namespace musu
