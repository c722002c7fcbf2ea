// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "musu/assignment.hpp"
#include "musu/detector.hpp"
#include "musu/geometry.hpp"
#include "musu/scenes.hpp"

namespace musu {

struct EvalReport {
  std::vector<std::pair<double, double>> ap_per_iou; // (threshold, AP), ascending
  double ap_coco = 0.0; // mean over thresholds 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double agreement_rate = 0.0;
  double pearson_p_vs_iou = 0.0;
};

// Decode, keep the per-anchor max-category score, drop scores below the
// threshold, class-wise NMS.
inline std::vector<Detection> run_inference(const DetectorParams& params,
                                            const AnchorLayout& layout,
                                            double score_threshold = 0.05,
                                            double nms_threshold = 0.6) {
  const PredictionSnapshot snap = decode(params, layout);
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < snap.num_anchors(); ++i) {
    int best_cat = 0;
    double best = snap.prob(i, 0);
    for (int c = 1; c < snap.num_categories; ++c) {
      if (snap.prob(i, c) > best) {
        best = snap.prob(i, c);
        best_cat = c;
      }
    }
    dets.push_back({snap.boxes[i], best_cat, best});
  }
  return nms(dets, nms_threshold, score_threshold);
}

struct PrCurvePoint {
  double score = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

namespace detail {

// One category's PR operating points. Detections arrive as (scene,
// score, box); each GT is matched at most once, greedily in score
// order, to the unmatched GT with the highest IoU >= threshold.
struct CategoryDetection {
  std::size_t scene = 0;
  double score = 0.0;
  Box box;
};

inline std::vector<PrCurvePoint> category_pr(std::vector<CategoryDetection> dets,
                                             const std::vector<std::vector<Box>>& gt_per_scene,
                                             std::size_t total_gt, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const CategoryDetection& a, const CategoryDetection& b) {
                     return a.score > b.score;
                   });

  std::vector<std::vector<bool>> matched(gt_per_scene.size());
  for (std::size_t s = 0; s < gt_per_scene.size(); ++s) {
    matched[s].assign(gt_per_scene[s].size(), false);
  }

  std::vector<PrCurvePoint> curve;
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (const CategoryDetection& d : dets) {
    const auto& gts = gt_per_scene[d.scene];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (matched[d.scene][g]) continue;
      const double ov = iou(d.box, gts[g]);
      if (ov >= best_iou && (best < 0 || ov > best_iou)) {
        best = static_cast<int>(g);
        best_iou = ov;
      }
    }
    if (best >= 0) {
      matched[d.scene][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    curve.push_back({d.score,
                     static_cast<double>(tp) / static_cast<double>(total_gt),
                     static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  return curve;
}

// 101-point interpolation: max precision over all operating points with
// recall >= r, sampled at r = 0.00, 0.01, ..., 1.00.
inline double interpolated_ap(const std::vector<PrCurvePoint>& curve) {
  double ap = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    double best_p = 0.0;
    for (const PrCurvePoint& pt : curve) {
      if (pt.recall >= r) best_p = std::max(best_p, pt.precision);
    }
    ap += best_p;
  }
  return ap / 101.0;
}

inline std::vector<CategoryDetection> collect_category(
    std::span<const std::vector<Detection>> detections_per_scene, int category) {
  std::vector<CategoryDetection> dets;
  for (std::size_t s = 0; s < detections_per_scene.size(); ++s) {
    for (const Detection& d : detections_per_scene[s]) {
      if (d.category == category) dets.push_back({s, d.score, d.box});
    }
  }
  return dets;
}

inline std::vector<std::vector<Box>> collect_gt(std::span<const Scene> scenes, int category,
                                                std::size_t& total_gt) {
  std::vector<std::vector<Box>> gt(scenes.size());
  total_gt = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (const LabeledBox& o : scenes[s].objects) {
      if (o.category == category) {
        gt[s].push_back(o.box);
        ++total_gt;
      }
    }
  }
  return gt;
}

} // namespace detail

// COCO-style AP at one IoU threshold: per-category AP over the pooled
// scene set, meaned over categories that have ground truth.
inline double average_precision(std::span<const std::vector<Detection>> detections_per_scene,
                                std::span<const Scene> scenes, double iou_threshold) {
  if (detections_per_scene.size() != scenes.size()) {
    throw std::invalid_argument("average_precision: detections/scenes size mismatch");
  }
  std::set<int> categories;
  std::size_t total_gt = 0;
  for (const Scene& s : scenes) {
    for (const LabeledBox& o : s.objects) {
      categories.insert(o.category);
      ++total_gt;
    }
  }
  if (total_gt == 0) {
    throw std::invalid_argument("average_precision: no ground truth objects");
  }

  double sum = 0.0;
  for (const int cat : categories) {
    std::size_t cat_gt = 0;
    const auto gt = detail::collect_gt(scenes, cat, cat_gt);
    const auto curve = detail::category_pr(detail::collect_category(detections_per_scene, cat),
                                           gt, cat_gt, iou_threshold);
    sum += detail::interpolated_ap(curve);
  }
  return sum / static_cast<double>(categories.size());
}

// Raw operating points per category present in the ground truth, for
// external plotting.
inline std::map<int, std::vector<PrCurvePoint>> pr_curves(
    std::span<const std::vector<Detection>> detections_per_scene,
    std::span<const Scene> scenes, double iou_threshold) {
  std::set<int> categories;
  for (const Scene& s : scenes) {
    for (const LabeledBox& o : s.objects) categories.insert(o.category);
  }
  std::map<int, std::vector<PrCurvePoint>> out;
  for (const int cat : categories) {
    std::size_t cat_gt = 0;
    const auto gt = detail::collect_gt(scenes, cat, cat_gt);
    out[cat] = detail::category_pr(detail::collect_category(detections_per_scene, cat),
                                   gt, cat_gt, iou_threshold);
  }
  return out;
}

struct ConsistencyResult {
  double agreement_rate = 0.0;
  double pearson = 0.0;
  // raw tallies so results from several tables can be pooled exactly
  std::size_t objects_scored = 0;
  std::size_t objects_agreeing = 0;
  std::vector<std::pair<double, double>> pooled; // (p, IoU) over bag members
};

namespace detail {

inline double pearson_correlation(std::span<const std::pair<double, double>> xs) {
  if (xs.size() < 2) return 0.0;
  double mx = 0.0;
  double my = 0.0;
  for (const auto& [x, y] : xs) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (const auto& [x, y] : xs) {
    sxx += (x - mx) * (x - mx);
    syy += (y - my) * (y - my);
    sxy += (x - mx) * (y - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

} // namespace detail

// Per-object argmax agreement between the classification score and the
// predicted-box IoU over in-box anchors, plus the Pearson correlation of
// (p_i, IoU_i) pooled over bag members (bags with < 2 members excluded).
inline ConsistencyResult consistency_metrics(const DetectorParams& params,
                                             const AnchorLayout& layout,
                                             std::span<const Scene> scenes,
                                             const AssignConfig& assign_config) {
  const PredictionSnapshot snap = decode(params, layout);
  const std::vector<Vec2> centers = layout.anchor_centers();

  ConsistencyResult out;
  for (const Scene& scene : scenes) {
    const AssignmentOutput assignment =
        musu_assign(snap, scene.objects, layout, assign_config);

    for (std::size_t j = 0; j < scene.objects.size(); ++j) {
      const LabeledBox& obj = scene.objects[j];
      std::size_t argmax_p = 0;
      std::size_t argmax_iou = 0;
      double best_p = -1.0;
      double best_iou = -1.0;
      bool any = false;
      for (std::size_t i = 0; i < snap.num_anchors(); ++i) {
        if (!obj.box.contains(centers[i])) continue;
        any = true;
        const double p = snap.prob(i, obj.category);
        const double ov = iou(snap.boxes[i], obj.box);
        if (p > best_p) {
          best_p = p;
          argmax_p = i;
        }
        if (ov > best_iou) {
          best_iou = ov;
          argmax_iou = i;
        }
      }
      if (!any) continue;
      ++out.objects_scored;
      if (argmax_p == argmax_iou) ++out.objects_agreeing;

      const ObjectAssignment& oa = assignment.objects[j];
      if (oa.bag.members.size() >= 2) {
        for (const std::size_t i : oa.bag.members) {
          out.pooled.emplace_back(snap.prob(i, obj.category),
                                  iou(snap.boxes[i], obj.box));
        }
      }
    }
  }

  out.agreement_rate = out.objects_scored == 0
                           ? 0.0
                           : static_cast<double>(out.objects_agreeing) /
                                 static_cast<double>(out.objects_scored);
  out.pearson = detail::pearson_correlation(out.pooled);
  return out;
}

// Pools per-scene tables: table s evaluated against scene s.
inline ConsistencyResult consistency_metrics(std::span<const DetectorParams> tables,
                                             const AnchorLayout& layout,
                                             std::span<const Scene> scenes,
                                             const AssignConfig& assign_config) {
  if (tables.size() != scenes.size()) {
    throw std::invalid_argument("consistency_metrics: tables/scenes size mismatch");
  }
  ConsistencyResult out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    ConsistencyResult one =
        consistency_metrics(tables[s], layout, scenes.subspan(s, 1), assign_config);
    out.objects_scored += one.objects_scored;
    out.objects_agreeing += one.objects_agreeing;
    out.pooled.insert(out.pooled.end(), one.pooled.begin(), one.pooled.end());
  }
  out.agreement_rate = out.objects_scored == 0
                           ? 0.0
                           : static_cast<double>(out.objects_agreeing) /
                                 static_cast<double>(out.objects_scored);
  out.pearson = detail::pearson_correlation(out.pooled);
  return out;
}

// Full report for per-scene tables: AP at 0.50:0.05:0.95 plus the
// consistency diagnostics.
inline EvalReport evaluate(std::span<const DetectorParams> tables,
                           const AnchorLayout& layout, std::span<const Scene> scenes,
                           const AssignConfig& assign_config,
                           double score_threshold = 0.05, double nms_threshold = 0.6) {
  if (tables.size() != scenes.size()) {
    throw std::invalid_argument("evaluate: tables/scenes size mismatch");
  }
  std::vector<std::vector<Detection>> dets(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    dets[s] = run_inference(tables[s], layout, score_threshold, nms_threshold);
  }

  EvalReport report;
  double sum = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double thr = 0.50 + 0.05 * k;
    const double ap = average_precision(dets, scenes, thr);
    report.ap_per_iou.emplace_back(thr, ap);
    sum += ap;
  }
  report.ap_coco = sum / 10.0;
  report.ap50 = report.ap_per_iou[0].second;
  report.ap75 = report.ap_per_iou[5].second;

  const ConsistencyResult cons = consistency_metrics(tables, layout, scenes, assign_config);
  report.agreement_rate = cons.agreement_rate;
  report.pearson_p_vs_iou = cons.pearson;
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json per_iou = nlohmann::json::object();
  for (const auto& [thr, ap] : report.ap_per_iou) {
    char key[8];
    std::snprintf(key, sizeof(key), "%.2f", thr);
    per_iou[key] = ap;
  }
  return {{"ap_per_iou", std::move(per_iou)},
          {"ap_coco", report.ap_coco},
          {"ap50", report.ap50},
          {"ap75", report.ap75},
          {"consistency",
           {{"agreement_rate", report.agreement_rate},
            {"pearson_p_vs_iou", report.pearson_p_vs_iou}}}};
}

} // namespace musu
