// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "musu/anchor_layout.hpp"
#include "musu/assignment.hpp"
#include "musu/losses.hpp"
#include "musu/scenes.hpp"

namespace musu {

// One trainable table standing in for the FCOS head evaluated on a
// single image: raw logits and ltrb offsets per anchor.
struct DetectorParams {
  int num_categories = 0;
  std::vector<double> category_logits;   // [num_anchors][K]
  std::vector<double> objectness_logits; // [num_anchors]
  std::vector<double> box_offsets;       // [num_anchors][4], ltrb pre-exp

  std::size_t num_anchors() const { return objectness_logits.size(); }

  bool operator==(const DetectorParams&) const = default;
};

struct TrainConfig {
  double learning_rate = 0.5; // toy flat-parameter scale
  double momentum = 0.9;
  double weight_decay = 0.0;
  int steps = 2000;
  std::uint64_t seed = 0;
  int consistency_interval = 100; // 0 disables the periodic callback
  AssignConfig assign;
  FocalParams focal;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline constexpr double kCategoryPrior = 0.01;

// Zero offsets, zero objectness, category logits at the prior constant
// so the classification sigmoid starts at kCategoryPrior.
inline DetectorParams init_detector(const AnchorLayout& layout, int num_categories) {
  if (num_categories < 1) throw std::invalid_argument("init_detector: num_categories < 1");
  const std::size_t n = layout.num_anchors();
  DetectorParams params;
  params.num_categories = num_categories;
  params.category_logits.assign(n * static_cast<std::size_t>(num_categories),
                                std::log(kCategoryPrior / (1.0 - kCategoryPrior)));
  params.objectness_logits.assign(n, 0.0);
  params.box_offsets.assign(n * 4, 0.0);
  return params;
}

namespace detail {

// Half-extents of the decoded box of anchor i: (left, top, right, bottom).
inline std::array<double, 4> decoded_sides(const DetectorParams& params,
                                           const AnchorLayout& layout,
                                           std::size_t i) {
  const double stride = layout.stride_of(i);
  const int slot = layout.slot_of(i);
  const double sigma = layout.scales[slot];
  const double sqrt_rho = std::sqrt(layout.ratios[slot]);
  const double base_x = stride * sigma * sqrt_rho;
  const double base_y = stride * sigma / sqrt_rho;
  return {base_x * std::exp(params.box_offsets[i * 4 + 0]),
          base_y * std::exp(params.box_offsets[i * 4 + 1]),
          base_x * std::exp(params.box_offsets[i * 4 + 2]),
          base_y * std::exp(params.box_offsets[i * 4 + 3])};
}

} // namespace detail

// p_ik = sigmoid(category logit) * sigmoid(objectness logit). Box sides
// come from the per-slot prior scaled by exp of the raw offsets:
// left/right = s*sigma*sqrt(rho)*exp(d), top/bottom = s*sigma/sqrt(rho)*exp(d),
// so zero offsets give the 2s x 2s prior at sigma = rho = 1.
inline PredictionSnapshot decode(const DetectorParams& params, const AnchorLayout& layout) {
  const std::size_t n = layout.num_anchors();
  if (params.num_anchors() != n) {
    throw std::invalid_argument("decode: params/layout anchor count mismatch");
  }
  const int k = params.num_categories;
  const std::vector<Vec2> centers = layout.anchor_centers();

  PredictionSnapshot snap;
  snap.num_categories = k;
  snap.probabilities.resize(n * static_cast<std::size_t>(k));
  snap.boxes.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const double s_obj = sigmoid(params.objectness_logits[i]);
    for (int c = 0; c < k; ++c) {
      snap.probabilities[i * k + c] = sigmoid(params.category_logits[i * k + c]) * s_obj;
    }
    const auto [l, t, r, b] = detail::decoded_sides(params, layout, i);
    snap.boxes[i] = {centers[i].x - l, centers[i].y - t, centers[i].x + r,
                     centers[i].y + b};
  }
  return snap;
}

struct ParamGradients {
  std::vector<double> category_logits;
  std::vector<double> objectness_logits;
  std::vector<double> box_offsets;
};

// Chains d l_total / d probabilities and d l_total / d box coordinates
// through the sigmoid merge and the exp side parameterization down to the
// raw parameter table. The assignment stays a constant throughout.
inline ParamGradients chain_gradients(const DetectorParams& params,
                                      const AnchorLayout& layout,
                                      const TotalLossResult& loss) {
  const std::size_t n = params.num_anchors();
  const int k = params.num_categories;

  ParamGradients g;
  g.category_logits.assign(n * static_cast<std::size_t>(k), 0.0);
  g.objectness_logits.assign(n, 0.0);
  g.box_offsets.assign(n * 4, 0.0);

  for (std::size_t i = 0; i < n; ++i) {
    const double s_obj = sigmoid(params.objectness_logits[i]);
    const double dobj = s_obj * (1.0 - s_obj);
    for (int c = 0; c < k; ++c) {
      const double s_cat = sigmoid(params.category_logits[i * k + c]);
      const double gp = loss.grad_probabilities[i * k + c];
      g.category_logits[i * k + c] = gp * s_obj * s_cat * (1.0 - s_cat);
      g.objectness_logits[i] += gp * s_cat * dobj;
    }

    // box = (cx-l, cy-t, cx+r, cy+b) and d side / d offset = side.
    const auto [l, t, r, b] = detail::decoded_sides(params, layout, i);
    const auto& gb = loss.grad_boxes[i];
    g.box_offsets[i * 4 + 0] = -gb[0] * l;
    g.box_offsets[i * 4 + 1] = -gb[1] * t;
    g.box_offsets[i * 4 + 2] = gb[2] * r;
    g.box_offsets[i * 4 + 3] = gb[3] * b;
  }
  return g;
}

// Loss and exact parameter-space gradient for a fixed assignment. Used by
// train_step after re-assigning, and directly by gradient checks.
struct DetectorLoss {
  TotalLossResult loss;
  ParamGradients gradients;
};

inline DetectorLoss detector_loss(const DetectorParams& params, const AnchorLayout& layout,
                                  std::span<const LabeledBox> gt,
                                  const AssignmentOutput& assignment,
                                  const FocalParams& focal) {
  const PredictionSnapshot snap = decode(params, layout);
  DetectorLoss out;
  out.loss = total_loss(snap, assignment, gt, focal);
  out.gradients = chain_gradients(params, layout, out.loss);
  return out;
}

// SGD with momentum: v = m*v + (g + wd*p); p -= lr*v.
struct SgdOptimizer {
  double learning_rate = 0.5;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<double> velocity;

  void step(std::span<double> parameters, std::span<const double> gradients) {
    if (velocity.empty()) velocity.assign(parameters.size(), 0.0);
    for (std::size_t i = 0; i < parameters.size(); ++i) {
      const double g = gradients[i] + weight_decay * parameters[i];
      velocity[i] = momentum * velocity[i] + g;
      parameters[i] -= learning_rate * velocity[i];
    }
  }
};

// Momentum state for one table, split per parameter block.
struct DetectorOptimizer {
  SgdOptimizer category;
  SgdOptimizer objectness;
  SgdOptimizer boxes;

  explicit DetectorOptimizer(const TrainConfig& cfg) {
    for (SgdOptimizer* o : {&category, &objectness, &boxes}) {
      o->learning_rate = cfg.learning_rate;
      o->momentum = cfg.momentum;
      o->weight_decay = cfg.weight_decay;
    }
  }
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StepResult {
  LossBreakdown loss;
  AssignmentOutput assignment;
};

namespace detail {

inline bool all_finite(std::span<const double> xs) {
  for (const double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

} // namespace detail

// One optimization step on one scene: decode, assign on the frozen
// snapshot, evaluate the loss, chain gradients, update. Deterministic
// given identical inputs.
inline StepResult train_step(DetectorParams& params, DetectorOptimizer& opt,
                             const AnchorLayout& layout, const Scene& scene,
                             const TrainConfig& cfg) {
  if (!detail::all_finite(params.category_logits) ||
      !detail::all_finite(params.objectness_logits) ||
      !detail::all_finite(params.box_offsets)) {
    throw TrainingError("train_step: non-finite parameters");
  }
  const PredictionSnapshot snap = decode(params, layout);
  AssignmentOutput assignment =
      musu_assign(snap, std::span<const LabeledBox>(scene.objects), layout, cfg.assign);
  TotalLossResult loss = total_loss(snap, assignment, scene.objects, cfg.focal);
  const ParamGradients grads = chain_gradients(params, layout, loss);

  if (!std::isfinite(loss.breakdown.l_total) ||
      !detail::all_finite(grads.category_logits) ||
      !detail::all_finite(grads.objectness_logits) ||
      !detail::all_finite(grads.box_offsets)) {
    throw TrainingError("train_step: non-finite loss or gradient");
  }

  opt.category.step(params.category_logits, grads.category_logits);
  opt.objectness.step(params.objectness_logits, grads.objectness_logits);
  opt.boxes.step(params.box_offsets, grads.box_offsets);

  return {loss.breakdown, std::move(assignment)};
}

struct StepLog {
  int step = 0;
  int scene_index = 0;
  LossBreakdown loss;
};

struct TrainRunResult {
  std::vector<DetectorParams> params; // one table per scene
  std::vector<StepLog> log;
};

// Invoked every consistency_interval steps (and after the last step) with
// the current tables; wired to the consistency diagnostics by callers.
using PeriodicCallback = std::function<void(int step, std::span<const DetectorParams>)>;

// Cycles through the scenes one per step, stepping the visited scene's
// table. Each table is the toy stand-in for the detector's output on that
// scene, so per-image assignment dynamics match the per-image scheme.
inline TrainRunResult train_run(const AnchorLayout& layout, std::span<const Scene> scenes,
                                int num_categories, const TrainConfig& cfg,
                                const PeriodicCallback& periodic = {}) {
  if (scenes.empty()) throw std::invalid_argument("train_run: empty scene set");
  if (cfg.learning_rate <= 0.0) throw std::invalid_argument("train_run: learning_rate <= 0");
  for (const Scene& s : scenes) {
    for (const LabeledBox& o : s.objects) {
      if (o.category < 0 || o.category >= num_categories) {
        throw std::invalid_argument("train_run: scene category outside [0, K)");
      }
    }
  }

  TrainRunResult out;
  out.params.reserve(scenes.size());
  std::vector<DetectorOptimizer> opts;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    out.params.push_back(init_detector(layout, num_categories));
    opts.emplace_back(cfg);
  }

  out.log.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t s = static_cast<std::size_t>(step) % scenes.size();
    StepResult res;
    try {
      res = train_step(out.params[s], opts[s], layout, scenes[s], cfg);
    } catch (const TrainingError& e) {
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step));
    }
    out.log.push_back({step, static_cast<int>(s), res.loss});

    if (periodic && cfg.consistency_interval > 0 &&
        ((step + 1) % cfg.consistency_interval == 0 || step + 1 == cfg.steps)) {
      periodic(step, out.params);
    }
  }
  return out;
}

// ---- checkpoint IO ----------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const DetectorParams& p) {
  return {{"num_categories", p.num_categories},
          {"category_logits", p.category_logits},
          {"objectness_logits", p.objectness_logits},
          {"box_offsets", p.box_offsets}};
}

inline DetectorParams params_from_json(const nlohmann::json& j) {
  DetectorParams p;
  p.num_categories = j.at("num_categories").get<int>();
  p.category_logits = j.at("category_logits").get<std::vector<double>>();
  p.objectness_logits = j.at("objectness_logits").get<std::vector<double>>();
  p.box_offsets = j.at("box_offsets").get<std::vector<double>>();
  const std::size_t n = p.objectness_logits.size();
  if (p.category_logits.size() != n * static_cast<std::size_t>(p.num_categories) ||
      p.box_offsets.size() != n * 4) {
    throw std::runtime_error("checkpoint: inconsistent parameter table shapes");
  }
  return p;
}

inline nlohmann::json layout_to_json(const AnchorLayout& layout) {
  nlohmann::json levels = nlohmann::json::array();
  for (const LevelSpec& lv : layout.levels) {
    levels.push_back({lv.grid_h, lv.grid_w, lv.stride});
  }
  return {{"levels", std::move(levels)},
          {"anchors_per_location", layout.anchors_per_location},
          {"scales", layout.scales},
          {"ratios", layout.ratios}};
}

inline AnchorLayout layout_from_json(const nlohmann::json& j) {
  AnchorLayout layout;
  for (const auto& lv : j.at("levels")) {
    layout.levels.push_back({lv.at(0).get<int>(), lv.at(1).get<int>(), lv.at(2).get<double>()});
  }
  layout.anchors_per_location = j.at("anchors_per_location").get<int>();
  layout.scales = j.at("scales").get<std::vector<double>>();
  layout.ratios = j.at("ratios").get<std::vector<double>>();
  return layout;
}

struct Checkpoint {
  std::vector<DetectorParams> tables; // aligned with the training scenes
  AnchorLayout layout;
  std::string config_hash;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json doc;
  doc["version"] = kCheckpointVersion;
  doc["config_hash"] = ckpt.config_hash;
  doc["layout"] = layout_to_json(ckpt.layout);
  doc["tables"] = nlohmann::json::array();
  for (const DetectorParams& p : ckpt.tables) doc["tables"].push_back(params_to_json(p));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_checkpoint: " + path.string() + ": " + e.what());
  }
  if (doc.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("load_checkpoint: unsupported checkpoint version");
  }
  Checkpoint ckpt;
  ckpt.config_hash = doc.at("config_hash").get<std::string>();
  ckpt.layout = layout_from_json(doc.at("layout"));
  for (const auto& t : doc.at("tables")) ckpt.tables.push_back(params_from_json(t));
  return ckpt;
}

} // namespace musu
