// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "musu/detector.hpp"
#include "musu/eval.hpp"
#include "musu/scenes.hpp"

namespace musu {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LayoutSpec {
  std::vector<LevelSpec> levels{{16, 16, 8.0}};
  int anchors_per_location = 1;
  std::uint64_t seed = 0;

  AnchorLayout build() const { return make_anchor_layout(levels, anchors_per_location, seed); }
};

struct EvalThresholds {
  double score_threshold = 0.05;
  double nms_threshold = 0.6;
};

struct ExperimentConfig {
  SceneSetConfig scenes;
  LayoutSpec layout;
  TrainConfig train;
  EvalThresholds eval;
  std::string out_dir = "out";
};

// ---- JSON mapping -------------------------------------------------------

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (const LevelSpec& lv : c.layout.levels) levels.push_back({lv.grid_h, lv.grid_w, lv.stride});

  nlohmann::json assign = {{"theta", c.train.assign.theta},
                           {"bag_threshold", c.train.assign.bag_threshold},
                           {"alpha", c.train.assign.alpha},
                           {"tau_ratio", c.train.assign.tau_ratio},
                           {"hard_targets", c.train.assign.hard_targets},
                           {"fixed_tau", nullptr}};
  if (c.train.assign.fixed_tau) assign["fixed_tau"] = *c.train.assign.fixed_tau;

  return {{"scenes",
           {{"num_scenes", c.scenes.num_scenes},
            {"num_categories", c.scenes.num_categories},
            {"max_objects", c.scenes.max_objects},
            {"min_side", c.scenes.min_side},
            {"max_side", c.scenes.max_side},
            {"max_overlap_iou", c.scenes.max_overlap_iou},
            {"extent", {c.scenes.extent_w, c.scenes.extent_h}},
            {"seed", c.scenes.seed}}},
          {"layout",
           {{"levels", std::move(levels)},
            {"anchors_per_location", c.layout.anchors_per_location},
            {"seed", c.layout.seed}}},
          {"train",
           {{"learning_rate", c.train.learning_rate},
            {"momentum", c.train.momentum},
            {"weight_decay", c.train.weight_decay},
            {"steps", c.train.steps},
            {"seed", c.train.seed},
            {"consistency_interval", c.train.consistency_interval},
            {"assign", std::move(assign)},
            {"focal",
             {{"gamma", c.train.focal.gamma},
              {"balance", c.train.focal.balance},
              {"beta", c.train.focal.beta}}}}},
          {"eval",
           {{"score_threshold", c.eval.score_threshold},
            {"nms_threshold", c.eval.nms_threshold}}},
          {"out_dir", c.out_dir}};
}

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key,
                                     const std::string& path) {
  if (!j.is_object() || !j.contains(key)) {
    throw ConfigError("missing config key: " + path + key);
  }
  return j.at(key);
}

template <typename T>
inline T get_as(const nlohmann::json& j, const std::string& key, const std::string& path) {
  try {
    return require(j, key, path).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key has wrong type: " + path + key);
  }
}

// Every key present in doc must exist in the skeleton at the same path.
inline void reject_unknown_keys(const nlohmann::json& doc, const nlohmann::json& skeleton,
                                const std::string& path) {
  if (!doc.is_object()) return;
  if (!skeleton.is_object()) {
    throw ConfigError("config key is not a section: " +
                      (path.empty() ? std::string("<root>") : path));
  }
  for (const auto& [key, value] : doc.items()) {
    if (!skeleton.contains(key)) {
      throw ConfigError("unknown config key: " + path + key);
    }
    reject_unknown_keys(value, skeleton.at(key), path + key + ".");
  }
}

} // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  detail::reject_unknown_keys(doc, config_to_json(ExperimentConfig{}), "");

  ExperimentConfig c;
  const auto& sc = detail::require(doc, "scenes", "");
  c.scenes.num_scenes = detail::get_as<int>(sc, "num_scenes", "scenes.");
  c.scenes.num_categories = detail::get_as<int>(sc, "num_categories", "scenes.");
  c.scenes.max_objects = detail::get_as<int>(sc, "max_objects", "scenes.");
  c.scenes.min_side = detail::get_as<double>(sc, "min_side", "scenes.");
  c.scenes.max_side = detail::get_as<double>(sc, "max_side", "scenes.");
  c.scenes.max_overlap_iou = detail::get_as<double>(sc, "max_overlap_iou", "scenes.");
  const auto extent = detail::get_as<std::vector<double>>(sc, "extent", "scenes.");
  if (extent.size() != 2) throw ConfigError("scenes.extent must be [w, h]");
  c.scenes.extent_w = extent[0];
  c.scenes.extent_h = extent[1];
  c.scenes.seed = detail::get_as<std::uint64_t>(sc, "seed", "scenes.");

  const auto& lo = detail::require(doc, "layout", "");
  const auto& levels = detail::require(lo, "levels", "layout.");
  if (!levels.is_array() || levels.empty()) {
    throw ConfigError("layout.levels must be a non-empty array of [grid_h, grid_w, stride]");
  }
  c.layout.levels.clear();
  for (const auto& lv : levels) {
    if (!lv.is_array() || lv.size() != 3) {
      throw ConfigError("layout.levels entries must be [grid_h, grid_w, stride]");
    }
    c.layout.levels.push_back(
        {lv[0].get<int>(), lv[1].get<int>(), lv[2].get<double>()});
  }
  c.layout.anchors_per_location = detail::get_as<int>(lo, "anchors_per_location", "layout.");
  c.layout.seed = detail::get_as<std::uint64_t>(lo, "seed", "layout.");

  const auto& tr = detail::require(doc, "train", "");
  c.train.learning_rate = detail::get_as<double>(tr, "learning_rate", "train.");
  c.train.momentum = detail::get_as<double>(tr, "momentum", "train.");
  c.train.weight_decay = detail::get_as<double>(tr, "weight_decay", "train.");
  c.train.steps = detail::get_as<int>(tr, "steps", "train.");
  c.train.seed = detail::get_as<std::uint64_t>(tr, "seed", "train.");
  c.train.consistency_interval = detail::get_as<int>(tr, "consistency_interval", "train.");

  const auto& as = detail::require(tr, "assign", "train.");
  c.train.assign.theta = detail::get_as<double>(as, "theta", "train.assign.");
  c.train.assign.bag_threshold = detail::get_as<double>(as, "bag_threshold", "train.assign.");
  c.train.assign.alpha = detail::get_as<double>(as, "alpha", "train.assign.");
  c.train.assign.tau_ratio = detail::get_as<double>(as, "tau_ratio", "train.assign.");
  c.train.assign.hard_targets = detail::get_as<bool>(as, "hard_targets", "train.assign.");
  const auto& ft = detail::require(as, "fixed_tau", "train.assign.");
  if (ft.is_null()) {
    c.train.assign.fixed_tau.reset();
  } else if (ft.is_number()) {
    c.train.assign.fixed_tau = ft.get<double>();
  } else {
    throw ConfigError("config key has wrong type: train.assign.fixed_tau");
  }

  const auto& fo = detail::require(tr, "focal", "train.");
  c.train.focal.gamma = detail::get_as<double>(fo, "gamma", "train.focal.");
  c.train.focal.balance = detail::get_as<double>(fo, "balance", "train.focal.");
  c.train.focal.beta = detail::get_as<double>(fo, "beta", "train.focal.");

  const auto& ev = detail::require(doc, "eval", "");
  c.eval.score_threshold = detail::get_as<double>(ev, "score_threshold", "eval.");
  c.eval.nms_threshold = detail::get_as<double>(ev, "nms_threshold", "eval.");

  c.out_dir = detail::get_as<std::string>(doc, "out_dir", "");

  if (c.train.learning_rate <= 0.0) throw ConfigError("train.learning_rate must be > 0");
  if (c.train.assign.theta < 1.0) throw ConfigError("train.assign.theta must be >= 1");
  if (c.train.assign.bag_threshold <= 0.0 || c.train.assign.bag_threshold >= 1.0) {
    throw ConfigError("train.assign.bag_threshold must be in (0, 1)");
  }
  if (c.train.assign.alpha < 0.0 || c.train.assign.alpha > 1.0) {
    throw ConfigError("train.assign.alpha must be in [0, 1]");
  }
  if (c.train.assign.tau_ratio <= 0.0) throw ConfigError("train.assign.tau_ratio must be > 0");
  return c;
}

// ---- dotted-path overrides ----------------------------------------------

// --set train.assign.alpha=0.5 style; the value is parsed as a JSON
// literal when possible and treated as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& dotted_key,
                           const std::string& value) {
  if (dotted_key.empty()) throw ConfigError("empty override key");
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string key = dotted_key.substr(start, dot - start);
    if (key.empty()) throw ConfigError("malformed override key: " + dotted_key);
    if (dot == std::string::npos) {
      nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    if (!node->is_object()) {
      throw ConfigError("override path through non-section: " + dotted_key);
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline void apply_overrides(nlohmann::json& doc,
                            std::span<const std::pair<std::string, std::string>> sets) {
  for (const auto& [key, value] : sets) apply_override(doc, key, value);
}

// ---- config hash and formatting -------------------------------------------

// FNV-1a over the semantic sections (out_dir excluded), for provenance.
inline std::string config_hash(const nlohmann::json& resolved) {
  nlohmann::json semantic = resolved;
  semantic.erase("out_dir");
  const std::string dump = semantic.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Shortest round-trip decimal form, stable across runs.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---- run orchestration ----------------------------------------------------

namespace paths {
inline std::filesystem::path scenes(const std::filesystem::path& out) { return out / "scenes.json"; }
inline std::filesystem::path checkpoint(const std::filesystem::path& out) { return out / "checkpoint.json"; }
inline std::filesystem::path train_log(const std::filesystem::path& out) { return out / "train_log.csv"; }
inline std::filesystem::path consistency_log(const std::filesystem::path& out) { return out / "consistency_log.csv"; }
inline std::filesystem::path eval_report(const std::filesystem::path& out) { return out / "eval_report.json"; }
inline std::filesystem::path pr_curves(const std::filesystem::path& out) { return out / "pr_curves.csv"; }
inline std::filesystem::path sweep_results(const std::filesystem::path& out) { return out / "sweep_results.csv"; }
inline std::filesystem::path resolved_config(const std::filesystem::path& out) { return out / "config_resolved.json"; }
inline std::filesystem::path assign_debug(const std::filesystem::path& out) { return out / "assign_debug.json"; }
inline std::filesystem::path abort_dump(const std::filesystem::path& out) { return out / "abort_dump.json"; }
} // namespace paths

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Full provenance: the resolved config goes next to every run's outputs.
inline void write_resolved_config(const nlohmann::json& resolved,
                                  const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_text_file(paths::resolved_config(out_dir), resolved.dump(2) + "\n");
}

inline void run_generate_scenes(const ExperimentConfig& cfg, const nlohmann::json& resolved,
                                const std::filesystem::path& out_dir) {
  write_resolved_config(resolved, out_dir);
  const std::vector<Scene> scenes = generate_scenes(cfg.scenes);
  save_scenes(paths::scenes(out_dir), scenes);
}

inline void run_train(const ExperimentConfig& cfg, const nlohmann::json& resolved,
                      const std::filesystem::path& out_dir,
                      const std::filesystem::path& scenes_path) {
  write_resolved_config(resolved, out_dir);
  const std::vector<Scene> scenes = load_scenes(scenes_path);
  const AnchorLayout layout = cfg.layout.build();

  std::string consistency_csv = "step,agreement,pearson\n";
  const PeriodicCallback periodic = [&](int step, std::span<const DetectorParams> tables) {
    const ConsistencyResult cons =
        consistency_metrics(tables, layout, scenes, cfg.train.assign);
    consistency_csv += std::to_string(step) + "," + format_double(cons.agreement_rate) +
                       "," + format_double(cons.pearson) + "\n";
  };

  TrainRunResult result;
  try {
    result = train_run(layout, scenes, cfg.scenes.num_categories, cfg.train, periodic);
  } catch (const TrainingError&) {
    // diagnostic state dump, then propagate for the nonzero exit
    nlohmann::json dump;
    dump["error"] = "training aborted: non-finite loss or gradient";
    dump["config_hash"] = config_hash(resolved);
    write_text_file(paths::abort_dump(out_dir), dump.dump(2) + "\n");
    throw;
  }

  std::string train_csv = "step,l_cls_pos,l_cls_neg,l_cls_bg,l_reg,l_total\n";
  for (const StepLog& entry : result.log) {
    train_csv += std::to_string(entry.step) + "," + format_double(entry.loss.l_cls_pos) +
                 "," + format_double(entry.loss.l_cls_neg_penalty) + "," +
                 format_double(entry.loss.l_cls_background) + "," +
                 format_double(entry.loss.l_reg) + "," + format_double(entry.loss.l_total) +
                 "\n";
  }
  write_text_file(paths::train_log(out_dir), train_csv);
  write_text_file(paths::consistency_log(out_dir), consistency_csv);

  save_checkpoint(paths::checkpoint(out_dir),
                  {std::move(result.params), layout, config_hash(resolved)});
}

inline EvalReport run_eval(const ExperimentConfig& cfg, const nlohmann::json& resolved,
                           const std::filesystem::path& out_dir,
                           const std::filesystem::path& scenes_path,
                           const std::filesystem::path& checkpoint_path,
                           bool dump_pr_curves = false) {
  write_resolved_config(resolved, out_dir);
  const std::vector<Scene> scenes = load_scenes(scenes_path);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const EvalReport report =
      evaluate(ckpt.tables, ckpt.layout, scenes, cfg.train.assign,
               cfg.eval.score_threshold, cfg.eval.nms_threshold);
  write_text_file(paths::eval_report(out_dir), report_to_json(report).dump(2) + "\n");

  if (dump_pr_curves) {
    std::vector<std::vector<Detection>> dets(scenes.size());
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      dets[s] = run_inference(ckpt.tables[s], ckpt.layout, cfg.eval.score_threshold,
                              cfg.eval.nms_threshold);
    }
    std::string csv = "iou_threshold,category,score,recall,precision\n";
    for (int k = 0; k < 10; ++k) {
      const double thr = 0.50 + 0.05 * k;
      for (const auto& [category, curve] : pr_curves(dets, scenes, thr)) {
        for (const PrCurvePoint& pt : curve) {
          csv += format_double(thr) + "," + std::to_string(category) + "," +
                 format_double(pt.score) + "," + format_double(pt.recall) + "," +
                 format_double(pt.precision) + "\n";
        }
      }
    }
    write_text_file(paths::pr_curves(out_dir), csv);
  }
  return report;
}

// Serializes per-member assignment rows for one scene. When
// snapshot_json is provided it must carry probabilities, boxes and
// anchor_centers; otherwise the checkpoint table for the scene (or a
// freshly initialized detector) is decoded.
inline nlohmann::json run_assign_debug(const ExperimentConfig& cfg,
                                       const nlohmann::json& resolved,
                                       const std::filesystem::path& out_dir,
                                       const std::filesystem::path& scenes_path,
                                       std::size_t scene_index,
                                       const std::optional<nlohmann::json>& snapshot_json,
                                       const std::optional<std::filesystem::path>& checkpoint_path) {
  write_resolved_config(resolved, out_dir);
  const std::vector<Scene> scenes = load_scenes(scenes_path);
  if (scene_index >= scenes.size()) {
    throw std::runtime_error("assign-debug: scene index out of range");
  }
  const Scene& scene = scenes[scene_index];

  PredictionSnapshot snap;
  std::vector<Vec2> centers;
  if (snapshot_json) {
    const nlohmann::json& sj = *snapshot_json;
    const auto probs = sj.at("probabilities").get<std::vector<std::vector<double>>>();
    const auto boxes = sj.at("boxes").get<std::vector<std::vector<double>>>();
    const auto ctrs = sj.at("anchor_centers").get<std::vector<std::vector<double>>>();
    if (probs.empty() || probs.size() != boxes.size() || probs.size() != ctrs.size()) {
      throw std::runtime_error("assign-debug: snapshot arrays must be non-empty and aligned");
    }
    snap.num_categories = static_cast<int>(probs.front().size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (static_cast<int>(probs[i].size()) != snap.num_categories ||
          boxes[i].size() != 4 || ctrs[i].size() != 2) {
        throw std::runtime_error("assign-debug: malformed snapshot row");
      }
      snap.probabilities.insert(snap.probabilities.end(), probs[i].begin(), probs[i].end());
      snap.boxes.push_back({boxes[i][0], boxes[i][1], boxes[i][2], boxes[i][3]});
      centers.push_back({ctrs[i][0], ctrs[i][1]});
    }
  } else {
    const AnchorLayout layout = cfg.layout.build();
    DetectorParams params;
    if (checkpoint_path) {
      Checkpoint ckpt = load_checkpoint(*checkpoint_path);
      if (scene_index >= ckpt.tables.size()) {
        throw std::runtime_error("assign-debug: checkpoint has no table for the scene");
      }
      params = std::move(ckpt.tables[scene_index]);
    } else {
      params = init_detector(layout, cfg.scenes.num_categories);
    }
    snap = decode(params, layout);
    centers = layout.anchor_centers();
  }

  const AssignmentOutput assignment =
      musu_assign(snap, scene.objects, std::span<const Vec2>(centers), cfg.train.assign);

  nlohmann::json entries = nlohmann::json::array();
  for (const ObjectAssignment& oa : assignment.objects) {
    for (std::size_t m = 0; m < oa.bag.members.size(); ++m) {
      const std::size_t i = oa.bag.members[m];
      const LabeledBox& obj = scene.objects[oa.bag.object_index];
      const double raw_iou = iou(snap.boxes[i], obj.box);
      entries.push_back({{"object", oa.bag.object_index},
                         {"anchor", i},
                         {"p", snap.prob(i, obj.category)},
                         {"q", std::pow(raw_iou, cfg.train.assign.theta)},
                         {"P", oa.bag.joint_likelihoods[m]},
                         {"v_cls", oa.v_cls[m]},
                         {"v_reg", oa.v_reg[m]},
                         {"R_cls", oa.rank_cls[m]},
                         {"R_reg", oa.rank_reg[m]},
                         {"w_cls", oa.w_cls[m]},
                         {"w_reg", oa.w_reg[m]}});
    }
  }
  nlohmann::json doc = {{"scene_index", scene_index},
                        {"config_hash", config_hash(resolved)},
                        {"entries", std::move(entries)}};
  write_text_file(paths::assign_debug(out_dir), doc.dump(2) + "\n");
  return doc;
}

// ---- sweep ------------------------------------------------------------------

struct SweepAxis {
  std::string key;                 // dotted config path
  std::vector<std::string> values; // raw value literals
};

// "train.assign.alpha=0,0.5,1" with bracket-aware comma splitting.
inline SweepAxis parse_sweep_axis(const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("malformed sweep axis (expected key=v1,v2,...): " + spec);
  }
  SweepAxis axis;
  axis.key = spec.substr(0, eq);
  int depth = 0;
  std::string cur;
  for (std::size_t i = eq + 1; i < spec.size(); ++i) {
    const char ch = spec[i];
    if (ch == '[') ++depth;
    if (ch == ']') --depth;
    if (ch == ',' && depth == 0) {
      axis.values.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  axis.values.push_back(cur);
  for (const std::string& v : axis.values) {
    if (v.empty()) throw ConfigError("empty sweep value in axis: " + spec);
  }
  return axis;
}

inline std::vector<std::vector<std::pair<std::string, std::string>>> sweep_grid(
    std::span<const SweepAxis> axes) {
  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const SweepAxis& axis : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& cell : cells) {
      for (const std::string& value : axis.values) {
        auto copy = cell;
        copy.emplace_back(axis.key, value);
        next.push_back(std::move(copy));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

// Runs generate-scenes + train + eval per grid cell in cell_### dirs and
// writes the consolidated CSV, one row per cell.
inline void run_sweep(const nlohmann::json& base_resolved, std::span<const SweepAxis> axes,
                      const std::filesystem::path& out_dir) {
  const auto cells = sweep_grid(axes);
  std::filesystem::create_directories(out_dir);
  write_text_file(paths::resolved_config(out_dir), base_resolved.dump(2) + "\n");

  std::string csv =
      "alpha,bag_threshold,tau_ratio,anchors_per_location,hard_targets,"
      "ap50,ap_coco,agreement,pearson\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    char name[16];
    std::snprintf(name, sizeof(name), "cell_%03zu", c);
    const std::filesystem::path cell_dir = out_dir / name;

    nlohmann::json resolved = base_resolved;
    apply_overrides(resolved, cells[c]);
    resolved["out_dir"] = cell_dir.string();
    const ExperimentConfig cfg = config_from_json(resolved);

    run_generate_scenes(cfg, resolved, cell_dir);
    run_train(cfg, resolved, cell_dir, paths::scenes(cell_dir));
    const EvalReport report = run_eval(cfg, resolved, cell_dir, paths::scenes(cell_dir),
                                       paths::checkpoint(cell_dir));

    csv += format_double(cfg.train.assign.alpha) + "," +
           format_double(cfg.train.assign.bag_threshold) + "," +
           format_double(cfg.train.assign.tau_ratio) + "," +
           std::to_string(cfg.layout.anchors_per_location) + "," +
           (cfg.train.assign.hard_targets ? "1" : "0") + "," +
           format_double(report.ap50) + "," + format_double(report.ap_coco) + "," +
           format_double(report.agreement_rate) + "," +
           format_double(report.pearson_p_vs_iou) + "\n";
  }
  write_text_file(paths::sweep_results(out_dir), csv);
}

} // namespace musu
