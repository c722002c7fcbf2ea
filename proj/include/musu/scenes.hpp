// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "musu/geometry.hpp"
#include "musu/random.hpp"

namespace musu {

struct Scene {
  double extent_w = 0.0;
  double extent_h = 0.0;
  std::vector<LabeledBox> objects;
};

struct SceneSetConfig {
  int num_scenes = 20;
  int num_categories = 5;
  int max_objects = 5;
  double min_side = 24.0;
  double max_side = 80.0;
  double max_overlap_iou = 0.3; // max pairwise IoU between GT boxes
  double extent_w = 128.0;
  double extent_h = 128.0;
  std::uint64_t seed = 0;
};

inline constexpr int kSceneSchemaVersion = 1;

// Rejection-sampled ground truth: each scene gets 1..max_objects boxes
// with sides in [min_side, max_side], fully inside the extent, pairwise
// IoU at most max_overlap_iou. Deterministic per seed.
inline std::vector<Scene> generate_scenes(const SceneSetConfig& cfg) {
  if (cfg.num_scenes < 0) throw std::invalid_argument("generate_scenes: num_scenes < 0");
  if (cfg.num_categories < 1) throw std::invalid_argument("generate_scenes: num_categories < 1");
  if (cfg.max_objects < 1) throw std::invalid_argument("generate_scenes: max_objects < 1");
  if (cfg.min_side <= 0.0 || cfg.min_side > cfg.max_side) {
    throw std::invalid_argument("generate_scenes: need 0 < min_side <= max_side");
  }
  if (cfg.max_side > cfg.extent_w || cfg.max_side > cfg.extent_h) {
    throw std::invalid_argument("generate_scenes: max_side exceeds scene extent");
  }
  if (cfg.max_overlap_iou < 0.0 || cfg.max_overlap_iou >= 1.0) {
    throw std::invalid_argument("generate_scenes: max_overlap_iou must be in [0, 1)");
  }

  constexpr int kTriesPerObject = 1000;
  Rng rng(cfg.seed);
  std::vector<Scene> scenes(cfg.num_scenes);
  for (Scene& scene : scenes) {
    scene.extent_w = cfg.extent_w;
    scene.extent_h = cfg.extent_h;
    const int count = rng.uniform_int(1, cfg.max_objects);
    for (int o = 0; o < count; ++o) {
      bool placed = false;
      for (int attempt = 0; attempt < kTriesPerObject && !placed; ++attempt) {
        const double w = rng.uniform(cfg.min_side, cfg.max_side);
        const double h = rng.uniform(cfg.min_side, cfg.max_side);
        const double x1 = rng.uniform(0.0, cfg.extent_w - w);
        const double y1 = rng.uniform(0.0, cfg.extent_h - h);
        const Box box{x1, y1, x1 + w, y1 + h};
        bool ok = true;
        for (const LabeledBox& other : scene.objects) {
          if (iou(box, other.box) > cfg.max_overlap_iou) {
            ok = false;
            break;
          }
        }
        if (ok) {
          scene.objects.push_back({box, rng.uniform_int(0, cfg.num_categories - 1)});
          placed = true;
        }
      }
      if (!placed) {
        throw std::runtime_error(
            "generate_scenes: rejection budget exhausted; the max_overlap_iou=" +
            std::to_string(cfg.max_overlap_iou) +
            " constraint cannot fit another box of sides [" +
            std::to_string(cfg.min_side) + ", " + std::to_string(cfg.max_side) +
            "] into the extent");
      }
    }
  }
  return scenes;
}

// Schema: {version, extent: [w,h], scenes: [{objects: [{box: [x1,y1,x2,y2],
// category}]}]}. Doubles are emitted with shortest round-trip precision,
// so save/load is lossless.
inline nlohmann::json scenes_to_json(std::span<const Scene> scenes) {
  nlohmann::json doc;
  doc["version"] = kSceneSchemaVersion;
  double ew = 0.0;
  double eh = 0.0;
  if (!scenes.empty()) {
    ew = scenes.front().extent_w;
    eh = scenes.front().extent_h;
    for (const Scene& s : scenes) {
      if (s.extent_w != ew || s.extent_h != eh) {
        throw std::invalid_argument("save_scenes: scenes with mixed extents");
      }
    }
  }
  doc["extent"] = {ew, eh};
  doc["scenes"] = nlohmann::json::array();
  for (const Scene& s : scenes) {
    nlohmann::json objs = nlohmann::json::array();
    for (const LabeledBox& o : s.objects) {
      objs.push_back({{"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}},
                      {"category", o.category}});
    }
    doc["scenes"].push_back({{"objects", std::move(objs)}});
  }
  return doc;
}

inline std::vector<Scene> scenes_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("version") || !doc.contains("extent") ||
      !doc.contains("scenes")) {
    throw std::runtime_error("scene file: missing version/extent/scenes field");
  }
  if (doc.at("version").get<int>() != kSceneSchemaVersion) {
    throw std::runtime_error("scene file: unsupported schema version");
  }
  const auto& extent = doc.at("extent");
  if (!extent.is_array() || extent.size() != 2) {
    throw std::runtime_error("scene file: extent must be [w, h]");
  }
  std::vector<Scene> scenes;
  for (const auto& sj : doc.at("scenes")) {
    Scene s;
    s.extent_w = extent[0].get<double>();
    s.extent_h = extent[1].get<double>();
    for (const auto& oj : sj.at("objects")) {
      const auto& b = oj.at("box");
      if (!b.is_array() || b.size() != 4) {
        throw std::runtime_error("scene file: box must be [x1, y1, x2, y2]");
      }
      LabeledBox lb;
      lb.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                b[3].get<double>()};
      lb.category = oj.at("category").get<int>();
      if (lb.category < 0) throw std::runtime_error("scene file: negative category");
      if (!lb.box.valid() || lb.box.area() <= 0.0) {
        throw std::runtime_error("scene file: box with non-positive area");
      }
      s.objects.push_back(lb);
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

inline void save_scenes(const std::filesystem::path& path, std::span<const Scene> scenes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_scenes: cannot open " + path.string());
  out << scenes_to_json(scenes).dump(2) << '\n';
  if (!out) throw std::runtime_error("save_scenes: write failed for " + path.string());
}

inline std::vector<Scene> load_scenes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_scenes: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_scenes: " + path.string() + ": " + e.what());
  }
  return scenes_from_json(doc);
}

} // namespace musu
