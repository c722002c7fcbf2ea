// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "musu/scenes.hpp"

using namespace musu;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& name) : path(fs::temp_directory_path() / name) {}
  ~TempFile() { std::error_code ec; fs::remove(path, ec); }
};

} // namespace

TEST_CASE("generation is deterministic per seed") {
  SceneSetConfig cfg;
  cfg.seed = 42;
  const auto a = generate_scenes(cfg);
  const auto b = generate_scenes(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    REQUIRE(a[s].objects.size() == b[s].objects.size());
    for (std::size_t o = 0; o < a[s].objects.size(); ++o) {
      CHECK(a[s].objects[o].box == b[s].objects[o].box);
      CHECK(a[s].objects[o].category == b[s].objects[o].category);
    }
  }
  cfg.seed = 43;
  const auto c = generate_scenes(cfg);
  bool any_diff = false;
  for (std::size_t s = 0; s < a.size() && !any_diff; ++s) {
    any_diff = a[s].objects.size() != c[s].objects.size() ||
               !(a[s].objects[0].box == c[s].objects[0].box);
  }
  CHECK(any_diff);
}

TEST_CASE("zero overlap budget produces disjoint boxes") {
  SceneSetConfig cfg;
  cfg.max_overlap_iou = 0.0;
  cfg.num_scenes = 10;
  cfg.min_side = 16.0;
  cfg.max_side = 32.0; // five disjoint boxes must fit the extent
  cfg.seed = 7;
  for (const Scene& s : generate_scenes(cfg)) {
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      for (std::size_t b = a + 1; b < s.objects.size(); ++b) {
        CHECK(iou(s.objects[a].box, s.objects[b].box) == 0.0);
      }
    }
  }
}

TEST_CASE("the benchmark configuration generates valid scenes") {
  SceneSetConfig cfg; // 20 scenes, K=5, <=5 objects, sides 24..80, extent 128
  cfg.seed = 3;
  const auto scenes = generate_scenes(cfg);
  REQUIRE(scenes.size() == 20);
  std::size_t total = 0;
  for (const Scene& s : scenes) {
    CHECK(s.objects.size() >= 1);
    CHECK(s.objects.size() <= 5);
    total += s.objects.size();
    for (const LabeledBox& o : s.objects) {
      CHECK(o.category >= 0);
      CHECK(o.category < 5);
      CHECK(o.box.width() >= 24.0);
      CHECK(o.box.width() <= 80.0);
      CHECK(o.box.height() >= 24.0);
      CHECK(o.box.height() <= 80.0);
      CHECK(o.box.x1 >= 0.0);
      CHECK(o.box.y1 >= 0.0);
      CHECK(o.box.x2 <= 128.0);
      CHECK(o.box.y2 <= 128.0);
      for (const LabeledBox& other : s.objects) {
        if (&o != &other) CHECK(iou(o.box, other.box) <= cfg.max_overlap_iou);
      }
    }
  }
  CHECK(total >= 20u);
  CHECK(total <= 100u);
}

TEST_CASE("overconstrained configs fail with the constraint named") {
  SceneSetConfig cfg;
  cfg.max_objects = 5;
  cfg.min_side = 100.0;
  cfg.max_side = 120.0;
  cfg.max_overlap_iou = 0.0; // five near-full-extent disjoint boxes cannot fit
  cfg.seed = 1;
  CHECK_THROWS_WITH(generate_scenes(cfg),
                    Catch::Matchers::ContainsSubstring("max_overlap_iou"));
}

TEST_CASE("invalid configs are rejected") {
  SceneSetConfig cfg;
  cfg.max_side = 300.0; // larger than the extent
  CHECK_THROWS_AS(generate_scenes(cfg), std::invalid_argument);
  cfg = SceneSetConfig{};
  cfg.max_overlap_iou = 1.0;
  CHECK_THROWS_AS(generate_scenes(cfg), std::invalid_argument);
  cfg = SceneSetConfig{};
  cfg.min_side = 0.0;
  CHECK_THROWS_AS(generate_scenes(cfg), std::invalid_argument);
}

TEST_CASE("scene files round-trip losslessly") {
  SceneSetConfig cfg;
  cfg.num_scenes = 5;
  cfg.seed = 99;
  const auto scenes = generate_scenes(cfg);

  TempFile file("musu_scenes_roundtrip.json");
  save_scenes(file.path, scenes);
  const auto loaded = load_scenes(file.path);

  REQUIRE(loaded.size() == scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    CHECK(loaded[s].extent_w == scenes[s].extent_w);
    CHECK(loaded[s].extent_h == scenes[s].extent_h);
    REQUIRE(loaded[s].objects.size() == scenes[s].objects.size());
    for (std::size_t o = 0; o < scenes[s].objects.size(); ++o) {
      // bit-exact reals via shortest round-trip serialization
      CHECK(loaded[s].objects[o].box == scenes[s].objects[o].box);
      CHECK(loaded[s].objects[o].category == scenes[s].objects[o].category);
    }
  }
}

TEST_CASE("an empty scene list is a valid file") {
  TempFile file("musu_scenes_empty.json");
  save_scenes(file.path, std::vector<Scene>{});
  CHECK(load_scenes(file.path).empty());
}

TEST_CASE("a minimal hand-written fixture parses") {
  TempFile file("musu_scenes_fixture.json");
  {
    std::ofstream out(file.path);
    out << R"({"version": 1, "extent": [128, 128],
               "scenes": [{"objects": [{"box": [8, 16, 40, 56], "category": 2}]}]})";
  }
  const auto scenes = load_scenes(file.path);
  REQUIRE(scenes.size() == 1);
  REQUIRE(scenes[0].objects.size() == 1);
  CHECK(scenes[0].extent_w == 128.0);
  CHECK(scenes[0].objects[0].box == Box{8, 16, 40, 56});
  CHECK(scenes[0].objects[0].category == 2);
}

TEST_CASE("malformed scene files report a parse error") {
  TempFile file("musu_scenes_broken.json");
  {
    std::ofstream out(file.path);
    out << "{\"version\": 1, \"extent\": [128";
  }
  CHECK_THROWS_AS(load_scenes(file.path), std::runtime_error);

  TempFile wrong("musu_scenes_wrongversion.json");
  {
    std::ofstream out(wrong.path);
    out << R"({"version": 99, "extent": [1, 1], "scenes": []})";
  }
  CHECK_THROWS_WITH(load_scenes(wrong.path),
                    Catch::Matchers::ContainsSubstring("version"));
  CHECK_THROWS_AS(load_scenes(fs::temp_directory_path() / "musu_no_such_file.json"),
                  std::runtime_error);
}
