// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "musu/detector.hpp"
#include "musu/random.hpp"

using namespace musu;

namespace {

AnchorLayout grid_3x3() { return make_anchor_layout({{3, 3, 8.0}}, 1, 0); }

Scene one_object_scene() {
  Scene s;
  s.extent_w = 24;
  s.extent_h = 24;
  s.objects = {{{2, 2, 20, 20}, 1}};
  return s;
}

void randomize(DetectorParams& params, Rng& rng) {
  for (double& v : params.category_logits) v = rng.uniform(-2.0, 2.0);
  for (double& v : params.objectness_logits) v = rng.uniform(-2.0, 2.0);
  for (double& v : params.box_offsets) v = rng.uniform(-0.5, 0.5);
}

} // namespace

TEST_CASE("init puts the classification sigmoid at the prior") {
  const auto layout = grid_3x3();
  const auto params = init_detector(layout, 4);
  CHECK(params.num_anchors() == 9);
  CHECK(params.category_logits.size() == 36);
  for (const double v : params.box_offsets) CHECK(v == 0.0);
  for (const double v : params.objectness_logits) CHECK(v == 0.0);
  CHECK(sigmoid(params.category_logits[0]) == Catch::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("decode produces the 2s x 2s prior at zero offsets") {
  const auto layout = grid_3x3();
  const auto params = init_detector(layout, 2);
  const auto snap = decode(params, layout);
  // first anchor center is (4, 4), stride 8, sigma = rho = 1
  CHECK(snap.boxes[0].x1 == Catch::Approx(4.0 - 8.0));
  CHECK(snap.boxes[0].y1 == Catch::Approx(4.0 - 8.0));
  CHECK(snap.boxes[0].x2 == Catch::Approx(4.0 + 8.0));
  CHECK(snap.boxes[0].y2 == Catch::Approx(4.0 + 8.0));
  CHECK(snap.boxes[0].width() == Catch::Approx(16.0));
}

TEST_CASE("anchor scale and ratio shape the prior box") {
  AnchorLayout layout;
  layout.levels = {{1, 1, 8.0}};
  layout.anchors_per_location = 1;

  SECTION("sigma 2 doubles the box") {
    layout.scales = {2.0};
    layout.ratios = {1.0};
    const auto snap = decode(init_detector(layout, 1), layout);
    CHECK(snap.boxes[0].width() == Catch::Approx(32.0));
    CHECK(snap.boxes[0].height() == Catch::Approx(32.0));
  }
  SECTION("rho 2 splits the aspect by sqrt(rho)") {
    layout.scales = {1.0};
    layout.ratios = {2.0};
    const auto snap = decode(init_detector(layout, 1), layout);
    CHECK(snap.boxes[0].width() == Catch::Approx(2.0 * 8.0 * std::sqrt(2.0)).epsilon(1e-12));
    CHECK(snap.boxes[0].height() == Catch::Approx(2.0 * 8.0 / std::sqrt(2.0)).epsilon(1e-12));
  }
}

TEST_CASE("zero logits decode to the quarter probability") {
  const auto layout = grid_3x3();
  auto params = init_detector(layout, 2);
  for (double& v : params.category_logits) v = 0.0;
  const auto snap = decode(params, layout);
  for (const double p : snap.probabilities) CHECK(p == Catch::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("strongly negative logits saturate towards zero") {
  const auto layout = grid_3x3();
  auto params = init_detector(layout, 1);
  for (double& v : params.category_logits) v = -20.0;
  const auto snap = decode(params, layout);
  for (const double p : snap.probabilities) {
    CHECK(p < 1e-8);
    CHECK(p > 0.0);
  }
}

TEST_CASE("decoded boxes contain their center and keep positive area") {
  Rng rng(5);
  const auto layout = make_anchor_layout({{4, 4, 8.0}}, 3, 11);
  auto params = init_detector(layout, 3);
  const auto centers = layout.anchor_centers();
  for (int it = 0; it < 20; ++it) {
    randomize(params, rng);
    const auto snap = decode(params, layout);
    for (std::size_t i = 0; i < snap.boxes.size(); ++i) {
      CHECK(snap.boxes[i].area() > 0.0);
      CHECK(snap.boxes[i].contains(centers[i]));
    }
    for (const double p : snap.probabilities) {
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
  }
}

TEST_CASE("single-slot layouts use the unit scale and ratio") {
  const auto layout = make_anchor_layout({{16, 16, 8.0}}, 1, 123);
  CHECK(layout.scales == std::vector<double>{1.0});
  CHECK(layout.ratios == std::vector<double>{1.0});
}

TEST_CASE("multi-slot layouts draw scales and ratios from the sampling intervals") {
  const auto layout = make_anchor_layout({{16, 16, 8.0}}, 4, 123);
  REQUIRE(layout.scales.size() == 4);
  REQUIRE(layout.ratios.size() == 4);
  for (const double s : layout.scales) {
    CHECK(s >= 1.0);
    CHECK(s <= 2.0);
  }
  for (const double r : layout.ratios) {
    CHECK(r >= 0.5);
    CHECK(r <= 2.0);
  }
  // deterministic per seed
  const auto again = make_anchor_layout({{16, 16, 8.0}}, 4, 123);
  CHECK(again.scales == layout.scales);
  CHECK(again.ratios == layout.ratios);
}

TEST_CASE("anchor flatten and unflatten round-trip") {
  const auto layout = make_anchor_layout({{2, 3, 8.0}, {1, 2, 16.0}}, 3, 7);
  REQUIRE(layout.num_anchors() == (2 * 3 + 1 * 2) * 3);
  for (std::size_t i = 0; i < layout.num_anchors(); ++i) {
    const auto id = layout.unflatten(i);
    CHECK(layout.flatten(id) == i);
    CHECK(id.slot == layout.slot_of(i));
  }
  const auto centers = layout.anchor_centers();
  CHECK(centers.size() == layout.num_anchors());
  // slots at the same location share a center
  CHECK(centers[0].x == centers[1].x);
  CHECK(centers[0].y == centers[2].y);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  auto params = init_detector(layout, 3);
  const auto before = params;
  DetectorOptimizer opt(cfg);
  train_step(params, opt, layout, one_object_scene(), cfg);
  CHECK(params == before);
}

TEST_CASE("one small step decreases the loss on a single-object scene") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  const Scene scene = one_object_scene();

  auto params = init_detector(layout, 3);
  Rng rng(17);
  randomize(params, rng);

  const auto snap = decode(params, layout);
  const auto assignment = musu_assign(snap, scene.objects, layout, cfg.assign);
  const double before = total_loss(snap, assignment, scene.objects, cfg.focal).breakdown.l_total;

  DetectorOptimizer opt(cfg);
  train_step(params, opt, layout, scene, cfg);

  const auto snap2 = decode(params, layout);
  const auto assignment2 = musu_assign(snap2, scene.objects, layout, cfg.assign);
  const double after = total_loss(snap2, assignment2, scene.objects, cfg.focal).breakdown.l_total;
  CHECK(after < before);
}

TEST_CASE("training is bit-deterministic") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  cfg.steps = 25;
  const std::vector<Scene> scenes = {one_object_scene()};

  const auto run1 = train_run(layout, scenes, 3, cfg);
  const auto run2 = train_run(layout, scenes, 3, cfg);
  REQUIRE(run1.params.size() == run2.params.size());
  CHECK(run1.params == run2.params);
  REQUIRE(run1.log.size() == run2.log.size());
  for (std::size_t i = 0; i < run1.log.size(); ++i) {
    CHECK(run1.log[i].loss.l_total == run2.log[i].loss.l_total);
  }
}

TEST_CASE("zero steps returns the initial tables") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  cfg.steps = 0;
  const std::vector<Scene> scenes = {one_object_scene()};
  const auto run = train_run(layout, scenes, 3, cfg);
  REQUIRE(run.params.size() == 1);
  CHECK(run.params[0] == init_detector(layout, 3));
  CHECK(run.log.empty());
}

TEST_CASE("train_run rejects empty scene sets and bad categories") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  CHECK_THROWS_AS(train_run(layout, std::vector<Scene>{}, 3, cfg), std::invalid_argument);
  Scene bad = one_object_scene();
  bad.objects[0].category = 7;
  CHECK_THROWS_AS(train_run(layout, std::vector<Scene>{bad}, 3, cfg), std::invalid_argument);
}

TEST_CASE("parameter-space gradients match finite differences") {
  Rng rng(903);
  const double step = 1e-5;
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    const int slots = 1 + (it % 2);
    const auto layout = make_anchor_layout({{3, 3, 8.0}}, slots, 50 + it);
    const int k = 2 + (it % 2);
    auto params = init_detector(layout, k);
    randomize(params, rng);

    Scene scene;
    scene.extent_w = 24;
    scene.extent_h = 24;
    scene.objects = {{{1, 1, 15, 21}, it % k}, {{9, 7, 23, 23}, (it + 1) % k}};

    const auto snap = decode(params, layout);
    const auto assignment = musu_assign(snap, scene.objects, layout, AssignConfig{});
    const auto result = detector_loss(params, layout, scene.objects, assignment, FocalParams{});

    const auto fd_check = [&](std::vector<double>& block, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < block.size(); ++i) {
        const double saved = block[i];
        block[i] = saved + step;
        const double up =
            detector_loss(params, layout, scene.objects, assignment, FocalParams{})
                .loss.breakdown.l_total;
        block[i] = saved - step;
        const double down =
            detector_loss(params, layout, scene.objects, assignment, FocalParams{})
                .loss.breakdown.l_total;
        block[i] = saved;
        const double fd = (up - down) / (2 * step);
        worst = std::max(worst, std::abs(grad[i] - fd) /
                                    std::max({std::abs(grad[i]), std::abs(fd), 1e-6}));
      }
    };
    fd_check(params.category_logits, result.gradients.category_logits);
    fd_check(params.objectness_logits, result.gradients.objectness_logits);
    fd_check(params.box_offsets, result.gradients.box_offsets);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoints round-trip through JSON") {
  const auto layout = make_anchor_layout({{3, 3, 8.0}}, 2, 9);
  auto params = init_detector(layout, 3);
  Rng rng(1);
  randomize(params, rng);

  const auto path = std::filesystem::temp_directory_path() / "musu_ckpt_test.json";
  save_checkpoint(path, {{params}, layout, "deadbeef"});
  const Checkpoint loaded = load_checkpoint(path);
  std::filesystem::remove(path);

  REQUIRE(loaded.tables.size() == 1);
  CHECK(loaded.tables[0] == params);
  CHECK(loaded.config_hash == "deadbeef");
  CHECK(loaded.layout.scales == layout.scales);
  CHECK(loaded.layout.ratios == layout.ratios);
  REQUIRE(loaded.layout.levels.size() == 1);
  CHECK(loaded.layout.levels[0].stride == 8.0);
}

TEST_CASE("divergent training aborts with a training error") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  cfg.learning_rate = 1e12; // offsets overflow exp() within a couple of steps
  cfg.steps = 10;
  CHECK_THROWS_AS(train_run(layout, std::vector<Scene>{one_object_scene()}, 3, cfg),
                  TrainingError);
}

TEST_CASE("periodic callback fires on the configured interval") {
  const auto layout = grid_3x3();
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.consistency_interval = 4;
  std::vector<int> seen;
  train_run(layout, std::vector<Scene>{one_object_scene()}, 3, cfg,
            [&](int step, std::span<const DetectorParams>) { seen.push_back(step); });
  // after steps 4, 8 and the final step
  CHECK(seen == std::vector<int>({3, 7, 9}));
}
