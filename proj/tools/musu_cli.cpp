// SPDX-License-Identifier: Apache-2.0
//
// Experiment front-end: scene generation, training, evaluation,
// assignment debugging and ablation sweeps over a shared config file
// with dotted-path overrides.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "musu/musu.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON");
  cmd->add_option("--set", args.sets, "dotted-path override, key=value (repeatable)");
  cmd->add_option("--out", args.out_dir, "output directory (overrides config out_dir)");
  cmd->add_option("--seed", args.seed, "master seed: sets scenes.seed, train.seed, layout.seed");
}

nlohmann::json resolve_config(const CommonArgs& args) {
  nlohmann::json doc = musu::config_to_json(musu::ExperimentConfig{});
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw std::runtime_error("cannot open config file: " + args.config_path);
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("config parse error in " + args.config_path + ": " + e.what());
    }
  }
  if (args.seed) {
    doc["scenes"]["seed"] = *args.seed;
    doc["train"]["seed"] = *args.seed;
    doc["layout"]["seed"] = *args.seed;
  }
  for (const std::string& set : args.sets) {
    const std::size_t eq = set.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw musu::ConfigError("malformed --set (expected key=value): " + set);
    }
    musu::apply_override(doc, set.substr(0, eq), set.substr(eq + 1));
  }
  if (!args.out_dir.empty()) doc["out_dir"] = args.out_dir;
  return doc;
}

fs::path default_or(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"MuSu desk-scale detection laboratory"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("generate-scenes", "write a seeded synthetic scene set");
  add_common(gen, gen_args);

  CommonArgs train_args;
  std::string train_scenes;
  CLI::App* train = app.add_subcommand("train", "train the toy detector under MuSu assignment");
  add_common(train, train_args);
  train->add_option("--scenes", train_scenes, "scene file (default: <out>/scenes.json)");

  CommonArgs eval_args;
  std::string eval_scenes;
  std::string eval_checkpoint;
  bool eval_pr_curves = false;
  CLI::App* eval = app.add_subcommand("eval", "run inference and write the AP/consistency report");
  add_common(eval, eval_args);
  eval->add_option("--scenes", eval_scenes, "scene file (default: <out>/scenes.json)");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint (default: <out>/checkpoint.json)");
  eval->add_flag("--pr-curves", eval_pr_curves, "also dump PR operating points as CSV");

  CommonArgs dbg_args;
  std::string dbg_scenes;
  std::string dbg_checkpoint;
  std::string dbg_snapshot;
  std::size_t dbg_scene_index = 0;
  CLI::App* dbg = app.add_subcommand("assign-debug", "dump per-anchor assignment for one scene");
  add_common(dbg, dbg_args);
  dbg->add_option("--scenes", dbg_scenes, "scene file (default: <out>/scenes.json)");
  dbg->add_option("--scene-index", dbg_scene_index, "scene to inspect");
  dbg->add_option("--checkpoint", dbg_checkpoint, "decode this checkpoint instead of a fresh init");
  dbg->add_option("--snapshot", dbg_snapshot,
                  "JSON with probabilities/boxes/anchor_centers, bypassing the detector");

  CommonArgs sweep_args;
  std::vector<std::string> grid_specs;
  CLI::App* sweep = app.add_subcommand("sweep", "cartesian grid of overrides, consolidated CSV");
  add_common(sweep, sweep_args);
  sweep->add_option("--grid", grid_specs, "sweep axis, key=v1,v2,... (repeatable)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const nlohmann::json resolved = resolve_config(gen_args);
      const musu::ExperimentConfig cfg = musu::config_from_json(resolved);
      musu::run_generate_scenes(cfg, resolved, cfg.out_dir);
      std::cout << "wrote " << musu::paths::scenes(cfg.out_dir).string() << "\n";
    } else if (train->parsed()) {
      const nlohmann::json resolved = resolve_config(train_args);
      const musu::ExperimentConfig cfg = musu::config_from_json(resolved);
      const fs::path scenes = default_or(train_scenes, musu::paths::scenes(cfg.out_dir));
      musu::run_train(cfg, resolved, cfg.out_dir, scenes);
      std::cout << "wrote " << musu::paths::checkpoint(cfg.out_dir).string() << " and "
                << musu::paths::train_log(cfg.out_dir).string() << "\n";
    } else if (eval->parsed()) {
      const nlohmann::json resolved = resolve_config(eval_args);
      const musu::ExperimentConfig cfg = musu::config_from_json(resolved);
      const fs::path scenes = default_or(eval_scenes, musu::paths::scenes(cfg.out_dir));
      const fs::path ckpt = default_or(eval_checkpoint, musu::paths::checkpoint(cfg.out_dir));
      const musu::EvalReport report =
          musu::run_eval(cfg, resolved, cfg.out_dir, scenes, ckpt, eval_pr_curves);
      std::cout << "ap50=" << report.ap50 << " ap_coco=" << report.ap_coco
                << " agreement=" << report.agreement_rate << "\n";
    } else if (dbg->parsed()) {
      const nlohmann::json resolved = resolve_config(dbg_args);
      const musu::ExperimentConfig cfg = musu::config_from_json(resolved);
      const fs::path scenes = default_or(dbg_scenes, musu::paths::scenes(cfg.out_dir));
      std::optional<nlohmann::json> snapshot;
      if (!dbg_snapshot.empty()) {
        std::ifstream in(dbg_snapshot);
        if (!in) throw std::runtime_error("cannot open snapshot file: " + dbg_snapshot);
        snapshot = nlohmann::json::parse(in);
      }
      std::optional<fs::path> ckpt;
      if (!dbg_checkpoint.empty()) ckpt = dbg_checkpoint;
      musu::run_assign_debug(cfg, resolved, cfg.out_dir, scenes, dbg_scene_index, snapshot, ckpt);
      std::cout << "wrote " << musu::paths::assign_debug(cfg.out_dir).string() << "\n";
    } else if (sweep->parsed()) {
      const nlohmann::json resolved = resolve_config(sweep_args);
      std::vector<musu::SweepAxis> axes;
      for (const std::string& spec : grid_specs) axes.push_back(musu::parse_sweep_axis(spec));
      const std::string out_dir = resolved.at("out_dir").get<std::string>();
      musu::run_sweep(resolved, axes, out_dir);
      std::cout << "wrote " << musu::paths::sweep_results(out_dir).string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
