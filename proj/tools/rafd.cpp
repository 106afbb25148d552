// rafd: dataset generation, training, evaluation, inference and rendering.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rafd/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Flow-guided radar detection on synthetic bird's-eye-view sequences"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool force = false;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key = value run configuration file");
  app.add_option_function<std::uint64_t>(
      "--seed", [&](std::uint64_t s) { seed = s, seed_given = true; }, "overrides sim.seed and train.seed");
  app.add_flag("--force", force, "overwrite existing outputs");
  app.add_option("--set", overrides, "extra key=value settings applied after --config");
  bool dump_config = false;
  app.add_flag("--dump-config", dump_config, "print the effective configuration before running");

  std::string out_dir = "data";
  auto* gen = app.add_subcommand("generate", "simulate sequences and write a dataset");
  gen->add_option("--out", out_dir, "dataset directory (defaults to data.dir)");

  bool resume = false;
  auto* train = app.add_subcommand("train", "train on the dataset's train split");
  train->add_flag("--resume", resume, "continue from <run_dir>/last");

  rafd::EvalCommand ev;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint stem (default <run_dir>/last)");
  eval->add_option("--split", ev.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  eval->add_flag("--oracle", ev.oracle, "score ground truth as detections");
  eval->add_option("--report", ev.report, "also write the report to this file");
  eval->add_option("--dump-images", ev.dump_images, "directory for per-frame PPM renders");

  rafd::InferCommand inf;
  auto* infer = app.add_subcommand("infer", "print detections for one tuple");
  infer->add_option("--checkpoint", inf.checkpoint, "checkpoint stem (default <run_dir>/last)");
  infer->add_option("--split", inf.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  infer->add_option("--sequence", inf.sequence, "sequence index within the split");
  infer->add_option("--frame", inf.frame, "first frame of the tuple");

  rafd::RenderCommand ren;
  auto* render = app.add_subcommand("render", "write box and flow images for one tuple");
  render->add_option("--checkpoint", ren.checkpoint, "checkpoint stem; without it only ground truth is drawn");
  render->add_option("--split", ren.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  render->add_option("--sequence", ren.sequence, "sequence index within the split");
  render->add_option("--frame", ren.frame, "first frame of the tuple");
  render->add_option("--scale", ren.scale, "pixel upscaling")->check(CLI::Range(1, 16));
  render->add_option("--prefix", ren.prefix, "output prefix");

  CLI11_PARSE(app, argc, argv);

  try {
    rafd::RunConfig cfg = config_path.empty() ? rafd::RunConfig{} : rafd::load_config(config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + o + "'");
      std::string key = o.substr(0, eq);
      key.erase(key.find_last_not_of(" \t") + 1);
      rafd::apply_setting(cfg, key, o.substr(eq + 1));
    }
    if (seed_given) cfg.sim.seed = cfg.train.seed = seed;
    cfg.finalize();
    if (dump_config) std::cout << rafd::serialize_config(cfg);

    if (*gen) {
      const std::filesystem::path dir = gen->count("--out") ? std::filesystem::path(out_dir) : cfg.dataset;
      return rafd::cmd_generate(cfg, dir, force, std::cout, std::cerr);
    }
    if (*train) {
      if (!resume && !force && std::filesystem::exists(cfg.run_dir / "last.json")) {
        std::cerr << "error: " << cfg.run_dir.string() << " already holds a run (use --resume or --force)\n";
        return 2;
      }
      return rafd::cmd_train(cfg, resume, std::cout, std::cerr);
    }
    if (*eval) return rafd::cmd_eval(cfg, ev, std::cout, std::cerr);
    if (*infer) return rafd::cmd_infer(cfg, inf, std::cout, std::cerr);
    if (*render) return rafd::cmd_render(cfg, ren, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
