// wmlab: train, attack, evaluate and scan watermarked models from a JSON config.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wmlab/errors.hpp"
#include "wmlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace wmlab;

namespace {

struct Common {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load(const Common& c) {
  auto cfg = load_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg) { return c.out.empty() ? fs::path(cfg.output_dir) : fs::path(c.out); }

void add_common(CLI::App* sub, Common& c, bool checkpoint) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  if (checkpoint) sub->add_option("--checkpoint", c.checkpoint, "model checkpoint (.wmck)")->required();
  sub->add_option("--out", c.out, "output directory (default: config output_dir)");
  sub->add_option("--seed", c.seed, "global seed, overrides the config");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wmlab: watermark embedding, removal attacks and parameter-space scans"};
  app.set_version_flag("--version", kSoftwareVersion);
  app.require_subcommand(1);

  Common train_o, attack_o, eval_o, land_o;
  auto* train = app.add_subcommand("train", "train a watermarked model");
  add_common(train, train_o, false);
  auto* attack = app.add_subcommand("attack", "run the configured removal attacks");
  add_common(attack, attack_o, true);
  auto* evaluate = app.add_subcommand("evaluate", "benign accuracy and WSR of a checkpoint");
  add_common(evaluate, eval_o, true);
  auto* landscape = app.add_subcommand("landscape", "scan WSR/BA around a checkpoint");
  add_common(landscape, land_o, true);
  double tolerance = 0.005;
  landscape->add_option("--origin-tolerance", tolerance, "allowed origin-cell deviation");

  std::vector<std::string> manifests;
  std::string report_out = ".";
  auto* report = app.add_subcommand("report", "summary table from run manifests");
  report->add_option("manifests", manifests, "manifest.json files")->required();
  report->add_option("--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      const auto cfg = load(train_o);
      const auto o = cmd_train(cfg, out_dir(train_o, cfg));
      std::printf("checkpoint %s\nwsr %.4f ba %.4f\n", o.checkpoint.string().c_str(), o.wsr, o.ba);
    } else if (attack->parsed()) {
      const auto cfg = load(attack_o);
      for (const auto& o : cmd_attack(cfg, attack_o.checkpoint, out_dir(attack_o, cfg)))
        std::printf("%s wsr %.4f -> %.4f ba %.4f -> %.4f (%s)\n", o.report.attack.c_str(), o.report.wsr_before,
                    o.report.wsr_after(), o.report.ba_before, o.report.ba_after(), o.checkpoint.string().c_str());
    } else if (evaluate->parsed()) {
      const auto cfg = load(eval_o);
      std::cout << cmd_evaluate(cfg, eval_o.checkpoint, out_dir(eval_o, cfg)).dump(2) << "\n";
    } else if (landscape->parsed()) {
      const auto cfg = load(land_o);
      const auto g = cmd_landscape(cfg, land_o.checkpoint, out_dir(land_o, cfg), tolerance);
      const double r = g.erase_radius();
      if (std::isfinite(r))
        std::printf("%zu cells, erase radius %.4f\n", g.cells.size(), r);
      else
        std::printf("%zu cells, WSR stays >= 0.5 along beta = 0\n", g.cells.size());
    } else if (report->parsed()) {
      std::vector<fs::path> paths(manifests.begin(), manifests.end());
      std::cout << cmd_report(paths, report_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "wmlab: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
