// fnoseg command-line front end.
#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fnoseg/binio.hpp"
#include "fnoseg/canonical_json.hpp"
#include "fnoseg/cli.hpp"

using namespace fnoseg;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::size_t> parse_factors(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad factor '" + item + "'");
    }
  }
  return out;
}

void log_line(const std::string& s) {
  std::fprintf(stderr, "%s\n", s.c_str());
  std::fflush(stderr);
}

// Shared run flags: file first, then explicit overrides.
struct RunFlags {
  std::string config, out, precision, factors, variants, manifest, variant;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t factor = 0, epochs = 0;

  void add(CLI::App* app, bool experiment) {
    app->add_option("--config", config, "run config JSON");
    app->add_option("--seed", seed, "top-level seed")->each([this](const std::string&) { seed_set = true; });
    app->add_option("--out", out, "output directory");
    app->add_option("--precision", precision, "f32 or f64");
    app->add_option("--manifest", manifest, "dataset manifest.json");
    app->add_option("--epochs", epochs, "override the epoch count");
    if (experiment) {
      app->add_option("--factors", factors, "comma-separated downsampling factors");
      app->add_option("--variants", variants, "comma-separated model variants");
    } else {
      app->add_option("--factor", factor, "training downsampling factor");
      app->add_option("--variant", variant, "model variant preset");
    }
  }

  RunConfig resolve() const {
    RunConfig r = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (seed_set) r.seed = seed;
    if (!out.empty()) r.out = out;
    if (!precision.empty()) r.precision = parse_precision(precision);
    if (!manifest.empty()) r.manifest = manifest;
    if (epochs > 0) r.train.schedule.total_epochs = epochs;
    if (!factors.empty()) r.factors = parse_factors(factors);
    if (!variants.empty()) r.variants = split_list(variants);
    if (factor > 0) r.train.factor = factor;
    if (!variant.empty()) r.model = ModelConfig::preset(variant, r.desk);
    r.apply_seed();
    r.validate();
    return r;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FNOSeg3D volumetric segmentation engine"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware)");

  // synth-gen
  auto* synth = app.add_subcommand("synth-gen", "generate the synthetic dataset");
  std::string synth_config, synth_out = "data";
  std::uint64_t synth_seed = 0;
  bool synth_seed_set = false;
  std::size_t synth_samples = 0;
  synth->add_option("--config", synth_config, "synthetic spec JSON");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--seed", synth_seed, "dataset seed")->each([&](const std::string&) { synth_seed_set = true; });
  synth->add_option("--samples", synth_samples, "override the sample count");

  // train
  auto* train = app.add_subcommand("train", "train one model");
  RunFlags train_flags;
  train_flags.add(train, false);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt, eval_manifest = "data/manifest.json", split = "test", eval_out, eval_precision = "f32";
  std::size_t eval_factor = 1;
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest.json");
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--factor", eval_factor, "input downsampling factor (1 = native)");
  eval->add_option("--out", eval_out, "directory for eval.csv / eval.json");
  eval->add_option("--precision", eval_precision, "f32 or f64");

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  bool g_ops = false, g_model = false;
  std::uint64_t g_seed = 0;
  grad->add_flag("--ops", g_ops, "per-op suite");
  grad->add_flag("--model", g_model, "end-to-end tiny models");
  grad->add_option("--seed", g_seed, "seed");

  // param-count
  auto* pc = app.add_subcommand("param-count", "exact parameter count with per-block breakdown");
  std::string pc_variant = "fnoseg3d", pc_config, pc_out;
  bool pc_full = false;
  pc->add_option("--variant", pc_variant, "model variant preset");
  pc->add_flag("--full", pc_full, "full-size configuration instead of the desk one");
  pc->add_option("--config", pc_config, "model config JSON (overrides --variant)");
  pc->add_option("--out", pc_out, "write the report JSON here");

  // experiment
  auto* exp = app.add_subcommand("experiment", "resolution-robustness experiment");
  RunFlags exp_flags;
  exp_flags.add(exp, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (threads > 0) set_num_threads(threads);

    if (*synth) {
      SyntheticSpec spec;
      if (!synth_config.empty()) spec = SyntheticSpec::from_json(Json::parse(binio::read_file(synth_config)));
      if (synth_seed_set) spec.seed = synth_seed;
      if (synth_samples > 0) spec.samples = synth_samples;
      const auto m = cmd_synth_gen(spec, synth_out);
      std::printf("wrote %zu volumes to %s (spec %s)\n", m.entries.size(), synth_out.c_str(), m.spec_hash.c_str());
    } else if (*train) {
      const RunConfig run = train_flags.resolve();
      const auto s = cmd_train(run, log_line);
      std::printf("best epoch %zu, val Dice %.4f", s.best_epoch + 1, s.best_val_dice);
      if (!s.test.samples.empty())
        std::printf(", test Dice WT %.4f TC %.4f ET %.4f mean %.4f", s.test.dice[0], s.test.dice[1], s.test.dice[2],
                    s.test.mean);
      std::printf("\n");
    } else if (*eval) {
      const auto r = cmd_eval(ckpt, eval_manifest, split, eval_factor, parse_precision(eval_precision), eval_out);
      std::printf("id,dice_wt,dice_tc,dice_et,mean\n");
      for (const auto& s : r.samples)
        std::printf("%s,%.6f,%.6f,%.6f,%.6f\n", s.id.c_str(), s.dice[0], s.dice[1], s.dice[2], s.mean);
      std::printf("mean,%.6f,%.6f,%.6f,%.6f\n", r.dice[0], r.dice[1], r.dice[2], r.mean);
    } else if (*grad) {
      const auto res = cmd_gradcheck(g_ops, g_model, g_seed);
      for (const auto& r : res.reports)
        std::printf("%-28s worst %.3e tol %.0e %s\n", r.op.c_str(), r.worst(), r.tolerance, r.ok() ? "ok" : "FAIL");
      if (!res.ok()) return kExitGradcheck;
    } else if (*pc) {
      ModelConfig cfg = pc_config.empty() ? ModelConfig::preset(pc_variant, !pc_full)
                                          : ModelConfig::from_json(Json::parse(binio::read_file(pc_config)));
      const auto b = cmd_param_count(cfg);
      for (const auto& [name, n] : b.blocks) std::printf("%-12s %zu\n", name.c_str(), n);
      std::printf("%-12s %zu\n", "total", b.total);
      if (!pc_out.empty()) {
        Json j = b.to_json();
        j["config"] = cfg.to_json();
        binio::write_file(pc_out, canonical_dump(j));
      }
    } else if (*exp) {
      const RunConfig run = exp_flags.resolve();
      const auto table = cmd_experiment(run, log_line);
      std::printf("%s", table.csv().c_str());
      for (const auto& c : table.cells)
        if (!c.ok) return kExitNumerical;
    }
  } catch (const Json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return kExitOk;
}
