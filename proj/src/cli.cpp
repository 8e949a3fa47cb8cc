#include "fnoseg/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fnoseg/binio.hpp"
#include "fnoseg/canonical_json.hpp"

namespace fnoseg {

namespace fs = std::filesystem;

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::kF32;
  if (s == "f64") return Precision::kF64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

std::string precision_name(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

void RunConfig::apply_seed() {
  model.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  train.schedule.validate();
  if (train.factor < 1) throw ConfigError("factor must be >= 1");
  if (variants.empty()) throw ConfigError("no model variants selected");
  if (factors.empty()) throw ConfigError("no downsampling factors selected");
  for (const auto& v : variants) ModelConfig::preset(v, desk);
  for (auto f : factors)
    if (f < 1) throw ConfigError("factors must be >= 1");
}

Json RunConfig::to_json() const {
  return Json{{"model", model.to_json()},
              {"train", train.to_json()},
              {"manifest", manifest},
              {"out", out},
              {"seed", seed},
              {"precision", precision_name(precision)},
              {"desk", desk},
              {"variants", variants},
              {"factors", factors}};
}

RunConfig RunConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig r;
  try {
    r.desk = j.value("desk", true);
    r.model = ModelConfig::preset("fnoseg3d", r.desk);
    for (const auto& [key, v] : j.items()) {
      if (key == "model") {
        Json m = v;
        if (!m.contains("desk")) m["desk"] = r.desk;
        r.model = ModelConfig::from_json(m);
      } else if (key == "train") {
        r.train = TrainConfig::from_json(v);
      } else if (key == "manifest") {
        r.manifest = v.get<std::string>();
      } else if (key == "out") {
        r.out = v.get<std::string>();
      } else if (key == "seed") {
        r.seed = v.get<std::uint64_t>();
      } else if (key == "precision") {
        r.precision = parse_precision(v.get<std::string>());
      } else if (key == "desk") {
        // handled above
      } else if (key == "variants") {
        r.variants = v.get<std::vector<std::string>>();
      } else if (key == "factors") {
        r.factors = v.get<std::vector<std::size_t>>();
      } else {
        throw ConfigError("unknown run config key '" + key + "'");
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  r.apply_seed();
  r.validate();
  return r;
}

RunConfig RunConfig::load(const std::string& path) {
  std::string text;
  try {
    text = binio::read_file(path);
  } catch (const FormatError&) {
    throw ConfigError("cannot read run config " + path);
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitData;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  return kExitGeneric;
}

DatasetManifest cmd_synth_gen(const SyntheticSpec& spec, const std::string& out_dir) {
  return generate_synthetic(spec, out_dir);
}

namespace {

struct Splits {
  std::vector<VolumeSample> train, val, test;
};

Splits load_all(const std::string& manifest_path) {
  const auto manifest = DatasetManifest::load(manifest_path);
  const std::string dir = fs::path(manifest_path).parent_path().string();
  return {load_split(manifest, dir, "train"), load_split(manifest, dir, "val"), load_split(manifest, dir, "test")};
}

Json eval_json(const EvalResult& r) {
  Json samples = Json::array();
  for (const auto& s : r.samples)
    samples.push_back({{"id", s.id}, {"WT", s.dice[0]}, {"TC", s.dice[1]}, {"ET", s.dice[2]}, {"mean", s.mean}});
  return Json{{"dice", {{"WT", r.dice[0]}, {"TC", r.dice[1]}, {"ET", r.dice[2]}}}, {"mean", r.mean}, {"samples", samples}};
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string epoch_line(const std::string& tag, const EpochReport& r, std::size_t total) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "[%s] epoch %zu/%zu lr %.3e loss %.4f val_loss %.4f dice WT %.3f TC %.3f ET %.3f (%.1fs)",
                tag.c_str(), r.epoch + 1, total, r.lr, r.train_loss, r.val_loss, r.val_dice[0], r.val_dice[1],
                r.val_dice[2], r.seconds);
  return buf;
}

template <class T>
TrainSummary train_impl(const RunConfig& run, const Splits& data, const std::string& out_dir, const std::string& tag,
                        const LogFn& log) {
  const auto t0 = std::chrono::steady_clock::now();
  auto result = train_loop<T>(run.model, data.train, data.val, run.train, [&](const EpochReport& r) {
    if (log) log(epoch_line(tag, r, run.train.schedule.total_epochs));
  });
  TrainSummary s;
  s.best_epoch = result.best_epoch;
  s.best_val_dice = result.best_val_dice;
  s.params = param_count(result.best);
  s.history = result.history;
  if (!data.test.empty()) s.test = evaluate(result.best, data.test, 1);
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  binio::write_file((fs::path(out_dir) / "history.csv").string(), history_csv(s.history));
  save_checkpoint(result.best, (fs::path(out_dir) / "model.fnck").string());
  binio::write_file((fs::path(out_dir) / "results.json").string(), canonical_dump(s.to_json()));
  return s;
}

TrainSummary train_dispatch(const RunConfig& run, const Splits& data, const std::string& out_dir,
                            const std::string& tag, const LogFn& log) {
  return run.precision == Precision::kF32 ? train_impl<float>(run, data, out_dir, tag, log)
                                          : train_impl<double>(run, data, out_dir, tag, log);
}

}  // namespace

Json TrainSummary::to_json() const {
  Json j{{"best_epoch", best_epoch}, {"best_val_dice", best_val_dice}, {"params", params},
         {"history", history_json(history)}};
  if (!test.samples.empty()) j["test_native"] = eval_json(test);
  return j;
}

TrainSummary cmd_train(const RunConfig& run, const LogFn& log) {
  run.validate();
  fs::create_directories(run.out);
  binio::write_file((fs::path(run.out) / "run_config.json").string(), canonical_dump(run.to_json()));
  const Splits data = load_all(run.manifest);
  if (data.train.empty()) throw DataError(run.manifest + ": no training samples");
  return train_dispatch(run, data, run.out, run.model.variant + " f" + std::to_string(run.train.factor), log);
}

EvalResult cmd_eval(const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
                    std::size_t factor, Precision precision, const std::string& out_dir) {
  if (factor < 1) throw ConfigError("factor must be >= 1");
  const auto manifest = DatasetManifest::load(manifest_path);
  const auto samples = load_split(manifest, fs::path(manifest_path).parent_path().string(), split);
  if (samples.empty()) throw DataError("split '" + split + "' is empty");
  EvalResult r;
  if (precision == Precision::kF32) {
    auto params = load_checkpoint<float>(checkpoint);
    r = evaluate(params, samples, factor);
  } else {
    auto params = load_checkpoint<double>(checkpoint);
    r = evaluate(params, samples, factor);
  }
  if (!out_dir.empty()) {
    std::string csv = "id,dice_wt,dice_tc,dice_et,mean\n";
    for (const auto& s : r.samples)
      csv += s.id + "," + fmt(s.dice[0]) + "," + fmt(s.dice[1]) + "," + fmt(s.dice[2]) + "," + fmt(s.mean) + "\n";
    csv += "mean," + fmt(r.dice[0]) + "," + fmt(r.dice[1]) + "," + fmt(r.dice[2]) + "," + fmt(r.mean) + "\n";
    binio::write_file((fs::path(out_dir) / "eval.csv").string(), csv);
    Json j = eval_json(r);
    j["split"] = split;
    j["factor"] = factor;
    j["checkpoint"] = checkpoint;
    binio::write_file((fs::path(out_dir) / "eval.json").string(), canonical_dump(j));
  }
  return r;
}

bool GradCheckOutcome::ok() const {
  return std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.ok(); });
}

GradCheckOutcome cmd_gradcheck(bool ops, bool model, std::uint64_t seed) {
  if (!ops && !model) throw ConfigError("gradcheck needs --ops and/or --model");
  GradCheckOutcome out;
  if (ops) out.reports = ops_gradcheck_suite(seed);
  if (model) {
    auto m = model_gradcheck_suite(seed);
    out.reports.insert(out.reports.end(), m.begin(), m.end());
  }
  return out;
}

ParamBreakdown cmd_param_count(const ModelConfig& config) { return param_breakdown(config); }

const ExperimentCell* ExperimentTable::find(const std::string& variant, std::size_t factor) const {
  for (const auto& c : cells)
    if (c.variant == variant && c.factor == factor) return &c;
  return nullptr;
}

double ExperimentTable::drop_points(const std::string& variant, std::size_t factor) const {
  const auto* base = find(variant, 1);
  const auto* cell = find(variant, factor);
  if (!base || !cell || !base->ok || !cell->ok) return std::nan("");
  return 100.0 * (base->native.mean - cell->native.mean);
}

std::string ExperimentTable::csv() const {
  std::string out = "factor,variant,status,dice_wt,dice_tc,dice_et,dice_mean,drop_points\n";
  for (const auto& c : cells) {
    out += std::to_string(c.factor) + "," + c.variant + "," + (c.ok ? "ok" : "failed");
    if (c.ok) {
      out += "," + fmt(c.native.dice[0]) + "," + fmt(c.native.dice[1]) + "," + fmt(c.native.dice[2]) + "," +
             fmt(c.native.mean);
      const double d = drop_points(c.variant, c.factor);
      out += "," + (std::isnan(d) ? std::string() : fmt(d));
    } else {
      out += ",,,,,";
    }
    out += "\n";
  }
  return out;
}

Json ExperimentTable::to_json() const {
  Json cells_j = Json::array();
  for (const auto& c : cells) {
    Json j{{"variant", c.variant}, {"factor", c.factor}, {"ok", c.ok}};
    if (c.ok) {
      j["native"] = eval_json(c.native);
      j["best_val_dice"] = c.best_val_dice;
      j["best_epoch"] = c.best_epoch;
      j["params"] = c.params;
      const double d = drop_points(c.variant, c.factor);
      if (!std::isnan(d)) j["drop_points"] = d;
    } else {
      j["error"] = c.error;
    }
    cells_j.push_back(j);
  }
  return Json{{"factors", factors}, {"variants", variants}, {"cells", cells_j}};
}

ExperimentTable cmd_experiment(const RunConfig& run, const LogFn& log) {
  run.validate();
  fs::create_directories(run.out);
  binio::write_file((fs::path(run.out) / "run_config.json").string(), canonical_dump(run.to_json()));
  const Splits data = load_all(run.manifest);
  if (data.train.empty()) throw DataError(run.manifest + ": no training samples");
  if (data.test.empty()) throw DataError(run.manifest + ": no test samples");

  ExperimentTable table;
  table.factors = run.factors;
  table.variants = run.variants;
  for (std::size_t f : run.factors) {
    for (const auto& v : run.variants) {
      ExperimentCell cell;
      cell.variant = v;
      cell.factor = f;
      RunConfig cfg = run;
      cfg.model = ModelConfig::preset(v, run.desk);
      cfg.train.factor = f;
      cfg.apply_seed();
      const std::string dir = (fs::path(run.out) / (v + "_f" + std::to_string(f))).string();
      try {
        fs::create_directories(dir);
        const auto s = train_dispatch(cfg, data, dir, v + " f" + std::to_string(f), log);
        cell.ok = true;
        cell.native = s.test;
        cell.best_val_dice = s.best_val_dice;
        cell.best_epoch = s.best_epoch;
        cell.params = s.params;
        cell.seconds = s.seconds;
        if (log) log("[" + v + " f" + std::to_string(f) + "] test native mean Dice " + fmt(s.test.mean));
      } catch (const std::exception& e) {
        cell.error = e.what();
        if (log) log("[" + v + " f" + std::to_string(f) + "] failed: " + cell.error);
      }
      table.cells.push_back(std::move(cell));
      // Partial tables survive an interrupted run.
      binio::write_file((fs::path(run.out) / "robustness_table.csv").string(), table.csv());
      binio::write_file((fs::path(run.out) / "results.json").string(), canonical_dump(table.to_json()));
    }
  }
  return table;
}

}  // namespace fnoseg
