#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fnoseg/data.hpp"
#include "fnoseg/gradcheck.hpp"
#include "fnoseg/model.hpp"
#include "fnoseg/train.hpp"

namespace fnoseg {

enum class Precision { kF32, kF64 };
Precision parse_precision(const std::string& s);
std::string precision_name(Precision p);

/// Everything a training run or experiment needs. Loaded from one JSON file;
/// command-line flags override individual fields afterwards.
struct RunConfig {
  ModelConfig model = ModelConfig::preset("fnoseg3d", true);
  TrainConfig train;
  std::string manifest = "data/manifest.json";
  std::string out = "runs/default";
  std::uint64_t seed = 0;
  Precision precision = Precision::kF32;
  bool desk = true;
  std::vector<std::string> variants{"fnoseg3d", "fno_shared", "fno_original", "baseline_cnn"};
  std::vector<std::size_t> factors{1, 2, 3, 4};

  /// Pushes the top-level seed into the model and training configs.
  void apply_seed();
  void validate() const;
  Json to_json() const;
  static RunConfig from_json(const Json& j);
  static RunConfig load(const std::string& path);
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitGeneric = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;
inline constexpr int kExitGradcheck = 5;

/// Maps an exception to the process exit code.
int exit_code_for(const std::exception& e);

using LogFn = std::function<void(const std::string&)>;

DatasetManifest cmd_synth_gen(const SyntheticSpec& spec, const std::string& out_dir);

struct TrainSummary {
  std::size_t best_epoch = 0;
  double best_val_dice = 0.0;
  std::size_t params = 0;
  EvalResult test;  // native resolution, empty when the split has no test samples
  std::vector<EpochReport> history;
  double seconds = 0.0;  // wall time, never written to disk
  Json to_json() const;
};

/// Trains run.model on the manifest's train split (validation on val) and
/// writes run_config.json, history.csv, model.fnck and results.json to run.out.
TrainSummary cmd_train(const RunConfig& run, const LogFn& log = {});

/// Evaluates a checkpoint on one split after downsampling inputs by factor.
/// Writes eval.csv and eval.json when out_dir is non-empty.
EvalResult cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& split,
                    std::size_t factor, Precision precision, const std::string& out_dir);

struct GradCheckOutcome {
  std::vector<GradCheckReport> reports;
  bool ok() const;
};
GradCheckOutcome cmd_gradcheck(bool ops, bool model, std::uint64_t seed);

ParamBreakdown cmd_param_count(const ModelConfig& config);

struct ExperimentCell {
  std::string variant;
  std::size_t factor = 1;
  bool ok = false;
  std::string error;
  EvalResult native;          // test split at native resolution
  double best_val_dice = 0.0;
  std::size_t best_epoch = 0;
  std::size_t params = 0;
  double seconds = 0.0;       // wall time, never written to disk
};

struct ExperimentTable {
  std::vector<std::size_t> factors;
  std::vector<std::string> variants;
  std::vector<ExperimentCell> cells;  // factor-major

  const ExperimentCell* find(const std::string& variant, std::size_t factor) const;
  /// Native-resolution mean Dice at factor 1 minus that at factor, in Dice points (x100).
  double drop_points(const std::string& variant, std::size_t factor) const;
  std::string csv() const;
  Json to_json() const;
};

/// Every (factor, variant) cell: train on downsampled volumes, evaluate the
/// best checkpoint on the test split at native resolution. A failing cell is
/// recorded and the remaining cells still run.
ExperimentTable cmd_experiment(const RunConfig& run, const LogFn& log = {});

}  // namespace fnoseg
