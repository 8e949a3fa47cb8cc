#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fnoseg/canonical_json.hpp"
#include "fnoseg/ops.hpp"

namespace fnoseg {

enum class Architecture { kFno, kCnn };

struct ModelConfig {
  std::string variant = "fnoseg3d";
  Architecture arch = Architecture::kFno;
  std::size_t in_channels = 4;
  std::size_t out_labels = 4;
  std::size_t width = 12;
  std::size_t n_layers = 32;
  std::array<int, 3> k_max{15, 15, 10};
  bool shared_weights = true;
  bool residual = true;
  bool deep_supervision = true;
  bool learnable_resampling = true;
  /// An auxiliary head follows every ds_tap_stride-th Fourier layer except the last.
  std::size_t ds_tap_stride = 1;
  /// Base width of the CNN baseline; 0 picks the width whose parameter count
  /// is closest to FNOSeg3D built from the same settings.
  std::size_t cnn_width = 0;
  std::uint64_t seed = 0;

  /// "fnoseg3d", "fno_shared", "fno_original" or "baseline_cnn". The desk
  /// flavor uses d = 8, N = 8, k_max = (7, 7, 7) and taps every 2nd layer.
  static ModelConfig preset(std::string_view name, bool desk = false);

  void validate() const;
  /// Fourier layers followed by an auxiliary head (0-based).
  std::vector<std::size_t> aux_taps() const;
  /// Resolved CNN width (auto-sized when cnn_width is 0).
  std::size_t resolved_cnn_width() const;

  Json to_json() const;
  static ModelConfig from_json(const Json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Every learnable tensor of one model, in a fixed creation order.
template <class T>
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelConfig config) : config_(std::move(config)) {}
  // Ops keep pointers to parameters, so the storage must not move them.
  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;
  ModelParams(ModelParams&&) = default;
  ModelParams& operator=(ModelParams&&) = default;

  const ModelConfig& config() const { return config_; }

  Parameter<T>& add(std::string name, std::vector<std::size_t> shape);
  Parameter<T>& at(std::string_view name);
  const Parameter<T>& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>*> pointers();

  std::size_t count() const;
  void zero_grad();
  /// Same shapes and bitwise-equal values.
  bool same_values(const ModelParams& o) const;

 private:
  ModelConfig config_;
  std::deque<Parameter<T>> params_;
};

/// Allocates and initializes every parameter; each tensor draws from its own
/// stream derived from (config.seed, name).
template <class T>
ModelParams<T> build(const ModelConfig& config);

/// FNO-family network is built for FNO configs, the CNN baseline otherwise.
template <class T>
ModelParams<T> build_baseline_cnn(const ModelConfig& config);

struct ForwardVars {
  Var main;
  std::vector<Var> aux;
};

/// Records the network on a tape. Auxiliary heads only run when training and
/// deep supervision is on. Every spatial axis of the input needs >= 4 samples.
template <class T>
ForwardVars forward(Tape<T>& tape, ModelParams<T>& params, Var input, bool training);

template <class T>
struct ForwardOutput {
  Field<T> main;
  std::vector<Field<T>> aux;
};

/// Forward-only convenience wrapper.
template <class T>
ForwardOutput<T> forward(ModelParams<T>& params, const Field<T>& volume, bool training = false);

struct ParamBreakdown {
  std::vector<std::pair<std::string, std::size_t>> blocks;
  std::size_t total = 0;
  Json to_json() const;
};

/// Exact counts from the configuration alone (no allocation).
ParamBreakdown param_breakdown(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config);
template <class T>
std::size_t param_count(const ModelParams<T>& params) {
  return params.count();
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const ModelParams<T>& params, const std::string& path);
/// Tensors stored in another precision are converted on load.
template <class T>
ModelParams<T> load_checkpoint(const std::string& path);

}  // namespace fnoseg
