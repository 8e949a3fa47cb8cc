#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fnoseg/canonical_json.hpp"
#include "fnoseg/data.hpp"
#include "fnoseg/model.hpp"
#include "fnoseg/rng.hpp"

namespace fnoseg {

inline constexpr double kPccEps = 1e-7;

// ---------------------------------------------------------------------------
// losses and metrics

struct PccResult {
  double loss = 0.0;
  std::vector<double> per_label;  // PCC_l mapped to [0, 1]
};

/// 1 - mean_l 0.5 (r_l + 1) with r_l = S_py / sqrt(S_pp S_yy + eps), all sums
/// over every voxel of label l.
template <class T>
PccResult pcc_loss_value(const Field<T>& pred, const Field<T>& truth, double eps = kPccEps);

/// Gradient of the PCC loss with respect to pred.
template <class T>
Field<T> pcc_loss_grad(const Field<T>& pred, const Field<T>& truth, double eps = kPccEps);

enum class LossKind { kPcc, kDice, kWeightedCe };
LossKind parse_loss(const std::string& name);
std::string loss_name(LossKind kind);

/// Soft Dice loss: 1 - mean_l (2 sum p y + 1) / (sum p + sum y + 1).
template <class T>
double dice_loss_value(const Field<T>& pred, const Field<T>& truth);
/// Cross-entropy with per-label weights N / (L count_l); absent labels weigh 0.
template <class T>
double weighted_ce_value(const Field<T>& pred, const Field<T>& truth);

/// Scalar loss node on the tape.
template <class T>
Var loss_op(Tape<T>& tape, Var pred, const Field<T>& truth, LossKind kind = LossKind::kPcc);

/// 2|A ∩ B| / (|A| + |B|) over the voxels whose label belongs to region; 1 if both are empty.
double dice_metric(const LabelVolume& pred, const LabelVolume& truth, const Region& region);
std::array<double, 3> region_dice(const LabelVolume& pred, const LabelVolume& truth);

// ---------------------------------------------------------------------------
// optimization

struct ScheduleConfig {
  double lr_max = 1e-2;
  double lr_min = 1e-3;
  std::size_t total_epochs = 100;
  void validate() const;
};

/// lr_min + (lr_max - lr_min) (1 + cos(pi epoch / T)) / 2 for 0 <= epoch <= T.
double cosine_lr(std::size_t epoch, const ScheduleConfig& sched);

struct AdamaxConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adamax {
 public:
  Adamax(std::vector<Parameter<T>*> params, AdamaxConfig cfg = {});

  /// Applies one update from the current gradients. Parameters that received
  /// no gradient since their last zero_grad() count as zero gradient; if none
  /// did, the step is rejected.
  void step(double lr);
  std::size_t steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& inf_moment() const { return u_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamaxConfig cfg_;
  std::vector<std::vector<double>> m_, u_;
  std::size_t t_ = 0;
  double beta1_power_ = 1.0;
};

// ---------------------------------------------------------------------------
// preprocessing

/// Per-channel z-score over the whole volume; the std is floored at 1e-8.
template <class T>
Field<T> normalize_modality(const Field<T>& volume);

struct AugmentConfig {
  double rotation_deg = 30.0;
  double shift = 0.2;
  std::array<double, 2> scale{0.8, 1.2};
  double probability = 0.8;
  Json to_json() const;
  static AugmentConfig from_json(const Json& j);
};

/// One drawn transform. The output voxel at p samples the input at
/// c + Rz(-angle) (p - c - shift) / scale, c being the volume center.
struct AffineDraw {
  bool apply = false;
  double angle_rad = 0.0;
  double scale = 1.0;
  std::array<double, 3> shift{0.0, 0.0, 0.0};  // voxels
};

AffineDraw draw_affine(const AugmentConfig& cfg, Rng& rng, const std::array<std::size_t, 3>& grid);
/// Trilinear for the image, nearest for labels, zero outside the volume.
VolumeSample apply_affine(const VolumeSample& sample, const AffineDraw& draw);
VolumeSample augment(const VolumeSample& sample, const AugmentConfig& cfg, Rng& rng);

/// Output size ceil(n / factor) per axis, samples at voxel centers.
template <class T>
Field<T> downsample_volume(const Field<T>& v, std::size_t factor);
LabelVolume downsample_labels(const LabelVolume& v, std::size_t factor);

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  ScheduleConfig schedule{1e-2, 1e-3, 50};
  AugmentConfig augment;
  AdamaxConfig adamax;
  bool augment_enabled = true;
  std::size_t factor = 1;
  LossKind loss = LossKind::kPcc;
  std::uint64_t seed = 0;
  Json to_json() const;
  static TrainConfig from_json(const Json& j);
};

struct EpochReport {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::array<double, 3> val_dice{};
  double val_mean_dice = 0.0;
  std::vector<double> train_pcc;  // mean per-label PCC_l of the main output
  double seconds = 0.0;
};

template <class T>
struct TrainResult {
  ModelParams<T> best;
  ModelParams<T> last;
  std::vector<EpochReport> history;
  std::size_t best_epoch = 0;
  double best_val_dice = -1.0;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Batch size 1, schedule.total_epochs epochs. Validation runs at the training
/// resolution and the epoch with the best mean foreground Dice is kept.
template <class T>
TrainResult<T> train_loop(const ModelConfig& model, const std::vector<VolumeSample>& train,
                          const std::vector<VolumeSample>& val, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});

struct SampleScore {
  std::string id;
  std::array<double, 3> dice{};
  double mean = 0.0;
};

struct EvalResult {
  std::vector<SampleScore> samples;
  std::array<double, 3> dice{};
  double mean = 0.0;
};

/// Segments each sample after downsampling its input by factor (1 = native)
/// and scores against labels at the same resolution.
template <class T>
EvalResult evaluate(ModelParams<T>& params, const std::vector<VolumeSample>& samples, std::size_t factor = 1);

/// Normalized, optionally downsampled network input in precision T.
template <class T>
Field<T> prepare_input(const Field<float>& image, std::size_t factor);

template <class T>
void copy_values(ModelParams<T>& dst, const ModelParams<T>& src);

std::string history_csv(const std::vector<EpochReport>& history);
Json history_json(const std::vector<EpochReport>& history);

}  // namespace fnoseg
