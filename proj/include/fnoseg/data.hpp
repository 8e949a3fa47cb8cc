#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fnoseg/canonical_json.hpp"
#include "fnoseg/tensor.hpp"

namespace fnoseg {

/// Integer label grid stored as a single-channel Field.
using LabelVolume = Field<std::uint8_t>;

struct VolumeSample {
  Field<float> image;
  LabelVolume labels;
  std::string id;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

/// Evaluation regions as unions of base labels. Label 1 is the outer shell,
/// 2 the middle shell and 3 the innermost core.
struct Region {
  const char* name;
  std::array<bool, 4> member;
};
inline constexpr std::array<Region, 3> kRegions{{
    {"WT", {false, true, true, true}},
    {"TC", {false, false, true, true}},
    {"ET", {false, false, false, true}},
}};

struct SyntheticSpec {
  std::array<std::size_t, 3> grid{64, 64, 64};
  std::size_t samples = 200;
  std::size_t modalities = 4;
  std::size_t labels = 4;
  /// Outer semi-axes as fractions of the grid size.
  std::array<double, 2> outer_radius{0.16, 0.26};
  /// Middle shell relative to outer, core relative to middle.
  std::array<double, 2> middle_scale{0.5, 0.7};
  std::array<double, 2> inner_scale{0.45, 0.65};
  /// Relative amplitude of the smooth boundary deformation.
  double deformation = 0.15;
  /// contrast[m][l]: noise-free intensity of label l in modality m. The core
  /// (label 3) sits within a few percent of background in every modality, so
  /// it is found from its enclosing ring rather than from its own intensity.
  std::vector<std::array<double, 4>> contrast{
      {1.0, 0.8, 0.9, 1.0},
      {1.0, 0.9, 2.0, 1.05},
      {1.0, 1.8, 1.5, 1.0},
      {1.0, 2.0, 1.6, 0.95},
  };
  /// Smooth multiplicative texture on background tissue.
  double texture = 0.1;
  /// Gaussian noise; per modality sigma = noise * (max - min) of its contrast row.
  double noise = 0.3;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  Json to_json() const;
  static SyntheticSpec from_json(const Json& j);
  /// Hex digest of the canonical JSON form.
  std::string hash() const;
};

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::string split; // "train", "val" or "test"
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  SyntheticSpec spec;
  std::string spec_hash;

  Json to_json() const;
  static DatasetManifest from_json(const Json& j);
  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
  std::vector<ManifestEntry> split(const std::string& name) const;
};

/// One synthetic volume, a pure function of (spec, index).
VolumeSample generate_sample(const SyntheticSpec& spec, std::size_t index);

/// Split assignment by a seeded permutation: test first, then the remaining
/// pool is divided into train and val.
std::vector<std::string> assign_splits(const SyntheticSpec& spec);

/// Writes every sample as <out_dir>/<id>.fnv plus manifest.json.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

inline constexpr std::uint32_t kVolumeVersion = 1;
void write_volume(const VolumeSample& sample, const std::string& path);
VolumeSample read_volume(const std::string& path);
std::string encode_volume(const VolumeSample& sample);
VolumeSample decode_volume(const std::string& bytes, const std::string& what = "volume");

/// Loads all samples of a split; paths are resolved against manifest_dir.
std::vector<VolumeSample> load_split(const DatasetManifest& manifest, const std::string& manifest_dir,
                                     const std::string& split);

template <class T>
Field<T> one_hot(const LabelVolume& labels, std::size_t n_labels);

/// Per-voxel argmax over channels; ties go to the lowest label.
template <class T>
LabelVolume argmax_labels(const Field<T>& scores);

/// WT, TC and ET masks (1 inside, 0 outside) in kRegions order.
std::array<LabelVolume, 3> region_masks(const LabelVolume& labels);

}  // namespace fnoseg
