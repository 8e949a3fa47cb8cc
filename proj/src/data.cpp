#include "fnoseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "fnoseg/binio.hpp"
#include "fnoseg/rng.hpp"

namespace fnoseg {

// ---------------------------------------------------------------------------
// spec

void SyntheticSpec::validate() const {
  for (auto n : grid)
    if (n < 4) throw ConfigError("synthetic grid axes must be >= 4");
  if (samples < 1) throw ConfigError("need at least one sample");
  if (modalities < 1 || contrast.size() != modalities) throw ConfigError("contrast needs one row per modality");
  if (labels != 4) throw ConfigError("the generator produces exactly 4 labels");
  auto range_ok = [](const std::array<double, 2>& r, double hi) { return r[0] > 0 && r[0] <= r[1] && r[1] <= hi; };
  if (!range_ok(outer_radius, 0.5) || !range_ok(middle_scale, 1.0) || !range_ok(inner_scale, 1.0))
    throw ConfigError("radius ranges must satisfy 0 < lo <= hi (outer <= 0.5, scales <= 1)");
  if (deformation < 0 || deformation >= 1) throw ConfigError("deformation must be in [0, 1)");
  if (texture < 0 || noise < 0) throw ConfigError("texture and noise must be non-negative");
  if (test_fraction <= 0 || test_fraction >= 1 || val_fraction <= 0 || val_fraction >= 1)
    throw ConfigError("split fractions must be in (0, 1)");
}

Json SyntheticSpec::to_json() const {
  return Json{{"grid", grid},
              {"samples", samples},
              {"modalities", modalities},
              {"labels", labels},
              {"outer_radius", outer_radius},
              {"middle_scale", middle_scale},
              {"inner_scale", inner_scale},
              {"deformation", deformation},
              {"contrast", contrast},
              {"texture", texture},
              {"noise", noise},
              {"test_fraction", test_fraction},
              {"val_fraction", val_fraction},
              {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  SyntheticSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "grid") s.grid = v.get<std::array<std::size_t, 3>>();
      else if (key == "samples") s.samples = v.get<std::size_t>();
      else if (key == "modalities") s.modalities = v.get<std::size_t>();
      else if (key == "labels") s.labels = v.get<std::size_t>();
      else if (key == "outer_radius") s.outer_radius = v.get<std::array<double, 2>>();
      else if (key == "middle_scale") s.middle_scale = v.get<std::array<double, 2>>();
      else if (key == "inner_scale") s.inner_scale = v.get<std::array<double, 2>>();
      else if (key == "deformation") s.deformation = v.get<double>();
      else if (key == "contrast") s.contrast = v.get<std::vector<std::array<double, 4>>>();
      else if (key == "texture") s.texture = v.get<double>();
      else if (key == "noise") s.noise = v.get<double>();
      else if (key == "test_fraction") s.test_fraction = v.get<double>();
      else if (key == "val_fraction") s.val_fraction = v.get<double>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown synthetic spec key '" + key + "'");
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad synthetic spec: ") + e.what());
  }
  if (!j.contains("modalities")) s.modalities = s.contrast.size();
  s.validate();
  return s;
}

std::string SyntheticSpec::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_dump(to_json()))));
  return buf;
}

// ---------------------------------------------------------------------------
// generation

namespace {

// Smooth random perturbation: a few low-frequency plane waves.
struct Wobble {
  std::array<std::array<double, 3>, 3> freq{};
  std::array<double, 3> phase{}, amp{};

  Wobble(Rng& rng, double amplitude) {
    for (std::size_t j = 0; j < 3; ++j) {
      for (auto& f : freq[j]) f = rng.uniform(-2.0, 2.0);
      phase[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      amp[j] = amplitude * rng.uniform(0.3, 1.0) / 3.0;
    }
  }
  double operator()(double u, double v, double w) const {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j)
      s += amp[j] * std::sin(2.0 * std::numbers::pi * (freq[j][0] * u + freq[j][1] * v + freq[j][2] * w) + phase[j]);
    return s;
  }
};

struct Ellipsoid {
  std::array<double, 3> center{}, radius{};
  Wobble wobble;

  // Inside iff the normalized radius is below 1 + wobble at that point.
  bool contains(double x, double y, double z, const std::array<std::size_t, 3>& grid) const {
    const double dx = (x - center[0]) / radius[0], dy = (y - center[1]) / radius[1], dz = (z - center[2]) / radius[2];
    const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
    return r < 1.0 + wobble(x / grid[0], y / grid[1], z / grid[2]);
  }
};

}  // namespace

VolumeSample generate_sample(const SyntheticSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "synth", "sample", index));
  const auto [nx, ny, nz] = spec.grid;
  const std::array<double, 3> n{double(nx), double(ny), double(nz)};

  std::array<Ellipsoid, 3> shells{Ellipsoid{{}, {}, Wobble(rng, spec.deformation)},
                                  Ellipsoid{{}, {}, Wobble(rng, spec.deformation)},
                                  Ellipsoid{{}, {}, Wobble(rng, spec.deformation)}};
  for (std::size_t a = 0; a < 3; ++a) {
    shells[0].radius[a] = n[a] * rng.uniform(spec.outer_radius[0], spec.outer_radius[1]);
    shells[0].center[a] = n[a] * rng.uniform(0.35, 0.65);
  }
  const double mid = rng.uniform(spec.middle_scale[0], spec.middle_scale[1]);
  const double core = rng.uniform(spec.inner_scale[0], spec.inner_scale[1]);
  for (std::size_t a = 0; a < 3; ++a) {
    shells[1].radius[a] = shells[0].radius[a] * mid;
    shells[2].radius[a] = shells[1].radius[a] * core;
    // Inner shells drift off-center by at most a quarter of the free margin.
    shells[1].center[a] = shells[0].center[a] + 0.25 * rng.uniform(-1, 1) * (shells[0].radius[a] - shells[1].radius[a]);
    shells[2].center[a] = shells[1].center[a] + 0.25 * rng.uniform(-1, 1) * (shells[1].radius[a] - shells[2].radius[a]);
  }
  const Wobble texture(rng, spec.texture * 3.0);

  VolumeSample s;
  s.id = "case" + std::string(index < 10 ? "00" : index < 100 ? "0" : "") + std::to_string(index);
  s.labels = LabelVolume(1, nx, ny, nz);
  s.image = Field<float>(spec.modalities, nx, ny, nz);
  std::vector<double> sigma(spec.modalities);
  for (std::size_t m = 0; m < spec.modalities; ++m) {
    const auto& row = spec.contrast[m];
    sigma[m] = spec.noise * (*std::max_element(row.begin(), row.end()) - *std::min_element(row.begin(), row.end()));
  }
  Rng noise(derive_seed(spec.seed, "synth", "noise", index));
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z) {
        const double px = x + 0.5, py = y + 0.5, pz = z + 0.5;
        // Nesting by construction: each inner shell only counts inside the outer ones.
        std::uint8_t label = 0;
        if (shells[0].contains(px, py, pz, spec.grid)) {
          label = 1;
          if (shells[1].contains(px, py, pz, spec.grid)) {
            label = 2;
            if (shells[2].contains(px, py, pz, spec.grid)) label = 3;
          }
        }
        s.labels(0, x, y, z) = label;
        const double tex = label == 0 ? 1.0 + texture(px / nx, py / ny, pz / nz) : 1.0;
        for (std::size_t m = 0; m < spec.modalities; ++m) {
          double v = spec.contrast[m][label] * tex;
          if (sigma[m] > 0) v += sigma[m] * noise.normal();
          s.image(m, x, y, z) = static_cast<float>(v);
        }
      }
  return s;
}

std::vector<std::string> assign_splits(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.samples;
  const auto n_test = std::size_t(std::lround(n * spec.test_fraction));
  const auto n_val = std::size_t(std::lround((n - n_test) * spec.val_fraction));
  if (n_test == 0 || n_val == 0 || n_test + n_val >= n)
    throw ConfigError("sample count and split fractions leave an empty split");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(spec.seed, "synth", "split"));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::string> split(n, "train");
  for (std::size_t k = 0; k < n_test; ++k) split[order[k]] = "test";
  for (std::size_t k = n_test; k < n_test + n_val; ++k) split[order[k]] = "val";
  return split;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  spec.validate();
  DatasetManifest manifest;
  manifest.spec = spec;
  manifest.spec_hash = spec.hash();
  const auto splits = assign_splits(spec);
  std::filesystem::create_directories(out_dir);
  std::vector<ManifestEntry> entries(spec.samples);
  parallel_for(spec.samples, [&](std::size_t i) {
    VolumeSample s = generate_sample(spec, i);
    entries[i] = {s.id, s.id + ".fnv", splits[i]};
    write_volume(s, (std::filesystem::path(out_dir) / entries[i].path).string());
  });
  manifest.entries = std::move(entries);
  manifest.save((std::filesystem::path(out_dir) / "manifest.json").string());
  return manifest;
}

// ---------------------------------------------------------------------------
// manifest

Json DatasetManifest::to_json() const {
  Json list = Json::array();
  for (const auto& e : entries) list.push_back(Json{{"id", e.id}, {"path", e.path}, {"split", e.split}});
  return Json{{"samples", list}, {"spec", spec.to_json()}, {"spec_hash", spec_hash}};
}

DatasetManifest DatasetManifest::from_json(const Json& j) {
  DatasetManifest m;
  try {
    m.spec = SyntheticSpec::from_json(j.at("spec"));
    m.spec_hash = j.at("spec_hash").get<std::string>();
    for (const auto& e : j.at("samples"))
      m.entries.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>(),
                           e.at("split").get<std::string>()});
  } catch (const Json::exception& e) {
    throw DataError(std::string("bad manifest: ") + e.what());
  }
  if (m.spec_hash != m.spec.hash()) throw DataError("manifest spec hash does not match its spec");
  return m;
}

void DatasetManifest::save(const std::string& path) const { binio::write_file(path, canonical_dump(to_json())); }

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::string text;
  try {
    text = binio::read_file(path);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return from_json(j);
}

std::vector<ManifestEntry> DatasetManifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == name) out.push_back(e);
  return out;
}

std::vector<VolumeSample> load_split(const DatasetManifest& manifest, const std::string& manifest_dir,
                                     const std::string& split) {
  const auto entries = manifest.split(split);
  if (entries.empty()) throw DataError("split '" + split + "' is empty");
  std::vector<VolumeSample> out(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i)
    out[i] = read_volume((std::filesystem::path(manifest_dir) / entries[i].path).string());
  return out;
}

// ---------------------------------------------------------------------------
// volume format

namespace {
constexpr char kVolumeMagic[4] = {'F', 'N', 'V', '1'};
}

std::string encode_volume(const VolumeSample& s) {
  if (!s.image.shape().same_spatial(s.labels.shape()) || s.labels.channels() != 1)
    throw ShapeError("volume image and labels must share a spatial shape");
  Json names = Json::array();
  for (std::size_t c = 0; c < s.image.channels(); ++c) names.push_back("m" + std::to_string(c));
  const Json header{{"id", s.id},
                    {"shape", {s.image.channels(), s.image.nx(), s.image.ny(), s.image.nz()}},
                    {"image_dtype", "f32"},
                    {"label_dtype", "u8"},
                    {"channel_names", names},
                    {"label_alphabet", {0, 1, 2, 3}},
                    {"spacing", s.spacing}};
  const std::string text = header.dump();
  std::string bytes(kVolumeMagic, 4);
  binio::put(bytes, kVolumeVersion);
  binio::put(bytes, static_cast<std::uint64_t>(text.size()));
  bytes += text;
  binio::put(bytes, s.image.data(), s.image.size());
  binio::put(bytes, s.labels.data(), s.labels.size());
  return bytes;
}

VolumeSample decode_volume(const std::string& bytes, const std::string& what) {
  using R = FormatError::Reason;
  binio::Reader r(bytes, what);
  if (r.get_string(4) != std::string(kVolumeMagic, 4)) throw FormatError(R::kCorruptHeader, what + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVolumeVersion)
    throw FormatError(R::kVersionMismatch, what + ": volume format version " + std::to_string(version) +
                                               ", expected " + std::to_string(kVolumeVersion));
  const auto len = r.get<std::uint64_t>();
  if (len > r.remaining()) throw FormatError(R::kTruncated, what + ": header cut short");
  VolumeSample s;
  std::array<std::size_t, 4> shape{};
  try {
    const Json h = Json::parse(r.get_string(len));
    s.id = h.at("id").get<std::string>();
    shape = h.at("shape").get<std::array<std::size_t, 4>>();
    s.spacing = h.at("spacing").get<std::array<double, 3>>();
    if (h.at("image_dtype") != "f32" || h.at("label_dtype") != "u8")
      throw FormatError(R::kCorruptHeader, what + ": unsupported dtypes");
  } catch (const Json::exception& e) {
    throw FormatError(R::kCorruptHeader, what + ": unreadable header: " + e.what());
  }
  const Shape sh{shape[0], shape[1], shape[2], shape[3]};
  s.image = Field<float>(sh);
  s.labels = LabelVolume(1, sh.nx, sh.ny, sh.nz);
  r.get(s.image.data(), s.image.size());
  r.get(s.labels.data(), s.labels.size());
  if (r.remaining() != 0) throw FormatError(R::kCorruptHeader, what + ": trailing bytes after payload");
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    if (s.labels[i] > 3) throw FormatError(R::kCorruptHeader, what + ": label outside the alphabet");
  return s;
}

void write_volume(const VolumeSample& sample, const std::string& path) {
  binio::write_file(path, encode_volume(sample));
}

VolumeSample read_volume(const std::string& path) { return decode_volume(binio::read_file(path), path); }

// ---------------------------------------------------------------------------
// labels

template <class T>
Field<T> one_hot(const LabelVolume& labels, std::size_t n_labels) {
  Field<T> out(n_labels, labels.nx(), labels.ny(), labels.nz());
  const std::size_t nv = labels.voxels();
  for (std::size_t v = 0; v < nv; ++v) {
    const std::size_t l = labels[v];
    if (l >= n_labels)
      throw DataError("label " + std::to_string(l) + " outside alphabet of size " + std::to_string(n_labels));
    out[l * nv + v] = T(1);
  }
  return out;
}

template <class T>
LabelVolume argmax_labels(const Field<T>& scores) {
  LabelVolume out(1, scores.nx(), scores.ny(), scores.nz());
  const std::size_t nv = scores.voxels();
  for (std::size_t v = 0; v < nv; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.channels(); ++c)
      if (scores[c * nv + v] > scores[best * nv + v]) best = c;
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::array<LabelVolume, 3> region_masks(const LabelVolume& labels) {
  std::array<LabelVolume, 3> masks;
  for (std::size_t r = 0; r < 3; ++r) {
    masks[r] = LabelVolume(labels.shape());
    for (std::size_t i = 0; i < labels.size(); ++i)
      masks[r][i] = labels[i] < 4 && kRegions[r].member[labels[i]] ? 1 : 0;
  }
  return masks;
}

template Field<float> one_hot<float>(const LabelVolume&, std::size_t);
template Field<double> one_hot<double>(const LabelVolume&, std::size_t);
template LabelVolume argmax_labels<float>(const Field<float>&);
template LabelVolume argmax_labels<double>(const Field<double>&);

}  // namespace fnoseg
