#include "fnoseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fnoseg/binio.hpp"
#include "fnoseg/rng.hpp"

namespace fnoseg {

// ---------------------------------------------------------------------------
// configuration

ModelConfig ModelConfig::preset(std::string_view name, bool desk) {
  ModelConfig c;
  c.variant = std::string(name);
  if (desk) {
    c.width = 8;
    c.n_layers = 8;
    c.k_max = {7, 7, 7};
    c.ds_tap_stride = 2;
  }
  if (name == "fnoseg3d") {
    // defaults
  } else if (name == "fno_shared") {
    c.residual = false;
    c.deep_supervision = false;
  } else if (name == "fno_original") {
    c.shared_weights = false;
    c.residual = false;
    c.deep_supervision = false;
  } else if (name == "baseline_cnn") {
    c.arch = Architecture::kCnn;
    c.deep_supervision = false;
    c.residual = false;
  } else {
    throw ConfigError("unknown model variant '" + std::string(name) +
                      "' (expected fnoseg3d, fno_shared, fno_original or baseline_cnn)");
  }
  return c;
}

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (out_labels < 2) throw ConfigError("out_labels must be >= 2");
  if (arch == Architecture::kFno) {
    if (width < 1) throw ConfigError("width must be >= 1");
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    for (int k : k_max)
      if (k < 0) throw ConfigError("k_max components must be >= 0");
    if (deep_supervision && ds_tap_stride < 1) throw ConfigError("ds_tap_stride must be >= 1");
  }
}

std::vector<std::size_t> ModelConfig::aux_taps() const {
  std::vector<std::size_t> taps;
  if (arch != Architecture::kFno || !deep_supervision || ds_tap_stride == 0) return taps;
  for (std::size_t t = ds_tap_stride; t < n_layers; t += ds_tap_stride) taps.push_back(t - 1);
  return taps;
}

namespace {

std::size_t cnn_count(std::size_t c, std::size_t in, std::size_t labels) {
  return (8 * in * c + 3 * c) + (54 * c * c + 6 * c) + (108 * c * c + 6 * c) + (16 * c * c + 3 * c) +
         (27 * c * c + 3 * c) + (8 * c * labels + labels);
}

}  // namespace

std::size_t ModelConfig::resolved_cnn_width() const {
  if (cnn_width > 0) return cnn_width;
  ModelConfig ref = *this;
  ref.arch = Architecture::kFno;
  ref.variant = "fnoseg3d";
  ref.shared_weights = ref.residual = ref.deep_supervision = ref.learnable_resampling = true;
  if (ref.ds_tap_stride == 0) ref.ds_tap_stride = 1;
  const auto target = static_cast<long long>(param_count(ref));
  std::size_t best = 1;
  long long best_gap = -1;
  for (std::size_t c = 1; c <= 256; ++c) {
    const long long gap = std::llabs(static_cast<long long>(cnn_count(c, in_channels, out_labels)) - target);
    if (best_gap < 0 || gap < best_gap) {
      best = c;
      best_gap = gap;
    }
  }
  return best;
}

Json ModelConfig::to_json() const {
  return Json{{"variant", variant},
              {"arch", arch == Architecture::kFno ? "fno" : "cnn"},
              {"in_channels", in_channels},
              {"out_labels", out_labels},
              {"width", width},
              {"n_layers", n_layers},
              {"k_max", k_max},
              {"shared_weights", shared_weights},
              {"residual", residual},
              {"deep_supervision", deep_supervision},
              {"learnable_resampling", learnable_resampling},
              {"ds_tap_stride", ds_tap_stride},
              {"cnn_width", cnn_width},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  if (j.contains("variant")) c = preset(j.at("variant").get<std::string>(), j.value("desk", false));
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "variant" || key == "desk") continue;
      if (key == "arch") {
        const auto a = value.get<std::string>();
        if (a != "fno" && a != "cnn") throw ConfigError("arch must be 'fno' or 'cnn'");
        c.arch = a == "fno" ? Architecture::kFno : Architecture::kCnn;
      } else if (key == "in_channels") {
        c.in_channels = value.get<std::size_t>();
      } else if (key == "out_labels") {
        c.out_labels = value.get<std::size_t>();
      } else if (key == "width") {
        c.width = value.get<std::size_t>();
      } else if (key == "n_layers") {
        c.n_layers = value.get<std::size_t>();
      } else if (key == "k_max") {
        c.k_max = value.get<std::array<int, 3>>();
      } else if (key == "shared_weights") {
        c.shared_weights = value.get<bool>();
      } else if (key == "residual") {
        c.residual = value.get<bool>();
      } else if (key == "deep_supervision") {
        c.deep_supervision = value.get<bool>();
      } else if (key == "learnable_resampling") {
        c.learnable_resampling = value.get<bool>();
      } else if (key == "ds_tap_stride") {
        c.ds_tap_stride = value.get<std::size_t>();
      } else if (key == "cnn_width") {
        c.cnn_width = value.get<std::size_t>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else {
        throw ConfigError("unknown model config key '" + key + "'");
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// parameter store

template <class T>
Parameter<T>& ModelParams<T>::add(std::string name, std::vector<std::size_t> shape) {
  if (contains(name)) throw StateError("duplicate parameter " + name);
  return params_.emplace_back(std::move(name), std::move(shape));
}

template <class T>
Parameter<T>& ModelParams<T>::at(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw StateError("no parameter named " + std::string(name));
}

template <class T>
const Parameter<T>& ModelParams<T>::at(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw StateError("no parameter named " + std::string(name));
}

template <class T>
bool ModelParams<T>::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
}

template <class T>
std::vector<Parameter<T>*> ModelParams<T>::pointers() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <class T>
std::size_t ModelParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <class T>
void ModelParams<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <class T>
bool ModelParams<T>::same_values(const ModelParams& o) const {
  if (params_.size() != o.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = o.params_[i];
    if (a.name != b.name || a.shape != b.shape) return false;
    if (std::memcmp(a.value.data(), b.value.data(), a.size() * sizeof(T)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// construction

namespace {

std::string two_digits(std::size_t i) {
  std::string s = std::to_string(i);
  return s.size() < 2 ? "0" + s : s;
}

// Parameter layout shared by build() and param_breakdown().
struct Slot {
  std::string name;
  std::vector<std::size_t> shape;
  enum class Init { kZero, kOne, kUniformSym, kUniformPos } init = Init::kZero;
  double scale = 0.0;
};

std::size_t product(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (auto v : s) n *= v;
  return n;
}

void add_fno_slots(const ModelConfig& c, std::vector<Slot>& out) {
  using I = Slot::Init;
  const std::size_t d = c.width, L = c.out_labels, in = c.in_channels;
  auto sym = [](std::string n, std::vector<std::size_t> s, double fan_in) {
    return Slot{std::move(n), std::move(s), I::kUniformSym, 1.0 / std::sqrt(fan_in)};
  };
  auto zero = [](std::string n, std::vector<std::size_t> s) { return Slot{std::move(n), std::move(s), I::kZero, 0}; };

  auto head = [&](const std::string& prefix) {
    if (c.learnable_resampling) {
      out.push_back(sym(prefix + ".K", {d, L, 2, 2, 2}, double(d)));
    } else {
      out.push_back(sym(prefix + ".W", {L, d}, double(d)));
    }
    out.push_back(zero(prefix + ".b", {L}));
  };

  if (c.learnable_resampling) {
    out.push_back(sym("lift.K", {d, in, 2, 2, 2}, 8.0 * in));
  } else {
    out.push_back(sym("lift.W", {d, in}, double(in)));
  }
  out.push_back(zero("lift.b", {d}));

  const auto taps = c.aux_taps();
  std::vector<std::size_t> r_shape = {d, d};
  if (!c.shared_weights) {
    ModeMask m{c.k_max};
    r_shape = {std::size_t(2 * m.k_max[0] + 1), std::size_t(2 * m.k_max[1] + 1), std::size_t(2 * m.k_max[2] + 1), d, d};
  }
  for (std::size_t t = 0; t < c.n_layers; ++t) {
    const std::string p = "layer" + two_digits(t);
    out.push_back(Slot{p + ".ln.gamma", {d}, I::kOne, 0});
    out.push_back(zero(p + ".ln.beta", {d}));
    out.push_back(sym(p + ".W", {d, d}, double(d)));
    out.push_back(zero(p + ".b", {d}));
    out.push_back(Slot{p + ".R.re", r_shape, I::kUniformPos, 1.0 / double(d)});
    out.push_back(Slot{p + ".R.im", r_shape, I::kUniformPos, 1.0 / double(d)});
    if (std::find(taps.begin(), taps.end(), t) != taps.end()) head("aux" + two_digits(t));
  }
  head("head");
}

void add_cnn_slots(const ModelConfig& c, std::vector<Slot>& out) {
  using I = Slot::Init;
  const std::size_t w = c.resolved_cnn_width(), in = c.in_channels, L = c.out_labels;
  auto block = [&](const std::string& p, std::vector<std::size_t> k, double fan_in, std::size_t ch, bool norm) {
    out.push_back(Slot{p + ".K", std::move(k), I::kUniformSym, 1.0 / std::sqrt(fan_in)});
    out.push_back(Slot{p + ".b", {ch}, I::kZero, 0});
    if (norm) {
      out.push_back(Slot{p + ".ln.gamma", {ch}, I::kOne, 0});
      out.push_back(Slot{p + ".ln.beta", {ch}, I::kZero, 0});
    }
  };
  block("enc0", {w, in, 2, 2, 2}, 8.0 * in, w, true);
  block("enc1", {2 * w, w, 3, 3, 3}, 27.0 * w, 2 * w, true);
  block("enc2", {2 * w, 2 * w, 3, 3, 3}, 54.0 * w, 2 * w, true);
  block("dec1", {2 * w, w, 2, 2, 2}, 2.0 * w, w, true);
  block("dec0", {w, w, 3, 3, 3}, 27.0 * w, w, true);
  block("head", {w, L, 2, 2, 2}, double(w), L, false);
}

std::vector<Slot> layout(const ModelConfig& c) {
  c.validate();
  std::vector<Slot> slots;
  if (c.arch == Architecture::kFno) {
    add_fno_slots(c, slots);
  } else {
    add_cnn_slots(c, slots);
  }
  return slots;
}

template <class T>
ModelParams<T> build_from_layout(const ModelConfig& config) {
  ModelParams<T> params(config);
  for (const auto& s : layout(config)) {
    auto& p = params.add(s.name, s.shape);
    Rng rng(derive_seed(config.seed, "init", s.name));
    for (auto& v : p.value) {
      switch (s.init) {
        case Slot::Init::kZero: v = T(0); break;
        case Slot::Init::kOne: v = T(1); break;
        case Slot::Init::kUniformSym: v = static_cast<T>(s.scale * rng.uniform(-1.0, 1.0)); break;
        case Slot::Init::kUniformPos: v = static_cast<T>(s.scale * rng.uniform()); break;
      }
    }
  }
  return params;
}

}  // namespace

template <class T>
ModelParams<T> build(const ModelConfig& config) {
  return build_from_layout<T>(config);
}

template <class T>
ModelParams<T> build_baseline_cnn(const ModelConfig& config) {
  ModelConfig c = config;
  c.arch = Architecture::kCnn;
  c.deep_supervision = false;
  if (c.variant != "baseline_cnn") c.variant = "baseline_cnn";
  return build_from_layout<T>(c);
}

ParamBreakdown param_breakdown(const ModelConfig& config) {
  ParamBreakdown b;
  for (const auto& s : layout(config)) {
    const std::string block = s.name.substr(0, s.name.find('.'));
    const std::size_t n = product(s.shape);
    if (b.blocks.empty() || b.blocks.back().first != block) b.blocks.emplace_back(block, 0);
    b.blocks.back().second += n;
    b.total += n;
  }
  return b;
}

std::size_t param_count(const ModelConfig& config) { return param_breakdown(config).total; }

Json ParamBreakdown::to_json() const {
  Json blocks_json = Json::array();
  for (const auto& [name, n] : blocks) blocks_json.push_back(Json{{"block", name}, {"params", n}});
  return Json{{"blocks", blocks_json}, {"total", total}};
}

// ---------------------------------------------------------------------------
// forward

namespace {

template <class T>
Var head_output(Tape<T>& tape, ModelParams<T>& p, const std::string& prefix, Var h,
                const std::array<std::size_t, 3>& target) {
  auto& b = p.at(prefix + ".b");
  Var logits = p.config().learnable_resampling ? tconv3_up(tape, h, p.at(prefix + ".K"), &b, target)
                                               : pointwise_linear(tape, h, p.at(prefix + ".W"), &b);
  return softmax_channels(tape, logits);
}

template <class T>
ForwardVars forward_fno(Tape<T>& tape, ModelParams<T>& p, Var input, bool training) {
  const ModelConfig& c = p.config();
  const auto target = tape.value(input).shape().spatial();
  Var h = c.learnable_resampling ? conv3_down(tape, input, p.at("lift.K"), &p.at("lift.b"))
                                 : pointwise_linear(tape, input, p.at("lift.W"), &p.at("lift.b"));
  const ModeMask mask{c.k_max};
  const auto taps = training && c.deep_supervision ? c.aux_taps() : std::vector<std::size_t>{};
  ForwardVars out;
  for (std::size_t t = 0; t < c.n_layers; ++t) {
    const std::string pre = "layer" + two_digits(t);
    Var z = layer_norm(tape, h, p.at(pre + ".ln.gamma"), p.at(pre + ".ln.beta"));
    Var local = pointwise_linear(tape, z, p.at(pre + ".W"), &p.at(pre + ".b"));
    Var global = c.shared_weights ? spectral_conv_shared(tape, z, p.at(pre + ".R.re"), p.at(pre + ".R.im"), mask)
                                  : spectral_conv_permode(tape, z, p.at(pre + ".R.re"), p.at(pre + ".R.im"), mask);
    Var u = selu(tape, residual_add(tape, local, global));
    h = c.residual ? residual_add(tape, h, u) : u;
    if (std::find(taps.begin(), taps.end(), t) != taps.end())
      out.aux.push_back(head_output(tape, p, "aux" + two_digits(t), h, target));
  }
  out.main = head_output(tape, p, "head", h, target);
  return out;
}

template <class T>
Var cnn_block(Tape<T>& tape, ModelParams<T>& p, const std::string& pre, Var x) {
  return selu(tape, layer_norm(tape, x, p.at(pre + ".ln.gamma"), p.at(pre + ".ln.beta")));
}

template <class T>
ForwardVars forward_cnn(Tape<T>& tape, ModelParams<T>& p, Var input) {
  const auto target = tape.value(input).shape().spatial();
  auto conv = [&](const std::string& pre, Var x, int stride) {
    return conv3x3(tape, x, p.at(pre + ".K"), &p.at(pre + ".b"), stride);
  };
  Var e0 = cnn_block(tape, p, "enc0", conv3_down(tape, input, p.at("enc0.K"), &p.at("enc0.b")));
  const auto mid = tape.value(e0).shape().spatial();
  Var e1 = cnn_block(tape, p, "enc1", conv("enc1", e0, 2));
  Var e2 = cnn_block(tape, p, "enc2", conv("enc2", e1, 1));
  Var up = tconv3_up(tape, e2, p.at("dec1.K"), &p.at("dec1.b"), mid);
  Var d1 = cnn_block(tape, p, "dec1", residual_add(tape, up, e0));
  Var d0 = cnn_block(tape, p, "dec0", conv("dec0", d1, 1));
  ForwardVars out;
  out.main = softmax_channels(tape, tconv3_up(tape, d0, p.at("head.K"), &p.at("head.b"), target));
  return out;
}

}  // namespace

template <class T>
ForwardVars forward(Tape<T>& tape, ModelParams<T>& params, Var input, bool training) {
  const ModelConfig& c = params.config();
  const Field<T>& x = tape.value(input);
  if (x.channels() != c.in_channels) {
    throw ShapeError("forward: volume has " + std::to_string(x.channels()) + " channels, model expects " +
                     std::to_string(c.in_channels));
  }
  if (x.nx() < 4 || x.ny() < 4 || x.nz() < 4) {
    throw ShapeError("forward: every spatial axis needs >= 4 voxels, got " + x.shape().str());
  }
  return c.arch == Architecture::kFno ? forward_fno(tape, params, input, training) : forward_cnn(tape, params, input);
}

template <class T>
ForwardOutput<T> forward(ModelParams<T>& params, const Field<T>& volume, bool training) {
  Tape<T> tape(false);
  ForwardVars vars = forward(tape, params, tape.leaf(volume), training);
  ForwardOutput<T> out;
  out.main = tape.value(vars.main);
  for (Var a : vars.aux) out.aux.push_back(tape.value(a));
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'F', 'N', 'C', 'K'};

template <class T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <class T>
void save_checkpoint(const ModelParams<T>& params, const std::string& path) {
  Json tensors = Json::array();
  std::size_t offset = 0;
  for (const auto& p : params.all()) {
    tensors.push_back(Json{{"name", p.name}, {"dtype", dtype_name<T>()}, {"shape", p.shape}, {"offset", offset}});
    offset += p.size() * sizeof(T);
  }
  const std::string header = Json{{"config", params.config().to_json()}, {"tensors", tensors}}.dump();
  std::string bytes(kCheckpointMagic, 4);
  binio::put(bytes, kCheckpointVersion);
  binio::put(bytes, static_cast<std::uint64_t>(header.size()));
  bytes += header;
  for (const auto& p : params.all()) binio::put(bytes, p.value.data(), p.size());
  binio::write_file(path, bytes);
}

template <class T>
ModelParams<T> load_checkpoint(const std::string& path) {
  const std::string bytes = binio::read_file(path);
  binio::Reader r(bytes, path);
  if (r.get_string(4) != std::string(kCheckpointMagic, 4)) {
    throw FormatError(FormatError::Reason::kCorruptHeader, path + ": not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Reason::kVersionMismatch,
                      path + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto header_len = r.get<std::uint64_t>();
  if (header_len > r.remaining()) throw FormatError(FormatError::Reason::kTruncated, path + ": header cut short");
  Json header;
  try {
    header = Json::parse(r.get_string(header_len));
  } catch (const Json::exception& e) {
    throw FormatError(FormatError::Reason::kCorruptHeader, path + ": unreadable header: " + e.what());
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_json(header.at("config"));
  } catch (const Json::exception& e) {
    throw FormatError(FormatError::Reason::kCorruptHeader, path + ": header has no usable config");
  }
  ModelParams<T> params = build<T>(config);
  const std::size_t payload = r.position();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.all().size()) {
    throw FormatError(FormatError::Reason::kCorruptHeader, path + ": tensor list does not match the config");
  }
  for (const auto& t : tensors) {
    auto& p = params.at(t.at("name").get<std::string>());
    if (t.at("shape").get<std::vector<std::size_t>>() != p.shape) {
      throw FormatError(FormatError::Reason::kCorruptHeader, path + ": shape mismatch for " + p.name);
    }
    const auto dtype = t.at("dtype").get<std::string>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw FormatError(FormatError::Reason::kCorruptHeader, path + ": unknown dtype " + dtype);
    if (offset > bytes.size() - payload || p.size() * width > bytes.size() - payload - offset) {
      throw FormatError(FormatError::Reason::kTruncated, path + ": payload too short for " + p.name);
    }
    const std::string chunk = bytes.substr(payload + offset, p.size() * width);
    binio::Reader cr(chunk, path);
    if (width == sizeof(T)) {
      cr.get(p.value.data(), p.size());
    } else if (width == 4) {
      std::vector<float> tmp(p.size());
      cr.get(tmp.data(), tmp.size());
      std::transform(tmp.begin(), tmp.end(), p.value.begin(), [](float v) { return static_cast<T>(v); });
    } else {
      std::vector<double> tmp(p.size());
      cr.get(tmp.data(), tmp.size());
      std::transform(tmp.begin(), tmp.end(), p.value.begin(), [](double v) { return static_cast<T>(v); });
    }
  }
  return params;
}

#define FNOSEG_INSTANTIATE(T)                                                              \
  template class ModelParams<T>;                                                           \
  template ModelParams<T> build<T>(const ModelConfig&);                                    \
  template ModelParams<T> build_baseline_cnn<T>(const ModelConfig&);                       \
  template ForwardVars forward<T>(Tape<T>&, ModelParams<T>&, Var, bool);                   \
  template ForwardOutput<T> forward<T>(ModelParams<T>&, const Field<T>&, bool);            \
  template void save_checkpoint<T>(const ModelParams<T>&, const std::string&);             \
  template ModelParams<T> load_checkpoint<T>(const std::string&);

FNOSEG_INSTANTIATE(float)
FNOSEG_INSTANTIATE(double)

}  // namespace fnoseg
