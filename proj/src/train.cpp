#include "fnoseg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

namespace fnoseg {

// ---------------------------------------------------------------------------
// PCC loss

namespace {

struct PccStats {
  double mean_p = 0, mean_y = 0, spy = 0, spp = 0, syy = 0;
};

template <class T>
PccStats pcc_stats(std::span<const T> p, std::span<const T> y) {
  PccStats s;
  const double n = static_cast<double>(p.size());
  double sp = 0, sy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sy += y[i];
  }
  s.mean_p = sp / n;
  s.mean_y = sy / n;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i] - s.mean_p, b = y[i] - s.mean_y;
    s.spy += a * b;
    s.spp += a * a;
    s.syy += b * b;
  }
  return s;
}

template <class T>
void require_loss_shapes(const Field<T>& pred, const Field<T>& truth, const char* what) {
  require_same_shape(pred.shape(), truth.shape(), what);
  if (pred.channels() == 0 || pred.voxels() == 0) throw ShapeError(std::string(what) + ": empty input");
}

}  // namespace

template <class T>
PccResult pcc_loss_value(const Field<T>& pred, const Field<T>& truth, double eps) {
  require_loss_shapes(pred, truth, "pcc_loss");
  PccResult r;
  double acc = 0;
  for (std::size_t l = 0; l < pred.channels(); ++l) {
    const auto s = pcc_stats<T>(pred.channel(l), truth.channel(l));
    const double pcc = 0.5 * (s.spy / std::sqrt(s.spp * s.syy + eps) + 1.0);
    r.per_label.push_back(pcc);
    acc += 1.0 - pcc;
  }
  r.loss = acc / static_cast<double>(pred.channels());
  return r;
}

template <class T>
Field<T> pcc_loss_grad(const Field<T>& pred, const Field<T>& truth, double eps) {
  require_loss_shapes(pred, truth, "pcc_loss");
  Field<T> g(pred.shape());
  const double L = static_cast<double>(pred.channels());
  for (std::size_t l = 0; l < pred.channels(); ++l) {
    const auto p = pred.channel(l);
    const auto y = truth.channel(l);
    const auto s = pcc_stats<T>(p, y);
    const double d = std::sqrt(s.spp * s.syy + eps);
    // d r / d p_i = b_i / D - S_py S_yy a_i / D^3; the centering terms vanish.
    const double cb = -0.5 / L / d;
    const double ca = 0.5 / L * s.spy * s.syy / (d * d * d);
    auto gl = g.channel(l);
    for (std::size_t i = 0; i < p.size(); ++i)
      gl[i] = static_cast<T>(cb * (y[i] - s.mean_y) + ca * (p[i] - s.mean_p));
  }
  return g;
}

LossKind parse_loss(const std::string& name) {
  if (name == "pcc") return LossKind::kPcc;
  if (name == "dice") return LossKind::kDice;
  if (name == "weighted_ce") return LossKind::kWeightedCe;
  throw ConfigError("unknown loss '" + name + "' (expected pcc, dice or weighted_ce)");
}

std::string loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::kPcc: return "pcc";
    case LossKind::kDice: return "dice";
    case LossKind::kWeightedCe: return "weighted_ce";
  }
  return "pcc";
}

template <class T>
double dice_loss_value(const Field<T>& pred, const Field<T>& truth) {
  require_loss_shapes(pred, truth, "dice_loss");
  double acc = 0;
  for (std::size_t l = 0; l < pred.channels(); ++l) {
    const auto p = pred.channel(l);
    const auto y = truth.channel(l);
    double spy = 0, sp = 0, sy = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      spy += double(p[i]) * y[i];
      sp += p[i];
      sy += y[i];
    }
    acc += (2 * spy + 1) / (sp + sy + 1);
  }
  return 1.0 - acc / static_cast<double>(pred.channels());
}

namespace {

template <class T>
Field<T> dice_loss_grad(const Field<T>& pred, const Field<T>& truth) {
  Field<T> g(pred.shape());
  const double L = static_cast<double>(pred.channels());
  for (std::size_t l = 0; l < pred.channels(); ++l) {
    const auto p = pred.channel(l);
    const auto y = truth.channel(l);
    double spy = 0, sp = 0, sy = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      spy += double(p[i]) * y[i];
      sp += p[i];
      sy += y[i];
    }
    const double den = sp + sy + 1, num = 2 * spy + 1;
    auto gl = g.channel(l);
    for (std::size_t i = 0; i < p.size(); ++i) gl[i] = static_cast<T>(-(2.0 * y[i] * den - num) / (den * den) / L);
  }
  return g;
}

template <class T>
std::vector<double> ce_weights(const Field<T>& truth) {
  const double n = static_cast<double>(truth.voxels()), L = static_cast<double>(truth.channels());
  std::vector<double> w(truth.channels(), 0.0);
  for (std::size_t l = 0; l < truth.channels(); ++l) {
    double count = 0;
    for (T v : truth.channel(l)) count += v;
    if (count > 0) w[l] = n / (L * count);
  }
  return w;
}

constexpr double kCeFloor = 1e-12;

template <class T>
Field<T> weighted_ce_grad(const Field<T>& pred, const Field<T>& truth) {
  const auto w = ce_weights(truth);
  const double n = static_cast<double>(pred.voxels());
  Field<T> g(pred.shape());
  for (std::size_t l = 0; l < pred.channels(); ++l) {
    const auto p = pred.channel(l);
    const auto y = truth.channel(l);
    auto gl = g.channel(l);
    for (std::size_t i = 0; i < p.size(); ++i)
      gl[i] = p[i] > kCeFloor ? static_cast<T>(-w[l] * y[i] / (n * p[i])) : T(0);
  }
  return g;
}

}  // namespace

template <class T>
double weighted_ce_value(const Field<T>& pred, const Field<T>& truth) {
  require_loss_shapes(pred, truth, "weighted_ce");
  const auto w = ce_weights(truth);
  double acc = 0;
  for (std::size_t l = 0; l < pred.channels(); ++l) {
    const auto p = pred.channel(l);
    const auto y = truth.channel(l);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (y[i] != T(0)) acc -= w[l] * y[i] * std::log(std::max<double>(p[i], kCeFloor));
  }
  return acc / static_cast<double>(pred.voxels());
}

namespace {

template <class T>
Var loss_node(Tape<T>& tape, Var pred, std::shared_ptr<const Field<T>> truth, LossKind kind) {
  const Field<T>& p = tape.value(pred);
  double value = 0;
  switch (kind) {
    case LossKind::kPcc: value = pcc_loss_value(p, *truth).loss; break;
    case LossKind::kDice: value = dice_loss_value(p, *truth); break;
    case LossKind::kWeightedCe: value = weighted_ce_value(p, *truth); break;
  }
  Field<T> out(1, 1, 1, 1, static_cast<T>(value));
  if (!tape.recording()) return tape.record(std::move(out), nullptr);
  return tape.record(std::move(out), [pred, truth, kind](Tape<T>& t, Var self) {
    if (!t.needs_grad(pred)) return;
    const T seed = t.grad(self)[0];
    const Field<T>& p = t.value(pred);
    Field<T> g = kind == LossKind::kPcc    ? pcc_loss_grad(p, *truth)
                 : kind == LossKind::kDice ? dice_loss_grad(p, *truth)
                                           : weighted_ce_grad(p, *truth);
    axpy(seed, g, t.grad(pred));
  });
}

}  // namespace

template <class T>
Var loss_op(Tape<T>& tape, Var pred, const Field<T>& truth, LossKind kind) {
  return loss_node(tape, pred, std::make_shared<const Field<T>>(truth), kind);
}

double dice_metric(const LabelVolume& pred, const LabelVolume& truth, const Region& region) {
  require_same_shape(pred.shape(), truth.shape(), "dice_metric");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_a = pred[i] < 4 && region.member[pred[i]];
    const bool in_b = truth[i] < 4 && region.member[truth[i]];
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::array<double, 3> region_dice(const LabelVolume& pred, const LabelVolume& truth) {
  return {dice_metric(pred, truth, kRegions[0]), dice_metric(pred, truth, kRegions[1]),
          dice_metric(pred, truth, kRegions[2])};
}

// ---------------------------------------------------------------------------
// schedule and optimizer

void ScheduleConfig::validate() const {
  if (!(lr_max > lr_min && lr_min > 0)) throw ConfigError("schedule needs lr_max > lr_min > 0");
  if (total_epochs < 1) throw ConfigError("schedule needs at least one epoch");
}

double cosine_lr(std::size_t epoch, const ScheduleConfig& sched) {
  sched.validate();
  if (epoch > sched.total_epochs)
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(sched.total_epochs) + "]");
  if (epoch == 0) return sched.lr_max;
  if (epoch == sched.total_epochs) return sched.lr_min;
  const double c = std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(sched.total_epochs));
  return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + c);
}

template <class T>
Adamax<T>::Adamax(std::vector<Parameter<T>*> params, AdamaxConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (auto* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    u_.emplace_back(p->size(), 0.0);
  }
}

template <class T>
void Adamax<T>::step(double lr) {
  const bool any = std::any_of(params_.begin(), params_.end(), [](auto* p) { return p->grad_fresh; });
  if (!any) throw StateError("adamax step without a preceding backward pass");
  ++t_;
  beta1_power_ *= cfg_.beta1;
  const double step = lr / (1.0 - beta1_power_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto* p = params_[k];
    auto& m = m_[k];
    auto& u = u_[k];
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad_fresh ? static_cast<double>(p->grad[i]) : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      u[i] = std::max(cfg_.beta2 * u[i], std::abs(g));
      p->value[i] = static_cast<T>(p->value[i] - step * m[i] / (u[i] + cfg_.eps));
    }
    p->grad_fresh = false;
  }
}

// ---------------------------------------------------------------------------
// preprocessing

template <class T>
Field<T> normalize_modality(const Field<T>& volume) {
  Field<T> out(volume.shape());
  for (std::size_t c = 0; c < volume.channels(); ++c) {
    const auto in = volume.channel(c);
    double mean = 0;
    for (T v : in) mean += v;
    mean /= static_cast<double>(in.size());
    double var = 0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(in.size());
    const double inv = 1.0 / std::max(std::sqrt(var), 1e-8);
    auto o = out.channel(c);
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = static_cast<T>((in[i] - mean) * inv);
  }
  return out;
}

Json AugmentConfig::to_json() const {
  return Json{{"rotation_deg", rotation_deg}, {"shift", shift}, {"scale", scale}, {"probability", probability}};
}

AugmentConfig AugmentConfig::from_json(const Json& j) {
  AugmentConfig a;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "rotation_deg") a.rotation_deg = v.get<double>();
      else if (key == "shift") a.shift = v.get<double>();
      else if (key == "scale") a.scale = v.get<std::array<double, 2>>();
      else if (key == "probability") a.probability = v.get<double>();
      else throw ConfigError("unknown augment key '" + key + "'");
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad augment config: ") + e.what());
  }
  if (a.rotation_deg < 0 || a.shift < 0 || a.scale[0] <= 0 || a.scale[0] > a.scale[1] || a.probability < 0 ||
      a.probability > 1)
    throw ConfigError("augment bounds are inconsistent");
  return a;
}

AffineDraw draw_affine(const AugmentConfig& cfg, Rng& rng, const std::array<std::size_t, 3>& grid) {
  AffineDraw d;
  d.apply = rng.bernoulli(cfg.probability);
  if (!d.apply) return d;
  d.angle_rad = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * std::numbers::pi / 180.0;
  d.scale = rng.uniform(cfg.scale[0], cfg.scale[1]);
  for (std::size_t a = 0; a < 3; ++a) d.shift[a] = rng.uniform(-cfg.shift, cfg.shift) * static_cast<double>(grid[a]);
  return d;
}

VolumeSample apply_affine(const VolumeSample& sample, const AffineDraw& draw) {
  if (!draw.apply) return sample;
  const Field<float>& img = sample.image;
  const std::size_t nx = img.nx(), ny = img.ny(), nz = img.nz(), nc = img.channels();
  const double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0, cz = (nz - 1) / 2.0;
  const double co = std::cos(draw.angle_rad), si = std::sin(draw.angle_rad), inv_s = 1.0 / draw.scale;
  VolumeSample out;
  out.id = sample.id;
  out.spacing = sample.spacing;
  out.image = Field<float>(img.shape());
  out.labels = LabelVolume(sample.labels.shape());
  parallel_for(nx, [&](std::size_t x) {
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z) {
        const double qx = (x - cx - draw.shift[0]) * inv_s, qy = (y - cy - draw.shift[1]) * inv_s;
        const double qz = (z - cz - draw.shift[2]) * inv_s;
        const double sx = cx + co * qx + si * qy, sy = cy - si * qx + co * qy, sz = cz + qz;
        const double fx = std::floor(sx), fy = std::floor(sy), fz = std::floor(sz);
        const double wx = sx - fx, wy = sy - fy, wz = sz - fz;
        const long ix = static_cast<long>(fx), iy = static_cast<long>(fy), iz = static_cast<long>(fz);
        for (std::size_t c = 0; c < nc; ++c) {
          double acc = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const long px = ix + a, py = iy + b, pz = iz + e;
                if (px < 0 || py < 0 || pz < 0 || px >= long(nx) || py >= long(ny) || pz >= long(nz)) continue;
                const double w = (a ? wx : 1 - wx) * (b ? wy : 1 - wy) * (e ? wz : 1 - wz);
                acc += w * img(c, px, py, pz);
              }
          out.image(c, x, y, z) = static_cast<float>(acc);
        }
        const long rx = std::lround(sx), ry = std::lround(sy), rz = std::lround(sz);
        const bool inside = rx >= 0 && ry >= 0 && rz >= 0 && rx < long(nx) && ry < long(ny) && rz < long(nz);
        out.labels(0, x, y, z) = inside ? sample.labels(0, rx, ry, rz) : 0;
      }
  });
  return out;
}

VolumeSample augment(const VolumeSample& sample, const AugmentConfig& cfg, Rng& rng) {
  return apply_affine(sample, draw_affine(cfg, rng, sample.image.shape().spatial()));
}

namespace {

// Voxel-center alignment: output i sits at input coordinate (i + 0.5) n / m - 0.5.
struct Axis {
  std::vector<std::size_t> lo, hi, nearest;
  std::vector<double> w;
  Axis(std::size_t n, std::size_t m) {
    const double r = static_cast<double>(n) / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double p = std::clamp((i + 0.5) * r - 0.5, 0.0, double(n - 1));
      const auto f = static_cast<std::size_t>(std::floor(p));
      lo.push_back(f);
      hi.push_back(std::min(f + 1, n - 1));
      w.push_back(p - f);
      nearest.push_back(std::min(n - 1, static_cast<std::size_t>(std::floor((i + 0.5) * r))));
    }
  }
};

std::size_t ceil_div(std::size_t n, std::size_t f) { return (n + f - 1) / f; }

}  // namespace

template <class T>
Field<T> downsample_volume(const Field<T>& v, std::size_t factor) {
  if (factor < 1) throw ConfigError("downsampling factor must be >= 1");
  if (factor == 1) return v;
  const std::size_t mx = ceil_div(v.nx(), factor), my = ceil_div(v.ny(), factor), mz = ceil_div(v.nz(), factor);
  const Axis ax(v.nx(), mx), ay(v.ny(), my), az(v.nz(), mz);
  Field<T> out(v.channels(), mx, my, mz);
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t x = 0; x < mx; ++x)
      for (std::size_t y = 0; y < my; ++y)
        for (std::size_t z = 0; z < mz; ++z) {
          const std::size_t xs[2] = {ax.lo[x], ax.hi[x]}, ys[2] = {ay.lo[y], ay.hi[y]}, zs[2] = {az.lo[z], az.hi[z]};
          const double wx[2] = {1 - ax.w[x], ax.w[x]}, wy[2] = {1 - ay.w[y], ay.w[y]}, wz[2] = {1 - az.w[z], az.w[z]};
          double acc = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) acc += wx[a] * wy[b] * wz[e] * v(c, xs[a], ys[b], zs[e]);
          out(c, x, y, z) = static_cast<T>(acc);
        }
  return out;
}

LabelVolume downsample_labels(const LabelVolume& v, std::size_t factor) {
  if (factor < 1) throw ConfigError("downsampling factor must be >= 1");
  if (factor == 1) return v;
  const std::size_t mx = ceil_div(v.nx(), factor), my = ceil_div(v.ny(), factor), mz = ceil_div(v.nz(), factor);
  const Axis ax(v.nx(), mx), ay(v.ny(), my), az(v.nz(), mz);
  LabelVolume out(v.channels(), mx, my, mz);
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t x = 0; x < mx; ++x)
      for (std::size_t y = 0; y < my; ++y)
        for (std::size_t z = 0; z < mz; ++z) out(c, x, y, z) = v(c, ax.nearest[x], ay.nearest[y], az.nearest[z]);
  return out;
}

// ---------------------------------------------------------------------------
// training

Json TrainConfig::to_json() const {
  return Json{{"schedule", {{"lr_max", schedule.lr_max}, {"lr_min", schedule.lr_min}, {"epochs", schedule.total_epochs}}},
              {"augment", augment.to_json()},
              {"augment_enabled", augment_enabled},
              {"adamax", {{"beta1", adamax.beta1}, {"beta2", adamax.beta2}, {"eps", adamax.eps}}},
              {"factor", factor},
              {"loss", loss_name(loss)},
              {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "schedule") {
        for (const auto& [k, x] : v.items()) {
          if (k == "lr_max") c.schedule.lr_max = x.get<double>();
          else if (k == "lr_min") c.schedule.lr_min = x.get<double>();
          else if (k == "epochs") c.schedule.total_epochs = x.get<std::size_t>();
          else throw ConfigError("unknown schedule key '" + k + "'");
        }
      } else if (key == "augment") {
        c.augment = AugmentConfig::from_json(v);
      } else if (key == "augment_enabled") {
        c.augment_enabled = v.get<bool>();
      } else if (key == "adamax") {
        for (const auto& [k, x] : v.items()) {
          if (k == "beta1") c.adamax.beta1 = x.get<double>();
          else if (k == "beta2") c.adamax.beta2 = x.get<double>();
          else if (k == "eps") c.adamax.eps = x.get<double>();
          else throw ConfigError("unknown adamax key '" + k + "'");
        }
      } else if (key == "factor") {
        c.factor = v.get<std::size_t>();
      } else if (key == "loss") {
        c.loss = parse_loss(v.get<std::string>());
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else {
        throw ConfigError("unknown training key '" + key + "'");
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
  c.schedule.validate();
  if (c.factor < 1) throw ConfigError("factor must be >= 1");
  return c;
}

template <class T>
Field<T> prepare_input(const Field<float>& image, std::size_t factor) {
  return downsample_volume(normalize_modality(image).template cast<T>(), factor);
}

template <class T>
void copy_values(ModelParams<T>& dst, const ModelParams<T>& src) {
  if (dst.all().size() != src.all().size()) throw StateError("copy_values: parameter lists differ");
  for (std::size_t i = 0; i < src.all().size(); ++i) dst.all()[i].value = src.all()[i].value;
}

template <class T>
TrainResult<T> train_loop(const ModelConfig& model, const std::vector<VolumeSample>& train,
                          const std::vector<VolumeSample>& val, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (train.empty()) throw DataError("training split is empty");
  cfg.schedule.validate();
  if (cfg.factor < 1) throw ConfigError("factor must be >= 1");
  const std::size_t L = model.out_labels;

  TrainResult<T> result{build<T>(model), build<T>(model), {}, 0, -1.0};
  ModelParams<T>& params = result.last;
  Adamax<T> opt(params.pointers(), cfg.adamax);

  // Normalization does not depend on the epoch, so it is done once.
  std::vector<VolumeSample> norm(train.size());
  for (std::size_t k = 0; k < train.size(); ++k) {
    norm[k].image = normalize_modality(train[k].image);
    norm[k].labels = train[k].labels;
    norm[k].id = train[k].id;
  }
  std::vector<Field<T>> val_in;
  std::vector<LabelVolume> val_labels;
  std::vector<std::shared_ptr<const Field<T>>> val_truth;
  for (const auto& s : val) {
    val_in.push_back(prepare_input<T>(s.image, cfg.factor));
    val_labels.push_back(downsample_labels(s.labels, cfg.factor));
    val_truth.push_back(std::make_shared<const Field<T>>(one_hot<T>(val_labels.back(), L)));
  }

  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < cfg.schedule.total_epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochReport rep;
    rep.epoch = e;
    rep.lr = cosine_lr(e, cfg.schedule);
    rep.train_pcc.assign(L, 0.0);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed(cfg.seed, "train", "shuffle", e));
    shuffle.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    for (std::size_t k : order) {
      const VolumeSample* s = &norm[k];
      VolumeSample aug;
      if (cfg.augment_enabled) {
        Rng rng(derive_seed(cfg.seed, "augment", "epoch" + std::to_string(e), k));
        aug = augment(*s, cfg.augment, rng);
        s = &aug;
      }
      Field<T> x = downsample_volume(s->image.template cast<T>(), cfg.factor);
      auto truth = std::make_shared<const Field<T>>(one_hot<T>(downsample_labels(s->labels, cfg.factor), L));

      params.zero_grad();
      Tape<T> tape;
      ForwardVars fv = forward(tape, params, tape.leaf(std::move(x)), true);
      std::vector<Var> losses{loss_node(tape, fv.main, truth, cfg.loss)};
      for (Var a : fv.aux) losses.push_back(loss_node(tape, a, truth, cfg.loss));
      Var total = mean_of<T>(tape, losses);
      const double value = tape.value(total)[0];
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(e) + ", sample " + train[k].id +
                             " (lr " + std::to_string(rep.lr) + ")");
      }
      const auto pcc = pcc_loss_value(tape.value(fv.main), *truth);
      for (std::size_t l = 0; l < L; ++l) rep.train_pcc[l] += pcc.per_label[l];
      tape.backward(total);
      opt.step(rep.lr);
      loss_sum += value;
    }
    rep.train_loss = loss_sum / static_cast<double>(train.size());
    for (auto& p : rep.train_pcc) p /= static_cast<double>(train.size());

    if (!val.empty()) {
      for (std::size_t k = 0; k < val.size(); ++k) {
        Tape<T> tape(false);
        ForwardVars fv = forward(tape, params, tape.leaf(val_in[k]), false);
        const Field<T>& pred = tape.value(fv.main);
        rep.val_loss += pcc_loss_value(pred, *val_truth[k]).loss;
        const auto d = region_dice(argmax_labels(pred), val_labels[k]);
        for (std::size_t r = 0; r < 3; ++r) rep.val_dice[r] += d[r];
      }
      rep.val_loss /= static_cast<double>(val.size());
      for (auto& d : rep.val_dice) d /= static_cast<double>(val.size());
      rep.val_mean_dice = (rep.val_dice[0] + rep.val_dice[1] + rep.val_dice[2]) / 3.0;
    }
    if (val.empty() || rep.val_mean_dice > result.best_val_dice) {
      result.best_val_dice = rep.val_mean_dice;
      result.best_epoch = e;
      copy_values(result.best, params);
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rep);
    if (on_epoch) on_epoch(rep);
  }
  return result;
}

template <class T>
EvalResult evaluate(ModelParams<T>& params, const std::vector<VolumeSample>& samples, std::size_t factor) {
  if (samples.empty()) throw DataError("nothing to evaluate");
  EvalResult r;
  for (const auto& s : samples) {
    const auto out = forward(params, prepare_input<T>(s.image, factor), false);
    SampleScore sc;
    sc.id = s.id;
    sc.dice = region_dice(argmax_labels(out.main), downsample_labels(s.labels, factor));
    sc.mean = (sc.dice[0] + sc.dice[1] + sc.dice[2]) / 3.0;
    for (std::size_t k = 0; k < 3; ++k) r.dice[k] += sc.dice[k];
    r.samples.push_back(sc);
  }
  for (auto& d : r.dice) d /= static_cast<double>(samples.size());
  r.mean = (r.dice[0] + r.dice[1] + r.dice[2]) / 3.0;
  return r;
}

namespace {
std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string history_csv(const std::vector<EpochReport>& history) {
  std::string out = "epoch,lr,train_loss,val_loss,val_dice_wt,val_dice_tc,val_dice_et,val_dice_mean\n";
  for (const auto& h : history) {
    out += std::to_string(h.epoch) + "," + fmt17(h.lr) + "," + fmt17(h.train_loss) + "," + fmt17(h.val_loss);
    for (double d : h.val_dice) out += "," + fmt17(d);
    out += "," + fmt17(h.val_mean_dice) + "\n";
  }
  return out;
}

Json history_json(const std::vector<EpochReport>& history) {
  Json arr = Json::array();
  for (const auto& h : history) {
    arr.push_back(Json{{"epoch", h.epoch},
                       {"lr", h.lr},
                       {"train_loss", h.train_loss},
                       {"val_loss", h.val_loss},
                       {"val_dice", {{"WT", h.val_dice[0]}, {"TC", h.val_dice[1]}, {"ET", h.val_dice[2]}}},
                       {"val_dice_mean", h.val_mean_dice},
                       {"train_pcc", h.train_pcc}});
  }
  return arr;
}

#define FNOSEG_INSTANTIATE(T)                                                                                   \
  template PccResult pcc_loss_value<T>(const Field<T>&, const Field<T>&, double);                               \
  template Field<T> pcc_loss_grad<T>(const Field<T>&, const Field<T>&, double);                                 \
  template double dice_loss_value<T>(const Field<T>&, const Field<T>&);                                         \
  template double weighted_ce_value<T>(const Field<T>&, const Field<T>&);                                       \
  template Var loss_op<T>(Tape<T>&, Var, const Field<T>&, LossKind);                                            \
  template class Adamax<T>;                                                                                     \
  template Field<T> normalize_modality<T>(const Field<T>&);                                                     \
  template Field<T> downsample_volume<T>(const Field<T>&, std::size_t);                                         \
  template Field<T> prepare_input<T>(const Field<float>&, std::size_t);                                         \
  template void copy_values<T>(ModelParams<T>&, const ModelParams<T>&);                                         \
  template TrainResult<T> train_loop<T>(const ModelConfig&, const std::vector<VolumeSample>&,                   \
                                        const std::vector<VolumeSample>&, const TrainConfig&, const EpochCallback&); \
  template EvalResult evaluate<T>(ModelParams<T>&, const std::vector<VolumeSample>&, std::size_t);

FNOSEG_INSTANTIATE(float)
FNOSEG_INSTANTIATE(double)

}  // namespace fnoseg
