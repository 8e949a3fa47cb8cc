#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fnoseg/train.hpp"
#include "oracles.hpp"

using namespace fnoseg;

namespace {

Field<double> onehot_random(std::uint64_t seed, std::size_t L, std::size_t n) {
  Rng rng(seed);
  LabelVolume lv(1, n, n, n);
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = static_cast<std::uint8_t>(rng.below(L));
  return one_hot<double>(lv, L);
}

// Direct summation, long double, written from the definition.
double pcc_loss_oracle(const Field<double>& p, const Field<double>& y, double eps) {
  long double acc = 0;
  const std::size_t n = p.voxels();
  for (std::size_t l = 0; l < p.channels(); ++l) {
    long double mp = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mp += p.channel(l)[i];
      my += y.channel(l)[i];
    }
    mp /= n;
    my /= n;
    long double num = 0, dp = 0, dy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long double a = p.channel(l)[i] - mp, b = y.channel(l)[i] - my;
      num += a * b;
      dp += a * a;
      dy += b * b;
    }
    const long double r = num / std::sqrt(dp * dy + eps);
    acc += 0.5L * (r + 1.0L);
  }
  return static_cast<double>(1.0L - acc / p.channels());
}

VolumeSample blob_sample(std::size_t n, std::array<std::size_t, 3> at) {
  VolumeSample s;
  s.image = Field<float>(1, n, n, n);
  s.labels = LabelVolume(1, n, n, n);
  s.image(0, at[0], at[1], at[2]) = 1.0f;
  s.labels(0, at[0], at[1], at[2]) = 3;
  return s;
}

std::array<std::size_t, 3> argmax_voxel(const Field<float>& f) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < f.size(); ++i)
    if (f[i] > f[best]) best = i;
  const std::size_t z = best % f.nz(), y = (best / f.nz()) % f.ny(), x = best / (f.nz() * f.ny());
  return {x, y, z};
}

}  // namespace

TEST_CASE("pcc loss endpoints") {
  const double eps = kPccEps;
  const auto y = onehot_random(1, 4, 8);

  // Perfect prediction: r = S / sqrt(S^2 + eps) per label, so the loss is eps-sized but not 0.
  const auto perfect = pcc_loss_value(y, y);
  double expected = 0;
  for (std::size_t l = 0; l < 4; ++l) {
    double mean = 0, s = 0;
    for (double v : y.channel(l)) mean += v;
    mean /= y.voxels();
    for (double v : y.channel(l)) s += (v - mean) * (v - mean);
    expected += 0.5 * (s / std::sqrt(s * s + eps) + 1.0);
  }
  expected = 1.0 - expected / 4;
  CHECK(std::abs(perfect.loss - expected) < 1e-15);
  CHECK(perfect.loss < 1e-9);
  CHECK(perfect.loss >= 0.0);

  Field<double> inverted(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) inverted[i] = 1.0 - y[i];
  CHECK(std::abs(pcc_loss_value(inverted, y).loss - (1.0 - expected)) < 1e-15);
  CHECK(pcc_loss_value(inverted, y).loss > 1.0 - 1e-9);

  const Field<double> constant(y.shape(), 0.25);
  CHECK(pcc_loss_value(constant, y).loss == 0.5);
  for (double v : pcc_loss_value(constant, y).per_label) CHECK(v == 0.5);
}

TEST_CASE("pcc loss matches direct summation") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto y = onehot_random(100 + seed, 3, 6);
    const auto p = oracle::random_field(200 + seed, y.shape(), 0.0, 1.0);
    CHECK(std::abs(pcc_loss_value(p, y).loss - pcc_loss_oracle(p, y, kPccEps)) < 1e-12);
  }
}

TEST_CASE("pcc gradient against finite differences") {
  const auto y = onehot_random(3, 3, 4);
  auto p = oracle::random_field(4, y.shape(), 0.0, 1.0);
  const auto g = pcc_loss_grad(p, y);
  double worst = 0, scale = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + 1e-6;
    const double up = pcc_loss_value(p, y).loss;
    p[i] = saved - 1e-6;
    const double down = pcc_loss_value(p, y).loss;
    p[i] = saved;
    worst = std::max(worst, std::abs((up - down) / 2e-6 - g[i]));
    scale = std::max(scale, std::abs(g[i]));
  }
  CHECK(worst / scale < 1e-7);
  CHECK_THROWS_AS(pcc_loss_value(p, Field<double>(2, 4, 4, 4)), ShapeError);
}

TEST_CASE("dice and weighted ce losses") {
  const auto y = onehot_random(5, 2, 4);
  CHECK(dice_loss_value(y, y) == doctest::Approx(0.0).epsilon(1e-15));
  const Field<double> half(y.shape(), 0.5);
  // Hand value: per label (2 * 0.5 * c + 1) / (0.5 N + c + 1).
  double acc = 0;
  for (std::size_t l = 0; l < 2; ++l) {
    double c = 0;
    for (double v : y.channel(l)) c += v;
    acc += (c + 1) / (32.0 + c + 1);
  }
  CHECK(dice_loss_value(half, y) == doctest::Approx(1.0 - acc / 2).epsilon(1e-14));
  // Uniform prediction: each label's weighted term is -log(0.5) N / L, so the total is log 2.
  CHECK(weighted_ce_value(half, y) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(parse_loss("dice") == LossKind::kDice);
  CHECK_THROWS_AS(parse_loss("focal"), ConfigError);
}

TEST_CASE("dice metric") {
  LabelVolume a(1, 2, 2, 1), b(1, 2, 2, 1);
  const std::uint8_t la[4] = {1, 2, 3, 0}, lb[4] = {1, 3, 3, 3};
  for (int i = 0; i < 4; ++i) {
    a[i] = la[i];
    b[i] = lb[i];
  }
  const auto d = region_dice(a, b);
  CHECK(d[0] == doctest::Approx(2.0 * 3 / (3 + 4)));
  CHECK(d[1] == doctest::Approx(2.0 * 2 / (2 + 3)));
  CHECK(d[2] == doctest::Approx(2.0 * 1 / (1 + 3)));
  LabelVolume empty(1, 2, 2, 1);
  CHECK(dice_metric(empty, empty, kRegions[2]) == 1.0);
  CHECK(dice_metric(empty, b, kRegions[2]) == 0.0);
}

TEST_CASE("cosine schedule") {
  ScheduleConfig s{1e-2, 1e-3, 50};
  CHECK(cosine_lr(0, s) == 1e-2);
  CHECK(cosine_lr(50, s) == 1e-3);
  CHECK(cosine_lr(25, s) == doctest::Approx(5.5e-3).epsilon(1e-14));
  for (std::size_t e = 1; e <= 50; ++e) CHECK(cosine_lr(e, s) < cosine_lr(e - 1, s));
  CHECK_THROWS_AS(cosine_lr(51, s), ConfigError);
  ScheduleConfig defaults;
  CHECK(cosine_lr(0, defaults) == 1e-2);
  CHECK(cosine_lr(100, defaults) == 1e-3);
}

TEST_CASE("adamax three steps against the hand oracle") {
  Parameter<double> p("w", {2});
  p.value = {1.0, -0.5};
  Adamax<double> opt({&p});
  const double grads[3][2] = {{0.5, -0.2}, {-0.3, -0.4}, {0.2, 0.1}};
  const double lrs[3] = {1e-2, 9e-3, 8e-3};
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double theta[2] = {1.0, -0.5}, m[2] = {0, 0}, u[2] = {0, 0};
  for (int t = 0; t < 3; ++t) {
    p.zero_grad();
    p.grad = {grads[t][0], grads[t][1]};
    p.grad_fresh = true;
    opt.step(lrs[t]);
    for (int i = 0; i < 2; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grads[t][i];
      u[i] = std::max(b2 * u[i], std::abs(grads[t][i]));
      theta[i] -= lrs[t] / (1 - std::pow(b1, t + 1)) * m[i] / (u[i] + eps);
      CHECK(std::abs(p.value[i] - theta[i]) <= 1e-15);
    }
  }
  // Hand-evaluated first step: m = 0.05, u = 0.5, step = 0.01 / 0.1 * 0.05 / (0.5 + 1e-8).
  CHECK(opt.steps() == 3);
  Parameter<double> q("q", {1});
  q.value = {1.0};
  Adamax<double> one({&q});
  q.grad = {0.5};
  q.grad_fresh = true;
  one.step(1e-2);
  CHECK(std::abs(q.value[0] - (1.0 - 0.1 * 0.05 / (0.5 + 1e-8))) <= 1e-15);
  CHECK_THROWS_AS(one.step(1e-2), StateError);
}

TEST_CASE("normalization") {
  const auto img = oracle::random_field(8, {3, 6, 7, 5}, 2.0, 9.0);
  const auto n = normalize_modality(img);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (double v : n.channel(c)) mean += v;
    mean /= n.voxels();
    for (double v : n.channel(c)) var += (v - mean) * (v - mean);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var / n.voxels() - 1.0) < 1e-12);
  }
  const Field<double> flat(1, 4, 4, 4, 3.0);
  const auto zeroed = normalize_modality(flat);
  for (double v : zeroed.values()) CHECK(v == 0.0);
}

TEST_CASE("affine augmentation moves a blob where expected") {
  const auto s = blob_sample(9, {6, 4, 4});
  AffineDraw rot;
  rot.apply = true;
  rot.angle_rad = std::numbers::pi / 2;
  const auto r = apply_affine(s, rot);
  CHECK(argmax_voxel(r.image) == std::array<std::size_t, 3>{4, 6, 4});
  CHECK(r.image(0, 4, 6, 4) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.labels(0, 4, 6, 4) == 3);

  AffineDraw shift;
  shift.apply = true;
  shift.shift = {1.0, 0.0, -2.0};
  const auto t = apply_affine(s, shift);
  CHECK(t.image(0, 7, 4, 2) == 1.0f);
  CHECK(t.labels(0, 7, 4, 2) == 3);

  AffineDraw zoom;
  zoom.apply = true;
  zoom.scale = 2.0;
  const auto z = apply_affine(s, zoom);
  CHECK(z.image(0, 8, 4, 4) == 1.0f);
  CHECK(z.image(0, 7, 4, 4) == 0.5f);  // halfway between the blob and its neighbour
  CHECK(z.labels(0, 8, 4, 4) == 3);

  AffineDraw none;
  const auto same = apply_affine(s, none);
  CHECK(same.image == s.image);
}

TEST_CASE("affine draws are seeded and bounded") {
  AugmentConfig cfg;
  cfg.probability = 1.0;
  Rng a(5), b(5);
  for (int i = 0; i < 50; ++i) {
    const auto d = draw_affine(cfg, a, {64, 64, 64});
    const auto e = draw_affine(cfg, b, {64, 64, 64});
    CHECK(d.angle_rad == e.angle_rad);
    CHECK(d.apply);
    CHECK(std::abs(d.angle_rad) <= 30.0 * std::numbers::pi / 180.0);
    CHECK(d.scale >= 0.8);
    CHECK(d.scale <= 1.2);
    for (double sh : d.shift) CHECK(std::abs(sh) <= 0.2 * 64);
  }
  cfg.probability = 0.0;
  CHECK_FALSE(draw_affine(cfg, a, {8, 8, 8}).apply);
  Json j = AugmentConfig{}.to_json();
  CHECK(AugmentConfig::from_json(j).rotation_deg == 30.0);
  j["scale"] = {1.2, 0.8};
  CHECK_THROWS_AS(AugmentConfig::from_json(j), ConfigError);
}

TEST_CASE("downsampling sizes and values") {
  const Field<float> big(1, 240, 240, 155);
  CHECK(downsample_volume(big, 3).shape() == Shape{1, 80, 80, 52});
  CHECK(downsample_volume(big, 2).shape() == Shape{1, 120, 120, 78});
  CHECK(downsample_volume(big, 4).shape() == Shape{1, 60, 60, 39});
  CHECK(downsample_labels(LabelVolume(1, 240, 240, 155), 3).shape() == Shape{1, 80, 80, 52});

  Field<double> ramp(1, 8, 4, 4);
  for (std::size_t x = 0; x < 8; ++x)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t z = 0; z < 4; ++z) ramp(0, x, y, z) = double(x) + 10.0 * y;
  const auto d = downsample_volume(ramp, 2);
  for (std::size_t x = 0; x < 4; ++x)
    for (std::size_t y = 0; y < 2; ++y) CHECK(d(0, x, y, 0) == doctest::Approx(2.0 * x + 0.5 + 10.0 * (2.0 * y + 0.5)));
  CHECK(downsample_volume(ramp, 1) == ramp);

  LabelVolume lv(1, 8, 8, 8);
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = static_cast<std::uint8_t>((i / 64) % 4);  // label = x % 4
  const auto dl = downsample_labels(lv, 2);
  for (std::size_t x = 0; x < 4; ++x) CHECK(dl(0, x, 0, 0) == (2 * x + 1) % 4);
  CHECK_THROWS_AS(downsample_volume(ramp, 0), ConfigError);
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.factor = 2;
  c.loss = LossKind::kWeightedCe;
  c.seed = 17;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  Json j = c.to_json();
  j["batch_size"] = 4;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
}

namespace {

std::vector<VolumeSample> tiny_samples(std::size_t n, std::size_t first) {
  SyntheticSpec spec;
  spec.grid = {16, 16, 16};
  spec.samples = 8;
  std::vector<VolumeSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(spec, first + i));
  return out;
}

ModelConfig tiny_model() {
  ModelConfig m = ModelConfig::preset("fnoseg3d", true);
  m.width = 4;
  m.n_layers = 3;
  m.k_max = {3, 3, 3};
  m.ds_tap_stride = 1;
  return m;
}

}  // namespace

TEST_CASE("training is bitwise deterministic") {
  const auto train = tiny_samples(3, 0), val = tiny_samples(2, 3);
  TrainConfig cfg;
  cfg.schedule.total_epochs = 3;
  cfg.seed = 4;
  auto a = train_loop<float>(tiny_model(), train, val, cfg);
  auto b = train_loop<float>(tiny_model(), train, val, cfg);
  REQUIRE(a.history.size() == 3);
  CHECK(history_csv(a.history) == history_csv(b.history));
  CHECK(a.best.same_values(b.best));
  CHECK(a.last.same_values(b.last));
  CHECK(a.history[0].lr == 1e-2);
  CHECK(a.history.back().train_loss < a.history.front().train_loss);
  cfg.seed = 5;
  auto c = train_loop<float>(tiny_model(), train, val, cfg);
  CHECK(history_csv(c.history) != history_csv(a.history));
}

TEST_CASE("training rejects bad data") {
  auto train = tiny_samples(1, 0);
  TrainConfig cfg;
  cfg.schedule.total_epochs = 1;
  CHECK_THROWS_AS(train_loop<float>(tiny_model(), {}, {}, cfg), DataError);
  train[0].image[5] = std::nanf("");
  cfg.augment_enabled = false;
  CHECK_THROWS_AS(train_loop<float>(tiny_model(), train, {}, cfg), NumericalError);
}

TEST_CASE("evaluation scores a perfect oracle as 1") {
  const auto samples = tiny_samples(2, 0);
  auto params = build<double>(tiny_model());
  const auto r = evaluate(params, samples, 1);
  CHECK(r.samples.size() == 2);
  for (double d : r.dice) {
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
  const auto same = region_dice(samples[0].labels, samples[0].labels);
  for (double d : same) CHECK(d == 1.0);
}
