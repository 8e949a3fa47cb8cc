// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--only 1,2,...] [--work DIR] [--threads N]
// Criteria 7 and 8 train the desk-scale models and take on the order of two hours.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fnoseg/binio.hpp"
#include "fnoseg/cli.hpp"
#include "fnoseg/fft.hpp"
#include "fnoseg/gradcheck.hpp"
#include "fnoseg/ops.hpp"
#include "oracles.hpp"

using namespace fnoseg;
namespace fs = std::filesystem;
using oracle::cd;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f(const char* fmt, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto ops = ops_gradcheck_suite(2024, 1e-5);
  const auto model = model_gradcheck_suite(2024, 1e-5, 1e-4);
  const double secs = seconds_since(t0);
  double worst_op = 0, worst_model = 0;
  std::size_t n_op = 0, n_model = 0;
  std::string failed;
  for (const auto* suite : {&ops, &model})
    for (const auto& r : *suite) {
      const bool end_to_end = r.op.starts_with("model_");
      double& worst = end_to_end ? worst_model : worst_op;
      worst = std::max(worst, r.worst());
      ++(end_to_end ? n_model : n_op);
      if (!r.ok()) failed += " " + r.op;
    }
  const bool ok = failed.empty() && secs <= 120.0;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "%zu op checks worst %.2e (tol 1e-5), %zu tiny models worst %.2e (tol 1e-4), %.1fs (limit 120s)", n_op,
                worst_op, n_model, worst_model, secs);
  return {ok, buf + (failed.empty() ? std::string() : "; failed:" + failed)};
}

double half_weight(std::size_t kz, std::size_t nz) { return (kz == 0 || 2 * kz == nz) ? 1.0 : 2.0; }

Outcome fft_invariants() {
  const auto t0 = Clock::now();
  const std::vector<std::array<std::size_t, 3>> shapes{{5, 6, 7},   {15, 15, 10}, {8, 8, 8},   {7, 9, 11},
                                                       {16, 12, 10}, {3, 4, 5},    {32, 32, 32}, {13, 2, 9},
                                                       {20, 18, 6}, {64, 64, 64}};
  double worst_rt = 0, worst_parseval = 0;
  for (std::size_t k = 0; k < 100; ++k) {
    const auto& s = shapes[k % shapes.size()];
    const auto x = oracle::random_field(derive_seed(7, "acceptance", "fft", k), {2, s[0], s[1], s[2]});
    const auto X = fft3(x);
    const auto back = ifft3(X, s[2]);
    double diff = 0, norm = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      diff += (back[i] - x[i]) * (back[i] - x[i]);
      norm += x[i] * x[i];
    }
    worst_rt = std::max(worst_rt, std::sqrt(diff / norm));
    // sum |x|^2 = N sum_full |X|^2 with the 1/N forward scaling.
    double spec = 0;
    for (std::size_t c = 0; c < X.channels(); ++c)
      for (std::size_t a = 0; a < X.nx(); ++a)
        for (std::size_t b = 0; b < X.ny(); ++b)
          for (std::size_t z = 0; z < X.nz_half(); ++z) spec += half_weight(z, s[2]) * std::norm(X(c, a, b, z));
    spec *= double(x.voxels());
    worst_parseval = std::max(worst_parseval, std::abs(spec - norm) / norm);
  }
  const double secs = seconds_since(t0);
  return {worst_rt <= 1e-10 && worst_parseval <= 1e-10 && secs <= 10.0,
          f("100 fields, round trip worst %.2e, Parseval worst %.2e (tol 1e-10), %.2fs (limit 10s)", worst_rt,
            worst_parseval, secs)};
}

Field<double> run_op(const std::function<Var(Tape<double>&, Var)>& op, const Field<double>& in) {
  Tape<double> t(false);
  return t.value(op(t, t.leaf(in)));
}

Parameter<double> rand_param(std::uint64_t seed, const std::string& name, std::vector<std::size_t> shape) {
  Parameter<double> p(name, std::move(shape));
  Rng rng(seed);
  for (auto& v : p.value) v = rng.uniform(-1, 1);
  return p;
}

Outcome spectral_oracles() {
  const auto t0 = Clock::now();
  const std::size_t n = 4, d = 3, nv = n * n * n;
  double worst_conv = 0, worst_shared_modes = 0, worst_permode = 0;
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    const auto in = oracle::random_field(derive_seed(trial, "acceptance", "spectral-in"), {d, n, n, n});
    auto re = rand_param(derive_seed(trial, "acceptance", "re"), "re", {d, d});
    auto im = rand_param(derive_seed(trial, "acceptance", "im"), "im", {d, d});

    // Shared layer, every mode kept: brute-force circular convolution.
    std::vector<double> kernel(d * d * nv);
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t i = 0; i < d; ++i) {
        const cd r(re.value[o * d + i], im.value[o * d + i]);
        std::vector<cd> e(nv);
        for (std::size_t k = 0; k < nv; ++k) {
          const std::size_t kz = k % n;
          const long fz = oracle::signed_freq(kz, n);
          e[k] = (fz == 0 || 2 * kz == n) ? cd(r.real()) : (fz > 0 ? r : std::conj(r));
        }
        const auto ker = oracle::idft_real(e, n, n, n);
        for (std::size_t k = 0; k < nv; ++k) kernel[(o * d + i) * nv + k] = ker[k] / nv;
      }
    Field<double> conv(d, n, n, n);
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t x = 0; x < n; ++x)
        for (std::size_t y = 0; y < n; ++y)
          for (std::size_t z = 0; z < n; ++z) {
            double acc = 0;
            for (std::size_t i = 0; i < d; ++i)
              for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t c = 0; c < n; ++c)
                    acc += kernel[(o * d + i) * nv + (((x + n - a) % n) * n + (y + n - b) % n) * n + (z + n - c) % n] *
                           in(i, a, b, c);
            conv(o, x, y, z) = acc;
          }
    const auto full = run_op([&](Tape<double>& t, Var v) { return spectral_conv_shared(t, v, re, im, ModeMask{{2, 2, 2}}); }, in);
    worst_conv = std::max(worst_conv, oracle::max_abs_diff(conv, full));

    // Truncated masks: mode-by-mode on the brute-force full spectrum.
    std::vector<std::vector<cd>> X(d);
    for (std::size_t i = 0; i < d; ++i) X[i] = oracle::dft(in, i);
    const long kx = 1, ky = 1, kz = 1;
    auto pre = rand_param(derive_seed(trial, "acceptance", "pre"), "pre", {3, 3, 3, d, d});
    auto pim = rand_param(derive_seed(trial, "acceptance", "pim"), "pim", {3, 3, 3, d, d});
    Field<double> want_shared(d, n, n, n), want_permode(d, n, n, n);
    for (std::size_t o = 0; o < d; ++o) {
      std::vector<cd> ys(nv, 0.0), yp(nv, 0.0);
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t c = 0; c < n; ++c) {
            const long fx = oracle::signed_freq(a, n), fy = oracle::signed_freq(b, n), fz = oracle::signed_freq(c, n);
            if (std::abs(fx) > kx || std::abs(fy) > ky || std::abs(fz) > kz) continue;
            const std::size_t k = (a * n + b) * n + c;
            const std::size_t mode = ((fx + kx) * 3 + (fy + ky)) * 3 + (fz + kz);
            for (std::size_t i = 0; i < d; ++i) {
              const cd r(re.value[o * d + i], im.value[o * d + i]);
              const cd w = fz == 0 ? cd(r.real()) : (fz > 0 ? r : std::conj(r));
              ys[k] += w * X[i][k];
              const std::size_t e = (mode * d + o) * d + i;
              yp[k] += cd(pre.value[e], pim.value[e]) * X[i][k];
            }
          }
      const auto rs = oracle::idft_real(ys, n, n, n), rp = oracle::idft_real(yp, n, n, n);
      for (std::size_t v = 0; v < nv; ++v) {
        want_shared.channel(o)[v] = rs[v];
        want_permode.channel(o)[v] = rp[v];
      }
    }
    const ModeMask mask{{1, 1, 1}};
    const auto got_s = run_op([&](Tape<double>& t, Var v) { return spectral_conv_shared(t, v, re, im, mask); }, in);
    const auto got_p = run_op([&](Tape<double>& t, Var v) { return spectral_conv_permode(t, v, pre, pim, mask); }, in);
    worst_shared_modes = std::max(worst_shared_modes, oracle::max_abs_diff(want_shared, got_s));
    worst_permode = std::max(worst_permode, oracle::max_abs_diff(want_permode, got_p));
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_conv <= 1e-9 && worst_shared_modes <= 1e-9 && worst_permode <= 1e-9 && secs <= 10.0;
  return {ok, f("4^3 grids: shared vs circular convolution %.2e, shared vs modes %.2e, per-mode vs modes %.2e "
                "(tol 1e-9), %.2fs",
                worst_conv, worst_shared_modes, worst_permode, secs)};
}

Field<double> onehot_random(std::uint64_t seed, std::size_t L, std::size_t n) {
  Rng rng(seed);
  LabelVolume lv(1, n, n, n);
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = static_cast<std::uint8_t>(rng.below(L));
  return one_hot<double>(lv, L);
}

// Direct summation of the loss definition, long double.
double pcc_direct(const Field<double>& p, const Field<double>& y, double eps) {
  long double acc = 0;
  const std::size_t n = p.voxels();
  for (std::size_t l = 0; l < p.channels(); ++l) {
    long double mp = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) mp += p.channel(l)[i], my += y.channel(l)[i];
    mp /= n;
    my /= n;
    long double s_py = 0, s_pp = 0, s_yy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long double a = p.channel(l)[i] - mp, b = y.channel(l)[i] - my;
      s_py += a * b;
      s_pp += a * a;
      s_yy += b * b;
    }
    acc += 0.5L * (s_py / std::sqrt(s_pp * s_yy + eps) + 1.0L);
  }
  return static_cast<double>(1.0L - acc / p.channels());
}

Outcome pcc_endpoints() {
  const double eps = 1e-7;
  const auto y = onehot_random(31, 4, 8);
  Field<double> inverted(y.shape()), constant(y.shape(), 0.3);
  for (std::size_t i = 0; i < y.size(); ++i) inverted[i] = 1.0 - y[i];
  const double perfect = pcc_loss_value(y, y, eps).loss;
  const double inv = pcc_loss_value(inverted, y, eps).loss;
  const double cst = pcc_loss_value(constant, y, eps).loss;
  const double perfect_ref = pcc_direct(y, y, eps), inv_ref = pcc_direct(inverted, y, eps);
  double worst = 0;
  for (std::uint64_t k = 0; k < 50; ++k) {
    const auto t = onehot_random(derive_seed(3, "acceptance", "pcc-y", k), 3, 6);
    const auto p = oracle::random_field(derive_seed(3, "acceptance", "pcc-p", k), t.shape(), 0.0, 1.0);
    worst = std::max(worst, std::abs(pcc_loss_value(p, t, eps).loss - pcc_direct(p, t, eps)));
  }
  // eps sits inside the square root, so the perfect/inverted endpoints are
  // off by O(eps / S^2); both are compared to the definition and to 0 / 1.
  const bool ok = std::abs(perfect - perfect_ref) <= 1e-12 && std::abs(inv - inv_ref) <= 1e-12 && perfect <= 1e-9 &&
                  std::abs(inv - 1.0) <= 1e-9 && cst == 0.5 && worst <= 1e-12;
  return {ok, f("perfect %.3e, inverted 1-%.3e, constant %.17g, 50 random vs direct sum worst %.2e (tol 1e-12)",
                perfect, 1.0 - inv, cst, worst)};
}

Outcome param_counts(const fs::path& work) {
  const auto seg = ModelConfig::preset("fnoseg3d"), shared = ModelConfig::preset("fno_shared"),
             orig = ModelConfig::preset("fno_original");
  const std::size_t n_seg = param_count(seg), n_shared = param_count(shared), n_orig = param_count(orig);
  const double ref_seg = 29.8e3, ref_shared = 17.2e3, ref_orig = 165.9e6;
  const double g_seg = n_seg / ref_seg - 1.0, g_shared = n_shared / ref_shared - 1.0, g_orig = n_orig / ref_orig - 1.0;
  Json report;
  auto entry = [](const ModelConfig& c, std::size_t n, double ref, double gap) {
    return Json{{"config", c.to_json()}, {"count", n}, {"reported", ref}, {"relative_gap", gap},
                {"breakdown", param_breakdown(c).to_json()}};
  };
  report["fnoseg3d"] = entry(seg, n_seg, ref_seg, g_seg);
  report["fno_shared"] = entry(shared, n_shared, ref_shared, g_shared);
  report["fno_original"] = entry(orig, n_orig, ref_orig, g_orig);
  for (const char* v : {"fnoseg3d", "fno_shared", "fno_original", "baseline_cnn"})
    report["desk"][v] = param_count(ModelConfig::preset(v, true));
  const auto path = (work / "param_count_report.json").string();
  binio::write_file(path, canonical_dump(report));
  const bool ok = std::abs(g_seg) <= 0.15 && std::abs(g_shared) <= 0.15 && n_orig >= 100'000'000;
  return {ok, f("fnoseg3d %.0f (%+.1f%% vs 29.8k), fno_shared %.0f (%+.1f%% vs 17.2k), ", double(n_seg), 100 * g_seg,
                double(n_shared), 100 * g_shared) +
                  f("fno_original %.0f (>= 1e8, %+.1f%% vs 165.9M); report ", double(n_orig), 100 * g_orig) + path};
}

Outcome schedule_optimizer() {
  const ScheduleConfig s{1e-2, 1e-3, 50};
  const bool ends = cosine_lr(0, s) == 1e-2 && cosine_lr(50, s) == 1e-3 &&
                    cosine_lr(0, ScheduleConfig{}) == 1e-2 && cosine_lr(100, ScheduleConfig{}) == 1e-3;
  Parameter<double> p("theta", {1});
  p.value = {0.7};
  Adamax<double> opt({&p});
  const double g[3] = {0.3, -0.8, 0.05};
  double theta = 0.7, m = 0, u = 0, worst = 0;
  for (int t = 1; t <= 3; ++t) {
    const double lr = cosine_lr(t - 1, s);
    p.zero_grad();
    p.grad = {g[t - 1]};
    p.grad_fresh = true;
    opt.step(lr);
    m = 0.9 * m + 0.1 * g[t - 1];
    u = std::max(0.999 * u, std::abs(g[t - 1]));
    theta -= lr / (1.0 - std::pow(0.9, t)) * m / (u + 1e-8);
    worst = std::max(worst, std::abs(p.value[0] - theta));
  }
  return {ends && worst <= 1e-15,
          f("cosine_lr(0)=%.17g cosine_lr(T)=%.17g, Adamax 3-step worst deviation %.2e (tol 1e-15)", cosine_lr(0, s),
            cosine_lr(50, s), worst)};
}

Outcome zero_shot() {
  const double tau = 2 * std::numbers::pi;
  auto sample = [&](std::size_t n) {
    Field<double> fld(3, n, n, n);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t z = 0; z < n; ++z) {
          const double u = double(x) / n, v = double(y) / n, w = double(z) / n;
          fld(0, x, y, z) = std::cos(tau * (2 * u - w)) + 0.3 * std::sin(tau * (u + 4 * v + 2 * w));
          fld(1, x, y, z) = 0.5 + std::sin(tau * (3 * w) + 0.2) * std::cos(tau * v);
          fld(2, x, y, z) = std::cos(tau * (5 * u + 5 * v + 5 * w) + 1.1);
        }
    return fld;
  };
  auto re = rand_param(91, "re", {3, 3}), im = rand_param(92, "im", {3, 3});
  const ModeMask mask{{6, 6, 6}};
  auto op = [&](Tape<double>& t, Var v) { return spectral_conv_shared(t, v, re, im, mask); };
  const auto a = run_op(op, sample(16)), b = run_op(op, sample(32));
  double worst = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t x = 0; x < 16; ++x)
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t z = 0; z < 16; ++z) worst = std::max(worst, std::abs(a(c, x, y, z) - b(c, 2 * x, 2 * y, 2 * z)));
  return {worst <= 1e-8, f("shared layer on 16^3 vs 32^3 samples, worst difference %.2e (tol 1e-8)", worst)};
}

Outcome determinism_io(const fs::path& work) {
  SyntheticSpec spec;
  spec.grid = {16, 16, 16};
  spec.samples = 10;
  spec.seed = 77;
  const auto data = (work / "det_data").string();
  cmd_synth_gen(spec, data);
  bool same_data = true;
  {
    const auto again = (work / "det_data2").string();
    cmd_synth_gen(spec, again);
    for (const auto& e : fs::directory_iterator(data))
      same_data = same_data && binio::read_file(e.path().string()) ==
                                   binio::read_file((fs::path(again) / e.path().filename()).string());
  }
  RunConfig run;
  run.manifest = (fs::path(data) / "manifest.json").string();
  run.model.width = 4;
  run.model.n_layers = 4;
  run.model.k_max = {3, 3, 3};
  run.train.schedule.total_epochs = 3;
  run.seed = 5;
  run.apply_seed();
  run.out = (work / "det_a").string();
  cmd_train(run);
  run.out = (work / "det_b").string();
  cmd_train(run);
  bool same_run = true;
  for (const char* name : {"history.csv", "results.json", "model.fnck"})
    same_run = same_run && binio::read_file((work / "det_a" / name).string()) ==
                               binio::read_file((work / "det_b" / name).string());

  const auto ck = (work / "det_a" / "model.fnck").string();
  auto loaded = load_checkpoint<float>(ck);
  save_checkpoint(loaded, (work / "det_a" / "resaved.fnck").string());
  const bool ck_ok = binio::read_file(ck) == binio::read_file((work / "det_a" / "resaved.fnck").string());
  auto as_double = load_checkpoint<double>(ck);
  bool widen_ok = true;
  for (std::size_t k = 0; k < loaded.all().size(); ++k)
    for (std::size_t i = 0; i < loaded.all()[k].size(); ++i)
      widen_ok = widen_ok && as_double.all()[k].value[i] == double(loaded.all()[k].value[i]);

  const auto s = generate_sample(SyntheticSpec{}, 3);
  const auto bytes = encode_volume(s);
  const auto back = decode_volume(bytes);
  const bool vol_ok = back.image == s.image && back.labels == s.labels && encode_volume(back) == bytes;

  const bool ok = same_data && same_run && ck_ok && widen_ok && vol_ok;
  std::string d = std::string("datasets ") + (same_data ? "identical" : "DIFFER") + ", training outputs " +
                  (same_run ? "identical" : "DIFFER") + ", checkpoint " + (ck_ok && widen_ok ? "bit-exact" : "MISMATCH") +
                  ", volume " + (vol_ok ? "bit-exact" : "MISMATCH");
  return {ok, d};
}

// Criteria 7 and 8 share one experiment run.
struct DeskRun {
  bool done = false;
  ExperimentTable table;
  std::string error;
};

DeskRun run_desk_experiment(const fs::path& work) {
  DeskRun r;
  try {
    SyntheticSpec spec;  // frozen defaults
    const auto data = (work / "desk_data").string();
    if (!fs::exists(fs::path(data) / "manifest.json") ||
        DatasetManifest::load((fs::path(data) / "manifest.json").string()).spec_hash != spec.hash())
      cmd_synth_gen(spec, data);
    RunConfig run;
    run.manifest = (fs::path(data) / "manifest.json").string();
    run.out = (work / "desk_run").string();
    run.variants = {"fnoseg3d", "fno_shared", "baseline_cnn"};
    run.factors = {1, 2};
    run.train.schedule.total_epochs = 50;
    run.seed = 0;
    run.apply_seed();
    r.table = cmd_experiment(run, [](const std::string& s) {
      std::fprintf(stderr, "%s\n", s.c_str());
      std::fflush(stderr);
    });
    r.done = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

Outcome desk_learnability(const DeskRun& run) {
  if (!run.done) return {false, "experiment did not run: " + run.error};
  const auto* c = run.table.find("fnoseg3d", 1);
  if (!c || !c->ok) return {false, "fnoseg3d factor-1 cell failed: " + (c ? c->error : std::string("missing"))};
  const bool ok = c->native.mean >= 0.80 && c->seconds <= 3600.0;
  return {ok, f("fnoseg3d native test Dice WT %.4f TC %.4f ET %.4f mean %.4f", c->native.dice[0], c->native.dice[1],
                c->native.dice[2], c->native.mean) +
                  f(" (>= 0.80), training %.1f min (limit 60)", c->seconds / 60.0)};
}

Outcome resolution_trend(const DeskRun& run) {
  if (!run.done) return {false, "experiment did not run: " + run.error};
  const double seg = run.table.drop_points("fnoseg3d", 2), shared = run.table.drop_points("fno_shared", 2),
               cnn = run.table.drop_points("baseline_cnn", 2);
  const bool ok = seg <= 10.0 && seg < cnn && shared < cnn;  // NaN (failed cell) compares false
  return {ok, f("Dice drop f1->f2 in points: fnoseg3d %.2f (<= 10), fno_shared %.2f, baseline_cnn %.2f", seg, shared, cnn)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only, work = "acceptance_work";
  int threads = 0;
  app.add_option("--only", only, "comma-separated criteria to run (default: all)");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--threads", threads, "worker threads");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) set_num_threads(threads);

  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) selected.insert(std::stoi(item));
  auto want = [&](int k) { return selected.empty() || selected.count(k) > 0; };
  fs::create_directories(work);
  const fs::path wd(work);

  const std::map<int, std::string> names{{1, "gradient suite"},          {2, "FFT invariants"},
                                         {3, "spectral-conv oracles"},    {4, "PCC loss endpoints"},
                                         {5, "parameter counts"},         {6, "schedule and optimizer"},
                                         {7, "desk-scale learnability"},  {8, "resolution-robustness trend"},
                                         {9, "zero-shot super-resolution"}, {10, "determinism and I/O"}};
  DeskRun desk;
  if (want(7) || want(8)) desk = run_desk_experiment(wd);

  int failures = 0;
  std::vector<std::string> lines;
  for (const auto& [k, name] : names) {
    if (!want(k)) continue;
    Outcome o;
    try {
      switch (k) {
        case 1: o = gradient_suite(); break;
        case 2: o = fft_invariants(); break;
        case 3: o = spectral_oracles(); break;
        case 4: o = pcc_endpoints(); break;
        case 5: o = param_counts(wd); break;
        case 6: o = schedule_optimizer(); break;
        case 7: o = desk_learnability(desk); break;
        case 8: o = resolution_trend(desk); break;
        case 9: o = zero_shot(); break;
        case 10: o = determinism_io(wd); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    char buf[64];
    std::snprintf(buf, sizeof buf, "[%s] %2d %s: ", o.pass ? "PASS" : "FAIL", k, name.c_str());
    lines.push_back(buf + o.detail);
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
  }
  std::string summary;
  for (const auto& l : lines) summary += l + "\n";
  binio::write_file((wd / "acceptance_summary.txt").string(), summary);
  return failures == 0 ? 0 : 1;
}
