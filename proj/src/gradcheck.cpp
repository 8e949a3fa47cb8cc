#include "fnoseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fnoseg/rng.hpp"

namespace fnoseg {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.rel_error);
  return w;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

template <class T>
GradCheckReport grad_check(const std::string& op, const LossBuilder<T>& build, std::vector<Field<T>> inputs,
                           const std::vector<Parameter<T>*>& params, double tolerance, double h) {
  GradCheckReport report{op, tolerance, {}};

  auto evaluate = [&]() -> double {
    Tape<T> tape(false);
    std::vector<Var> leaves;
    for (const auto& f : inputs) leaves.push_back(tape.leaf(f));
    return static_cast<double>(tape.value(build(tape, leaves))[0]);
  };

  for (auto* p : params) p->zero_grad();
  Tape<T> tape(true);
  std::vector<Var> leaves;
  for (const auto& f : inputs) leaves.push_back(tape.leaf(f, true));
  Var loss = build(tape, leaves);
  tape.backward(loss);

  auto finite_difference = [&](T& slot) {
    const T saved = slot;
    slot = saved + static_cast<T>(h);
    const double up = evaluate();
    slot = saved - static_cast<T>(h);
    const double down = evaluate();
    slot = saved;
    return (up - down) / (2.0 * h);
  };

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(inputs[k].size(), 0.0), numeric(inputs[k].size());
    if (tape.has_grad(leaves[k])) {
      const auto& g = tape.grad(leaves[k]);
      for (std::size_t i = 0; i < g.size(); ++i) analytic[i] = g[i];
    }
    for (std::size_t i = 0; i < inputs[k].size(); ++i) numeric[i] = finite_difference(inputs[k][i]);
    report.entries.push_back({"input" + std::to_string(k), relative_error(analytic, numeric), analytic.size()});
  }
  for (auto* p : params) {
    std::vector<double> analytic(p->grad.begin(), p->grad.end()), numeric(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) numeric[i] = finite_difference(p->value[i]);
    report.entries.push_back({p->name, relative_error(analytic, numeric), analytic.size()});
  }
  return report;
}

namespace {

Field<double> random_field(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Field<double> f(s);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng.uniform(lo, hi);
  return f;
}

Parameter<double> random_param(Rng& rng, const std::string& name, std::vector<std::size_t> shape, double scale = 1.0) {
  Parameter<double> p(name, std::move(shape));
  for (auto& x : p.value) x = scale * rng.uniform(-1.0, 1.0);
  return p;
}

}  // namespace

std::vector<GradCheckReport> ops_gradcheck_suite(std::uint64_t seed, double tolerance) {
  std::vector<GradCheckReport> out;
  Rng rng(derive_seed(seed, "gradcheck", "ops"));
  using F = Field<double>;
  using P = Parameter<double>;
  using B = LossBuilder<double>;

  // Loss = Σ w ⊙ op(...) with a fixed random w, so every output entry matters.
  auto probe = [&](const Shape& s) { return random_field(rng, s); };

  {
    P w = random_param(rng, "W", {3, 2}), b = random_param(rng, "b", {3});
    F wout = probe({3, 5, 6, 4});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, pointwise_linear(t, in[0], w, &b), wout);
    };
    out.push_back(grad_check<double>("pointwise_linear", build, {random_field(rng, {2, 5, 6, 4})}, {&w, &b}, tolerance));
  }
  {
    P re = random_param(rng, "R.re", {2, 2}), im = random_param(rng, "R.im", {2, 2});
    F wout = probe({2, 6, 6, 6});
    ModeMask mask{{2, 2, 2}};
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, spectral_conv_shared(t, in[0], re, im, mask), wout);
    };
    out.push_back(grad_check<double>("spectral_conv_shared", build, {random_field(rng, {2, 6, 6, 6})}, {&re, &im}, tolerance));
  }
  {
    P re = random_param(rng, "R.re", {3, 2}), im = random_param(rng, "R.im", {3, 2});
    F wout = probe({3, 5, 6, 5});
    ModeMask mask{{3, 3, 3}};
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, spectral_conv_shared(t, in[0], re, im, mask), wout);
    };
    out.push_back(grad_check<double>("spectral_conv_shared[odd,full]", build, {random_field(rng, {2, 5, 6, 5})},
                                     {&re, &im}, tolerance));
  }
  {
    ModeMask mask{{2, 1, 2}};
    P re = random_param(rng, "R.re", {5, 3, 5, 2, 2}), im = random_param(rng, "R.im", {5, 3, 5, 2, 2});
    F wout = probe({2, 6, 5, 6});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, spectral_conv_permode(t, in[0], re, im, mask), wout);
    };
    out.push_back(grad_check<double>("spectral_conv_permode", build, {random_field(rng, {2, 6, 5, 6})}, {&re, &im}, tolerance));
  }
  {
    ModeMask mask{{3, 3, 3}};
    P re = random_param(rng, "R.re", {7, 7, 7, 1, 2}), im = random_param(rng, "R.im", {7, 7, 7, 1, 2});
    F wout = probe({1, 4, 5, 4});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, spectral_conv_permode(t, in[0], re, im, mask), wout);
    };
    out.push_back(grad_check<double>("spectral_conv_permode[full]", build, {random_field(rng, {2, 4, 5, 4})},
                                     {&re, &im}, tolerance));
  }
  {
    P k = random_param(rng, "K", {3, 2, 2, 2, 2}), b = random_param(rng, "b", {3});
    F wout = probe({3, 3, 3, 3});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, conv3_down(t, in[0], k, &b), wout);
    };
    out.push_back(grad_check<double>("conv3_down", build, {random_field(rng, {2, 5, 6, 5})}, {&k, &b}, tolerance));
  }
  {
    P k = random_param(rng, "K", {2, 3, 2, 2, 2}), b = random_param(rng, "b", {3});
    F wout = probe({3, 5, 6, 5});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, tconv3_up(t, in[0], k, &b, {5, 6, 5}), wout);
    };
    out.push_back(grad_check<double>("tconv3_up", build, {random_field(rng, {2, 3, 3, 3})}, {&k, &b}, tolerance));
  }
  for (int stride : {1, 2}) {
    P k = random_param(rng, "K", {2, 2, 3, 3, 3}, 0.5), b = random_param(rng, "b", {2});
    const std::size_t m = stride == 1 ? 0 : 1;
    F wout = probe({2, m ? 3u : 5u, m ? 3u : 6u, m ? 3u : 5u});
    B build = [&, stride](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, conv3x3(t, in[0], k, &b, stride), wout);
    };
    out.push_back(grad_check<double>("conv3x3[stride " + std::to_string(stride) + "]", build,
                                     {random_field(rng, {2, 5, 6, 5})}, {&k, &b}, tolerance));
  }
  {
    P g = random_param(rng, "gamma", {2}), b = random_param(rng, "beta", {2});
    F wout = probe({2, 4, 5, 6});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, layer_norm(t, in[0], g, b), wout);
    };
    out.push_back(grad_check<double>("layer_norm", build, {random_field(rng, {2, 4, 5, 6}, -2.0, 3.0)}, {&g, &b}, tolerance));
  }
  {
    F wout = probe({2, 4, 4, 4});
    B build = [&](Tape<double>& t, std::span<const Var> in) { return weighted_sum(t, selu(t, in[0]), wout); };
    out.push_back(grad_check<double>("selu", build, {random_field(rng, {2, 4, 4, 4}, -3.0, 3.0)}, {}, tolerance));
  }
  {
    F wout = probe({3, 4, 4, 4});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, softmax_channels(t, in[0]), wout);
    };
    out.push_back(grad_check<double>("softmax_channels", build, {random_field(rng, {3, 4, 4, 4}, -3.0, 3.0)}, {}, tolerance));
  }
  {
    F wout = probe({2, 3, 4, 5});
    B build = [&](Tape<double>& t, std::span<const Var> in) {
      return weighted_sum(t, residual_add(t, in[0], in[1]), wout);
    };
    out.push_back(grad_check<double>("residual_add", build,
                                     {random_field(rng, {2, 3, 4, 5}), random_field(rng, {2, 3, 4, 5})}, {}, tolerance));
  }
  return out;
}

template GradCheckReport grad_check(const std::string&, const LossBuilder<float>&, std::vector<Field<float>>,
                                    const std::vector<Parameter<float>*>&, double, double);
template GradCheckReport grad_check(const std::string&, const LossBuilder<double>&, std::vector<Field<double>>,
                                    const std::vector<Parameter<double>*>&, double, double);

}  // namespace fnoseg
