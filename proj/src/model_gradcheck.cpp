#include <memory>

#include "fnoseg/gradcheck.hpp"
#include "fnoseg/rng.hpp"
#include "fnoseg/train.hpp"

namespace fnoseg {

namespace {

Field<double> random_labels_onehot(Rng& rng, std::size_t labels, std::size_t n) {
  LabelVolume lv(1, n, n, n);
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = static_cast<std::uint8_t>(rng.below(labels));
  return one_hot<double>(lv, labels);
}

Field<double> random_input(Rng& rng, Shape s) {
  Field<double> f(s);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng.normal();
  return f;
}

}  // namespace

std::vector<GradCheckReport> model_gradcheck_suite(std::uint64_t seed, double op_tolerance, double model_tolerance) {
  std::vector<GradCheckReport> out;
  Rng rng(derive_seed(seed, "gradcheck", "model"));

  // Losses sit on a softmax so their inputs look like real predictions.
  for (LossKind kind : {LossKind::kPcc, LossKind::kDice, LossKind::kWeightedCe}) {
    const Field<double> truth = random_labels_onehot(rng, 3, 4);
    LossBuilder<double> build = [&](Tape<double>& t, std::span<const Var> in) {
      return loss_op(t, softmax_channels(t, in[0]), truth, kind);
    };
    out.push_back(grad_check<double>("loss_" + loss_name(kind), build, {random_input(rng, {3, 4, 4, 4})}, {},
                                     op_tolerance));
  }

  struct Case {
    const char* name;
    ModelConfig cfg;
  };
  std::vector<Case> cases;
  for (const char* v : {"fnoseg3d", "fno_shared", "fno_original", "baseline_cnn"}) {
    ModelConfig c = ModelConfig::preset(v);
    c.width = 2;
    c.n_layers = 2;
    c.k_max = {1, 1, 1};
    c.cnn_width = 2;
    c.seed = derive_seed(seed, "gradcheck", v);
    cases.push_back({v, c});
  }
  for (auto& [name, cfg] : cases) {
    auto params = build<double>(cfg);
    const Field<double> truth = random_labels_onehot(rng, cfg.out_labels, 6);
    LossBuilder<double> loss = [&](Tape<double>& t, std::span<const Var> in) {
      ForwardVars fv = forward(t, params, in[0], true);
      std::vector<Var> terms{loss_op(t, fv.main, truth, LossKind::kPcc)};
      for (Var a : fv.aux) terms.push_back(loss_op(t, a, truth, LossKind::kPcc));
      return mean_of<double>(t, terms);
    };
    out.push_back(grad_check<double>(std::string("model_") + name, loss, {random_input(rng, {cfg.in_channels, 6, 6, 6})},
                                     params.pointers(), model_tolerance));
  }
  return out;
}

}  // namespace fnoseg
