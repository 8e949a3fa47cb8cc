#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fnoseg/ops.hpp"

namespace fnoseg {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  std::size_t coords = 0;
};

struct GradCheckReport {
  std::string op;
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  double worst() const;
  bool ok() const { return worst() <= tolerance; }
};

/// Builds a scalar loss from leaf variables holding the inputs. The builder is
/// called on recording and forward-only tapes alike.
template <class T>
using LossBuilder = std::function<Var(Tape<T>&, std::span<const Var>)>;

/// Central finite differences over every coordinate of every input and
/// parameter, compared norm-wise with the reverse-mode gradient.
template <class T>
GradCheckReport grad_check(const std::string& op, const LossBuilder<T>& build, std::vector<Field<T>> inputs,
                           const std::vector<Parameter<T>*>& params, double tolerance, double h = 1e-5);

/// Every differentiable op in ops.hpp on small random shapes (f64).
std::vector<GradCheckReport> ops_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-5);

/// Loss ops (1e-5) and the tiny end-to-end models, d=2, N=2 on 6³ with
/// PCC over main and auxiliary outputs (f64).
std::vector<GradCheckReport> model_gradcheck_suite(std::uint64_t seed, double op_tolerance = 1e-5,
                                                   double model_tolerance = 1e-4);

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace fnoseg
