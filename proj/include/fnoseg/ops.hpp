#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "fnoseg/tape.hpp"
#include "fnoseg/tensor.hpp"

namespace fnoseg {

/// Retained-mode bounds for spectral convolution. On the two full axes a mode
/// is kept iff min(k, n - k) <= k_max; on the half (z) axis iff kz <= k_max.
struct ModeMask {
  std::array<int, 3> k_max{0, 0, 0};

  bool retains(std::size_t kx, std::size_t ky, std::size_t kz, std::size_t nx, std::size_t ny) const;
  /// Retained indices along one full axis of length n.
  std::vector<std::size_t> full_axis(int axis, std::size_t n) const;
  /// Retained z indices of a half spectrum for a grid with nz samples.
  std::vector<std::size_t> half_axis(std::size_t nz) const;
  std::size_t retained_count(std::size_t nx, std::size_t ny, std::size_t nz) const;
  /// Size of the per-mode weight table: (2kx+1)(2ky+1)(2kz+1).
  std::size_t weight_table_modes() const;
};

inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kLayerNormEps = 1e-5;

/// v ↦ W·v + b at every voxel. W is (d_out × d_in); bias may be null.
template <class T>
Var pointwise_linear(Tape<T>& tape, Var v, Parameter<T>& weight, Parameter<T>* bias);

/// FFT, one complex (d_out × d_in) matrix applied at every retained mode, inverse FFT.
/// The matrix is given as separate real and imaginary parameters.
template <class T>
Var spectral_conv_shared(Tape<T>& tape, Var v, Parameter<T>& r_re, Parameter<T>& r_im, const ModeMask& mask);

/// Like spectral_conv_shared but with a complex matrix per signed frequency
/// triple, stored as (2kx+1, 2ky+1, 2kz+1, d_out, d_in). The z axis of the
/// weight table spans negative frequencies too: the layer is the real part of
/// a full complex-spectrum product, so a half-spectrum mode k sees the
/// effective weight (R(k) + conj R(-k)) / 2.
template <class T>
Var spectral_conv_permode(Tape<T>& tape, Var v, Parameter<T>& r_re, Parameter<T>& r_im, const ModeMask& mask);

/// 2×2×2 stride-2 convolution, K is (d_out × d_in × 2 × 2 × 2). Odd axes are
/// padded by replicating the last slice, so the output has ceil(n/2) samples.
template <class T>
Var conv3_down(Tape<T>& tape, Var v, Parameter<T>& kernel, Parameter<T>* bias);

/// 2×2×2 stride-2 transposed convolution, K is (d_in × d_out × 2 × 2 × 2).
/// The doubled output is cropped to target, which must be 2n-1 or 2n per axis.
template <class T>
Var tconv3_up(Tape<T>& tape, Var v, Parameter<T>& kernel, Parameter<T>* bias,
              const std::array<std::size_t, 3>& target);

/// 3×3×3 convolution with zero padding 1 and stride 1 or 2 (baseline CNN).
/// K is (d_out × d_in × 3 × 3 × 3); output has ceil(n/stride) samples.
template <class T>
Var conv3x3(Tape<T>& tape, Var v, Parameter<T>& kernel, Parameter<T>* bias, int stride);

/// Standardizes over all channels and voxels jointly, then applies a
/// per-channel affine.
template <class T>
Var layer_norm(Tape<T>& tape, Var v, Parameter<T>& gamma, Parameter<T>& beta, T eps = T(kLayerNormEps));

template <class T>
Var selu(Tape<T>& tape, Var v);

/// Per-voxel softmax over channels.
template <class T>
Var softmax_channels(Tape<T>& tape, Var v);

template <class T>
Var residual_add(Tape<T>& tape, Var a, Var b);

/// Scalar Σ w ⊙ v with a constant weight field.
template <class T>
Var weighted_sum(Tape<T>& tape, Var v, const Field<T>& weights);

/// Scalar sum of all entries.
template <class T>
Var sum_all(Tape<T>& tape, Var v);

/// Arithmetic mean of scalar nodes.
template <class T>
Var mean_of(Tape<T>& tape, std::span<const Var> scalars);

// Bias-free spellings; a bare nullptr cannot deduce T.
template <class T>
Var pointwise_linear(Tape<T>& tape, Var v, Parameter<T>& weight, std::nullptr_t) {
  return pointwise_linear<T>(tape, v, weight, static_cast<Parameter<T>*>(nullptr));
}
template <class T>
Var conv3_down(Tape<T>& tape, Var v, Parameter<T>& kernel, std::nullptr_t) {
  return conv3_down<T>(tape, v, kernel, static_cast<Parameter<T>*>(nullptr));
}
template <class T>
Var tconv3_up(Tape<T>& tape, Var v, Parameter<T>& kernel, std::nullptr_t, const std::array<std::size_t, 3>& target) {
  return tconv3_up<T>(tape, v, kernel, static_cast<Parameter<T>*>(nullptr), target);
}
template <class T>
Var conv3x3(Tape<T>& tape, Var v, Parameter<T>& kernel, std::nullptr_t, int stride) {
  return conv3x3<T>(tape, v, kernel, static_cast<Parameter<T>*>(nullptr), stride);
}

// Forward-only helpers shared with the no-tape code paths and test oracles.
template <class T>
Field<T> selu_value(const Field<T>& v);
template <class T>
Field<T> softmax_value(const Field<T>& v);

/// Pads odd axes by replicating the last slice.
template <class T>
Field<T> pad_to_even(const Field<T>& v);

}  // namespace fnoseg
