#pragma once

#include <cstddef>

#include "fnoseg/tensor.hpp"

namespace fnoseg {

/// Per-channel 3D DFT of a real field with forward scaling 1/(nx·ny·nz).
/// The z axis keeps the nz/2+1 non-negative frequencies.
template <class T>
Spectrum<T> fft3(const Field<T>& field);

/// Inverse of fft3. Entries in the kz = 0 and kz = nz/2 planes are read as the
/// real part of the full inverse DFT, i.e. the planes are Hermitian-projected
/// before the transform, so any Spectrum maps to a well-defined real Field.
template <class T>
Field<T> ifft3(const Spectrum<T>& spec, std::size_t nz);

/// Adjoint of fft3 as a real-linear map (gradient w.r.t. the input field given
/// the gradient w.r.t. the real and imaginary parts of the spectrum).
template <class T>
Field<T> fft3_adjoint(const Spectrum<T>& grad, std::size_t nz);

/// Adjoint of ifft3 as a real-linear map.
template <class T>
Spectrum<T> ifft3_adjoint(const Field<T>& grad);

/// Signed frequency of index k on an axis of length n; the Nyquist index maps to +n/2.
inline long signed_frequency(std::size_t k, std::size_t n) {
  return k <= n / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(n);
}

/// How many full-spectrum modes a half-spectrum z index stands for (2 for
/// interior planes, 1 for the DC and Nyquist planes).
inline int half_axis_multiplicity(std::size_t kz, std::size_t nz) {
  return (kz == 0 || 2 * kz == nz) ? 1 : 2;
}

}  // namespace fnoseg
