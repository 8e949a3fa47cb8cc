#pragma once

#include <algorithm>
#include <array>
#include <complex>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fnoseg/common.hpp"

namespace fnoseg {

/// Extent of a multi-channel volume. Layout is channel-major with z fastest.
struct Shape {
  std::size_t channels = 0;
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  std::size_t voxels() const { return nx * ny * nz; }
  std::size_t size() const { return channels * voxels(); }
  std::array<std::size_t, 3> spatial() const { return {nx, ny, nz}; }
  bool same_spatial(const Shape& o) const { return nx == o.nx && ny == o.ny && nz == o.nz; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense real-valued multi-channel 3D grid.
template <class T>
class Field {
 public:
  using value_type = T;

  Field() = default;
  explicit Field(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Field(std::size_t channels, std::size_t nx, std::size_t ny, std::size_t nz, T fill = T(0))
      : Field(Shape{channels, nx, ny, nz}, fill) {}

  const Shape& shape() const { return shape_; }
  std::size_t channels() const { return shape_.channels; }
  std::size_t nx() const { return shape_.nx; }
  std::size_t ny() const { return shape_.ny; }
  std::size_t nz() const { return shape_.nz; }
  std::size_t voxels() const { return shape_.voxels(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }
  std::span<T> channel(std::size_t c) { return {data_.data() + c * voxels(), voxels()}; }
  std::span<const T> channel(std::size_t c) const { return {data_.data() + c * voxels(), voxels()}; }

  std::size_t index(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const {
    return ((c * shape_.nx + x) * shape_.ny + y) * shape_.nz + z;
  }
  T& operator()(std::size_t c, std::size_t x, std::size_t y, std::size_t z) { return data_[index(c, x, y, z)]; }
  const T& operator()(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const {
    return data_[index(c, x, y, z)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;

  template <class U>
  Field<U> cast() const {
    Field<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Field& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_{};
  AlignedVector<T> data_;
};

/// Half-spectrum of a real Field: z keeps nz/2+1 non-negative frequencies.
template <class T>
class Spectrum {
 public:
  using complex_type = std::complex<T>;

  Spectrum() = default;
  Spectrum(std::size_t channels, std::size_t nx, std::size_t ny, std::size_t nz_half)
      : channels_(channels), nx_(nx), ny_(ny), nzh_(nz_half), data_(channels * nx * ny * nz_half) {}

  std::size_t channels() const { return channels_; }
  std::size_t nx() const { return nx_; }
  std::size_t ny() const { return ny_; }
  std::size_t nz_half() const { return nzh_; }
  std::size_t modes() const { return nx_ * ny_ * nzh_; }
  std::size_t size() const { return data_.size(); }

  complex_type* data() { return data_.data(); }
  const complex_type* data() const { return data_.data(); }
  std::span<complex_type> channel(std::size_t c) { return {data_.data() + c * modes(), modes()}; }
  std::span<const complex_type> channel(std::size_t c) const { return {data_.data() + c * modes(), modes()}; }

  std::size_t index(std::size_t c, std::size_t kx, std::size_t ky, std::size_t kz) const {
    return ((c * nx_ + kx) * ny_ + ky) * nzh_ + kz;
  }
  complex_type& operator()(std::size_t c, std::size_t kx, std::size_t ky, std::size_t kz) {
    return data_[index(c, kx, ky, kz)];
  }
  const complex_type& operator()(std::size_t c, std::size_t kx, std::size_t ky, std::size_t kz) const {
    return data_[index(c, kx, ky, kz)];
  }

 private:
  std::size_t channels_ = 0, nx_ = 0, ny_ = 0, nzh_ = 0;
  AlignedVector<complex_type> data_;
};

// Elementwise plumbing. Shapes must match exactly; a ShapeError is thrown otherwise.
template <class T>
Field<T> add(const Field<T>& a, const Field<T>& b);
template <class T>
Field<T> sub(const Field<T>& a, const Field<T>& b);
template <class T>
Field<T> mul(const Field<T>& a, const Field<T>& b);
template <class T>
Field<T> scale(const Field<T>& a, T s);
template <class T>
Field<T> map(const Field<T>& a, const std::function<T(T)>& f);
template <class T>
void axpy(T alpha, const Field<T>& x, Field<T>& y);

/// out(:, voxel) = M · in(:, voxel) for a row-major (rows × in.channels()) matrix.
template <class T>
Field<T> apply_channel_matrix(std::span<const T> matrix, std::size_t rows, const Field<T>& in);

template <class T>
T sum(const Field<T>& a);
template <class T>
T mean(const Field<T>& a);
template <class T>
T max(const Field<T>& a);
template <class T>
T dot(const Field<T>& a, const Field<T>& b);
template <class T>
T max_abs(const Field<T>& a);

void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace fnoseg
