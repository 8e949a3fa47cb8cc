#include "fnoseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>
#include <vector>

namespace fnoseg {

namespace {
int g_threads = 1;
}

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(g_threads, count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t block = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * block;
    const std::size_t hi = std::min(count, lo + block);
    pool.emplace_back([lo, hi, &body] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::string Shape::str() const {
  std::ostringstream os;
  os << channels << "x" << nx << "x" << ny << "x" << nz;
  return os.str();
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <class T>
bool Field<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
Field<T> add(const Field<T>& a, const Field<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Field<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class T>
Field<T> sub(const Field<T>& a, const Field<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Field<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <class T>
Field<T> mul(const Field<T>& a, const Field<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Field<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <class T>
Field<T> scale(const Field<T>& a, T s) {
  Field<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <class T>
Field<T> map(const Field<T>& a, const std::function<T(T)>& f) {
  Field<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T>
void axpy(T alpha, const Field<T>& x, Field<T>& y) {
  require_same_shape(x.shape(), y.shape(), "axpy");
  T* py = y.data();
  const T* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) py[i] += alpha * px[i];
}

template <class T>
Field<T> apply_channel_matrix(std::span<const T> matrix, std::size_t rows, const Field<T>& in) {
  const std::size_t cols = in.channels();
  if (matrix.size() != rows * cols) throw ShapeError("apply_channel_matrix: matrix size does not match channels");
  Field<T> out(rows, in.nx(), in.ny(), in.nz());
  const std::size_t nv = in.voxels();
  parallel_for(rows, [&](std::size_t r) {
    T* dst = out.channel(r).data();
    for (std::size_t c = 0; c < cols; ++c) {
      const T w = matrix[r * cols + c];
      const T* src = in.channel(c).data();
      for (std::size_t v = 0; v < nv; ++v) dst[v] += w * src[v];
    }
  });
  return out;
}

template <class T>
T sum(const Field<T>& a) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}

template <class T>
T mean(const Field<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of empty field");
  return sum(a) / static_cast<T>(a.size());
}

template <class T>
T max(const Field<T>& a) {
  if (a.size() == 0) throw ShapeError("max of empty field");
  return *std::max_element(a.data(), a.data() + a.size());
}

template <class T>
T dot(const Field<T>& a, const Field<T>& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T max_abs(const Field<T>& a) {
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i]));
  return m;
}

#define FNOSEG_INSTANTIATE(T)                                                              \
  template class Field<T>;                                                                 \
  template Field<T> add(const Field<T>&, const Field<T>&);                                 \
  template Field<T> sub(const Field<T>&, const Field<T>&);                                 \
  template Field<T> mul(const Field<T>&, const Field<T>&);                                 \
  template Field<T> scale(const Field<T>&, T);                                             \
  template Field<T> map(const Field<T>&, const std::function<T(T)>&);                      \
  template void axpy(T, const Field<T>&, Field<T>&);                                       \
  template Field<T> apply_channel_matrix(std::span<const T>, std::size_t, const Field<T>&); \
  template T sum(const Field<T>&);                                                         \
  template T mean(const Field<T>&);                                                        \
  template T max(const Field<T>&);                                                         \
  template T dot(const Field<T>&, const Field<T>&);                                        \
  template T max_abs(const Field<T>&);

FNOSEG_INSTANTIATE(float)
FNOSEG_INSTANTIATE(double)
#undef FNOSEG_INSTANTIATE

}  // namespace fnoseg
