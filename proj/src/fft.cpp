#include "fnoseg/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

namespace fnoseg {

namespace {

// Thin per-precision adapter over the FFTW C API.
template <class T>
struct Fftw;

template <>
struct Fftw<double> {
  using plan = fftw_plan;
  using cpx = fftw_complex;
  static void* malloc(std::size_t n) { return fftw_malloc(n); }
  static void free(void* p) { fftw_free(p); }
  static plan r2c(int howmany, const int* n, std::size_t dist_r, std::size_t dist_c) {
    const std::size_t total_r = static_cast<std::size_t>(howmany) * dist_r;
    const std::size_t total_c = static_cast<std::size_t>(howmany) * dist_c;
    auto* in = static_cast<double*>(malloc(sizeof(double) * total_r));
    auto* out = static_cast<cpx*>(malloc(sizeof(cpx) * total_c));
    plan p = fftw_plan_many_dft_r2c(3, n, howmany, in, nullptr, 1, static_cast<int>(dist_r), out, nullptr, 1,
                                    static_cast<int>(dist_c), FFTW_ESTIMATE);
    free(in);
    free(out);
    return p;
  }
  static plan c2r(int howmany, const int* n, std::size_t dist_r, std::size_t dist_c) {
    const std::size_t total_r = static_cast<std::size_t>(howmany) * dist_r;
    const std::size_t total_c = static_cast<std::size_t>(howmany) * dist_c;
    auto* in = static_cast<cpx*>(malloc(sizeof(cpx) * total_c));
    auto* out = static_cast<double*>(malloc(sizeof(double) * total_r));
    plan p = fftw_plan_many_dft_c2r(3, n, howmany, in, nullptr, 1, static_cast<int>(dist_c), out, nullptr, 1,
                                    static_cast<int>(dist_r), FFTW_ESTIMATE);
    free(in);
    free(out);
    return p;
  }
  static void exec_r2c(plan p, double* in, std::complex<double>* out) {
    fftw_execute_dft_r2c(p, in, reinterpret_cast<cpx*>(out));
  }
  static void exec_c2r(plan p, std::complex<double>* in, double* out) {
    fftw_execute_dft_c2r(p, reinterpret_cast<cpx*>(in), out);
  }
};

template <>
struct Fftw<float> {
  using plan = fftwf_plan;
  using cpx = fftwf_complex;
  static void* malloc(std::size_t n) { return fftwf_malloc(n); }
  static void free(void* p) { fftwf_free(p); }
  static plan r2c(int howmany, const int* n, std::size_t dist_r, std::size_t dist_c) {
    const std::size_t total_r = static_cast<std::size_t>(howmany) * dist_r;
    const std::size_t total_c = static_cast<std::size_t>(howmany) * dist_c;
    auto* in = static_cast<float*>(malloc(sizeof(float) * total_r));
    auto* out = static_cast<cpx*>(malloc(sizeof(cpx) * total_c));
    plan p = fftwf_plan_many_dft_r2c(3, n, howmany, in, nullptr, 1, static_cast<int>(dist_r), out, nullptr, 1,
                                     static_cast<int>(dist_c), FFTW_ESTIMATE);
    free(in);
    free(out);
    return p;
  }
  static plan c2r(int howmany, const int* n, std::size_t dist_r, std::size_t dist_c) {
    const std::size_t total_r = static_cast<std::size_t>(howmany) * dist_r;
    const std::size_t total_c = static_cast<std::size_t>(howmany) * dist_c;
    auto* in = static_cast<cpx*>(malloc(sizeof(cpx) * total_c));
    auto* out = static_cast<float*>(malloc(sizeof(float) * total_r));
    plan p = fftwf_plan_many_dft_c2r(3, n, howmany, in, nullptr, 1, static_cast<int>(dist_c), out, nullptr, 1,
                                     static_cast<int>(dist_r), FFTW_ESTIMATE);
    free(in);
    free(out);
    return p;
  }
  static void exec_r2c(plan p, float* in, std::complex<float>* out) {
    fftwf_execute_dft_r2c(p, in, reinterpret_cast<cpx*>(out));
  }
  static void exec_c2r(plan p, std::complex<float>* in, float* out) {
    fftwf_execute_dft_c2r(p, reinterpret_cast<cpx*>(in), out);
  }
};

// Plans are created once per (direction, channels, grid) and reused. FFTW
// planning is not thread-safe, execution with the new-array API is.
template <class T>
class PlanCache {
 public:
  using Key = std::tuple<bool, std::size_t, std::size_t, std::size_t, std::size_t>;

  typename Fftw<T>::plan get(bool forward, const Shape& s) {
    const Key key{forward, s.channels, s.nx, s.ny, s.nz};
    std::lock_guard lock(mutex_);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    const int n[3] = {static_cast<int>(s.nx), static_cast<int>(s.ny), static_cast<int>(s.nz)};
    const std::size_t dist_r = s.voxels();
    const std::size_t dist_c = s.nx * s.ny * (s.nz / 2 + 1);
    auto p = forward ? Fftw<T>::r2c(static_cast<int>(s.channels), n, dist_r, dist_c)
                     : Fftw<T>::c2r(static_cast<int>(s.channels), n, dist_r, dist_c);
    if (p == nullptr) throw ShapeError("FFTW could not create a plan for " + s.str());
    plans_.emplace(key, p);
    return p;
  }

 private:
  std::mutex mutex_;
  std::map<Key, typename Fftw<T>::plan> plans_;
};

template <class T>
PlanCache<T>& plan_cache() {
  static PlanCache<T> cache;
  return cache;
}

void require_fft_dims(std::size_t nx, std::size_t ny, std::size_t nz) {
  if (nx < 2 || ny < 2 || nz < 2) {
    throw ShapeError("fft3: every spatial axis must have at least 2 samples");
  }
}

// Makes the z-plane at index kz Hermitian in (kx, ky): X(k) <- (X(k) + conj X(-k)) / 2.
template <class T>
void hermitian_project_plane(Spectrum<T>& s, std::size_t kz) {
  const std::size_t nx = s.nx(), ny = s.ny();
  for (std::size_t c = 0; c < s.channels(); ++c) {
    for (std::size_t kx = 0; kx < nx; ++kx) {
      const std::size_t mx = (nx - kx) % nx;
      for (std::size_t ky = 0; ky < ny; ++ky) {
        const std::size_t my = (ny - ky) % ny;
        const std::size_t p = s.index(c, kx, ky, kz);
        const std::size_t q = s.index(c, mx, my, kz);
        if (q < p) continue;
        auto* d = s.data();
        if (p == q) {
          d[p] = {d[p].real(), T(0)};
        } else {
          const std::complex<T> avg = T(0.5) * (d[p] + std::conj(d[q]));
          d[p] = avg;
          d[q] = std::conj(avg);
        }
      }
    }
  }
}

}  // namespace

template <class T>
Spectrum<T> fft3(const Field<T>& field) {
  require_fft_dims(field.nx(), field.ny(), field.nz());
  const std::size_t nzh = field.nz() / 2 + 1;
  Spectrum<T> spec(field.channels(), field.nx(), field.ny(), nzh);
  if (field.channels() == 0) return spec;
  auto plan = plan_cache<T>().get(true, field.shape());
  // Out-of-place r2c leaves its input untouched.
  Fftw<T>::exec_r2c(plan, const_cast<T*>(field.data()), spec.data());
  const T inv_n = T(1) / static_cast<T>(field.voxels());
  auto* d = spec.data();
  for (std::size_t i = 0; i < spec.size(); ++i) d[i] *= inv_n;
  return spec;
}

template <class T>
Field<T> ifft3(const Spectrum<T>& spec, std::size_t nz) {
  require_fft_dims(spec.nx(), spec.ny(), nz);
  if (spec.nz_half() != nz / 2 + 1) {
    throw ShapeError("ifft3: spectrum has " + std::to_string(spec.nz_half()) + " z modes, target nz=" +
                     std::to_string(nz) + " needs " + std::to_string(nz / 2 + 1));
  }
  Field<T> out(spec.channels(), spec.nx(), spec.ny(), nz);
  if (spec.channels() == 0) return out;
  // c2r overwrites its input, so work on a copy that also gets the DC and
  // Nyquist planes made Hermitian.
  Spectrum<T> work = spec;
  hermitian_project_plane(work, 0);
  if (nz % 2 == 0) hermitian_project_plane(work, nz / 2);
  auto plan = plan_cache<T>().get(false, out.shape());
  Fftw<T>::exec_c2r(plan, work.data(), out.data());
  return out;
}

template <class T>
Field<T> fft3_adjoint(const Spectrum<T>& grad, std::size_t nz) {
  Spectrum<T> w = grad;
  for (std::size_t c = 0; c < w.channels(); ++c)
    for (std::size_t kx = 0; kx < w.nx(); ++kx)
      for (std::size_t ky = 0; ky < w.ny(); ++ky)
        for (std::size_t kz = 0; kz < w.nz_half(); ++kz)
          if (half_axis_multiplicity(kz, nz) == 2) w(c, kx, ky, kz) *= T(0.5);
  Field<T> out = ifft3(w, nz);
  const T inv_n = T(1) / static_cast<T>(out.voxels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv_n;
  return out;
}

template <class T>
Spectrum<T> ifft3_adjoint(const Field<T>& grad) {
  Spectrum<T> s = fft3(grad);
  const T n = static_cast<T>(grad.voxels());
  for (std::size_t c = 0; c < s.channels(); ++c)
    for (std::size_t kx = 0; kx < s.nx(); ++kx)
      for (std::size_t ky = 0; ky < s.ny(); ++ky)
        for (std::size_t kz = 0; kz < s.nz_half(); ++kz)
          s(c, kx, ky, kz) *= n * static_cast<T>(half_axis_multiplicity(kz, grad.nz()));
  return s;
}

template Spectrum<float> fft3(const Field<float>&);
template Spectrum<double> fft3(const Field<double>&);
template Field<float> ifft3(const Spectrum<float>&, std::size_t);
template Field<double> ifft3(const Spectrum<double>&, std::size_t);
template Field<float> fft3_adjoint(const Spectrum<float>&, std::size_t);
template Field<double> fft3_adjoint(const Spectrum<double>&, std::size_t);
template Spectrum<float> ifft3_adjoint(const Field<float>&);
template Spectrum<double> ifft3_adjoint(const Field<double>&);

}  // namespace fnoseg
