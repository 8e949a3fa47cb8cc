#include "fnoseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "fnoseg/fft.hpp"

namespace fnoseg {

// ---------------------------------------------------------------------------
// Mode mask

bool ModeMask::retains(std::size_t kx, std::size_t ky, std::size_t kz, std::size_t nx, std::size_t ny) const {
  if (k_max[0] < 0 || k_max[1] < 0 || k_max[2] < 0) return false;
  const auto fx = std::min(kx, nx - kx);
  const auto fy = std::min(ky, ny - ky);
  return fx <= static_cast<std::size_t>(k_max[0]) && fy <= static_cast<std::size_t>(k_max[1]) &&
         kz <= static_cast<std::size_t>(k_max[2]);
}

std::vector<std::size_t> ModeMask::full_axis(int axis, std::size_t n) const {
  std::vector<std::size_t> out;
  if (k_max[axis] < 0) return out;
  for (std::size_t k = 0; k < n; ++k)
    if (std::min(k, n - k) <= static_cast<std::size_t>(k_max[axis])) out.push_back(k);
  return out;
}

std::vector<std::size_t> ModeMask::half_axis(std::size_t nz) const {
  std::vector<std::size_t> out;
  if (k_max[2] < 0) return out;
  for (std::size_t k = 0; k <= nz / 2; ++k)
    if (k <= static_cast<std::size_t>(k_max[2])) out.push_back(k);
  return out;
}

std::size_t ModeMask::retained_count(std::size_t nx, std::size_t ny, std::size_t nz) const {
  return full_axis(0, nx).size() * full_axis(1, ny).size() * half_axis(nz).size();
}

std::size_t ModeMask::weight_table_modes() const {
  if (k_max[0] < 0 || k_max[1] < 0 || k_max[2] < 0) return 0;
  return static_cast<std::size_t>(2 * k_max[0] + 1) * static_cast<std::size_t>(2 * k_max[1] + 1) *
         static_cast<std::size_t>(2 * k_max[2] + 1);
}

namespace {

void require_param_shape(const std::vector<std::size_t>& got, const std::vector<std::size_t>& want, const char* op) {
  if (got != want) throw ShapeError(std::string(op) + ": parameter has unexpected shape");
}

// Retained modes of a half spectrum, flattened per channel.
struct RetainedModes {
  std::vector<std::size_t> offset;  // index within one channel of the half spectrum
  std::vector<int> multiplicity;    // 1 or 2, see half_axis_multiplicity
  std::vector<std::size_t> table;   // permode weight-table index of k
  std::vector<std::size_t> partner; // permode weight-table index of -k
};

RetainedModes retained_modes(const ModeMask& mask, std::size_t nx, std::size_t ny, std::size_t nz, bool tables) {
  const auto xs = mask.full_axis(0, nx);
  const auto ys = mask.full_axis(1, ny);
  const auto zs = mask.half_axis(nz);
  if (xs.empty() || ys.empty() || zs.empty()) throw ShapeError("spectral_conv: mode mask retains no modes");
  const std::size_t nzh = nz / 2 + 1;
  const long kx_max = mask.k_max[0], ky_max = mask.k_max[1], kz_max = mask.k_max[2];
  const std::size_t my = static_cast<std::size_t>(2 * ky_max + 1);
  const std::size_t mz = static_cast<std::size_t>(2 * kz_max + 1);
  auto table_index = [&](long fx, long fy, long fz) {
    return (static_cast<std::size_t>(fx + kx_max) * my + static_cast<std::size_t>(fy + ky_max)) * mz +
           static_cast<std::size_t>(fz + kz_max);
  };
  RetainedModes r;
  for (auto kx : xs)
    for (auto ky : ys)
      for (auto kz : zs) {
        r.offset.push_back((kx * ny + ky) * nzh + kz);
        r.multiplicity.push_back(half_axis_multiplicity(kz, nz));
        if (tables) {
          const long fx = signed_frequency(kx, nx), fy = signed_frequency(ky, ny), fz = signed_frequency(kz, nz);
          const long px = signed_frequency((nx - kx) % nx, nx);
          const long py = signed_frequency((ny - ky) % ny, ny);
          const long pz = signed_frequency((nz - kz) % nz, nz);
          r.table.push_back(table_index(fx, fy, fz));
          r.partner.push_back(table_index(px, py, pz));
        }
      }
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// pointwise_linear

template <class T>
Var pointwise_linear(Tape<T>& tape, Var v, Parameter<T>& weight, Parameter<T>* bias) {
  const Field<T>& in = tape.value(v);
  if (weight.shape.size() != 2 || weight.shape[1] != in.channels()) {
    throw ShapeError("pointwise_linear: weight columns must equal input channels (" +
                     std::to_string(in.channels()) + ")");
  }
  const std::size_t d_out = weight.shape[0], d_in = weight.shape[1];
  if (bias) require_param_shape(bias->shape, {d_out}, "pointwise_linear");
  Field<T> out = apply_channel_matrix<T>(weight.value, d_out, in);
  if (bias) {
    for (std::size_t o = 0; o < d_out; ++o) {
      auto ch = out.channel(o);
      const T b = bias->value[o];
      for (auto& x : ch) x += b;
    }
  }
  return tape.record(std::move(out), [v, &weight, bias, d_out, d_in](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    const Field<T>& x = t.value(v);
    const std::size_t nv = x.voxels();
    for (std::size_t o = 0; o < d_out; ++o) {
      const T* go = g.channel(o).data();
      for (std::size_t i = 0; i < d_in; ++i) {
        const T* xi = x.channel(i).data();
        T acc = 0;
        for (std::size_t k = 0; k < nv; ++k) acc += go[k] * xi[k];
        weight.grad[o * d_in + i] += acc;
      }
      if (bias) {
        T acc = 0;
        for (std::size_t k = 0; k < nv; ++k) acc += go[k];
        bias->grad[o] += acc;
      }
    }
    weight.grad_fresh = true;
    if (bias) bias->grad_fresh = true;
    if (t.needs_grad(v)) {
      Field<T>& gx = t.grad(v);
      for (std::size_t i = 0; i < d_in; ++i) {
        T* gi = gx.channel(i).data();
        for (std::size_t o = 0; o < d_out; ++o) {
          const T w = weight.value[o * d_in + i];
          const T* go = g.channel(o).data();
          for (std::size_t k = 0; k < nv; ++k) gi[k] += w * go[k];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// spectral convolutions

template <class T>
Var spectral_conv_shared(Tape<T>& tape, Var v, Parameter<T>& r_re, Parameter<T>& r_im, const ModeMask& mask) {
  const Field<T>& in = tape.value(v);
  if (r_re.shape.size() != 2 || r_re.shape[1] != in.channels()) {
    throw ShapeError("spectral_conv_shared: weight columns must equal input channels");
  }
  require_param_shape(r_im.shape, r_re.shape, "spectral_conv_shared");
  const std::size_t d_out = r_re.shape[0], d_in = r_re.shape[1];
  const std::size_t nx = in.nx(), ny = in.ny(), nz = in.nz();
  auto modes = retained_modes(mask, nx, ny, nz, false);

  Spectrum<T> x = fft3(in);
  Spectrum<T> y(d_out, nx, ny, nz / 2 + 1);
  for (std::size_t o = 0; o < d_out; ++o) {
    auto yo = y.channel(o);
    for (std::size_t i = 0; i < d_in; ++i) {
      const std::complex<T> r(r_re.value[o * d_in + i], r_im.value[o * d_in + i]);
      const auto xi = x.channel(i);
      for (auto m : modes.offset) yo[m] += r * xi[m];
    }
  }
  Field<T> out = ifft3(y, nz);
  if (!tape.recording()) return tape.record(std::move(out), nullptr);

  return tape.record(std::move(out), [v, &r_re, &r_im, d_out, d_in, nz, modes = std::move(modes),
                                      x = std::move(x)](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    const Spectrum<T> gs = fft3(g);
    const T n = static_cast<T>(g.voxels());
    for (std::size_t o = 0; o < d_out; ++o) {
      const auto go = gs.channel(o);
      for (std::size_t i = 0; i < d_in; ++i) {
        const auto xi = x.channel(i);
        std::complex<T> acc(0, 0);
        for (std::size_t j = 0; j < modes.offset.size(); ++j) {
          const auto m = modes.offset[j];
          acc += static_cast<T>(modes.multiplicity[j]) * go[m] * std::conj(xi[m]);
        }
        r_re.grad[o * d_in + i] += n * acc.real();
        r_im.grad[o * d_in + i] += n * acc.imag();
      }
    }
    r_re.grad_fresh = r_im.grad_fresh = true;
    if (t.needs_grad(v)) {
      Spectrum<T> gx(d_in, gs.nx(), gs.ny(), gs.nz_half());
      for (std::size_t i = 0; i < d_in; ++i) {
        auto gi = gx.channel(i);
        for (std::size_t o = 0; o < d_out; ++o) {
          const std::complex<T> rc(r_re.value[o * d_in + i], -r_im.value[o * d_in + i]);
          const auto go = gs.channel(o);
          for (auto m : modes.offset) gi[m] += rc * go[m];
        }
      }
      axpy(T(1), ifft3(gx, nz), t.grad(v));
    }
  });
}

template <class T>
Var spectral_conv_permode(Tape<T>& tape, Var v, Parameter<T>& r_re, Parameter<T>& r_im, const ModeMask& mask) {
  const Field<T>& in = tape.value(v);
  const std::size_t table = mask.weight_table_modes();
  if (r_re.shape.size() != 5 || r_re.shape[4] != in.channels()) {
    throw ShapeError("spectral_conv_permode: weight must be (modes_x, modes_y, modes_z, d_out, d_in)");
  }
  require_param_shape(r_im.shape, r_re.shape, "spectral_conv_permode");
  if (r_re.shape[0] * r_re.shape[1] * r_re.shape[2] != table) {
    throw ShapeError("spectral_conv_permode: weight table does not match the mode mask");
  }
  const std::size_t d_out = r_re.shape[3], d_in = r_re.shape[4];
  const std::size_t dd = d_out * d_in;
  const std::size_t nx = in.nx(), ny = in.ny(), nz = in.nz();
  auto modes = retained_modes(mask, nx, ny, nz, true);

  // E(k) = (R(k) + conj R(-k)) / 2
  auto effective = [&r_re, &r_im, dd](std::size_t a, std::size_t b, std::size_t e) {
    return std::complex<T>(T(0.5) * (r_re.value[a * dd + e] + r_re.value[b * dd + e]),
                           T(0.5) * (r_im.value[a * dd + e] - r_im.value[b * dd + e]));
  };

  Spectrum<T> x = fft3(in);
  Spectrum<T> y(d_out, nx, ny, nz / 2 + 1);
  for (std::size_t j = 0; j < modes.offset.size(); ++j) {
    const auto m = modes.offset[j];
    for (std::size_t o = 0; o < d_out; ++o) {
      std::complex<T> acc(0, 0);
      for (std::size_t i = 0; i < d_in; ++i) acc += effective(modes.table[j], modes.partner[j], o * d_in + i) * x.channel(i)[m];
      y.channel(o)[m] = acc;
    }
  }
  Field<T> out = ifft3(y, nz);
  if (!tape.recording()) return tape.record(std::move(out), nullptr);

  return tape.record(std::move(out), [v, &r_re, &r_im, d_out, d_in, dd, nz, effective, modes = std::move(modes),
                                      x = std::move(x)](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    const Spectrum<T> gs = fft3(g);
    const T n = static_cast<T>(g.voxels());
    const bool want_input = t.needs_grad(v);
    Spectrum<T> gx;
    if (want_input) gx = Spectrum<T>(d_in, gs.nx(), gs.ny(), gs.nz_half());
    for (std::size_t j = 0; j < modes.offset.size(); ++j) {
      const auto m = modes.offset[j];
      const std::size_t a = modes.table[j], b = modes.partner[j];
      const T scale = T(0.5) * n * static_cast<T>(modes.multiplicity[j]);
      for (std::size_t o = 0; o < d_out; ++o) {
        const std::complex<T> go = gs.channel(o)[m];
        for (std::size_t i = 0; i < d_in; ++i) {
          const std::size_t e = o * d_in + i;
          const std::complex<T> de = scale * go * std::conj(x.channel(i)[m]);
          r_re.grad[a * dd + e] += de.real();
          r_im.grad[a * dd + e] += de.imag();
          r_re.grad[b * dd + e] += de.real();
          r_im.grad[b * dd + e] -= de.imag();
          if (want_input) gx.channel(i)[m] += std::conj(effective(a, b, e)) * go;
        }
      }
    }
    r_re.grad_fresh = r_im.grad_fresh = true;
    if (want_input) axpy(T(1), ifft3(gx, nz), t.grad(v));
  });
}

// ---------------------------------------------------------------------------
// stride-2 resampling

template <class T>
Field<T> pad_to_even(const Field<T>& v) {
  const std::size_t px = v.nx() + v.nx() % 2, py = v.ny() + v.ny() % 2, pz = v.nz() + v.nz() % 2;
  if (px == v.nx() && py == v.ny() && pz == v.nz()) return v;
  Field<T> out(v.channels(), px, py, pz);
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t x = 0; x < px; ++x)
      for (std::size_t y = 0; y < py; ++y)
        for (std::size_t z = 0; z < pz; ++z)
          out(c, x, y, z) = v(c, std::min(x, v.nx() - 1), std::min(y, v.ny() - 1), std::min(z, v.nz() - 1));
  return out;
}

template <class T>
Var conv3_down(Tape<T>& tape, Var v, Parameter<T>& kernel, Parameter<T>* bias) {
  const Field<T>& in = tape.value(v);
  if (in.nx() < 2 || in.ny() < 2 || in.nz() < 2) throw ShapeError("conv3_down: every spatial axis needs >= 2 samples");
  if (kernel.shape.size() != 5 || kernel.shape[1] != in.channels() || kernel.shape[2] != 2 || kernel.shape[3] != 2 ||
      kernel.shape[4] != 2) {
    throw ShapeError("conv3_down: kernel must be (d_out, d_in, 2, 2, 2) with d_in = input channels");
  }
  const std::size_t d_out = kernel.shape[0], d_in = kernel.shape[1];
  if (bias) require_param_shape(bias->shape, {d_out}, "conv3_down");
  Field<T> padded = pad_to_even(in);
  const std::size_t mx = padded.nx() / 2, my = padded.ny() / 2, mz = padded.nz() / 2;
  const std::size_t py = padded.ny(), pz = padded.nz();
  Field<T> out(d_out, mx, my, mz);

  parallel_for(d_out, [&](std::size_t o) {
    auto och = out.channel(o);
    std::fill(och.begin(), och.end(), bias ? bias->value[o] : T(0));
    for (std::size_t i = 0; i < d_in; ++i) {
      const T* src = padded.channel(i).data();
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          for (std::size_t c = 0; c < 2; ++c) {
            const T w = kernel.value[(((o * d_in + i) * 2 + a) * 2 + b) * 2 + c];
            for (std::size_t X = 0; X < mx; ++X)
              for (std::size_t Y = 0; Y < my; ++Y) {
                const T* s = src + ((2 * X + a) * py + (2 * Y + b)) * pz + c;
                T* d = och.data() + (X * my + Y) * mz;
                for (std::size_t Z = 0; Z < mz; ++Z) d[Z] += w * s[2 * Z];
              }
          }
    }
  });
  if (!tape.recording()) return tape.record(std::move(out), nullptr);

  const Shape orig = in.shape();
  return tape.record(std::move(out), [v, &kernel, bias, d_out, d_in, orig, padded = std::move(padded)](Tape<T>& t,
                                                                                                     Var self) {
    const Field<T>& g = t.grad(self);
    const std::size_t mx = g.nx(), my = g.ny(), mz = g.nz();
    const std::size_t py = padded.ny(), pz = padded.nz();
    for (std::size_t o = 0; o < d_out; ++o) {
      const T* go = g.channel(o).data();
      if (bias) {
        T acc = 0;
        for (std::size_t k = 0; k < g.voxels(); ++k) acc += go[k];
        bias->grad[o] += acc;
      }
      for (std::size_t i = 0; i < d_in; ++i) {
        const T* src = padded.channel(i).data();
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 2; ++c) {
              T acc = 0;
              for (std::size_t X = 0; X < mx; ++X)
                for (std::size_t Y = 0; Y < my; ++Y) {
                  const T* s = src + ((2 * X + a) * py + (2 * Y + b)) * pz + c;
                  const T* d = go + (X * my + Y) * mz;
                  for (std::size_t Z = 0; Z < mz; ++Z) acc += d[Z] * s[2 * Z];
                }
              kernel.grad[(((o * d_in + i) * 2 + a) * 2 + b) * 2 + c] += acc;
            }
      }
    }
    kernel.grad_fresh = true;
    if (bias) bias->grad_fresh = true;
    if (!t.needs_grad(v)) return;

    Field<T> gp(padded.shape());
    parallel_for(d_in, [&](std::size_t i) {
      T* dst = gp.channel(i).data();
      for (std::size_t o = 0; o < d_out; ++o) {
        const T* go = g.channel(o).data();
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 2; ++c) {
              const T w = kernel.value[(((o * d_in + i) * 2 + a) * 2 + b) * 2 + c];
              for (std::size_t X = 0; X < mx; ++X)
                for (std::size_t Y = 0; Y < my; ++Y) {
                  T* s = dst + ((2 * X + a) * py + (2 * Y + b)) * pz + c;
                  const T* d = go + (X * my + Y) * mz;
                  for (std::size_t Z = 0; Z < mz; ++Z) s[2 * Z] += w * d[Z];
                }
            }
      }
    });
    // Fold the replicated slices back onto their sources.
    Field<T>& gx = t.grad(v);
    for (std::size_t c = 0; c < gp.channels(); ++c)
      for (std::size_t x = 0; x < gp.nx(); ++x)
        for (std::size_t y = 0; y < gp.ny(); ++y)
          for (std::size_t z = 0; z < gp.nz(); ++z)
            gx(c, std::min(x, orig.nx - 1), std::min(y, orig.ny - 1), std::min(z, orig.nz - 1)) += gp(c, x, y, z);
  });
}

template <class T>
Var tconv3_up(Tape<T>& tape, Var v, Parameter<T>& kernel, Parameter<T>* bias, const std::array<std::size_t, 3>& target) {
  const Field<T>& in = tape.value(v);
  if (kernel.shape.size() != 5 || kernel.shape[0] != in.channels() || kernel.shape[2] != 2 || kernel.shape[3] != 2 ||
      kernel.shape[4] != 2) {
    throw ShapeError("tconv3_up: kernel must be (d_in, d_out, 2, 2, 2) with d_in = input channels");
  }
  const auto n = in.shape().spatial();
  for (int ax = 0; ax < 3; ++ax) {
    if (target[ax] != 2 * n[ax] && target[ax] + 1 != 2 * n[ax]) {
      throw ShapeError("tconv3_up: target size " + std::to_string(target[ax]) + " on axis " + std::to_string(ax) +
                       " must be " + std::to_string(2 * n[ax]) + " or " + std::to_string(2 * n[ax] - 1));
    }
  }
  const std::size_t d_in = kernel.shape[0], d_out = kernel.shape[1];
  if (bias) require_param_shape(bias->shape, {d_out}, "tconv3_up");
  const std::size_t tx = target[0], ty = target[1], tz = target[2];
  const std::size_t nx = n[0], ny = n[1], nz = n[2];
  Field<T> out(d_out, tx, ty, tz);

  parallel_for(d_out, [&](std::size_t o) {
    auto och = out.channel(o);
    std::fill(och.begin(), och.end(), bias ? bias->value[o] : T(0));
    for (std::size_t i = 0; i < d_in; ++i) {
      const T* src = in.channel(i).data();
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          for (std::size_t c = 0; c < 2; ++c) {
            const T w = kernel.value[(((i * d_out + o) * 2 + a) * 2 + b) * 2 + c];
            const std::size_t zc = (tz - c + 1) / 2;  // Z with 2Z + c < tz
            for (std::size_t X = 0; X < nx && 2 * X + a < tx; ++X)
              for (std::size_t Y = 0; Y < ny && 2 * Y + b < ty; ++Y) {
                const T* s = src + (X * ny + Y) * nz;
                T* d = och.data() + ((2 * X + a) * ty + (2 * Y + b)) * tz + c;
                for (std::size_t Z = 0; Z < zc; ++Z) d[2 * Z] += w * s[Z];
              }
          }
    }
  });
  if (!tape.recording()) return tape.record(std::move(out), nullptr);

  return tape.record(std::move(out), [v, &kernel, bias, d_in, d_out](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    const Field<T>& x = t.value(v);
    const std::size_t tx = g.nx(), ty = g.ny(), tz = g.nz();
    const std::size_t nx = x.nx(), ny = x.ny(), nz = x.nz();
    const bool want_input = t.needs_grad(v);
    Field<T>* gx = want_input ? &t.grad(v) : nullptr;
    for (std::size_t o = 0; o < d_out; ++o) {
      const T* go = g.channel(o).data();
      if (bias) {
        T acc = 0;
        for (std::size_t k = 0; k < g.voxels(); ++k) acc += go[k];
        bias->grad[o] += acc;
      }
    }
    for (std::size_t i = 0; i < d_in; ++i) {
      const T* src = x.channel(i).data();
      T* gsrc = want_input ? gx->channel(i).data() : nullptr;
      for (std::size_t o = 0; o < d_out; ++o) {
        const T* go = g.channel(o).data();
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 2; ++c) {
              const std::size_t widx = (((i * d_out + o) * 2 + a) * 2 + b) * 2 + c;
              const T w = kernel.value[widx];
              const std::size_t zc = (tz - c + 1) / 2;
              T acc = 0;
              for (std::size_t X = 0; X < nx && 2 * X + a < tx; ++X)
                for (std::size_t Y = 0; Y < ny && 2 * Y + b < ty; ++Y) {
                  const T* s = src + (X * ny + Y) * nz;
                  const T* d = go + ((2 * X + a) * ty + (2 * Y + b)) * tz + c;
                  for (std::size_t Z = 0; Z < zc; ++Z) acc += d[2 * Z] * s[Z];
                  if (gsrc) {
                    T* gs = gsrc + (X * ny + Y) * nz;
                    for (std::size_t Z = 0; Z < zc; ++Z) gs[Z] += w * d[2 * Z];
                  }
                }
              kernel.grad[widx] += acc;
            }
      }
    }
    kernel.grad_fresh = true;
    if (bias) bias->grad_fresh = true;
  });
}

// ---------------------------------------------------------------------------
// 3×3×3 convolution (baseline)

namespace {

// Output indices Q in [0, m) whose tap s*Q + k - 1 lands inside [0, n).
inline std::pair<long, long> tap_range(long n, long m, long k, long s) {
  const long lo = (k == 0) ? 1 : 0;
  const long hi = (n - k >= 0) ? std::min((n - k) / s, m - 1) : -1;
  return {lo, hi};
}

}  // namespace

template <class T>
Var conv3x3(Tape<T>& tape, Var v, Parameter<T>& kernel, Parameter<T>* bias, int stride) {
  const Field<T>& in = tape.value(v);
  if (stride != 1 && stride != 2) throw ShapeError("conv3x3: stride must be 1 or 2");
  if (kernel.shape.size() != 5 || kernel.shape[1] != in.channels() || kernel.shape[2] != 3 || kernel.shape[3] != 3 ||
      kernel.shape[4] != 3) {
    throw ShapeError("conv3x3: kernel must be (d_out, d_in, 3, 3, 3) with d_in = input channels");
  }
  const std::size_t d_out = kernel.shape[0], d_in = kernel.shape[1];
  if (bias) require_param_shape(bias->shape, {d_out}, "conv3x3");
  const long s = stride;
  const long nx = static_cast<long>(in.nx()), ny = static_cast<long>(in.ny()), nz = static_cast<long>(in.nz());
  const long mx = (nx - 1) / s + 1, my = (ny - 1) / s + 1, mz = (nz - 1) / s + 1;
  Field<T> out(d_out, mx, my, mz);

  parallel_for(d_out, [&](std::size_t o) {
    auto och = out.channel(o);
    std::fill(och.begin(), och.end(), bias ? bias->value[o] : T(0));
    for (std::size_t i = 0; i < d_in; ++i) {
      const T* src = in.channel(i).data();
      for (long a = 0; a < 3; ++a) {
        const auto [xlo, xhi] = tap_range(nx, mx, a, s);
        for (long b = 0; b < 3; ++b) {
          const auto [ylo, yhi] = tap_range(ny, my, b, s);
          for (long c = 0; c < 3; ++c) {
            const auto [zlo, zhi] = tap_range(nz, mz, c, s);
            const T w = kernel.value[((o * d_in + i) * 3 + a) * 9 + b * 3 + c];
            for (long X = xlo; X <= xhi; ++X)
              for (long Y = ylo; Y <= yhi; ++Y) {
                const T* sp = src + ((s * X + a - 1) * ny + (s * Y + b - 1)) * nz + (c - 1);
                T* d = och.data() + (X * my + Y) * mz;
                for (long Z = zlo; Z <= zhi; ++Z) d[Z] += w * sp[s * Z];
              }
          }
        }
      }
    }
  });
  if (!tape.recording()) return tape.record(std::move(out), nullptr);

  return tape.record(std::move(out), [v, &kernel, bias, d_in, d_out, s](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    const Field<T>& x = t.value(v);
    const long nx = static_cast<long>(x.nx()), ny = static_cast<long>(x.ny()), nz = static_cast<long>(x.nz());
    const long mx = static_cast<long>(g.nx()), my = static_cast<long>(g.ny()), mz = static_cast<long>(g.nz());
    const bool want_input = t.needs_grad(v);
    Field<T>* gx = want_input ? &t.grad(v) : nullptr;
    for (std::size_t o = 0; o < d_out; ++o) {
      if (!bias) break;
      const T* go = g.channel(o).data();
      T acc = 0;
      for (std::size_t k = 0; k < g.voxels(); ++k) acc += go[k];
      bias->grad[o] += acc;
    }
    for (std::size_t i = 0; i < d_in; ++i) {
      const T* src = x.channel(i).data();
      T* gsrc = want_input ? gx->channel(i).data() : nullptr;
      for (std::size_t o = 0; o < d_out; ++o) {
        const T* go = g.channel(o).data();
        for (long a = 0; a < 3; ++a) {
          const auto [xlo, xhi] = tap_range(nx, mx, a, s);
          for (long b = 0; b < 3; ++b) {
            const auto [ylo, yhi] = tap_range(ny, my, b, s);
            for (long c = 0; c < 3; ++c) {
              const auto [zlo, zhi] = tap_range(nz, mz, c, s);
              const std::size_t widx = ((o * d_in + i) * 3 + a) * 9 + b * 3 + c;
              const T w = kernel.value[widx];
              T acc = 0;
              for (long X = xlo; X <= xhi; ++X)
                for (long Y = ylo; Y <= yhi; ++Y) {
                  const long base = ((s * X + a - 1) * ny + (s * Y + b - 1)) * nz + (c - 1);
                  const T* d = go + (X * my + Y) * mz;
                  const T* sp = src + base;
                  for (long Z = zlo; Z <= zhi; ++Z) acc += d[Z] * sp[s * Z];
                  if (gsrc) {
                    T* gp = gsrc + base;
                    for (long Z = zlo; Z <= zhi; ++Z) gp[s * Z] += w * d[Z];
                  }
                }
              kernel.grad[widx] += acc;
            }
          }
        }
      }
    }
    kernel.grad_fresh = true;
    if (bias) bias->grad_fresh = true;
  });
}

// ---------------------------------------------------------------------------
// normalization and activations

template <class T>
Var layer_norm(Tape<T>& tape, Var v, Parameter<T>& gamma, Parameter<T>& beta, T eps) {
  const Field<T>& in = tape.value(v);
  const std::size_t d = in.channels();
  require_param_shape(gamma.shape, {d}, "layer_norm");
  require_param_shape(beta.shape, {d}, "layer_norm");
  if (in.size() < 2) throw ShapeError("layer_norm: needs more than one element");
  const std::size_t count = in.size();
  T mu = 0;
  for (std::size_t k = 0; k < count; ++k) mu += in[k];
  mu /= static_cast<T>(count);
  T var = 0;
  for (std::size_t k = 0; k < count; ++k) var += (in[k] - mu) * (in[k] - mu);
  var /= static_cast<T>(count);
  const T inv = T(1) / std::sqrt(var + eps);

  Field<T> xhat(in.shape());
  Field<T> out(in.shape());
  const std::size_t nv = in.voxels();
  for (std::size_t c = 0; c < d; ++c) {
    const T* src = in.channel(c).data();
    T* xh = xhat.channel(c).data();
    T* dst = out.channel(c).data();
    const T g = gamma.value[c], b = beta.value[c];
    for (std::size_t k = 0; k < nv; ++k) {
      xh[k] = (src[k] - mu) * inv;
      dst[k] = g * xh[k] + b;
    }
  }
  if (!tape.recording()) return tape.record(std::move(out), nullptr);

  return tape.record(std::move(out), [v, &gamma, &beta, inv, xhat = std::move(xhat)](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    const std::size_t d = g.channels(), nv = g.voxels(), count = g.size();
    T mean_gx = 0, mean_gx_xhat = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const T* gc = g.channel(c).data();
      const T* xh = xhat.channel(c).data();
      T sg = 0, sgx = 0;
      for (std::size_t k = 0; k < nv; ++k) {
        sg += gc[k];
        sgx += gc[k] * xh[k];
      }
      gamma.grad[c] += sgx;
      beta.grad[c] += sg;
      mean_gx += gamma.value[c] * sg;
      mean_gx_xhat += gamma.value[c] * sgx;
    }
    gamma.grad_fresh = beta.grad_fresh = true;
    if (!t.needs_grad(v)) return;
    mean_gx /= static_cast<T>(count);
    mean_gx_xhat /= static_cast<T>(count);
    Field<T>& gx = t.grad(v);
    for (std::size_t c = 0; c < d; ++c) {
      const T* gc = g.channel(c).data();
      const T* xh = xhat.channel(c).data();
      T* dst = gx.channel(c).data();
      const T gm = gamma.value[c];
      for (std::size_t k = 0; k < nv; ++k) dst[k] += inv * (gm * gc[k] - mean_gx - xh[k] * mean_gx_xhat);
    }
  });
}

template <class T>
Field<T> selu_value(const Field<T>& v) {
  Field<T> out(v.shape());
  const T lam = T(kSeluLambda), la = T(kSeluLambda * kSeluAlpha);
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k] > T(0) ? lam * v[k] : la * std::expm1(v[k]);
  return out;
}

template <class T>
Var selu(Tape<T>& tape, Var v) {
  Field<T> out = selu_value(tape.value(v));
  return tape.record(std::move(out), [v](Tape<T>& t, Var self) {
    if (!t.needs_grad(v)) return;
    const Field<T>& g = t.grad(self);
    const Field<T>& x = t.value(v);
    Field<T>& gx = t.grad(v);
    const T lam = T(kSeluLambda), la = T(kSeluLambda * kSeluAlpha);
    for (std::size_t k = 0; k < x.size(); ++k) gx[k] += g[k] * (x[k] > T(0) ? lam : la * std::exp(x[k]));
  });
}

template <class T>
Field<T> softmax_value(const Field<T>& v) {
  const std::size_t l = v.channels(), nv = v.voxels();
  if (l < 2) throw ShapeError("softmax_channels: needs at least 2 channels");
  Field<T> out(v.shape());
  std::vector<T> tmp(l);
  for (std::size_t k = 0; k < nv; ++k) {
    T m = v[k];
    for (std::size_t c = 1; c < l; ++c) m = std::max(m, v[c * nv + k]);
    T s = 0;
    for (std::size_t c = 0; c < l; ++c) {
      tmp[c] = std::exp(v[c * nv + k] - m);
      s += tmp[c];
    }
    const T inv = T(1) / s;
    for (std::size_t c = 0; c < l; ++c) out[c * nv + k] = tmp[c] * inv;
  }
  return out;
}

template <class T>
Var softmax_channels(Tape<T>& tape, Var v) {
  Field<T> out = softmax_value(tape.value(v));
  return tape.record(std::move(out), [v](Tape<T>& t, Var self) {
    if (!t.needs_grad(v)) return;
    const Field<T>& g = t.grad(self);
    const Field<T>& s = t.value(self);
    Field<T>& gx = t.grad(v);
    const std::size_t l = s.channels(), nv = s.voxels();
    for (std::size_t k = 0; k < nv; ++k) {
      T dotp = 0;
      for (std::size_t c = 0; c < l; ++c) dotp += g[c * nv + k] * s[c * nv + k];
      for (std::size_t c = 0; c < l; ++c) gx[c * nv + k] += s[c * nv + k] * (g[c * nv + k] - dotp);
    }
  });
}

template <class T>
Var residual_add(Tape<T>& tape, Var a, Var b) {
  Field<T> out = add(tape.value(a), tape.value(b));
  return tape.record(std::move(out), [a, b](Tape<T>& t, Var self) {
    const Field<T>& g = t.grad(self);
    if (t.needs_grad(a)) axpy(T(1), g, t.grad(a));
    if (t.needs_grad(b)) axpy(T(1), g, t.grad(b));
  });
}

template <class T>
Var weighted_sum(Tape<T>& tape, Var v, const Field<T>& weights) {
  Field<T> out(1, 1, 1, 1);
  out[0] = dot(tape.value(v), weights);
  return tape.record(std::move(out), [v, weights](Tape<T>& t, Var self) {
    if (t.needs_grad(v)) axpy(t.grad(self)[0], weights, t.grad(v));
  });
}

template <class T>
Var sum_all(Tape<T>& tape, Var v) {
  Field<T> out(1, 1, 1, 1);
  out[0] = sum(tape.value(v));
  return tape.record(std::move(out), [v](Tape<T>& t, Var self) {
    if (!t.needs_grad(v)) return;
    const T g = t.grad(self)[0];
    Field<T>& gx = t.grad(v);
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g;
  });
}

template <class T>
Var mean_of(Tape<T>& tape, std::span<const Var> scalars) {
  if (scalars.empty()) throw ShapeError("mean_of: no inputs");
  Field<T> out(1, 1, 1, 1);
  for (auto s : scalars) {
    if (tape.value(s).size() != 1) throw ShapeError("mean_of: inputs must be scalars");
    out[0] += tape.value(s)[0];
  }
  out[0] /= static_cast<T>(scalars.size());
  std::vector<Var> ins(scalars.begin(), scalars.end());
  return tape.record(std::move(out), [ins](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0] / static_cast<T>(ins.size());
    for (auto s : ins)
      if (t.needs_grad(s)) t.grad(s)[0] += g;
  });
}

#define FNOSEG_INSTANTIATE(T)                                                                           \
  template Var pointwise_linear(Tape<T>&, Var, Parameter<T>&, Parameter<T>*);                           \
  template Var spectral_conv_shared(Tape<T>&, Var, Parameter<T>&, Parameter<T>&, const ModeMask&);      \
  template Var spectral_conv_permode(Tape<T>&, Var, Parameter<T>&, Parameter<T>&, const ModeMask&);     \
  template Var conv3_down(Tape<T>&, Var, Parameter<T>&, Parameter<T>*);                                 \
  template Var tconv3_up(Tape<T>&, Var, Parameter<T>&, Parameter<T>*, const std::array<std::size_t, 3>&); \
  template Var conv3x3(Tape<T>&, Var, Parameter<T>&, Parameter<T>*, int);                               \
  template Var layer_norm(Tape<T>&, Var, Parameter<T>&, Parameter<T>&, T);                              \
  template Var selu(Tape<T>&, Var);                                                                     \
  template Var softmax_channels(Tape<T>&, Var);                                                         \
  template Var residual_add(Tape<T>&, Var, Var);                                                        \
  template Var weighted_sum(Tape<T>&, Var, const Field<T>&);                                            \
  template Var sum_all(Tape<T>&, Var);                                                                  \
  template Var mean_of(Tape<T>&, std::span<const Var>);                                                 \
  template Field<T> selu_value(const Field<T>&);                                                        \
  template Field<T> softmax_value(const Field<T>&);                                                     \
  template Field<T> pad_to_even(const Field<T>&);

FNOSEG_INSTANTIATE(float)
FNOSEG_INSTANTIATE(double)
#undef FNOSEG_INSTANTIATE

}  // namespace fnoseg
