#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/rng.hpp"

namespace cotrain::nn {

template <typename T> struct ParamBlob {
  std::string name;
  std::vector<int> dims;
  std::vector<T> values;
};

/// Ordered collection of named weight arrays. Gradients and optimizer buffers
/// use the same layout (see zeros_like).
template <typename T> class ParamSet {
public:
  std::size_t add(std::string name, std::vector<int> dims, T fill = T(0)) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    blobs_.push_back({std::move(name), std::move(dims), std::vector<T>(n, fill)});
    return blobs_.size() - 1;
  }

  std::size_t count() const noexcept { return blobs_.size(); }
  ParamBlob<T>& operator[](std::size_t i) noexcept { return blobs_[i]; }
  const ParamBlob<T>& operator[](std::size_t i) const noexcept { return blobs_[i]; }
  std::span<T> values(std::size_t i) noexcept { return blobs_[i].values; }
  std::span<const T> values(std::size_t i) const noexcept { return blobs_[i].values; }
  auto begin() noexcept { return blobs_.begin(); }
  auto end() noexcept { return blobs_.end(); }
  auto begin() const noexcept { return blobs_.begin(); }
  auto end() const noexcept { return blobs_.end(); }

  const ParamBlob<T>* find(const std::string& name) const {
    for (const auto& b : blobs_)
      if (b.name == name) return &b;
    return nullptr;
  }

  std::size_t total_size() const noexcept {
    std::size_t n = 0;
    for (const auto& b : blobs_) n += b.values.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& b : out.blobs_) std::fill(b.values.begin(), b.values.end(), T(0));
    return out;
  }

  void set_zero() {
    for (auto& b : blobs_) std::fill(b.values.begin(), b.values.end(), T(0));
  }

  bool same_layout(const ParamSet& o) const noexcept {
    if (o.blobs_.size() != blobs_.size()) return false;
    for (std::size_t i = 0; i < blobs_.size(); ++i)
      if (blobs_[i].name != o.blobs_[i].name || blobs_[i].values.size() != o.blobs_[i].values.size()) return false;
    return true;
  }

  bool all_finite() const noexcept {
    for (const auto& b : blobs_)
      for (const T& v : b.values)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Flat access across blobs, in blob order.
  T& flat(std::size_t k) {
    for (auto& b : blobs_) {
      if (k < b.values.size()) return b.values[k];
      k -= b.values.size();
    }
    throw Error("ParamSet::flat index out of range");
  }

  template <typename U> ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& b : blobs_) {
      const auto idx = out.add(b.name, b.dims);
      std::copy(b.values.begin(), b.values.end(), out[idx].values.begin());
    }
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.blobs_.size() != b.blobs_.size()) return false;
    for (std::size_t i = 0; i < a.blobs_.size(); ++i)
      if (a.blobs_[i].name != b.blobs_[i].name || a.blobs_[i].dims != b.blobs_[i].dims ||
          a.blobs_[i].values != b.blobs_[i].values)
        return false;
    return true;
  }

private:
  std::vector<ParamBlob<T>> blobs_;
};

template <typename T> void fill_normal(std::span<T> out, double stddev, Rng& rng) {
  for (auto& v : out) v = static_cast<T>(stddev * rng.normal());
}

// ---------------------------------------------------------------------------
// 3x3x3 convolution, stride 1, zero padding 1. Weights are [cout][cin][27].
// ---------------------------------------------------------------------------

namespace detail {

template <typename T> std::vector<T> pad1(const Tensor<T>& in) {
  const Shape3 s = in.shape();
  const int ph = s.h + 2, pw = s.w + 2;
  const std::size_t plane = std::size_t(ph) * pw, chan = std::size_t(s.d + 2) * plane;
  std::vector<T> out(chan * in.channels(), T(0));
  for (int c = 0; c < in.channels(); ++c)
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.h; ++y) {
        const T* src = in.data() + c * in.voxels() + s.index(z, y, 0);
        std::copy_n(src, s.w, out.data() + c * chan + (z + 1) * plane + (y + 1) * pw + 1);
      }
  return out;
}

/// Direct convolution over a zero-padded input. Each output plane is computed
/// as one flat run over the padded row stride; the two pad columns per row are
/// computed and discarded, which keeps the inner loop long for small widths.
template <typename T>
void conv3_rows(const T* __restrict pad, int cin, Shape3 s, const T* __restrict w, int cout, T* __restrict out) {
  const int pw = s.w + 2;
  const std::size_t plane = std::size_t(s.h + 2) * pw, chan = std::size_t(s.d + 2) * plane;
  const std::size_t run = std::size_t(s.h - 1) * pw + s.w;
  const std::size_t wstride = std::size_t(cin) * 27;
  std::vector<T> acc_buf(std::size_t(cout) * run);
  T* __restrict acc = acc_buf.data();
  for (int z = 0; z < s.d; ++z) {
    std::fill(acc_buf.begin(), acc_buf.end(), T(0));
    for (int c = 0; c < cin; ++c)
      for (int kz = 0; kz < 3; ++kz) {
        // The nine in-plane taps are fused so each accumulator is loaded once per plane.
        const T* __restrict src = pad + c * chan + (z + kz) * plane;
        for (int o = 0; o < cout; ++o) {
          const T* wk = w + o * wstride + std::size_t(c) * 27 + kz * 9;
          const T w0 = wk[0], w1 = wk[1], w2 = wk[2], w3 = wk[3], w4 = wk[4], w5 = wk[5], w6 = wk[6], w7 = wk[7],
                  w8 = wk[8];
          const T* __restrict r0 = src;
          const T* __restrict r1 = src + pw;
          const T* __restrict r2 = src + 2 * pw;
          T* __restrict a = acc + std::size_t(o) * run;
          for (std::size_t i = 0; i < run; ++i)
            a[i] += w0 * r0[i] + w1 * r0[i + 1] + w2 * r0[i + 2] + w3 * r1[i] + w4 * r1[i + 1] + w5 * r1[i + 2] +
                    w6 * r2[i] + w7 * r2[i + 1] + w8 * r2[i + 2];
        }
      }
    for (int o = 0; o < cout; ++o)
      for (int y = 0; y < s.h; ++y)
        std::copy_n(acc + std::size_t(o) * run + std::size_t(y) * pw, s.w, out + o * s.voxels() + s.index(z, y, 0));
  }
}

}  // namespace detail

template <typename T> Tensor<T> conv3_forward(const Tensor<T>& in, std::span<const T> w, int cout) {
  COTRAIN_REQUIRE(w.size() == std::size_t(cout) * in.channels() * 27, "conv3 weight size mismatch");
  Tensor<T> out(cout, in.shape());
  const auto pad = detail::pad1(in);
  detail::conv3_rows(pad.data(), in.channels(), in.shape(), w.data(), cout, out.data());
  return out;
}

/// Accumulates the weight gradient into dw and, if din is non-null, writes the input gradient.
template <typename T>
void conv3_backward(const Tensor<T>& in, std::span<const T> w, const Tensor<T>& dout, std::span<T> dw, Tensor<T>* din) {
  const int cin = in.channels(), cout = dout.channels();
  const Shape3 s = in.shape();
  const int pw = s.w + 2;
  const std::size_t plane = std::size_t(s.h + 2) * pw, chan = std::size_t(s.d + 2) * plane;
  {
    // One dot product per (output, input, tap) over the whole volume: dout is
    // re-laid out on the padded strides with zeros in the pad rows and columns.
    const auto pad = detail::pad1(in);
    const std::size_t run = std::size_t(s.d - 1) * plane + std::size_t(s.h - 1) * pw + s.w;
    std::vector<T> gs(std::size_t(s.d) * plane, T(0));
    for (int o = 0; o < cout; ++o) {
      for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
          std::copy_n(dout.data() + o * s.voxels() + s.index(z, y, 0), s.w, gs.data() + z * plane + y * pw);
      const T* __restrict g = gs.data();
      for (int c = 0; c < cin; ++c) {
        T* dst = dw.data() + (std::size_t(o) * cin + c) * 27;
        for (int k = 0; k < 27; ++k) {
          const T* __restrict src = pad.data() + c * chan + (k / 9) * plane + ((k / 3) % 3) * pw + k % 3;
          T sum = T(0);
#pragma omp simd reduction(+ : sum)
          for (std::size_t i = 0; i < run; ++i) sum += g[i] * src[i];
          dst[k] += sum;
        }
      }
    }
  }
  if (din) {
    // Input gradient is a convolution of dout with the spatially flipped, channel-transposed kernel.
    std::vector<T> flipped(w.size());
    for (int o = 0; o < cout; ++o)
      for (int c = 0; c < cin; ++c)
        for (int k = 0; k < 27; ++k)
          flipped[(std::size_t(c) * cout + o) * 27 + k] = w[(std::size_t(o) * cin + c) * 27 + (26 - k)];
    *din = Tensor<T>(cin, s);
    const auto pad = detail::pad1(dout);
    detail::conv3_rows(pad.data(), cout, s, flipped.data(), cin, din->data());
  }
}

// ---------------------------------------------------------------------------
// 2x2x2 stride-2 convolution (downsampling). Weights are [cout][cin][8].
// ---------------------------------------------------------------------------

template <typename T> Tensor<T> down2_forward(const Tensor<T>& in, std::span<const T> w, int cout) {
  const Shape3 si = in.shape();
  COTRAIN_REQUIRE(si.d % 2 == 0 && si.h % 2 == 0 && si.w % 2 == 0, "down2 needs even spatial dims, got ",
                  to_string(si));
  const int cin = in.channels();
  const Shape3 so{si.d / 2, si.h / 2, si.w / 2};
  Tensor<T> out(cout, so);
  for (int c = 0; c < cin; ++c)
    for (int k = 0; k < 8; ++k) {
      const int kz = k >> 2, ky = (k >> 1) & 1, kx = k & 1;
      for (int o = 0; o < cout; ++o) {
        const T wv = w[(std::size_t(o) * cin + c) * 8 + k];
        for (int z = 0; z < so.d; ++z)
          for (int y = 0; y < so.h; ++y) {
            const T* src = in.data() + c * in.voxels() + si.index(2 * z + kz, 2 * y + ky, kx);
            T* dst = out.data() + o * out.voxels() + so.index(z, y, 0);
            for (int x = 0; x < so.w; ++x) dst[x] += wv * src[2 * x];
          }
      }
    }
  return out;
}

template <typename T>
void down2_backward(const Tensor<T>& in, std::span<const T> w, const Tensor<T>& dout, std::span<T> dw, Tensor<T>* din) {
  const Shape3 si = in.shape(), so = dout.shape();
  const int cin = in.channels(), cout = dout.channels();
  if (din) *din = Tensor<T>(cin, si);
  for (int c = 0; c < cin; ++c)
    for (int k = 0; k < 8; ++k) {
      const int kz = k >> 2, ky = (k >> 1) & 1, kx = k & 1;
      for (int o = 0; o < cout; ++o) {
        const std::size_t wi = (std::size_t(o) * cin + c) * 8 + k;
        const T wv = w[wi];
        T acc = T(0);
        for (int z = 0; z < so.d; ++z)
          for (int y = 0; y < so.h; ++y) {
            const std::size_t src_off = c * in.voxels() + si.index(2 * z + kz, 2 * y + ky, kx);
            const T* src = in.data() + src_off;
            const T* g = dout.data() + o * dout.voxels() + so.index(z, y, 0);
            for (int x = 0; x < so.w; ++x) acc += g[x] * src[2 * x];
            if (din) {
              T* dsrc = din->data() + src_off;
              for (int x = 0; x < so.w; ++x) dsrc[2 * x] += wv * g[x];
            }
          }
        dw[wi] += acc;
      }
    }
}

// ---------------------------------------------------------------------------
// 2x2x2 stride-2 transposed convolution (upsampling). Weights are [cin][cout][8].
// ---------------------------------------------------------------------------

template <typename T> Tensor<T> up2_forward(const Tensor<T>& in, std::span<const T> w, int cout) {
  const Shape3 si = in.shape();
  const int cin = in.channels();
  const Shape3 so{si.d * 2, si.h * 2, si.w * 2};
  Tensor<T> out(cout, so);
  for (int c = 0; c < cin; ++c)
    for (int o = 0; o < cout; ++o)
      for (int k = 0; k < 8; ++k) {
        const int kz = k >> 2, ky = (k >> 1) & 1, kx = k & 1;
        const T wv = w[(std::size_t(c) * cout + o) * 8 + k];
        for (int z = 0; z < si.d; ++z)
          for (int y = 0; y < si.h; ++y) {
            const T* src = in.data() + c * in.voxels() + si.index(z, y, 0);
            T* dst = out.data() + o * out.voxels() + so.index(2 * z + kz, 2 * y + ky, kx);
            for (int x = 0; x < si.w; ++x) dst[2 * x] += wv * src[x];
          }
      }
  return out;
}

template <typename T>
void up2_backward(const Tensor<T>& in, std::span<const T> w, const Tensor<T>& dout, std::span<T> dw, Tensor<T>* din) {
  const Shape3 si = in.shape(), so = dout.shape();
  const int cin = in.channels(), cout = dout.channels();
  if (din) *din = Tensor<T>(cin, si);
  for (int c = 0; c < cin; ++c)
    for (int o = 0; o < cout; ++o)
      for (int k = 0; k < 8; ++k) {
        const int kz = k >> 2, ky = (k >> 1) & 1, kx = k & 1;
        const std::size_t wi = (std::size_t(c) * cout + o) * 8 + k;
        const T wv = w[wi];
        T acc = T(0);
        for (int z = 0; z < si.d; ++z)
          for (int y = 0; y < si.h; ++y) {
            const T* src = in.data() + c * in.voxels() + si.index(z, y, 0);
            const T* g = dout.data() + o * dout.voxels() + so.index(2 * z + kz, 2 * y + ky, kx);
            for (int x = 0; x < si.w; ++x) acc += g[2 * x] * src[x];
            if (din) {
              T* dsrc = din->data() + c * in.voxels() + si.index(z, y, 0);
              for (int x = 0; x < si.w; ++x) dsrc[x] += wv * g[2 * x];
            }
          }
        dw[wi] += acc;
      }
}

// ---------------------------------------------------------------------------
// 1x1x1 convolution with bias. Weights are [cout][cin].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv1_forward(const Tensor<T>& in, std::span<const T> w, std::span<const T> bias, int cout) {
  const int cin = in.channels();
  const std::size_t n = in.voxels();
  Tensor<T> out(cout, in.shape());
  for (int o = 0; o < cout; ++o) {
    T* dst = out.data() + o * n;
    std::fill_n(dst, n, bias[o]);
    for (int c = 0; c < cin; ++c) {
      const T wv = w[std::size_t(o) * cin + c];
      const T* src = in.data() + c * n;
      for (std::size_t v = 0; v < n; ++v) dst[v] += wv * src[v];
    }
  }
  return out;
}

template <typename T>
void conv1_backward(const Tensor<T>& in, std::span<const T> w, const Tensor<T>& dout, std::span<T> dw,
                    std::span<T> dbias, Tensor<T>* din) {
  const int cin = in.channels(), cout = dout.channels();
  const std::size_t n = in.voxels();
  if (din) *din = Tensor<T>(cin, in.shape());
  for (int o = 0; o < cout; ++o) {
    const T* g = dout.data() + o * n;
    T gb = T(0);
    for (std::size_t v = 0; v < n; ++v) gb += g[v];
    dbias[o] += gb;
    for (int c = 0; c < cin; ++c) {
      const T* src = in.data() + c * n;
      T acc = T(0);
      for (std::size_t v = 0; v < n; ++v) acc += g[v] * src[v];
      dw[std::size_t(o) * cin + c] += acc;
      if (din) {
        const T wv = w[std::size_t(o) * cin + c];
        T* d = din->data() + c * n;
        for (std::size_t v = 0; v < n; ++v) d[v] += wv * g[v];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Group normalization (per sample, so it works at any batch size).
// ---------------------------------------------------------------------------

template <typename T> struct GroupStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

inline constexpr double kNormEps = 1e-5;

/// y = gamma * (x - mean_g) / sqrt(var_g + eps) + beta. In affine_only mode the
/// normalization is skipped (y = gamma * x + beta).
template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta, int groups,
                             bool affine_only, GroupStats<T>* stats) {
  const int ch = x.channels();
  COTRAIN_REQUIRE(groups > 0 && ch % groups == 0, "channels ", ch, " not divisible into ", groups, " groups");
  const int per = ch / groups;
  const std::size_t n = x.voxels();
  Tensor<T> y(ch, x.shape());
  std::vector<T> mean(groups, T(0)), rstd(groups, T(1));
  for (int g = 0; g < groups; ++g) {
    if (!affine_only) {
      double s = 0.0, s2 = 0.0;
      const T* src = x.data() + std::size_t(g) * per * n;
      const std::size_t m = std::size_t(per) * n;
      for (std::size_t i = 0; i < m; ++i) s += double(src[i]);
      const double mu = s / double(m);
      for (std::size_t i = 0; i < m; ++i) {
        const double d = double(src[i]) - mu;
        s2 += d * d;
      }
      mean[g] = T(mu);
      rstd[g] = T(1.0 / std::sqrt(s2 / double(m) + kNormEps));
    }
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const T a = gamma[c] * rstd[g], b = beta[c] - gamma[c] * rstd[g] * mean[g];
      const T* src = x.data() + c * n;
      T* dst = y.data() + c * n;
      for (std::size_t v = 0; v < n; ++v) dst[v] = a * src[v] + b;
    }
  }
  if (stats) *stats = {std::move(mean), std::move(rstd)};
  return y;
}

template <typename T>
Tensor<T> group_norm_backward(const Tensor<T>& x, std::span<const T> gamma, const GroupStats<T>& st,
                              const Tensor<T>& dy, int groups, bool affine_only, std::span<T> dgamma,
                              std::span<T> dbeta) {
  const int ch = x.channels(), per = ch / groups;
  const std::size_t n = x.voxels();
  Tensor<T> dx(ch, x.shape());
  for (int g = 0; g < groups; ++g) {
    const T mu = st.mean[g], rs = st.rstd[g];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const T* xs = x.data() + c * n;
      const T* gs = dy.data() + c * n;
      double dg = 0.0, db = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        const double xhat = double(xs[v] - mu) * double(rs);
        dg += double(gs[v]) * xhat;
        db += double(gs[v]);
      }
      dgamma[c] += T(dg);
      dbeta[c] += T(db);
      sum_dxhat += double(gamma[c]) * db;
      sum_dxhat_xhat += double(gamma[c]) * dg;
    }
    if (affine_only) {
      for (int c = g * per; c < (g + 1) * per; ++c) {
        const T* gs = dy.data() + c * n;
        T* d = dx.data() + c * n;
        for (std::size_t v = 0; v < n; ++v) d[v] = gamma[c] * gs[v];
      }
      continue;
    }
    const double m = double(per) * double(n);
    const double mean_dxhat = sum_dxhat / m, mean_dxhat_xhat = sum_dxhat_xhat / m;
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const T* xs = x.data() + c * n;
      const T* gs = dy.data() + c * n;
      T* d = dx.data() + c * n;
      const double gm = double(gamma[c]);
      for (std::size_t v = 0; v < n; ++v) {
        const double xhat = double(xs[v] - mu) * double(rs);
        d[v] = T(double(rs) * (gm * double(gs[v]) - mean_dxhat - xhat * mean_dxhat_xhat));
      }
    }
  }
  return dx;
}

template <typename T> void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.values()) v = v > T(0) ? v : T(0);
}

/// Multiplies dy by the ReLU derivative evaluated at the pre-activation.
template <typename T> void relu_backward_inplace(const Tensor<T>& pre, Tensor<T>& dy) {
  auto g = dy.values();
  auto p = pre.values();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(p[i] > T(0))) g[i] = T(0);
}

template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  COTRAIN_REQUIRE(a.shape() == b.shape(), "concat shape mismatch");
  std::vector<T> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return {a.channels() + b.channels(), a.shape(), std::move(v)};
}

template <typename T> std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int first) {
  const std::size_t cut = std::size_t(first) * x.voxels();
  Tensor<T> a(first, x.shape(), std::vector<T>(x.values().begin(), x.values().begin() + cut));
  Tensor<T> b(x.channels() - first, x.shape(), std::vector<T>(x.values().begin() + cut, x.values().end()));
  return {std::move(a), std::move(b)};
}

template <typename T> void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

}  // namespace cotrain::nn
