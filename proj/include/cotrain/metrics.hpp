#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cotrain/binio.hpp"
#include "cotrain/core.hpp"

namespace cotrain {

// Masks are label volumes; every nonzero class counts as foreground.

namespace detail {
inline void require_same_shape(const LabelVolume& a, const LabelVolume& b, const char* what) {
  COTRAIN_REQUIRE(a.shape() == b.shape(), what, ": shape ", to_string(a.shape()), " vs ", to_string(b.shape()));
}
inline std::size_t foreground_count(const LabelVolume& m) { return m.size() - m.count(0); }
}  // namespace detail

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
inline double dice_coeff(const LabelVolume& a, const LabelVolume& b) {
  detail::require_same_shape(a, b, "dice_coeff");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.classes()[i] != 0, y = b.classes()[i] != 0;
    inter += x && y;
    na += x;
    nb += y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

/// |A n B| / |A u B|; 1 when both masks are empty.
inline double jaccard_coeff(const LabelVolume& a, const LabelVolume& b) {
  detail::require_same_shape(a, b, "jaccard_coeff");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.classes()[i] != 0, y = b.classes()[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

/// Foreground voxels with at least one 6-connected background or out-of-bounds neighbour.
inline std::vector<Index3> surface_voxels(const LabelVolume& m) {
  const Shape3 s = m.shape();
  static constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  std::vector<Index3> out;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (m.at(z, y, x) == 0) continue;
        for (const auto& o : kOffsets) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (!s.contains(nz, ny, nx) || m.at(nz, ny, nx) == 0) {
            out.push_back({z, y, x});
            break;
          }
        }
      }
  return out;
}

namespace detail {

/// 1-D squared distance transform by lower envelope of parabolas; entries equal
/// to +inf are treated as non-sites.
inline void edt_1d(std::vector<double>& f, std::vector<double>& out, std::vector<int>& v, std::vector<double>& zb) {
  const int n = int(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    while (k >= 0) {
      const int p = v[k];
      const double s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
      if (s <= zb[k]) --k;
      else break;
    }
    ++k;
    v[k] = q;
    zb[k] = k == 0 ? -inf : ((f[q] + double(q) * q) - (f[v[k - 1]] + double(v[k - 1]) * v[k - 1])) /
                                  (2.0 * q - 2.0 * v[k - 1]);
    zb[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (zb[j + 1] < q) ++j;
    const double d = double(q - v[j]);
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every voxel to the nearest site.
inline std::vector<double> squared_distance_field(Shape3 s, const std::vector<Index3>& sites) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> field(s.voxels(), inf);
  for (const auto& p : sites) field[s.index(p.z, p.y, p.x)] = 0.0;
  const int longest = std::max({s.d, s.h, s.w});
  std::vector<double> f(longest), out(longest), zb(longest + 1);
  std::vector<int> v(longest);
  auto pass = [&](int len, auto index_of, int outer_a, int outer_b) {
    f.resize(len);
    out.resize(len);
    for (int a = 0; a < outer_a; ++a)
      for (int b = 0; b < outer_b; ++b) {
        for (int i = 0; i < len; ++i) f[i] = field[index_of(a, b, i)];
        detail::edt_1d(f, out, v, zb);
        for (int i = 0; i < len; ++i) field[index_of(a, b, i)] = out[i];
      }
  };
  pass(s.w, [&](int z, int y, int x) { return s.index(z, y, x); }, s.d, s.h);
  pass(s.h, [&](int z, int x, int y) { return s.index(z, y, x); }, s.d, s.w);
  pass(s.d, [&](int y, int x, int z) { return s.index(z, y, x); }, s.h, s.w);
  return field;
}

/// Distances from each surface voxel of `from` to the surface of `to`.
inline std::vector<double> directed_surface_distances(const LabelVolume& from, const LabelVolume& to) {
  const auto sf = surface_voxels(from);
  const auto field = squared_distance_field(to.shape(), surface_voxels(to));
  std::vector<double> d;
  d.reserve(sf.size());
  for (const auto& p : sf) d.push_back(std::sqrt(field[to.shape().index(p.z, p.y, p.x)]));
  return d;
}

/// Linear interpolation between order statistics (rank q * (n - 1)).
inline double percentile(std::vector<double> values, double q) {
  COTRAIN_REQUIRE(!values.empty(), "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - double(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

enum class HdVariant {
  Pooled,       ///< one percentile over the union of both directed distance sets
  MaxDirected,  ///< max of the two directed percentiles
};

struct SurfaceMetricOptions {
  HdVariant variant = HdVariant::Pooled;
  /// Value reported when exactly one mask is empty; negative selects the volume diagonal.
  double empty_sentinel = -1.0;
};

struct SurfaceMetric {
  double value = 0.0;
  bool empty_flag = false;
};

namespace detail {

inline std::optional<SurfaceMetric> empty_case(const LabelVolume& a, const LabelVolume& b,
                                               const SurfaceMetricOptions& opt) {
  const bool ea = foreground_count(a) == 0, eb = foreground_count(b) == 0;
  if (!ea && !eb) return std::nullopt;
  if (ea && eb) return SurfaceMetric{0.0, true};
  const Shape3 s = a.shape();
  const double diag = std::sqrt(double(s.d) * s.d + double(s.h) * s.h + double(s.w) * s.w);
  return SurfaceMetric{opt.empty_sentinel >= 0 ? opt.empty_sentinel : diag, true};
}

}  // namespace detail

inline SurfaceMetric hd95_metric(const LabelVolume& a, const LabelVolume& b, const SurfaceMetricOptions& opt = {}) {
  detail::require_same_shape(a, b, "hd95");
  if (auto e = detail::empty_case(a, b, opt)) return *e;
  auto ab = directed_surface_distances(a, b);
  auto ba = directed_surface_distances(b, a);
  if (opt.variant == HdVariant::MaxDirected) return {std::max(percentile(ab, 0.95), percentile(ba, 0.95)), false};
  ab.insert(ab.end(), ba.begin(), ba.end());
  return {percentile(std::move(ab), 0.95), false};
}

inline SurfaceMetric asd_metric(const LabelVolume& a, const LabelVolume& b, const SurfaceMetricOptions& opt = {}) {
  detail::require_same_shape(a, b, "asd");
  if (auto e = detail::empty_case(a, b, opt)) return *e;
  const auto ab = directed_surface_distances(a, b);
  const auto ba = directed_surface_distances(b, a);
  double s = 0.0;
  for (double d : ab) s += d;
  for (double d : ba) s += d;
  return {s / double(ab.size() + ba.size()), false};
}

/// 95th percentile of the pooled symmetric surface distances, in voxels.
inline double hd95(const LabelVolume& a, const LabelVolume& b, const SurfaceMetricOptions& opt = {}) {
  return hd95_metric(a, b, opt).value;
}

/// Mean of the pooled symmetric surface distances, in voxels.
inline double asd(const LabelVolume& a, const LabelVolume& b, const SurfaceMetricOptions& opt = {}) {
  return asd_metric(a, b, opt).value;
}

struct VolumeMetrics {
  std::string id;
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = 0.0;
  double asd = 0.0;
  bool empty_flag = false;
};

struct EvalReport {
  std::vector<VolumeMetrics> volumes;
  VolumeMetrics mean;
};

inline VolumeMetrics evaluate(const LabelVolume& pred, const LabelVolume& gt, std::string id = {},
                              const SurfaceMetricOptions& opt = {}) {
  detail::require_same_shape(pred, gt, "evaluate");
  const auto h = hd95_metric(pred, gt, opt);
  const auto a = asd_metric(pred, gt, opt);
  return {std::move(id), dice_coeff(pred, gt), jaccard_coeff(pred, gt), h.value, a.value,
          h.empty_flag || a.empty_flag};
}

inline EvalReport aggregate(std::vector<VolumeMetrics> volumes) {
  EvalReport r;
  r.volumes = std::move(volumes);
  r.mean.id = "mean";
  if (r.volumes.empty()) return r;
  for (const auto& v : r.volumes) {
    r.mean.dice += v.dice;
    r.mean.jaccard += v.jaccard;
    r.mean.hd95 += v.hd95;
    r.mean.asd += v.asd;
    r.mean.empty_flag = r.mean.empty_flag || v.empty_flag;
  }
  const double n = double(r.volumes.size());
  r.mean.dice /= n;
  r.mean.jaccard /= n;
  r.mean.hd95 /= n;
  r.mean.asd /= n;
  return r;
}

inline std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// CSV with columns id,dice,jaccard,hd95,asd,empty_flag; the last row holds the means.
inline std::string eval_report_csv(const EvalReport& r) {
  std::string out = "id,dice,jaccard,hd95,asd,empty_flag\n";
  auto row = [&](const VolumeMetrics& v) {
    out += v.id + "," + format_metric(v.dice) + "," + format_metric(v.jaccard) + "," + format_metric(v.hd95) + "," +
           format_metric(v.asd) + "," + (v.empty_flag ? "1" : "0") + "\n";
  };
  for (const auto& v : r.volumes) row(v);
  row(r.mean);
  return out;
}

inline void write_eval_report(const EvalReport& r, const std::filesystem::path& path) {
  binio::write_text_atomic(path, eval_report_csv(r));
}

}  // namespace cotrain
