#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/dataio.hpp"
#include "cotrain/losses.hpp"

namespace cotrain {

struct SlidingWindowSpec {
  Shape3 patch;
  Shape3 stride;

  void validate() const {
    for (int a = 0; a < 3; ++a)
      COTRAIN_REQUIRE(stride[a] >= 1 && stride[a] <= patch[a], "stride must satisfy 1 <= stride <= patch on every axis");
  }
};

/// Origins along one axis: 0, s, 2s, ... while the window fits, then one final
/// origin clamped so the last window touches the far boundary.
inline std::vector<int> axis_origins(int volume, int patch, int stride) {
  COTRAIN_REQUIRE(patch <= volume, "patch ", patch, " larger than volume ", volume);
  COTRAIN_REQUIRE(stride >= 1, "stride must be positive");
  std::vector<int> out;
  for (int o = 0; o + patch <= volume; o += stride) out.push_back(o);
  if (out.back() + patch < volume) out.push_back(volume - patch);
  return out;
}

/// Regular grid of window origins in z-major order.
inline std::vector<Index3> window_origins(Shape3 volume, const SlidingWindowSpec& spec) {
  spec.validate();
  for (int a = 0; a < 3; ++a)
    COTRAIN_REQUIRE(spec.patch[a] <= volume[a], "patch ", to_string(spec.patch), " larger than volume ",
                    to_string(volume));
  const auto zs = axis_origins(volume.d, spec.patch.d, spec.stride.d);
  const auto ys = axis_origins(volume.h, spec.patch.h, spec.stride.h);
  const auto xs = axis_origins(volume.w, spec.patch.w, spec.stride.w);
  std::vector<Index3> out;
  out.reserve(zs.size() * ys.size() * xs.size());
  for (int z : zs)
    for (int y : ys)
      for (int x : xs) out.push_back({z, y, x});
  return out;
}

/// Maps a patch to logits with the patch's spatial shape.
using ModelForward = std::function<LogitVolume<float>(const Volume&)>;

/// Averages per-window softmax probabilities over every window covering a voxel.
/// `order`, when given, overrides the evaluation order of the windows.
inline ProbVolume<float> sliding_window_predict(const ModelForward& model, const Volume& volume,
                                                const SlidingWindowSpec& spec,
                                                const std::vector<Index3>* order = nullptr) {
  const auto origins = order ? *order : window_origins(volume.shape(), spec);
  const Shape3 vs = volume.shape(), ps = spec.patch;
  std::vector<double> sum;
  std::vector<int> count(vs.voxels(), 0);
  int classes = 0;
  for (const Index3& o : origins) {
    const Volume patch = extract_patch_image(volume, o, ps);
    const auto probs = softmax_probs(model(patch));
    COTRAIN_REQUIRE(probs.shape() == ps, "model returned ", to_string(probs.shape()), " for a ", to_string(ps),
                    " window");
    if (classes == 0) {
      classes = probs.channels();
      sum.assign(std::size_t(classes) * vs.voxels(), 0.0);
    }
    COTRAIN_REQUIRE(probs.channels() == classes, "model changed its class count between windows");
    for (int z = 0; z < ps.d; ++z)
      for (int y = 0; y < ps.h; ++y)
        for (int x = 0; x < ps.w; ++x) {
          const std::size_t dst = vs.index(o.z + z, o.y + y, o.x + x);
          const std::size_t src = ps.index(z, y, x);
          for (int c = 0; c < classes; ++c) sum[c * vs.voxels() + dst] += double(probs(c, src));
          ++count[dst];
        }
  }
  COTRAIN_REQUIRE(classes > 0, "no windows evaluated");
  ProbVolume<float> out(classes, vs);
  for (std::size_t v = 0; v < vs.voxels(); ++v) {
    COTRAIN_REQUIRE(count[v] > 0, "voxel ", v, " not covered by any window");
    for (int c = 0; c < classes; ++c) out(c, v) = static_cast<float>(sum[c * vs.voxels() + v] / count[v]);
  }
  return out;
}

/// Per-voxel coverage counts, for checking a window layout.
inline std::vector<int> window_coverage(Shape3 volume, const SlidingWindowSpec& spec) {
  std::vector<int> count(volume.voxels(), 0);
  for (const Index3& o : window_origins(volume, spec))
    for (int z = 0; z < spec.patch.d; ++z)
      for (int y = 0; y < spec.patch.h; ++y)
        for (int x = 0; x < spec.patch.w; ++x) ++count[volume.index(o.z + z, o.y + y, o.x + x)];
  return count;
}

enum class EnsembleMode { Ensemble, AOnly, BOnly };

inline EnsembleMode parse_ensemble_mode(std::string_view s) {
  if (s == "ensemble" || s == "ab") return EnsembleMode::Ensemble;
  if (s == "a") return EnsembleMode::AOnly;
  if (s == "b") return EnsembleMode::BOnly;
  throw Error(detail::concat("unknown evaluation model \"", s, "\" (expected a, b or ensemble)"));
}

inline std::string to_string(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::Ensemble: return "ensemble";
    case EnsembleMode::AOnly: return "a";
    case EnsembleMode::BOnly: return "b";
  }
  return "?";
}

/// Mean of the two models' sliding-window probability maps, or one of them.
inline ProbVolume<float> ensemble_predict(const ModelForward& model_a, const ModelForward& model_b,
                                          const Volume& volume, const SlidingWindowSpec& spec,
                                          EnsembleMode mode = EnsembleMode::Ensemble) {
  if (mode == EnsembleMode::AOnly) return sliding_window_predict(model_a, volume, spec);
  if (mode == EnsembleMode::BOnly) return sliding_window_predict(model_b, volume, spec);
  auto pa = sliding_window_predict(model_a, volume, spec);
  const auto pb = sliding_window_predict(model_b, volume, spec);
  COTRAIN_REQUIRE(pa.channels() == pb.channels(), "ensemble members disagree on class count");
  auto a = pa.values();
  auto b = pb.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(0.5 * (double(a[i]) + double(b[i])));
  return pa;
}

}  // namespace cotrain
