#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/rng.hpp"

namespace cotrain {

/// Binary cuboid mask: 1 inside the box, 0 elsewhere.
class CutMixMask {
public:
  CutMixMask(Shape3 shape, Index3 origin, Shape3 size) : shape_(shape), origin_(origin), size_(size) {
    for (int a = 0; a < 3; ++a)
      COTRAIN_REQUIRE(origin[a] >= 0 && size[a] >= 0 && origin[a] + size[a] <= shape[a],
                      "cutmix box exceeds volume ", to_string(shape));
    mask_.assign(shape.voxels(), 0);
    for (int z = origin.z; z < origin.z + size.d; ++z)
      for (int y = origin.y; y < origin.y + size.h; ++y)
        for (int x = origin.x; x < origin.x + size.w; ++x) mask_[shape.index(z, y, x)] = 1;
  }

  const Shape3& shape() const noexcept { return shape_; }
  const Index3& box_origin() const noexcept { return origin_; }
  const Shape3& box_size() const noexcept { return size_; }
  std::span<const std::uint8_t> mask() const noexcept { return mask_; }
  bool inside(std::size_t voxel) const noexcept { return mask_[voxel] != 0; }
  double fraction() const noexcept { return double(size_.voxels()) / double(shape_.voxels()); }

  /// Complement mask (1 - m); the box still records the cut region.
  CutMixMask inverted() const {
    CutMixMask m = *this;
    for (auto& v : m.mask_) v = v ? 0 : 1;
    return m;
  }

  friend bool operator==(const CutMixMask&, const CutMixMask&) = default;

private:
  Shape3 shape_;
  Index3 origin_;
  Shape3 size_;
  std::vector<std::uint8_t> mask_;
};

/// Draws one cuboid whose volume fraction lies in [ratio_min, ratio_max]. A
/// target fraction is drawn uniformly; the box is the feasible integer cuboid
/// closest to it, preferring the volume's own aspect ratio.
inline CutMixMask sample_cutmix_mask(Shape3 shape, std::pair<double, double> ratio_range, Rng& rng) {
  const auto [rmin, rmax] = ratio_range;
  COTRAIN_REQUIRE(0.0 < rmin && rmin <= rmax && rmax < 1.0, "cutmix ratio range must satisfy 0 < min <= max < 1");
  COTRAIN_REQUIRE(shape.positive(), "cutmix shape must be positive");
  const double target = rmin == rmax ? rmin : rng.uniform(rmin, rmax);
  const double n = double(shape.voxels());
  const double side_scale = std::cbrt(target);

  double best = std::numeric_limits<double>::infinity();
  Shape3 box{};
  for (int bd = 1; bd <= shape.d; ++bd)
    for (int bh = 1; bh <= shape.h; ++bh) {
      const double face = double(bd) * bh;
      const double lo = std::max(1.0, std::ceil(rmin * n / face - 1e-9));
      const double hi = std::min(double(shape.w), std::floor(rmax * n / face + 1e-9));
      if (lo > hi) continue;
      const double ideal = target * n / face;
      for (double cand : {std::floor(ideal), std::ceil(ideal)}) {
        const int bw = int(std::clamp(cand, lo, hi));
        const double frac = face * bw / n;
        const double aspect = std::abs(std::log(bd / (side_scale * shape.d))) +
                              std::abs(std::log(bh / (side_scale * shape.h))) +
                              std::abs(std::log(bw / (side_scale * shape.w)));
        const double score = std::abs(frac - target) / target + 0.05 * aspect;
        if (score < best) {
          best = score;
          box = {bd, bh, bw};
        }
      }
    }
  COTRAIN_REQUIRE(std::isfinite(best), "shape ", to_string(shape), " is too small to realize cut fraction ", rmin,
                  "..", rmax);
  Index3 origin{rng.uniform_int(0, shape.d - box.d), rng.uniform_int(0, shape.h - box.h),
                rng.uniform_int(0, shape.w - box.w)};
  return {shape, origin, box};
}

/// mask * a + (1 - mask) * b, voxelwise.
inline Volume cutmix(const Volume& a, const Volume& b, const CutMixMask& m) {
  COTRAIN_REQUIRE(a.shape() == b.shape() && a.shape() == m.shape(), "cutmix shape mismatch");
  Volume out = b;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (m.inside(i)) out.voxels()[i] = a.voxels()[i];
  return out;
}

/// Same rule for class-channel fields; the mask broadcasts over channels.
template <typename T, typename Tag>
Field<T, Tag> cutmix(const Field<T, Tag>& a, const Field<T, Tag>& b, const CutMixMask& m) {
  COTRAIN_REQUIRE(a.channels() == b.channels() && a.shape() == b.shape() && a.shape() == m.shape(),
                  "cutmix shape mismatch");
  Field<T, Tag> out = b;
  const std::size_t n = a.voxels();
  for (int c = 0; c < a.channels(); ++c)
    for (std::size_t i = 0; i < n; ++i)
      if (m.inside(i)) out(c, i) = a(c, i);
  return out;
}

/// v + eta with eta ~ U(-amplitude, amplitude) i.i.d. per voxel.
inline Volume add_uniform_noise(const Volume& v, double amplitude, Rng& rng) {
  COTRAIN_REQUIRE(amplitude >= 0.0, "noise amplitude must be non-negative, got ", amplitude);
  Volume out = v;
  if (amplitude == 0.0) return out;
  for (auto& x : out.voxels()) {
    const float base = x;
    float y = static_cast<float>(double(base) + rng.uniform(-amplitude, amplitude));
    // Float rounding must not push the perturbation past the amplitude.
    while (std::abs(double(y) - double(base)) > amplitude) y = std::nextafter(y, base);
    x = y;
  }
  return out;
}

}  // namespace cotrain
