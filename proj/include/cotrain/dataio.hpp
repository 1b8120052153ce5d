#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "cotrain/binio.hpp"
#include "cotrain/core.hpp"
#include "cotrain/rng.hpp"

namespace cotrain {

// ---------------------------------------------------------------------------
// VOL1 container
// ---------------------------------------------------------------------------

using VolumeFile = std::variant<Volume, LabelVolume>;

namespace detail {

inline binio::Json vol1_header(Shape3 s, const char* dtype, const char* kind) {
  binio::Json h;
  h["shape"] = {s.d, s.h, s.w};
  h["dtype"] = dtype;
  h["kind"] = kind;
  return h;
}

inline void check_vol1_shape(Shape3 s) {
  COTRAIN_REQUIRE(s.positive(), "VOL1 shape must be positive, got ", to_string(s));
  constexpr std::uint64_t kMaxVoxels = std::uint64_t(1) << 34;
  COTRAIN_REQUIRE(std::uint64_t(s.d) * std::uint64_t(s.h) * std::uint64_t(s.w) <= kMaxVoxels,
                  "VOL1 shape overflow: ", to_string(s));
}

}  // namespace detail

inline std::vector<char> encode_volume(const Volume& v) {
  detail::check_vol1_shape(v.shape());
  std::vector<char> payload;
  binio::append_le(payload, v.voxels());
  return binio::encode("VOL1", detail::vol1_header(v.shape(), "f32", "image"), payload);
}

inline std::vector<char> encode_volume(const LabelVolume& v) {
  detail::check_vol1_shape(v.shape());
  auto header = detail::vol1_header(v.shape(), "u8", "label");
  header["num_classes"] = v.num_classes();
  std::vector<char> payload;
  binio::append_le(payload, v.classes());
  return binio::encode("VOL1", header, payload);
}

inline void write_volume(const Volume& v, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_volume(v));
}
inline void write_volume(const LabelVolume& v, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_volume(v));
}

/// Class probabilities as K volumes stacked along depth: shape [K*D, H, W], f32,
/// with num_classes recorded so readers can unstack.
inline void write_prob_volume(const ProbVolume<float>& p, const std::filesystem::path& path) {
  const Shape3 stacked{p.channels() * p.shape().d, p.shape().h, p.shape().w};
  detail::check_vol1_shape(stacked);
  auto header = detail::vol1_header(stacked, "f32", "image");
  header["num_classes"] = p.channels();
  std::vector<char> payload;
  binio::append_le(payload, p.values());
  binio::write_file_atomic(path, binio::encode("VOL1", header, payload));
}

inline VolumeFile decode_volume(const binio::Container& c, const std::string& what) {
  const auto& h = c.header;
  Shape3 s;
  std::string dtype, kind;
  try {
    const auto& sh = h.at("shape");
    COTRAIN_REQUIRE(sh.is_array() && sh.size() == 3, what, ": shape must have three entries");
    s = {sh[0].get<int>(), sh[1].get<int>(), sh[2].get<int>()};
    dtype = h.at("dtype").get<std::string>();
    kind = h.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::concat(what, ": malformed VOL1 header: ", e.what()));
  }
  detail::check_vol1_shape(s);
  std::size_t elem = 0;
  if (dtype == "f32") elem = 4;
  else if (dtype == "u8") elem = 1;
  else throw Error(detail::concat(what, ": unknown dtype \"", dtype, "\""));
  const std::size_t expected = s.voxels() * elem;
  COTRAIN_REQUIRE(c.payload.size() == expected, what, ": payload length ", c.payload.size(),
                  " does not match header (expected ", expected, " bytes)");
  if (kind == "image") {
    COTRAIN_REQUIRE(dtype == "f32", what, ": image volumes must be f32");
    return Volume(s, binio::decode_le<float>(c.payload));
  }
  if (kind == "label") {
    COTRAIN_REQUIRE(dtype == "u8", what, ": label volumes must be u8");
    const int k = h.contains("num_classes") ? h["num_classes"].get<int>() : 2;
    return LabelVolume(s, k, binio::decode_le<std::uint8_t>(c.payload));
  }
  throw Error(detail::concat(what, ": unknown kind \"", kind, "\""));
}

inline VolumeFile read_volume(const std::filesystem::path& path) {
  return decode_volume(binio::read_container(path, "VOL1"), path.string());
}

inline Volume read_image(const std::filesystem::path& path) {
  auto f = read_volume(path);
  COTRAIN_REQUIRE(std::holds_alternative<Volume>(f), path.string(), ": expected an image volume");
  return std::get<Volume>(std::move(f));
}

inline LabelVolume read_label(const std::filesystem::path& path) {
  auto f = read_volume(path);
  COTRAIN_REQUIRE(std::holds_alternative<LabelVolume>(f), path.string(), ": expected a label volume");
  return std::get<LabelVolume>(std::move(f));
}

inline ProbVolume<float> read_prob_volume(const std::filesystem::path& path) {
  const auto c = binio::read_container(path, "VOL1");
  COTRAIN_REQUIRE(c.header.contains("num_classes"), path.string(), ": probability file lacks num_classes");
  const int k = c.header["num_classes"].get<int>();
  auto stacked = std::get<Volume>(decode_volume(c, path.string()));
  COTRAIN_REQUIRE(k > 0 && stacked.shape().d % k == 0, path.string(), ": depth not divisible by num_classes");
  const Shape3 s{stacked.shape().d / k, stacked.shape().h, stacked.shape().w};
  return {k, s, std::vector<float>(stacked.voxels().begin(), stacked.voxels().end())};
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticOptions {
  double min_foreground = 0.03;
  double max_foreground = 0.18;
  int max_blobs = 3;
};

namespace detail {

/// Smooth lattice noise in [0, 1] with a quintic fade between lattice points.
class ValueNoise {
public:
  ValueNoise(Shape3 shape, int cell, Rng& rng) : cell_(cell) {
    dims_ = {shape.d / cell + 2, shape.h / cell + 2, shape.w / cell + 2};
    lattice_.resize(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2]);
    for (auto& v : lattice_) v = rng.uniform();
  }
  double operator()(int z, int y, int x) const {
    const double fz = double(z) / cell_, fy = double(y) / cell_, fx = double(x) / cell_;
    const int iz = int(fz), iy = int(fy), ix = int(fx);
    const double tz = fade(fz - iz), ty = fade(fy - iy), tx = fade(fx - ix);
    double acc = 0.0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 2; ++c) {
          const double wgt = (a ? tz : 1 - tz) * (b ? ty : 1 - ty) * (c ? tx : 1 - tx);
          acc += wgt * lattice_[(std::size_t(iz + a) * dims_[1] + (iy + b)) * dims_[2] + (ix + c)];
        }
    return acc;
  }

private:
  static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }
  int cell_;
  std::array<int, 3> dims_{};
  std::vector<double> lattice_;
};

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  std::array<std::array<double, 3>, 3> axes{};  // rows are unit principal axes

  /// Normalized radius; < 1 inside.
  double radius_at(double z, double y, double x) const {
    const double p[3] = {z - center[0], y - center[1], x - center[2]};
    double r2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double proj = axes[a][0] * p[0] + axes[a][1] * p[1] + axes[a][2] * p[2];
      r2 += (proj / radii[a]) * (proj / radii[a]);
    }
    return std::sqrt(r2);
  }
};

inline Ellipsoid random_ellipsoid(Shape3 s, Rng& rng) {
  const double base = std::min({s.d, s.h, s.w});
  Ellipsoid e;
  for (auto& r : e.radii) r = rng.uniform(0.12, 0.28) * base;
  const double rmax = std::max({e.radii[0], e.radii[1], e.radii[2]});
  for (int a = 0; a < 3; ++a) {
    const double lo = std::min(rmax + 1.0, s[a] / 2.0), hi = std::max(s[a] - rmax - 1.0, s[a] / 2.0);
    e.center[a] = rng.uniform(lo, hi);
  }
  // Rotation from three Euler angles.
  const double a = rng.uniform(0, 2 * std::numbers::pi), b = rng.uniform(0, std::numbers::pi),
               c = rng.uniform(0, 2 * std::numbers::pi);
  const double ca = std::cos(a), sa = std::sin(a), cb = std::cos(b), sb = std::sin(b), cc = std::cos(c),
               sc = std::sin(c);
  e.axes = {{{ca * cc - sa * cb * sc, -ca * sc - sa * cb * cc, sa * sb},
             {sa * cc + ca * cb * sc, -sa * sc + ca * cb * cc, -ca * sb},
             {sb * sc, sb * cc, cb}}};
  return e;
}

}  // namespace detail

/// One synthetic sample; a pure function of (seed, index, shape, difficulty).
inline Sample generate_synthetic_sample(std::uint64_t seed, int index, Shape3 shape, double difficulty,
                                        const SyntheticOptions& opt = {}) {
  Rng rng(Rng::mix(seed) ^ Rng::mix(0xC0FFEEULL + static_cast<std::uint64_t>(index)));
  const double d = difficulty;

  // Foreground: union of 1..max_blobs ellipsoids, redrawn until the coverage is in range.
  std::vector<detail::Ellipsoid> blobs;
  std::vector<double> radius(shape.voxels());
  for (int attempt = 0;; ++attempt) {
    COTRAIN_REQUIRE(attempt < 1000, "could not place foreground blobs in ", to_string(shape));
    blobs.clear();
    const int n = rng.uniform_int(1, opt.max_blobs);
    for (int b = 0; b < n; ++b) blobs.push_back(detail::random_ellipsoid(shape, rng));
    std::size_t fg = 0;
    for (int z = 0; z < shape.d; ++z)
      for (int y = 0; y < shape.h; ++y)
        for (int x = 0; x < shape.w; ++x) {
          double r = std::numeric_limits<double>::infinity();
          for (const auto& e : blobs) r = std::min(r, e.radius_at(z, y, x));
          radius[shape.index(z, y, x)] = r;
          fg += r < 1.0;
        }
    const double frac = double(fg) / double(shape.voxels());
    if (frac >= opt.min_foreground && frac <= opt.max_foreground) break;
  }

  const int cell = std::max(4, std::min({shape.d, shape.h, shape.w}) / 4);
  detail::ValueNoise coarse(shape, cell, rng), fine(shape, std::max(2, cell / 2), rng);
  const double gain = 1.0 + d * rng.uniform(-0.3, 0.3);
  const double offset = d * rng.uniform(-0.15, 0.15);
  std::array<double, 3> ramp{rng.normal(), rng.normal(), rng.normal()};
  const double ramp_norm = std::sqrt(ramp[0] * ramp[0] + ramp[1] * ramp[1] + ramp[2] * ramp[2]) + 1e-12;
  for (auto& r : ramp) r /= ramp_norm;
  const double fg_base = 0.65 - 0.2 * d;
  const double softness = 0.25 * d;

  std::vector<float> img(shape.voxels());
  std::vector<std::uint8_t> lbl(shape.voxels());
  for (int z = 0; z < shape.d; ++z)
    for (int y = 0; y < shape.h; ++y)
      for (int x = 0; x < shape.w; ++x) {
        const std::size_t i = shape.index(z, y, x);
        const double r = radius[i];
        const double texture = 0.7 * coarse(z, y, x) + 0.3 * fine(z, y, x);
        const double bg = 0.1 + (0.25 + 0.35 * d) * texture;
        const double fg = fg_base + 0.3 * std::max(0.0, 1.0 - r * r);
        const double inside = softness > 0 ? 1.0 / (1.0 + std::exp(-(1.0 - r) / softness)) : (r < 1.0 ? 1.0 : 0.0);
        double v = bg + (fg - bg) * inside;
        if (d > 0) {
          const double bias = 0.2 * d *
                              (ramp[0] * (double(z) / shape.d - 0.5) + ramp[1] * (double(y) / shape.h - 0.5) +
                               ramp[2] * (double(x) / shape.w - 0.5));
          v = gain * v + offset + bias + 0.1 * d * rng.normal();
        }
        img[i] = static_cast<float>(v);
        lbl[i] = r < 1.0 ? 1 : 0;
      }

  char id[32];
  std::snprintf(id, sizeof id, "case_%03d", index);
  return {id, Volume(shape, std::move(img)), LabelVolume(shape, 2, std::move(lbl))};
}

/// Intensity volumes of 1-3 smooth ellipsoidal blobs over textured background;
/// labels are the exact blob masks. Higher difficulty lowers contrast and adds
/// noise, blurred edges and per-volume intensity drift.
inline std::vector<Sample> generate_synthetic_dataset(std::uint64_t seed, int n_volumes, Shape3 shape,
                                                      double difficulty, const SyntheticOptions& opt = {}) {
  COTRAIN_REQUIRE(n_volumes >= 2, "need at least two volumes, got ", n_volumes);
  COTRAIN_REQUIRE(shape.d >= 16 && shape.h >= 16 && shape.w >= 16, "degenerate synthetic shape ",
                  to_string(shape), " (minimum 16 per axis)");
  COTRAIN_REQUIRE(difficulty >= 0.0 && difficulty <= 1.0, "difficulty must lie in [0, 1]");
  std::vector<Sample> out;
  out.reserve(n_volumes);
  for (int i = 0; i < n_volumes; ++i) out.push_back(generate_synthetic_sample(seed, i, shape, difficulty, opt));
  return out;
}

// ---------------------------------------------------------------------------
// Splitting, patches, batches
// ---------------------------------------------------------------------------

struct DatasetSplit {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::uint64_t seed = 0;
};

template <typename T> void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

/// Deterministic shuffle, then the first floor(ratio * n) samples keep their labels.
inline DatasetSplit split_dataset(std::vector<Sample> samples, double labeled_ratio, std::uint64_t seed) {
  COTRAIN_REQUIRE(labeled_ratio > 0.0 && labeled_ratio < 1.0, "labeled_ratio must lie in (0, 1)");
  for (const auto& s : samples) COTRAIN_REQUIRE(s.labeled(), "sample ", s.id, " has no label to split");
  const auto n_labeled = static_cast<std::size_t>(std::floor(labeled_ratio * double(samples.size()) + 1e-9));
  COTRAIN_REQUIRE(n_labeled > 0, "labeled ratio ", labeled_ratio, " on ", samples.size(),
                  " samples yields zero labeled samples");
  Rng rng(seed);
  shuffle_in_place(samples, rng);
  DatasetSplit split;
  split.seed = seed;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i < n_labeled) {
      split.labeled.push_back(std::move(samples[i]));
    } else {
      samples[i].label.reset();
      split.unlabeled.push_back(std::move(samples[i]));
    }
  }
  return split;
}

namespace detail {

inline void check_patch_bounds(Shape3 src, Index3 origin, Shape3 patch) {
  COTRAIN_REQUIRE(patch.positive(), "patch size must be positive");
  for (int a = 0; a < 3; ++a)
    COTRAIN_REQUIRE(origin[a] >= 0 && origin[a] + patch[a] <= src[a], "patch origin (", origin.z, ",", origin.y,
                    ",", origin.x, ") with size ", to_string(patch), " exceeds volume ", to_string(src));
}

template <typename Src, typename Dst> void copy_box(const Src& src, Shape3 ss, Index3 o, Dst& dst, Shape3 ps) {
  for (int z = 0; z < ps.d; ++z)
    for (int y = 0; y < ps.h; ++y)
      std::copy_n(src.begin() + ss.index(o.z + z, o.y + y, o.x), ps.w, dst.begin() + ps.index(z, y, 0));
}

}  // namespace detail

inline Volume extract_patch_image(const Volume& v, Index3 origin, Shape3 patch) {
  detail::check_patch_bounds(v.shape(), origin, patch);
  Volume out(patch);
  auto dst = out.voxels();
  detail::copy_box(v.voxels(), v.shape(), origin, dst, patch);
  return out;
}

inline LabelVolume extract_patch_label(const LabelVolume& v, Index3 origin, Shape3 patch) {
  detail::check_patch_bounds(v.shape(), origin, patch);
  LabelVolume out(patch, v.num_classes());
  auto dst = out.classes();
  detail::copy_box(v.classes(), v.shape(), origin, dst, patch);
  return out;
}

/// Crops image and label (when present) identically.
inline Sample extract_patch(const Sample& s, Index3 origin, Shape3 patch) {
  Sample out{s.id, extract_patch_image(s.image, origin, patch), std::nullopt};
  if (s.label) out.label = extract_patch_label(*s.label, origin, patch);
  return out;
}

struct Batch {
  std::vector<Volume> labeled_images;
  std::vector<LabelVolume> labeled_targets;
  std::vector<Volume> unlabeled_images;
  Shape3 patch_size{};
};

/// Chooses which pool entry each patch draw uses. With patches_per_volume == 0
/// draws are independent with replacement; otherwise every entry appears
/// patches_per_volume times per epoch in a shuffled order. Draw k is a pure
/// function of (seed, k), which keeps resumed runs on the same sequence.
class PoolSchedule {
public:
  PoolSchedule() = default;
  PoolSchedule(std::size_t pool, int patches_per_volume, std::uint64_t seed)
      : pool_(pool), per_volume_(patches_per_volume), seed_(seed) {}

  bool epoch_based() const noexcept { return per_volume_ > 0; }
  std::size_t pick(std::uint64_t draw) {
    const std::uint64_t epoch_len = pool_ * static_cast<std::uint64_t>(per_volume_);
    const std::uint64_t epoch = draw / epoch_len;
    if (epoch != cached_epoch_ || order_.empty()) {
      order_.clear();
      for (std::size_t i = 0; i < pool_; ++i)
        for (int r = 0; r < per_volume_; ++r) order_.push_back(i);
      Rng rng(Rng::mix(seed_) ^ Rng::mix(epoch + 1));
      shuffle_in_place(order_, rng);
      cached_epoch_ = epoch;
    }
    return order_[draw % epoch_len];
  }

private:
  std::size_t pool_ = 0;
  int per_volume_ = 0;
  std::uint64_t seed_ = 0;
  std::uint64_t cached_epoch_ = UINT64_MAX;
  std::vector<std::size_t> order_;
};

struct BatchOptions {
  /// Probability that a labeled draw is forced to contain a foreground voxel.
  double foreground_force = 0.5;
  PoolSchedule* labeled_schedule = nullptr;
  PoolSchedule* unlabeled_schedule = nullptr;
  std::uint64_t draw_offset = 0;
};

namespace detail {

inline Index3 random_origin(Shape3 vol, Shape3 patch, Rng& rng) {
  Index3 o;
  o.z = rng.uniform_int(0, vol.d - patch.d);
  o.y = rng.uniform_int(0, vol.h - patch.h);
  o.x = rng.uniform_int(0, vol.w - patch.w);
  return o;
}

/// Origin of a patch that contains a randomly chosen foreground voxel, if any.
inline std::optional<Index3> foreground_origin(const LabelVolume& lbl, Shape3 patch, Rng& rng) {
  const std::size_t fg = lbl.size() - lbl.count(0);
  if (fg == 0) return std::nullopt;
  std::size_t pick = rng.below(fg);
  const Shape3& s = lbl.shape();
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (lbl.at(z, y, x) == 0) continue;
        if (pick-- != 0) continue;
        const Index3 v{z, y, x};
        Index3 o;
        for (int a = 0; a < 3; ++a) {
          const int lo = std::max(0, v[a] - patch[a] + 1), hi = std::min(v[a], s[a] - patch[a]);
          const int chosen = rng.uniform_int(lo, hi);
          (a == 0 ? o.z : a == 1 ? o.y : o.x) = chosen;
        }
        return o;
      }
  return std::nullopt;
}

}  // namespace detail

/// batch_size/2 labeled patches with targets plus batch_size/2 unlabeled patches.
inline Batch make_batch(const DatasetSplit& split, int batch_size, Shape3 patch, Rng& rng,
                        const BatchOptions& opt = {}) {
  COTRAIN_REQUIRE(batch_size > 0 && batch_size % 2 == 0, "batch_size must be positive and even, got ", batch_size);
  COTRAIN_REQUIRE(!split.labeled.empty(), "empty labeled pool");
  COTRAIN_REQUIRE(!split.unlabeled.empty(), "empty unlabeled pool");
  const int half = batch_size / 2;
  Batch b;
  b.patch_size = patch;
  for (int i = 0; i < half; ++i) {
    const std::size_t k = opt.labeled_schedule ? opt.labeled_schedule->pick(opt.draw_offset + i)
                                               : rng.below(split.labeled.size());
    const Sample& s = split.labeled[k];
    std::optional<Index3> origin;
    if (rng.uniform() < opt.foreground_force) origin = detail::foreground_origin(*s.label, patch, rng);
    if (!origin) origin = detail::random_origin(s.image.shape(), patch, rng);
    Sample p = extract_patch(s, *origin, patch);
    b.labeled_images.push_back(std::move(p.image));
    b.labeled_targets.push_back(std::move(*p.label));
  }
  for (int i = 0; i < half; ++i) {
    const std::size_t k = opt.unlabeled_schedule ? opt.unlabeled_schedule->pick(opt.draw_offset + i)
                                                 : rng.below(split.unlabeled.size());
    const Sample& s = split.unlabeled[k];
    Sample p = extract_patch(s, detail::random_origin(s.image.shape(), patch, rng), patch);
    b.unlabeled_images.push_back(std::move(p.image));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Dataset manifest. Labeled and validation entries name image files; the
/// matching label lives next to it with ".img.vol1" replaced by ".lbl.vol1".
struct Manifest {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
  std::vector<std::string> validation;
  std::uint64_t seed = 0;
};

inline std::filesystem::path label_path_for(const std::filesystem::path& image) {
  std::string s = image.string();
  const std::string suffix = ".img.vol1";
  COTRAIN_REQUIRE(s.size() > suffix.size() && s.ends_with(suffix), "image path ", s, " does not end in ", suffix);
  return s.substr(0, s.size() - suffix.size()) + ".lbl.vol1";
}

inline std::string sample_id_from_path(const std::filesystem::path& p) {
  const std::string name = p.filename().string();
  return name.substr(0, name.find('.'));
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  binio::Json j;
  j["labeled"] = m.labeled;
  j["unlabeled"] = m.unlabeled;
  if (!m.validation.empty()) j["validation"] = m.validation;
  j["seed"] = m.seed;
  binio::write_text_atomic(path, j.dump(2) + "\n");
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  try {
    const auto j = binio::Json::parse(binio::read_file(path));
    m.labeled = j.at("labeled").get<std::vector<std::string>>();
    m.unlabeled = j.at("unlabeled").get<std::vector<std::string>>();
    if (j.contains("validation")) m.validation = j["validation"].get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::concat(path.string(), ": malformed manifest: ", e.what()));
  }
  return m;
}

/// Loads the split (and validation samples) a manifest describes; relative
/// paths resolve against the manifest's directory.
inline std::pair<DatasetSplit, std::vector<Sample>> load_manifest(const std::filesystem::path& path) {
  const Manifest m = read_manifest(path);
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  auto load = [&](const std::string& p, bool with_label) {
    const auto img_path = resolve(p);
    Sample s{sample_id_from_path(img_path), read_image(img_path), std::nullopt};
    if (with_label) s.label = read_label(label_path_for(img_path));
    s.validate();
    return s;
  };
  DatasetSplit split;
  split.seed = m.seed;
  for (const auto& p : m.labeled) split.labeled.push_back(load(p, true));
  for (const auto& p : m.unlabeled) split.unlabeled.push_back(load(p, false));
  std::vector<Sample> validation;
  for (const auto& p : m.validation) validation.push_back(load(p, true));
  return {std::move(split), std::move(validation)};
}

}  // namespace cotrain
