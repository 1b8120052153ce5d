#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cotrain {

/// Raised for every contract violation and I/O failure in the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <typename... Args> std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}
}  // namespace detail

#define COTRAIN_REQUIRE(cond, ...)                                            \
  do {                                                                        \
    if (!(cond)) throw ::cotrain::Error(::cotrain::detail::concat(__VA_ARGS__)); \
  } while (0)

/// Spatial extent in (depth, height, width) order; width is the fastest axis.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  constexpr std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  constexpr std::size_t index(int z, int y, int x) const noexcept {
    return (static_cast<std::size_t>(z) * h + y) * static_cast<std::size_t>(w) + x;
  }
  constexpr bool contains(int z, int y, int x) const noexcept {
    return z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w;
  }
  constexpr bool positive() const noexcept { return d > 0 && h > 0 && w > 0; }
  constexpr int operator[](int axis) const noexcept { return axis == 0 ? d : axis == 1 ? h : w; }
  friend constexpr bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s) {
  return detail::concat(s.d, "x", s.h, "x", s.w);
}

struct Index3 {
  int z = 0;
  int y = 0;
  int x = 0;
  constexpr int operator[](int axis) const noexcept { return axis == 0 ? z : axis == 1 ? y : x; }
  friend constexpr bool operator==(const Index3&, const Index3&) = default;
  friend constexpr auto operator<=>(const Index3&, const Index3&) = default;
};

/// Image intensities on a dense grid.
class Volume {
public:
  Volume() = default;
  explicit Volume(Shape3 shape, float fill = 0.0f) : shape_(shape), voxels_(checked(shape), fill) {}
  Volume(Shape3 shape, std::vector<float> voxels) : shape_(shape), voxels_(std::move(voxels)) {
    COTRAIN_REQUIRE(voxels_.size() == checked(shape), "volume voxel count ", voxels_.size(),
                    " does not match shape ", to_string(shape));
    for (float v : voxels_) COTRAIN_REQUIRE(std::isfinite(v), "volume contains a non-finite value");
  }

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return voxels_.size(); }
  std::span<const float> voxels() const noexcept { return voxels_; }
  std::span<float> voxels() noexcept { return voxels_; }
  float at(int z, int y, int x) const { return voxels_[shape_.index(z, y, x)]; }
  float& at(int z, int y, int x) { return voxels_[shape_.index(z, y, x)]; }

  friend bool operator==(const Volume&, const Volume&) = default;

private:
  static std::size_t checked(Shape3 s) {
    COTRAIN_REQUIRE(s.positive(), "volume shape must be positive, got ", to_string(s));
    return s.voxels();
  }
  Shape3 shape_{};
  std::vector<float> voxels_;
};

/// Integer class map with classes in [0, num_classes).
class LabelVolume {
public:
  LabelVolume() = default;
  LabelVolume(Shape3 shape, int num_classes) : shape_(shape), num_classes_(num_classes), classes_(shape.voxels(), 0) {
    validate_header();
  }
  LabelVolume(Shape3 shape, int num_classes, std::vector<std::uint8_t> classes)
      : shape_(shape), num_classes_(num_classes), classes_(std::move(classes)) {
    validate_header();
    COTRAIN_REQUIRE(classes_.size() == shape_.voxels(), "label voxel count ", classes_.size(),
                    " does not match shape ", to_string(shape_));
    for (auto c : classes_)
      COTRAIN_REQUIRE(c < num_classes_, "label value ", int(c), " exceeds num_classes ", num_classes_);
  }

  const Shape3& shape() const noexcept { return shape_; }
  int num_classes() const noexcept { return num_classes_; }
  std::size_t size() const noexcept { return classes_.size(); }
  std::span<const std::uint8_t> classes() const noexcept { return classes_; }
  std::span<std::uint8_t> classes() noexcept { return classes_; }
  std::uint8_t at(int z, int y, int x) const { return classes_[shape_.index(z, y, x)]; }
  std::uint8_t& at(int z, int y, int x) { return classes_[shape_.index(z, y, x)]; }

  std::size_t count(int cls) const noexcept {
    std::size_t n = 0;
    for (auto c : classes_) n += (c == cls);
    return n;
  }

  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;

private:
  void validate_header() const {
    COTRAIN_REQUIRE(shape_.positive(), "label shape must be positive, got ", to_string(shape_));
    COTRAIN_REQUIRE(num_classes_ >= 2 && num_classes_ <= 256, "num_classes must lie in [2, 256], got ",
                    num_classes_);
  }
  Shape3 shape_{};
  int num_classes_ = 2;
  std::vector<std::uint8_t> classes_;
};

struct FeatureTag {};
struct LogitTag {};
struct ProbTag {};

/// Dense (channel, depth, height, width) field. The tag keeps feature maps,
/// raw logits and class probabilities from being mixed up.
template <typename T, typename Tag> class Field {
public:
  using value_type = T;

  Field() = default;
  Field(int channels, Shape3 shape, T fill = T(0))
      : channels_(channels), shape_(shape), values_(static_cast<std::size_t>(channels) * shape.voxels(), fill) {
    COTRAIN_REQUIRE(channels > 0 && shape.positive(), "field needs positive channels and shape");
  }
  Field(int channels, Shape3 shape, std::vector<T> values)
      : channels_(channels), shape_(shape), values_(std::move(values)) {
    COTRAIN_REQUIRE(channels > 0 && shape.positive(), "field needs positive channels and shape");
    COTRAIN_REQUIRE(values_.size() == static_cast<std::size_t>(channels) * shape.voxels(),
                    "field value count does not match ", channels, "x", to_string(shape));
  }

  int channels() const noexcept { return channels_; }
  const Shape3& shape() const noexcept { return shape_; }
  std::size_t voxels() const noexcept { return shape_.voxels(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<const T> values() const noexcept { return values_; }
  std::span<T> values() noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  std::span<const T> channel(int c) const noexcept { return {values_.data() + c * voxels(), voxels()}; }
  std::span<T> channel(int c) noexcept { return {values_.data() + c * voxels(), voxels()}; }

  T& operator()(int c, std::size_t voxel) noexcept { return values_[c * voxels() + voxel]; }
  const T& operator()(int c, std::size_t voxel) const noexcept { return values_[c * voxels() + voxel]; }
  T& at(int c, int z, int y, int x) noexcept { return (*this)(c, shape_.index(z, y, x)); }
  const T& at(int c, int z, int y, int x) const noexcept { return (*this)(c, shape_.index(z, y, x)); }

  bool all_finite() const noexcept {
    for (const T& v : values_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename OtherTag> Field<T, OtherTag> retag() const& { return {channels_, shape_, values_}; }
  template <typename OtherTag> Field<T, OtherTag> retag() && { return {channels_, shape_, std::move(values_)}; }
  template <typename U> Field<U, Tag> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return {channels_, shape_, std::move(out)};
  }

  friend bool operator==(const Field&, const Field&) = default;

private:
  int channels_ = 0;
  Shape3 shape_{};
  std::vector<T> values_;
};

template <typename T> using Tensor = Field<T, FeatureTag>;
template <typename T> using LogitVolume = Field<T, LogitTag>;
template <typename T> using ProbVolume = Field<T, ProbTag>;

/// Volume -> single-channel field, converting precision.
template <typename T, typename Tag = FeatureTag> Field<T, Tag> as_field(const Volume& v) {
  return {1, v.shape(), std::vector<T>(v.voxels().begin(), v.voxels().end())};
}

/// One element of the labeled or unlabeled pool.
struct Sample {
  std::string id;
  Volume image;
  std::optional<LabelVolume> label;

  bool labeled() const noexcept { return label.has_value(); }
  void validate() const {
    if (label) COTRAIN_REQUIRE(label->shape() == image.shape(), "sample ", id, ": label shape ",
                               to_string(label->shape()), " differs from image shape ",
                               to_string(image.shape()));
  }
};

/// Outcome of validate_prob_volume; empty message means the field is a valid simplex field.
struct ProbCheck {
  bool ok = true;
  std::size_t voxel = 0;
  double class_sum = 1.0;
  std::string message;
  explicit operator bool() const noexcept { return ok; }
};

/// Per-voxel simplex check: every value in [0,1] and class sums within `tol` of 1.
template <typename T> ProbCheck validate_prob_volume(const ProbVolume<T>& p, double tol = 1e-5) {
  const std::size_t n = p.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    double sum = 0.0;
    bool in_range = true;
    for (int c = 0; c < p.channels(); ++c) {
      const double x = static_cast<double>(p(c, v));
      sum += x;
      in_range = in_range && std::isfinite(x) && x >= 0.0 && x <= 1.0;
    }
    if (!in_range || std::abs(sum - 1.0) > tol) {
      return {false, v, sum,
              detail::concat(in_range ? "class sum " : "value out of [0,1], class sum ", sum, " at voxel ", v)};
    }
  }
  return {};
}

}  // namespace cotrain
