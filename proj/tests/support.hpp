#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "cotrain/core.hpp"
#include "cotrain/rng.hpp"

namespace cotrain::test {

/// Scratch directory removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cotrain_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline Volume random_volume(Shape3 s, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Volume v(s);
  for (auto& x : v.voxels()) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

inline LabelVolume random_labels(Shape3 s, Rng& rng, double p_fg = 0.5, int k = 2) {
  LabelVolume l(s, k);
  for (auto& c : l.classes()) {
    if (k == 2) c = rng.uniform() < p_fg ? 1 : 0;
    else c = static_cast<std::uint8_t>(rng.below(k));
  }
  return l;
}

template <typename T, typename Tag> Field<T, Tag> random_field(int k, Shape3 s, Rng& rng, double scale = 1.0) {
  Field<T, Tag> f(k, s);
  for (auto& x : f.values()) x = static_cast<T>(scale * rng.normal());
  return f;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

}  // namespace cotrain::test
