#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "cotrain/core.hpp"

namespace cotrain::binio {

using Json = nlohmann::ordered_json;

/// Little-endian encode of arithmetic values.
template <typename T> void append_le(std::vector<char>& out, std::span<const T> values) {
  static_assert(std::is_arithmetic_v<T>);
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(T));
  std::memcpy(out.data() + start, values.data(), values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      char* p = out.data() + start + i * sizeof(T);
      std::reverse(p, p + sizeof(T));
    }
  }
}

template <typename T> std::vector<T> decode_le(std::string_view bytes) {
  static_assert(std::is_arithmetic_v<T>);
  COTRAIN_REQUIRE(bytes.size() % sizeof(T) == 0, "payload size is not a multiple of element size");
  std::vector<T> out(bytes.size() / sizeof(T));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (auto& v : out) {
      auto* p = reinterpret_cast<char*>(&v);
      std::reverse(p, p + sizeof(T));
    }
  }
  return out;
}

/// A magic-tagged container: 4 ASCII bytes, one JSON header line, raw payload.
struct Container {
  std::string magic;
  Json header;
  std::string payload;
};

inline std::vector<char> encode(std::string_view magic, const Json& header, std::span<const char> payload) {
  COTRAIN_REQUIRE(magic.size() == 4, "container magic must be 4 bytes");
  std::vector<char> bytes(magic.begin(), magic.end());
  const std::string line = header.dump();
  bytes.insert(bytes.end(), line.begin(), line.end());
  bytes.push_back('\n');
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  return bytes;
}

/// Writes to `<path>.tmp` then renames, so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    COTRAIN_REQUIRE(os.good(), "cannot open ", tmp.string(), " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    COTRAIN_REQUIRE(os.good(), "write failed for ", tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  COTRAIN_REQUIRE(!ec, "rename to ", path.string(), " failed: ", ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  COTRAIN_REQUIRE(is.good(), "cannot open ", path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Container parse(std::string bytes, std::string_view expected_magic, const std::string& what) {
  COTRAIN_REQUIRE(bytes.size() >= 4, what, ": file too short for magic");
  Container c;
  c.magic = bytes.substr(0, 4);
  COTRAIN_REQUIRE(c.magic == expected_magic, what, ": bad magic \"", c.magic, "\", expected \"", expected_magic,
                  "\"");
  const auto eol = bytes.find('\n', 4);
  COTRAIN_REQUIRE(eol != std::string::npos, what, ": header line is not terminated");
  try {
    c.header = Json::parse(bytes.substr(4, eol - 4));
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::concat(what, ": malformed header: ", e.what()));
  }
  c.payload = bytes.substr(eol + 1);
  return c;
}

/// 64-bit FNV-1a; stable across platforms, used for content fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = kDigits[v & 15];
  return s;
}

inline Container read_container(const std::filesystem::path& path, std::string_view expected_magic) {
  return parse(read_file(path), expected_magic, path.string());
}

}  // namespace cotrain::binio
