#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cotrain/binio.hpp"
#include "cotrain/core.hpp"
#include "cotrain/nn.hpp"
#include "cotrain/rng.hpp"

namespace cotrain {

/// Offline task descriptions: prompts that were asked and the responses obtained.
struct DescriptionSet {
  std::vector<std::string> prompts;
  std::vector<std::string> responses;
};

/// Parses a UTF-8 text file of blank-line-separated blocks. Blocks starting with
/// "prompt:" are prompts; every other non-blank block is one response, kept verbatim.
inline DescriptionSet parse_descriptions(std::string_view text) {
  DescriptionSet ds;
  std::vector<std::string> blocks;
  std::string current;
  auto flush = [&] {
    const bool blank = current.find_first_not_of(" \t\r\n") == std::string::npos;
    if (!blank) {
      while (!current.empty() && (current.back() == '\n' || current.back() == '\r')) current.pop_back();
      blocks.push_back(current);
    }
    current.clear();
  };
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    const bool blank_line = line.find_first_not_of(" \t\r") == std::string::npos;
    if (blank_line) {
      flush();
      continue;
    }
    current += line;
    current += '\n';
  }
  flush();
  for (auto& b : blocks) {
    if (b.rfind("prompt:", 0) == 0) {
      auto p = b.substr(7);
      p.erase(0, p.find_first_not_of(" \t"));
      ds.prompts.push_back(std::move(p));
    } else {
      ds.responses.push_back(std::move(b));
    }
  }
  COTRAIN_REQUIRE(!ds.responses.empty(), "description file contains no responses");
  return ds;
}

inline DescriptionSet load_descriptions(const std::filesystem::path& path) {
  const std::string text = binio::read_file(path);
  COTRAIN_REQUIRE(!text.empty(), path.string(), ": empty description file");
  return parse_descriptions(text);
}

/// One row per response.
struct EmbeddingMatrix {
  std::vector<std::vector<float>> rows;
  int dim = 0;

  std::size_t size() const noexcept { return rows.size(); }
};

// ---------------------------------------------------------------------------
// EMB1 container
// ---------------------------------------------------------------------------

inline void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  binio::Json h;
  h["rows"] = m.rows.size();
  h["dim"] = m.dim;
  std::vector<char> payload;
  for (const auto& r : m.rows) {
    COTRAIN_REQUIRE(int(r.size()) == m.dim, "embedding row width ", r.size(), " != ", m.dim);
    binio::append_le(payload, std::span<const float>(r));
  }
  binio::write_file_atomic(path, binio::encode("EMB1", h, payload));
}

inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  const auto c = binio::read_container(path, "EMB1");
  std::size_t rows = 0;
  int dim = 0;
  try {
    rows = c.header.at("rows").get<std::size_t>();
    dim = c.header.at("dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::concat(path.string(), ": malformed EMB1 header: ", e.what()));
  }
  COTRAIN_REQUIRE(rows > 0 && dim > 0, path.string(), ": EMB1 needs positive rows and dim");
  COTRAIN_REQUIRE(c.payload.size() == rows * std::size_t(dim) * 4, path.string(), ": EMB1 payload length ",
                  c.payload.size(), " does not match ", rows, "x", dim);
  const auto flat = binio::decode_le<float>(c.payload);
  EmbeddingMatrix m;
  m.dim = dim;
  for (std::size_t r = 0; r < rows; ++r) m.rows.emplace_back(flat.begin() + r * dim, flat.begin() + (r + 1) * dim);
  return m;
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

/// Maps each response to one vector (token vectors mean-pooled inside the provider).
class EmbeddingProvider {
public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string id() const = 0;
  virtual std::vector<std::vector<float>> embed(const std::vector<std::string>& responses) const = 0;
};

/// Rows produced offline by any pretrained text encoder and stored as EMB1;
/// row i belongs to response i.
class FileEmbeddingProvider final : public EmbeddingProvider {
public:
  explicit FileEmbeddingProvider(std::filesystem::path path) : path_(std::move(path)), matrix_(read_embeddings(path_)) {}
  explicit FileEmbeddingProvider(EmbeddingMatrix m, std::string name = "memory")
      : path_(std::move(name)), matrix_(std::move(m)) {}

  std::string id() const override { return "file:" + path_.filename().string(); }
  std::vector<std::vector<float>> embed(const std::vector<std::string>& responses) const override {
    COTRAIN_REQUIRE(responses.size() == matrix_.rows.size(), "embedding file has ", matrix_.rows.size(),
                    " rows but there are ", responses.size(), " responses");
    return matrix_.rows;
  }

private:
  std::filesystem::path path_;
  EmbeddingMatrix matrix_;
};

/// Deterministic stand-in encoder: each lowercased whitespace token hashes to a
/// unit-norm pseudo-random vector; a response is the mean of its token vectors.
class HashEmbeddingProvider final : public EmbeddingProvider {
public:
  explicit HashEmbeddingProvider(int dim = 768) : dim_(dim) {
    COTRAIN_REQUIRE(dim > 0, "embedding dim must be positive");
  }

  std::string id() const override { return "test-hash-" + std::to_string(dim_); }

  std::vector<float> token_vector(std::string_view token) const {
    Rng rng(Rng::mix(binio::fnv1a64(token)));
    std::vector<double> v(dim_);
    double norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    std::vector<float> out(dim_);
    for (int i = 0; i < dim_; ++i) out[i] = static_cast<float>(v[i] / norm);
    return out;
  }

  std::vector<std::vector<float>> embed(const std::vector<std::string>& responses) const override {
    std::vector<std::vector<float>> rows;
    for (const auto& r : responses) {
      std::vector<double> acc(dim_, 0.0);
      int tokens = 0;
      std::istringstream is(r);
      std::string tok;
      while (is >> tok) {
        for (auto& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        const auto tv = token_vector(tok);
        for (int i = 0; i < dim_; ++i) acc[i] += tv[i];
        ++tokens;
      }
      COTRAIN_REQUIRE(tokens > 0, "response has no tokens");
      std::vector<float> row(dim_);
      for (int i = 0; i < dim_; ++i) row[i] = static_cast<float>(acc[i] / tokens);
      rows.push_back(std::move(row));
    }
    return rows;
  }

private:
  int dim_;
};

inline EmbeddingMatrix embed_descriptions(const EmbeddingProvider& provider, const DescriptionSet& ds) {
  COTRAIN_REQUIRE(!ds.responses.empty(), "no responses to embed");
  EmbeddingMatrix m;
  try {
    m.rows = provider.embed(ds.responses);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(detail::concat("embedding provider ", provider.id(), " failed: ", e.what()));
  }
  COTRAIN_REQUIRE(m.rows.size() == ds.responses.size(), "provider returned ", m.rows.size(), " rows for ",
                  ds.responses.size(), " responses");
  m.dim = int(m.rows.front().size());
  for (const auto& r : m.rows) {
    COTRAIN_REQUIRE(int(r.size()) == m.dim, "provider returned mixed embedding dims (", r.size(), " vs ", m.dim, ")");
    for (float v : r) COTRAIN_REQUIRE(std::isfinite(v), "provider returned a non-finite embedding value");
  }
  COTRAIN_REQUIRE(m.dim > 0, "provider returned empty embeddings");
  return m;
}

/// Column mean across responses.
inline std::vector<double> pool_embeddings(const EmbeddingMatrix& m) {
  COTRAIN_REQUIRE(!m.rows.empty(), "cannot pool an empty embedding matrix");
  std::vector<double> out(m.dim, 0.0);
  for (const auto& r : m.rows)
    for (int i = 0; i < m.dim; ++i) out[i] += r[i];
  for (auto& v : out) v /= double(m.rows.size());
  return out;
}

// ---------------------------------------------------------------------------
// Projection MLP: dim -> hidden -> bottleneck channels, ReLU in between.
// ---------------------------------------------------------------------------

inline constexpr int kProjectionVersion = 1;

struct ProjectionArch {
  int input_dim = 768;
  int hidden = 256;
  int output_dim = 32;
};

template <typename T> struct ProjectionParams {
  ProjectionArch arch;
  nn::ParamSet<T> weights;  // w1 [hidden][input], b1 [hidden], w2 [output][hidden], b2 [output]

  static constexpr std::size_t kW1 = 0, kB1 = 1, kW2 = 2, kB2 = 3;
};

template <typename T> ProjectionParams<T> make_projection(ProjectionArch arch) {
  COTRAIN_REQUIRE(arch.input_dim > 0 && arch.hidden > 0 && arch.output_dim > 0, "projection dims must be positive");
  ProjectionParams<T> p{arch, {}};
  p.weights.add("proj.w1", {arch.hidden, arch.input_dim});
  p.weights.add("proj.b1", {arch.hidden});
  p.weights.add("proj.w2", {arch.output_dim, arch.hidden});
  p.weights.add("proj.b2", {arch.output_dim});
  return p;
}

template <typename T> ProjectionParams<T> init_projection(ProjectionArch arch, Rng& rng) {
  auto p = make_projection<T>(arch);
  nn::fill_normal(p.weights.values(p.kW1), std::sqrt(2.0 / arch.input_dim), rng);
  nn::fill_normal(p.weights.values(p.kW2), std::sqrt(1.0 / arch.hidden), rng);
  return p;
}

/// The text feature z that is broadcast into the bottleneck.
template <typename T> struct TextFeature {
  std::vector<T> z;
  std::string provider_id;
  int projection_version = kProjectionVersion;
};

template <typename T> struct ProjectionCache {
  std::vector<T> input;
  std::vector<T> hidden_pre;
  std::vector<T> hidden;
};

template <typename T>
std::vector<T> projection_forward(const ProjectionParams<T>& p, std::span<const T> x, ProjectionCache<T>* cache) {
  const auto& a = p.arch;
  COTRAIN_REQUIRE(int(x.size()) == a.input_dim, "projection expects input dim ", a.input_dim, ", got ", x.size());
  auto w1 = p.weights.values(p.kW1), b1 = p.weights.values(p.kB1);
  auto w2 = p.weights.values(p.kW2), b2 = p.weights.values(p.kB2);
  std::vector<T> pre(a.hidden), h(a.hidden), z(a.output_dim);
  for (int j = 0; j < a.hidden; ++j) {
    T s = b1[j];
    const T* row = w1.data() + std::size_t(j) * a.input_dim;
    for (int i = 0; i < a.input_dim; ++i) s += row[i] * x[i];
    pre[j] = s;
    h[j] = s > T(0) ? s : T(0);
  }
  for (int k = 0; k < a.output_dim; ++k) {
    T s = b2[k];
    const T* row = w2.data() + std::size_t(k) * a.hidden;
    for (int j = 0; j < a.hidden; ++j) s += row[j] * h[j];
    z[k] = s;
  }
  if (cache) *cache = {std::vector<T>(x.begin(), x.end()), std::move(pre), std::move(h)};
  return z;
}

/// Accumulates weight gradients for dz = dL/dz.
template <typename T>
void projection_backward(const ProjectionParams<T>& p, const ProjectionCache<T>& cache, std::span<const T> dz,
                         nn::ParamSet<T>& grads) {
  const auto& a = p.arch;
  auto w2 = p.weights.values(p.kW2);
  auto gw1 = grads.values(p.kW1), gb1 = grads.values(p.kB1), gw2 = grads.values(p.kW2), gb2 = grads.values(p.kB2);
  std::vector<T> dh(a.hidden, T(0));
  for (int k = 0; k < a.output_dim; ++k) {
    gb2[k] += dz[k];
    for (int j = 0; j < a.hidden; ++j) {
      gw2[std::size_t(k) * a.hidden + j] += dz[k] * cache.hidden[j];
      dh[j] += w2[std::size_t(k) * a.hidden + j] * dz[k];
    }
  }
  for (int j = 0; j < a.hidden; ++j) {
    if (!(cache.hidden_pre[j] > T(0))) continue;
    gb1[j] += dh[j];
    T* row = gw1.data() + std::size_t(j) * a.input_dim;
    for (int i = 0; i < a.input_dim; ++i) row[i] += dh[j] * cache.input[i];
  }
}

template <typename T>
TextFeature<T> project_embedding(const ProjectionParams<T>& p, std::span<const double> pooled,
                                 std::string provider_id = {}) {
  std::vector<T> x(pooled.begin(), pooled.end());
  return {projection_forward<T>(p, x, nullptr), std::move(provider_id), kProjectionVersion};
}

}  // namespace cotrain
