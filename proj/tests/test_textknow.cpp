#include <gtest/gtest.h>

#include "cotrain/textknow.hpp"
#include "support.hpp"

using namespace cotrain;

namespace {

const std::filesystem::path kDataDir = std::filesystem::path(COTRAIN_SOURCE_DIR) / "data";

/// Dense reference for the two-layer perceptron, written out from the weight layout.
std::vector<double> reference_mlp(const ProjectionParams<double>& p, const std::vector<double>& x) {
  const auto& a = p.arch;
  const auto& w1 = p.weights[p.kW1].values;
  const auto& b1 = p.weights[p.kB1].values;
  const auto& w2 = p.weights[p.kW2].values;
  const auto& b2 = p.weights[p.kB2].values;
  std::vector<double> h(a.hidden), z(a.output_dim);
  for (int j = 0; j < a.hidden; ++j) {
    double s = b1[j];
    for (int i = 0; i < a.input_dim; ++i) s += w1[j * a.input_dim + i] * x[i];
    h[j] = std::max(0.0, s);
  }
  for (int k = 0; k < a.output_dim; ++k) {
    double s = b2[k];
    for (int j = 0; j < a.hidden; ++j) s += w2[k * a.hidden + j] * h[j];
    z[k] = s;
  }
  return z;
}

class ThrowingProvider final : public EmbeddingProvider {
public:
  std::string id() const override { return "broken"; }
  std::vector<std::vector<float>> embed(const std::vector<std::string>&) const override {
    throw std::runtime_error("service unavailable");
  }
};

class MixedDimProvider final : public EmbeddingProvider {
public:
  std::string id() const override { return "mixed"; }
  std::vector<std::vector<float>> embed(const std::vector<std::string>& r) const override {
    std::vector<std::vector<float>> rows;
    for (std::size_t i = 0; i < r.size(); ++i) rows.emplace_back(4 + i, 0.5f);
    return rows;
  }
};

}  // namespace

TEST(Descriptions, ShippedFileHasFifteenResponses) {
  const auto ds = load_descriptions(kDataDir / "descriptions.txt");
  EXPECT_EQ(ds.responses.size(), 15u);
  EXPECT_EQ(ds.prompts.size(), 1u);
  for (const auto& r : ds.responses) EXPECT_FALSE(r.empty());
}

TEST(Descriptions, ResponsesKeptVerbatimAndWhitespaceBlocksIgnored) {
  const auto ds = parse_descriptions("first line\n  indented second\n\nprompt: ask\n\nthird\n\n   \n\t\n");
  ASSERT_EQ(ds.responses.size(), 2u);
  EXPECT_EQ(ds.responses[0], "first line\n  indented second");
  EXPECT_EQ(ds.responses[1], "third");
  ASSERT_EQ(ds.prompts.size(), 1u);
  EXPECT_EQ(ds.prompts[0], "ask");
}

TEST(Descriptions, EmptyFileIsAnError) {
  test::TempDir dir("desc");
  binio::write_text_atomic(dir / "empty.txt", "");
  EXPECT_THROW(load_descriptions(dir / "empty.txt"), Error);
  EXPECT_THROW(parse_descriptions("\n\n  \n"), Error);
}

TEST(Embeddings, HashProviderIsDeterministic) {
  const HashEmbeddingProvider p(64);
  DescriptionSet ds{{}, {"Bright smooth blob", "bright SMOOTH blob", "something else"}};
  const auto a = embed_descriptions(p, ds), b = embed_descriptions(p, ds);
  EXPECT_EQ(a.rows, b.rows);
  // Tokens are lowercased, so the first two responses embed identically.
  EXPECT_EQ(a.rows[0], a.rows[1]);
  EXPECT_NE(a.rows[0], a.rows[2]);
  EXPECT_EQ(a.dim, 64);
}

TEST(Embeddings, HashTokenVectorsAreUnitNorm) {
  const HashEmbeddingProvider p(768);
  for (const char* tok : {"a", "blob", "ellipsoid", "voxel"}) {
    double n = 0.0;
    for (float v : p.token_vector(tok)) n += double(v) * v;
    EXPECT_NEAR(n, 1.0, 1e-5) << tok;
  }
}

TEST(Embeddings, ShippedFixtureIsFifteenBy768) {
  const auto ds = load_descriptions(kDataDir / "descriptions.txt");
  const FileEmbeddingProvider p(kDataDir / "embeddings.emb1");
  const auto m = embed_descriptions(p, ds);
  EXPECT_EQ(m.size(), 15u);
  EXPECT_EQ(m.dim, 768);
}

TEST(Embeddings, ShippedFixtureMatchesHashProvider) {
  // The fixture is the hash provider's output for the shipped descriptions.
  const auto ds = load_descriptions(kDataDir / "descriptions.txt");
  const auto stored = read_embeddings(kDataDir / "embeddings.emb1");
  const auto fresh = embed_descriptions(HashEmbeddingProvider(768), ds);
  EXPECT_EQ(stored.rows, fresh.rows);
}

TEST(Embeddings, Emb1Roundtrip) {
  test::TempDir dir("emb");
  Rng rng(2);
  EmbeddingMatrix m;
  m.dim = 5;
  for (int r = 0; r < 3; ++r) {
    m.rows.emplace_back();
    for (int i = 0; i < 5; ++i) m.rows.back().push_back(float(rng.normal()));
  }
  write_embeddings(m, dir / "m.emb1");
  const auto back = read_embeddings(dir / "m.emb1");
  EXPECT_EQ(back.rows, m.rows);
  EXPECT_EQ(back.dim, 5);
  const std::string bytes = binio::read_file(dir / "m.emb1");
  EXPECT_EQ(bytes.substr(0, 4), "EMB1");
}

TEST(Embeddings, MixedDimsAndProviderFailureAreErrors) {
  DescriptionSet ds{{}, {"one", "two"}};
  EXPECT_THROW(embed_descriptions(MixedDimProvider(), ds), Error);
  try {
    embed_descriptions(ThrowingProvider(), ds);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos);
  }
}

TEST(Embeddings, FileProviderRowCountMustMatch) {
  EmbeddingMatrix m;
  m.dim = 2;
  m.rows = {{1.0f, 2.0f}};
  DescriptionSet ds{{}, {"one", "two"}};
  EXPECT_THROW(embed_descriptions(FileEmbeddingProvider(m), ds), Error);
}

TEST(Pool, SingleRowIsItself) {
  EmbeddingMatrix m;
  m.dim = 3;
  m.rows = {{1.5f, -2.0f, 0.25f}};
  EXPECT_EQ(pool_embeddings(m), (std::vector<double>{1.5, -2.0, 0.25}));
}

TEST(Pool, OppositeRowsCancel) {
  EmbeddingMatrix m;
  m.dim = 3;
  m.rows = {{1.5f, -2.0f, 0.25f}, {-1.5f, 2.0f, -0.25f}};
  for (double v : pool_embeddings(m)) EXPECT_EQ(v, 0.0);
}

TEST(Pool, FifteenRandomRowsMatchColumnAverage) {
  Rng rng(4);
  EmbeddingMatrix m;
  m.dim = 768;
  for (int r = 0; r < 15; ++r) {
    m.rows.emplace_back(768);
    for (auto& v : m.rows.back()) v = float(rng.normal());
  }
  const auto pooled = pool_embeddings(m);
  for (int i = 0; i < 768; ++i) {
    long double s = 0;
    for (int r = 0; r < 15; ++r) s += m.rows[r][i];
    EXPECT_NEAR(pooled[i], double(s / 15), 1e-12);
  }
}

TEST(Projection, ZeroWeightsGiveZero) {
  const auto p = make_projection<double>({768, 256, 32});
  std::vector<double> x(768, 1.0);
  const auto tf = project_embedding(p, x, "t");
  EXPECT_EQ(tf.z.size(), 32u);
  for (double v : tf.z) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(tf.provider_id, "t");
  EXPECT_EQ(tf.projection_version, kProjectionVersion);
}

TEST(Projection, IdentityLikeWeightsTruncate) {
  auto p = make_projection<double>({40, 24, 16});
  auto w1 = p.weights.values(p.kW1), w2 = p.weights.values(p.kW2);
  for (int j = 0; j < 24; ++j) w1[j * 40 + j] = 1.0;
  for (int k = 0; k < 16; ++k) w2[k * 24 + k] = 1.0;
  std::vector<double> x(40);
  for (int i = 0; i < 40; ++i) x[i] = 0.1 * i;
  const auto tf = project_embedding(p, x);
  for (int k = 0; k < 16; ++k) EXPECT_EQ(tf.z[k], x[k]);
}

TEST(Projection, IdentityLikeWeightsPad) {
  auto p = make_projection<double>({8, 16, 12});
  auto w1 = p.weights.values(p.kW1), w2 = p.weights.values(p.kW2);
  for (int j = 0; j < 8; ++j) w1[j * 8 + j] = 1.0;
  for (int k = 0; k < 8; ++k) w2[k * 16 + k] = 1.0;
  const std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8};
  const auto tf = project_embedding(p, x);
  for (int k = 0; k < 12; ++k) EXPECT_EQ(tf.z[k], k < 8 ? x[k] : 0.0);
}

TEST(Projection, MatchesDenseReference) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = init_projection<double>({768, 256, 32}, rng);
    for (auto& b : p.weights.values(p.kB1)) b = 0.1 * rng.normal();
    for (auto& b : p.weights.values(p.kB2)) b = 0.1 * rng.normal();
    std::vector<double> x(768);
    for (auto& v : x) v = rng.normal();
    const auto z = project_embedding(p, x).z;
    const auto ref = reference_mlp(p, x);
    for (int k = 0; k < 32; ++k) EXPECT_NEAR(z[k], ref[k], 1e-10 * (1 + std::abs(ref[k])));
  }
}

TEST(Projection, WrongInputDimIsRejected) {
  const auto p = make_projection<double>({768, 256, 32});
  std::vector<double> x(700, 0.0);
  EXPECT_THROW(project_embedding(p, x), Error);
}

TEST(Projection, BackwardMatchesFiniteDifferences) {
  Rng rng(12);
  const ProjectionArch arch{12, 10, 6};
  auto p = init_projection<double>(arch, rng);
  for (auto& b : p.weights.values(p.kB1)) b = 0.3 * rng.normal();
  std::vector<double> x(12), dz(6);
  for (auto& v : x) v = rng.normal();
  for (auto& v : dz) v = rng.normal();
  auto loss = [&](const ProjectionParams<double>& q) {
    const auto z = projection_forward<double>(q, x, nullptr);
    double s = 0.0;
    for (int k = 0; k < 6; ++k) s += dz[k] * z[k];
    return s;
  };
  ProjectionCache<double> cache;
  projection_forward<double>(p, x, &cache);
  auto grads = p.weights.zeros_like();
  projection_backward<double>(p, cache, dz, grads);
  const double h = 1e-6;
  for (std::size_t t = 0; t < p.weights.count(); ++t) {
    auto vals = p.weights.values(t);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      // Skip units sitting on the ReLU kink, where the derivative is undefined.
      if (t == p.kW1 || t == p.kB1) {
        const int j = t == p.kB1 ? int(i) : int(i) / arch.input_dim;
        if (std::abs(cache.hidden_pre[j]) < 1e-4) continue;
      }
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = loss(p);
      vals[i] = orig - h;
      const double down = loss(p);
      vals[i] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_LT(test::rel_err(grads.values(t)[i], fd), 1e-6) << p.weights[t].name << "[" << i << "]";
    }
  }
}

TEST(Pipeline, DeterministicEndToEnd) {
  const auto ds = load_descriptions(kDataDir / "descriptions.txt");
  auto run = [&] {
    Rng rng(3);
    const auto p = init_projection<double>({768, 256, 32}, rng);
    return project_embedding(p, pool_embeddings(embed_descriptions(HashEmbeddingProvider(768), ds))).z;
  };
  EXPECT_EQ(run(), run());
}
