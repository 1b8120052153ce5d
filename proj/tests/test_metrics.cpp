#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cotrain/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cotrain;

namespace {

LabelVolume mask_with(Shape3 s, std::initializer_list<Index3> fg) {
  LabelVolume m(s, 2);
  for (const auto& p : fg) m.at(p.z, p.y, p.x) = 1;
  return m;
}

LabelVolume cube(Shape3 s, Index3 lo, int edge) {
  LabelVolume m(s, 2);
  for (int z = 0; z < edge; ++z)
    for (int y = 0; y < edge; ++y)
      for (int x = 0; x < edge; ++x) m.at(lo.z + z, lo.y + y, lo.x + x) = 1;
  return m;
}

LabelVolume shifted(const LabelVolume& m, Index3 by, Shape3 out_shape) {
  LabelVolume out(out_shape, m.num_classes());
  const Shape3 s = m.shape();
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) out.at(z + by.z, y + by.y, x + by.x) = m.at(z, y, x);
  return out;
}

}  // namespace

TEST(Dice, HandExamples) {
  const Shape3 s{2, 2, 2};
  const auto a = mask_with(s, {{0, 0, 0}, {0, 0, 1}});
  const auto b = mask_with(s, {{0, 0, 0}, {1, 1, 1}});
  const auto c = mask_with(s, {{1, 0, 0}, {1, 1, 0}});
  EXPECT_DOUBLE_EQ(dice_coeff(a, a), 1.0);
  EXPECT_DOUBLE_EQ(dice_coeff(a, c), 0.0);
  EXPECT_DOUBLE_EQ(dice_coeff(a, b), 0.5);
  EXPECT_DOUBLE_EQ(jaccard_coeff(a, b), 1.0 / 3.0);
}

TEST(Dice, BothEmptyIsOne) {
  const LabelVolume e({3, 3, 3}, 2);
  EXPECT_DOUBLE_EQ(dice_coeff(e, e), 1.0);
  EXPECT_DOUBLE_EQ(jaccard_coeff(e, e), 1.0);
}

TEST(Dice, ShapeMismatchThrows) {
  EXPECT_THROW(dice_coeff(LabelVolume({2, 2, 2}, 2), LabelVolume({2, 2, 3}, 2)), Error);
  EXPECT_THROW(hd95(LabelVolume({2, 2, 2}, 2), LabelVolume({2, 2, 3}, 2)), Error);
}

TEST(Dice, JaccardRelationOnRandomMasks) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const auto a = test::random_labels({6, 6, 6}, rng, rng.uniform(0.05, 0.6));
    const auto b = test::random_labels({6, 6, 6}, rng, rng.uniform(0.05, 0.6));
    const double d = dice_coeff(a, b);
    EXPECT_NEAR(jaccard_coeff(a, b), d / (2.0 - d), 1e-12);
    EXPECT_DOUBLE_EQ(d, dice_coeff(b, a));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Surface, SingleVoxelIsItsOwnSurface) {
  const auto m = mask_with({5, 5, 5}, {{2, 2, 2}});
  const auto s = surface_voxels(m);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], (Index3{2, 2, 2}));
}

TEST(Surface, SolidCubeHas26) {
  EXPECT_EQ(surface_voxels(cube({5, 5, 5}, {1, 1, 1}, 3)).size(), 26u);
}

TEST(Surface, EmptyMaskHasNone) { EXPECT_TRUE(surface_voxels(LabelVolume({4, 4, 4}, 2)).empty()); }

TEST(Surface, VolumeBoundaryCountsAsBackground) {
  LabelVolume full({3, 3, 3}, 2);
  for (auto& c : full.classes()) c = 1;
  EXPECT_EQ(surface_voxels(full).size(), 26u);
}

TEST(DistanceField, MatchesExhaustiveSearch) {
  Rng rng(12);
  const Shape3 s{7, 5, 9};
  std::vector<Index3> sites;
  for (int i = 0; i < 6; ++i) sites.push_back({rng.uniform_int(0, 6), rng.uniform_int(0, 4), rng.uniform_int(0, 8)});
  const auto field = squared_distance_field(s, sites);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double best = 1e300;
        for (const auto& p : sites)
          best = std::min(best, double((z - p.z) * (z - p.z) + (y - p.y) * (y - p.y) + (x - p.x) * (x - p.x)));
        EXPECT_DOUBLE_EQ(field[s.index(z, y, x)], best);
      }
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 0.95), 9.5);
  EXPECT_DOUBLE_EQ(percentile({7}, 0.95), 7.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_THROW(percentile({}, 0.5), Error);
}

TEST(Hd95, SingleVoxelsThreeApart) {
  const Shape3 s{1, 1, 8};
  const auto a = mask_with(s, {{0, 0, 1}});
  const auto b = mask_with(s, {{0, 0, 4}});
  EXPECT_DOUBLE_EQ(hd95(a, b), 3.0);
  EXPECT_DOUBLE_EQ(asd(a, b), 3.0);
}

TEST(Hd95, IdenticalIsZero) {
  const auto m = cube({6, 6, 6}, {1, 1, 1}, 3);
  EXPECT_DOUBLE_EQ(hd95(m, m), 0.0);
  EXPECT_DOUBLE_EQ(asd(m, m), 0.0);
}

TEST(Hd95, MatchesBruteForceOnRandomPairs) {
  Rng rng(13);
  for (int t = 0; t < 200; ++t) {
    const auto a = test::random_labels({8, 8, 8}, rng, rng.uniform(0.02, 0.5));
    const auto b = test::random_labels({8, 8, 8}, rng, rng.uniform(0.02, 0.5));
    if (a.count(0) == a.size() || b.count(0) == b.size()) continue;
    const auto ref = test::brute_surface_metrics(a, b);
    EXPECT_NEAR(hd95(a, b), ref.hd95, 1e-9);
    EXPECT_NEAR(asd(a, b), ref.asd, 1e-9);
  }
}

TEST(Hd95, SymmetricAndTranslationInvariant) {
  Rng rng(14);
  for (int t = 0; t < 30; ++t) {
    const auto a = test::random_labels({6, 6, 6}, rng, 0.3);
    const auto b = test::random_labels({6, 6, 6}, rng, 0.3);
    EXPECT_NEAR(hd95(a, b), hd95(b, a), 1e-12);
    EXPECT_NEAR(asd(a, b), asd(b, a), 1e-12);
    // Both copies sit away from the grid border, so only the offset differs.
    const Index3 o1{2, 2, 2}, o2{3, 1, 4};
    const auto a1 = shifted(a, o1, {11, 11, 11}), b1 = shifted(b, o1, {11, 11, 11});
    const auto a2 = shifted(a, o2, {11, 11, 11}), b2 = shifted(b, o2, {11, 11, 11});
    EXPECT_NEAR(hd95(a1, b1), hd95(a2, b2), 1e-12);
    EXPECT_NEAR(asd(a1, b1), asd(a2, b2), 1e-12);
    EXPECT_NEAR(dice_coeff(a1, b1), dice_coeff(a, b), 1e-12);
  }
}

TEST(Hd95, PooledVersusMaxDirected) {
  // A cube against one of its corner voxels: pooling adds the dot's zero
  // distance, which can only lower the percentile.
  const Shape3 s{6, 6, 6};
  const auto big = cube(s, {0, 0, 0}, 6);
  const auto dot = mask_with(s, {{0, 0, 0}});
  const double pooled = hd95(big, dot);
  const double maxdir = hd95(big, dot, {HdVariant::MaxDirected, -1.0});
  EXPECT_GE(maxdir, pooled);
  const auto ab = directed_surface_distances(big, dot);
  EXPECT_NEAR(maxdir, percentile(ab, 0.95), 1e-12);
  EXPECT_NEAR(pooled, test::brute_surface_metrics(big, dot).hd95, 1e-9);
}

TEST(Hd95, EmptyHandling) {
  const Shape3 s{4, 5, 6};
  const LabelVolume e(s, 2);
  const auto m = mask_with(s, {{1, 1, 1}});
  const auto one = hd95_metric(e, m);
  EXPECT_TRUE(one.empty_flag);
  EXPECT_DOUBLE_EQ(one.value, std::sqrt(16.0 + 25.0 + 36.0));
  EXPECT_DOUBLE_EQ(hd95(m, e, {HdVariant::Pooled, 99.0}), 99.0);
  const auto both = asd_metric(e, e);
  EXPECT_TRUE(both.empty_flag);
  EXPECT_DOUBLE_EQ(both.value, 0.0);
}

TEST(Evaluate, PerfectPrediction) {
  const auto m = cube({6, 6, 6}, {1, 2, 1}, 3);
  const auto r = evaluate(m, m, "v");
  EXPECT_EQ(r.id, "v");
  EXPECT_DOUBLE_EQ(r.dice, 1.0);
  EXPECT_DOUBLE_EQ(r.jaccard, 1.0);
  EXPECT_DOUBLE_EQ(r.hd95, 0.0);
  EXPECT_DOUBLE_EQ(r.asd, 0.0);
  EXPECT_FALSE(r.empty_flag);
}

TEST(Evaluate, EmptyPrediction) {
  const auto gt = cube({6, 6, 6}, {1, 2, 1}, 3);
  const auto r = evaluate(LabelVolume(gt.shape(), 2), gt);
  EXPECT_DOUBLE_EQ(r.dice, 0.0);
  EXPECT_DOUBLE_EQ(r.jaccard, 0.0);
  EXPECT_TRUE(r.empty_flag);
}

TEST(Evaluate, ToySetMeansMatchHandAverages) {
  const Shape3 s{1, 1, 8};
  const auto g = mask_with(s, {{0, 0, 1}, {0, 0, 2}});
  // v0: perfect. v1: one of two voxels. v2: single voxel three away from g's nearest.
  const auto p0 = g;
  const auto p1 = mask_with(s, {{0, 0, 1}});
  const auto p2 = mask_with(s, {{0, 0, 5}});
  const auto rep = aggregate({evaluate(p0, g, "v0"), evaluate(p1, g, "v1"), evaluate(p2, g, "v2")});
  ASSERT_EQ(rep.volumes.size(), 3u);
  // Dice: 1, 2/3, 0. Jaccard: 1, 1/2, 0.
  EXPECT_NEAR(rep.mean.dice, (1.0 + 2.0 / 3.0 + 0.0) / 3.0, 1e-12);
  EXPECT_NEAR(rep.mean.jaccard, (1.0 + 0.5 + 0.0) / 3.0, 1e-12);
  // v1 distances: p1->g {0}, g->p1 {0, 1}; pooled {0,0,1}: hd95 0.9, asd 1/3.
  EXPECT_NEAR(rep.volumes[1].hd95, 0.9, 1e-12);
  EXPECT_NEAR(rep.volumes[1].asd, 1.0 / 3.0, 1e-12);
  // v2 distances: p2->g {3}, g->p2 {4, 3}; pooled {3,3,4}: hd95 3.9, asd 10/3.
  EXPECT_NEAR(rep.volumes[2].hd95, 3.9, 1e-12);
  EXPECT_NEAR(rep.volumes[2].asd, 10.0 / 3.0, 1e-12);
  EXPECT_NEAR(rep.mean.hd95, (0.0 + 0.9 + 3.9) / 3.0, 1e-12);
  EXPECT_NEAR(rep.mean.asd, (0.0 + 1.0 / 3.0 + 10.0 / 3.0) / 3.0, 1e-12);
  EXPECT_FALSE(rep.mean.empty_flag);
}

TEST(Evaluate, CsvLayout) {
  const auto m = mask_with({2, 2, 2}, {{0, 0, 0}});
  const auto rep = aggregate({evaluate(m, m, "a")});
  const auto csv = eval_report_csv(rep);
  EXPECT_EQ(csv,
            "id,dice,jaccard,hd95,asd,empty_flag\n"
            "a,1.000000,1.000000,0.000000,0.000000,0\n"
            "mean,1.000000,1.000000,0.000000,0.000000,0\n");
  test::TempDir dir("metrics");
  write_eval_report(rep, dir / "m.csv");
  std::ifstream in(dir / "m.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), csv);
}

TEST(Evaluate, AnyNonzeroClassIsForeground) {
  LabelVolume a({1, 1, 4}, 3), b({1, 1, 4}, 3);
  a.at(0, 0, 1) = 1;
  b.at(0, 0, 1) = 2;
  EXPECT_DOUBLE_EQ(dice_coeff(a, b), 1.0);
}
