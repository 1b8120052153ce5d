#include <gtest/gtest.h>

#include <limits>

#include "cotrain/core.hpp"
#include "cotrain/losses.hpp"
#include "support.hpp"

using namespace cotrain;

TEST(Shape3, IndexIsRowMajorWidthFastest) {
  const Shape3 s{2, 3, 4};
  EXPECT_EQ(s.voxels(), 24u);
  EXPECT_EQ(s.index(0, 0, 1), 1u);
  EXPECT_EQ(s.index(0, 1, 0), 4u);
  EXPECT_EQ(s.index(1, 0, 0), 12u);
  EXPECT_EQ(s.index(1, 2, 3), 23u);
  EXPECT_TRUE(s.contains(1, 2, 3));
  EXPECT_FALSE(s.contains(2, 0, 0));
  EXPECT_FALSE(s.contains(0, -1, 0));
}

TEST(Volume, RejectsNonPositiveShapeAndWrongCount) {
  EXPECT_THROW(Volume(Shape3{0, 2, 2}), Error);
  EXPECT_THROW(Volume(Shape3{2, 2, 2}, std::vector<float>(7)), Error);
}

TEST(Volume, RejectsNonFiniteValues) {
  std::vector<float> v(8, 0.0f);
  v[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(Volume(Shape3{2, 2, 2}, v), Error);
  v[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(Volume(Shape3{2, 2, 2}, v), Error);
}

TEST(LabelVolume, EnforcesClassRange) {
  EXPECT_THROW(LabelVolume(Shape3{2, 2, 2}, 1), Error);
  std::vector<std::uint8_t> c(8, 0);
  c[5] = 2;
  EXPECT_THROW(LabelVolume(Shape3{2, 2, 2}, 2, c), Error);
  EXPECT_NO_THROW(LabelVolume(Shape3{2, 2, 2}, 3, c));
  EXPECT_EQ(LabelVolume(Shape3{2, 2, 2}, 3, c).count(2), 1u);
}

TEST(Sample, LabelShapeMustMatchImage) {
  Sample s{"x", Volume(Shape3{2, 2, 2}), LabelVolume(Shape3{2, 2, 3}, 2)};
  EXPECT_THROW(s.validate(), Error);
  s.label = LabelVolume(Shape3{2, 2, 2}, 2);
  EXPECT_NO_THROW(s.validate());
}

TEST(Field, ChannelMajorLayout) {
  LogitVolume<float> f(2, Shape3{1, 2, 2});
  f.at(1, 0, 1, 0) = 5.0f;
  EXPECT_EQ(f.values()[4 + 2], 5.0f);
  EXPECT_EQ(f(1, 2), 5.0f);
  EXPECT_EQ(f.channel(1)[2], 5.0f);
}

TEST(ValidateProbVolume, UniformHalfIsValid) {
  ProbVolume<double> p(2, Shape3{2, 2, 2}, 0.5);
  EXPECT_TRUE(validate_prob_volume(p));
}

TEST(ValidateProbVolume, ReportsFirstViolatingVoxelAndSum) {
  ProbVolume<double> p(2, Shape3{2, 2, 2}, 0.5);
  p(0, 5) = 0.7;
  p(1, 5) = 0.7;
  const auto r = validate_prob_volume(p);
  EXPECT_FALSE(r);
  EXPECT_EQ(r.voxel, 5u);
  EXPECT_NEAR(r.class_sum, 1.4, 1e-12);
  EXPECT_FALSE(r.message.empty());
}

TEST(ValidateProbVolume, OutOfRangeValueIsReported) {
  ProbVolume<double> p(2, Shape3{1, 1, 2}, 0.5);
  p(0, 1) = 1.5;
  p(1, 1) = -0.5;
  const auto r = validate_prob_volume(p);
  EXPECT_FALSE(r);
  EXPECT_EQ(r.voxel, 1u);
}

TEST(ValidateProbVolume, SoftmaxOfRandomLogitsPasses) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + int(rng.below(4));
    auto logits = test::random_field<float, LogitTag>(k, Shape3{4, 5, 3}, rng, 10.0);
    EXPECT_TRUE(validate_prob_volume(softmax_probs(logits))) << "trial " << trial;
  }
}
