// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "tsdet/tsdet.hpp"

using namespace tsdet;
namespace tt = tsdet::testing;

TEST(Iou, HandValues) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {20, 20, 30, 30}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 0, 15, 10}), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0);  // touching edges
  EXPECT_DOUBLE_EQ(iou({3, 3, 3, 3}, {3, 3, 3, 3}), 0.0);       // degenerate
}

TEST(Iou, SymmetricBoundedAndMatchesReference) {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const Box a = tt::random_int_box(rng, 64, 40), b = tt::random_int_box(rng, 64, 40);
    const double o = iou(a, b);
    EXPECT_GE(o, 0.0);
    EXPECT_LE(o, 1.0);
    EXPECT_EQ(o, iou(b, a));
    EXPECT_EQ(o, tt::ref_iou(a, b));
  }
}

TEST(Deltas, EncodeHandValues) {
  const Box a{0, 0, 10, 10};
  const auto z = encode_deltas(a, a);
  for (float v : z) EXPECT_EQ(v, 0.0f);
  const auto d = encode_deltas(a, {5, 5, 15, 15});
  EXPECT_FLOAT_EQ(d[0], 0.5f);
  EXPECT_FLOAT_EQ(d[1], 0.5f);
  EXPECT_FLOAT_EQ(d[2], 0.0f);
  EXPECT_FLOAT_EQ(d[3], 0.0f);
  const auto w = encode_deltas(a, {-5, 0, 15, 10});
  EXPECT_FLOAT_EQ(w[2], std::log(2.0f));
  EXPECT_FLOAT_EQ(w[0], 0.0f);
}

TEST(Deltas, DecodeHandValues) {
  const Box a{0, 0, 10, 10};
  EXPECT_EQ(decode_deltas(a, Deltas{0, 0, 0, 0}), a);
  const Box b = decode_deltas(a, Deltas{0, 0, std::log(2.0f), 0});
  EXPECT_FLOAT_EQ(b.x1, -5.0f);
  EXPECT_FLOAT_EQ(b.x2, 15.0f);
  EXPECT_FLOAT_EQ(b.y1, 0.0f);
  EXPECT_FLOAT_EQ(b.y2, 10.0f);
}

TEST(Deltas, RoundTripOnRandomPairs) {
  Rng rng(5);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Box a{float(rng.uniform(0, 50)), float(rng.uniform(0, 50)), 0, 0};
    const Box anchor{a.x1, a.y1, a.x1 + float(rng.uniform(4, 40)), a.y1 + float(rng.uniform(4, 40))};
    const Box t{float(rng.uniform(0, 50)), float(rng.uniform(0, 50)), 0, 0};
    const Box target{t.x1, t.y1, t.x1 + float(rng.uniform(4, 40)), t.y1 + float(rng.uniform(4, 40))};
    const Box back = decode_deltas(anchor, encode_deltas(anchor, target));
    worst = std::max({worst, std::abs(double(back.x1) - target.x1), std::abs(double(back.y1) - target.y1), std::abs(double(back.x2) - target.x2),
                      std::abs(double(back.y2) - target.y2)});
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Deltas, RejectsDegenerateBoxesAndClampsScale) {
  EXPECT_THROW(encode_deltas({0, 0, 0, 10}, {0, 0, 5, 5}), DomainError);
  EXPECT_THROW(encode_deltas({0, 0, 10, 10}, {0, 0, 5, 0}), DomainError);
  const Box huge = decode_deltas({0, 0, 10, 10}, Deltas{0, 0, 100.0f, 100.0f});
  EXPECT_TRUE(std::isfinite(huge.x2));
  const Box clipped = decode_deltas({0, 0, 10, 10}, Deltas{0, 0, 3.0f, 3.0f}, 96, 96);
  EXPECT_GE(clipped.x1, 0.0f);
  EXPECT_LE(clipped.x2, 96.0f);
}

TEST(Nms, HandCases) {
  // IoU of these two boxes is 0.8.
  const Box a{0, 0, 10, 10}, b{0, 0, 10, 8};
  ASSERT_DOUBLE_EQ(iou(a, b), 0.8);
  auto kept = classwise_nms({{a, 0, 0.9f}, {b, 0, 0.8f}}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9f);
  kept = classwise_nms({{a, 0, 0.9f}, {b, 1, 0.8f}}, 0.5);
  EXPECT_EQ(kept.size(), 2u);
  EXPECT_TRUE(classwise_nms({}, 0.5).empty());
  EXPECT_THROW(classwise_nms({}, 0.0), DomainError);
  EXPECT_THROW(classwise_nms({}, 1.0), DomainError);
}

TEST(Nms, EqualScoresKeepEarlierInput) {
  const Box a{0, 0, 10, 10}, b{1, 0, 11, 10};
  const auto kept = classwise_nms({{b, 0, 0.5f}, {a, 0, 0.5f}}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].box, b);
}

TEST(Nms, MatchesBruteForceReference) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto d = tt::random_nms_fixture(seed);
    for (double thr : {0.3, 0.5, 0.7}) {
      const auto got = classwise_nms(d, thr);
      const auto ref = tt::ref_classwise_nms(d, thr);
      ASSERT_EQ(got.size(), ref.size()) << "seed " << seed;
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].box, ref[i].box);
        EXPECT_EQ(got[i].class_id, ref[i].class_id);
        EXPECT_EQ(got[i].score, ref[i].score);
      }
    }
  }
}

TEST(Nms, OutputIsSuppressionFreeSubset) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto d = tt::random_nms_fixture(seed);
    const auto kept = classwise_nms(d, 0.5);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      bool found = false;
      for (const auto& x : d) found = found || (x.box == kept[i].box && x.class_id == kept[i].class_id && x.score == kept[i].score);
      EXPECT_TRUE(found);
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].class_id == kept[j].class_id) {
          EXPECT_LT(iou(kept[i].box, kept[j].box), 0.5);
        }
      }
      if (i > 0) {
        EXPECT_GE(kept[i - 1].score, kept[i].score);
      }
    }
  }
}

TEST(Nms, PermutingDistinctScoresLeavesOutputUnchanged) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto d = tt::random_nms_fixture(seed);
    for (std::size_t i = 0; i < d.size(); ++i) d[i].score = 0.05f + 0.09f * static_cast<float>(i);
    const auto base = classwise_nms(d, 0.5);
    Rng rng(seed);
    rng.shuffle(d);
    const auto perm = classwise_nms(d, 0.5);
    ASSERT_EQ(base.size(), perm.size());
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base[i].box, perm[i].box);
  }
}
