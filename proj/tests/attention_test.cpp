#include "presage/attention.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracle.hpp"

using namespace presage;

namespace {

AttentionMap uniform_attention(uint32_t w, uint32_t h) {
  AttentionMap a;
  a.alpha = Tensor({w, h}, 1.0f / (w * h));
  return a;
}

AttentionMap one_hot_attention(uint32_t w, uint32_t h, uint32_t i, uint32_t j) {
  AttentionMap a;
  a.alpha = Tensor({w, h});
  a.alpha.at(i, j) = 1.0f;
  return a;
}

BoxProposal box(float x1, float y1, float x2, float y2) {
  BoxProposal b;
  b.x1 = x1;
  b.y1 = y1;
  b.x2 = x2;
  b.y2 = y2;
  return b;
}

std::vector<ScoredBox> scored(const std::vector<std::pair<BoxProposal, float>>& v) {
  std::vector<ScoredBox> out;
  for (const auto& [b, e] : v) out.push_back({b, e});
  return out;
}

}  // namespace

TEST(ErrorAttention, UniformErrorsGiveUniformAlpha) {
  Tensor e({8, 8}, 3.0f);
  AttentionMap a = error_attention(e, 4);
  for (size_t i = 0; i < a.alpha.size(); ++i) EXPECT_NEAR(a.alpha[i], 1.0 / 64.0, 1e-7);
  EXPECT_EQ(a.frame_index, 4);
}

TEST(ErrorAttention, SingleLargeErrorDominates) {
  Tensor e({8, 8}, 0.0f);
  e.at(3, 5) = 20.0f;
  AttentionMap a = error_attention(e);
  EXPECT_GT(a.alpha.at(3, 5), 0.999f);
  const auto [i, j] = a.argmax_cell();
  EXPECT_EQ(i, 3u);
  EXPECT_EQ(j, 5u);
}

TEST(ErrorAttention, SumsToOneOnRandomInputs) {
  for (int trial = 0; trial < 30; ++trial) {
    Tensor e = oracle::random_tensor({6, 5}, 40 + trial, 0.0f, 30.0f);
    AttentionMap a = error_attention(e);
    double sum = 0.0;
    for (size_t i = 0; i < a.alpha.size(); ++i) sum += a.alpha[i];
    ASSERT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(BoxEnergy, CenteredBoxHasZeroEnergy) {
  // 4x4 grid on a 64x64 frame: cell (1,2) center is (24, 40).
  AttentionMap a = one_hot_attention(4, 4, 1, 2);
  EnergyConfig cfg;
  cfg.w_t = 0.0f;
  const float e = box_energy(box(16, 32, 32, 48), a, {}, cfg, 64, 64);
  EXPECT_NEAR(e, 0.0f, 1e-7);
}

TEST(BoxEnergy, DerivedArithmeticCase) {
  // 4x4 grid on 64x64: cell (0,0) center is pixel (8,8). Box center (32,32).
  // energy = 0.75 * sqrt(24^2+24^2)/sqrt(64^2+64^2) = 0.75 * 3/8 = 0.28125.
  AttentionMap a = one_hot_attention(4, 4, 0, 0);
  EnergyConfig cfg;
  cfg.w_alpha = 0.75f;
  cfg.w_t = 0.0f;
  const float e = box_energy(box(24, 24, 40, 40), a, {}, cfg, 64, 64);
  EXPECT_NEAR(e, 0.28125f, 1e-6);
}

TEST(BoxEnergy, RankingEqualsCenterDistanceRanking) {
  AttentionMap a = one_hot_attention(8, 8, 2, 6);
  EnergyConfig cfg;
  cfg.w_t = 0.0f;
  std::mt19937 gen(3);
  std::vector<BoxProposal> boxes;
  for (int i = 0; i < 20; ++i) {
    const float x1 = gen() % 48, y1 = gen() % 48;
    boxes.push_back(box(x1, y1, x1 + 8 + gen() % 8, y1 + 8 + gen() % 8));
  }
  const auto [ci, cj] = a.argmax_cell();
  const auto [px, py] = cell_center(ci, cj, 8, 8, 64, 64);
  std::vector<std::pair<float, float>> pairs;  // (energy, distance)
  for (const auto& b : boxes) {
    const float e = box_energy(b, a, {}, cfg, 64, 64);
    const float dx = b.cx() - px, dy = b.cy() - py;
    pairs.emplace_back(e, std::sqrt(dx * dx + dy * dy));
  }
  auto by_energy = pairs;
  std::sort(by_energy.begin(), by_energy.end());
  for (size_t i = 1; i < by_energy.size(); ++i) {
    ASSERT_GE(by_energy[i].second + 1e-5, by_energy[i - 1].second);
  }
}

// Moving a box center strictly closer to the argmax never raises its energy.
TEST(BoxEnergy, MonotoneInCenterDistance) {
  AttentionMap a = one_hot_attention(8, 8, 5, 2);
  EnergyConfig cfg;
  cfg.w_t = 0.0f;
  const auto [ci, cj] = a.argmax_cell();
  const auto [px, py] = cell_center(ci, cj, 8, 8, 64, 64);
  std::mt19937 gen(11);
  for (int trial = 0; trial < 50; ++trial) {
    const float x1 = gen() % 44, y1 = gen() % 44;
    BoxProposal far_box = box(x1, y1, x1 + 12, y1 + 12);
    // A box of the same size whose center moves halfway toward the argmax.
    const float nx = (far_box.cx() + px) * 0.5f, ny = (far_box.cy() + py) * 0.5f;
    BoxProposal near_box = box(std::max(0.0f, nx - 6), std::max(0.0f, ny - 6),
                               std::min(64.0f, nx + 6), std::min(64.0f, ny + 6));
    if (!near_box.valid(64, 64)) continue;
    const float e_far = box_energy(far_box, a, {}, cfg, 64, 64);
    const float e_near = box_energy(near_box, a, {}, cfg, 64, 64);
    ASSERT_LE(e_near, e_far + 1e-6);
  }
}

TEST(BoxEnergy, TemporalTermUsesNearestPreviousBox) {
  AttentionMap a = one_hot_attention(4, 4, 0, 0);
  EnergyConfig cfg;
  cfg.w_alpha = 0.0f;
  cfg.w_t = 1.0f;
  std::vector<BoxProposal> prev = {box(0, 0, 8, 8), box(40, 40, 56, 56)};
  // Box centered at (48,48): nearest prev center is (48,48) -> delta 0.
  EXPECT_NEAR(box_energy(box(40, 40, 56, 56), a, prev, cfg, 64, 64), 0.0f, 1e-7);
  // First frame: no previous boxes, no temporal cost.
  EXPECT_NEAR(box_energy(box(40, 40, 56, 56), a, {}, cfg, 64, 64), 0.0f, 1e-7);
}

TEST(BoxEnergy, MalformedBoxIsValidationError) {
  AttentionMap a = uniform_attention(4, 4);
  EnergyConfig cfg;
  EXPECT_THROW(box_energy(box(10, 0, 10, 10), a, {}, cfg, 64, 64), ValidationError);
  EXPECT_THROW(box_energy(box(0, 0, 80, 10), a, {}, cfg, 64, 64), ValidationError);
}

TEST(SelectTopk, ReturnsAllWhenFewerThanK) {
  AttentionMap a = uniform_attention(4, 4);
  EnergyConfig cfg;  // k = 10
  std::vector<BoxProposal> proposals = {box(0, 0, 8, 8), box(8, 8, 16, 16),
                                        box(16, 16, 32, 32)};
  auto out = select_topk(proposals, a, {}, cfg, 64, 64);
  ASSERT_EQ(out.size(), 3u);
  for (size_t i = 1; i < out.size(); ++i) ASSERT_GE(out[i].energy, out[i - 1].energy);
}

TEST(SelectTopk, KLimitsSelection) {
  AttentionMap a = one_hot_attention(8, 8, 4, 4);
  EnergyConfig cfg;
  cfg.k = 2;
  std::vector<BoxProposal> proposals;
  for (int i = 0; i < 10; ++i) proposals.push_back(box(i * 4.0f, 0, i * 4.0f + 16, 16));
  auto out = select_topk(proposals, a, {}, cfg, 64, 64);
  EXPECT_EQ(out.size(), 2u);
}

TEST(SelectTopk, EmptyProposalsGiveEmptySelection) {
  AttentionMap a = uniform_attention(4, 4);
  EnergyConfig cfg;
  EXPECT_TRUE(select_topk({}, a, {}, cfg, 64, 64).empty());
}

TEST(SelectTopk, TieBreakIsAreaThenCoordinates) {
  AttentionMap a = one_hot_attention(4, 4, 2, 2);  // center (40, 40)
  EnergyConfig cfg;
  cfg.k = 3;
  // Two boxes with identical centers: the smaller area must rank first.
  std::vector<BoxProposal> proposals = {box(24, 24, 56, 56), box(32, 32, 48, 48)};
  auto out = select_topk(proposals, a, {}, cfg, 64, 64);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_LT(out[0].box.area(), out[1].box.area());
}

TEST(SelectTopk, PermutationStable) {
  AttentionMap a = one_hot_attention(8, 8, 3, 3);
  EnergyConfig cfg;
  cfg.k = 5;
  std::vector<BoxProposal> proposals;
  std::mt19937 gen(9);
  for (int i = 0; i < 24; ++i) {
    const float x1 = gen() % 40, y1 = gen() % 40;
    proposals.push_back(box(x1, y1, x1 + 8 + gen() % 16, y1 + 8 + gen() % 16));
  }
  auto ref = select_topk(proposals, a, {}, cfg, 64, 64);
  std::shuffle(proposals.begin(), proposals.end(), gen);
  auto shuffled = select_topk(proposals, a, {}, cfg, 64, 64);
  ASSERT_EQ(ref.size(), shuffled.size());
  for (size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(ref[i].box.x1, shuffled[i].box.x1);
    EXPECT_EQ(ref[i].box.y1, shuffled[i].box.y1);
    EXPECT_EQ(ref[i].box.x2, shuffled[i].box.x2);
    EXPECT_EQ(ref[i].box.y2, shuffled[i].box.y2);
    EXPECT_EQ(ref[i].energy, shuffled[i].energy);
  }
}

// Scaling the raw errors by a positive constant moves alpha values but not
// the argmax, so the selection is unchanged.
TEST(SelectTopk, InvariantToPositiveErrorScaling) {
  Tensor e = oracle::random_tensor({8, 8}, 77, 0.0f, 5.0f);
  Tensor e2 = e;
  for (size_t i = 0; i < e2.size(); ++i) e2[i] *= 3.5f;
  AttentionMap a1 = error_attention(e);
  AttentionMap a2 = error_attention(e2);
  EXPECT_EQ(a1.argmax_cell(), a2.argmax_cell());
  EnergyConfig cfg;
  std::vector<BoxProposal> proposals;
  std::mt19937 gen(5);
  for (int i = 0; i < 12; ++i) {
    const float x1 = gen() % 40, y1 = gen() % 40;
    proposals.push_back(box(x1, y1, x1 + 12, y1 + 12));
  }
  auto s1 = select_topk(proposals, a1, {}, cfg, 64, 64);
  auto s2 = select_topk(proposals, a2, {}, cfg, 64, 64);
  ASSERT_EQ(s1.size(), s2.size());
  for (size_t i = 0; i < s1.size(); ++i) {
    EXPECT_EQ(s1[i].box.x1, s2[i].box.x1);
    EXPECT_EQ(s1[i].box.y1, s2[i].box.y1);
  }
}

TEST(TubeTracker, ContinuousSelectionsMakeOneTube) {
  TubeTracker tracker(5);
  for (int64_t f = 1; f <= 30; ++f) {
    tracker.observe(f, scored({{box(0, 0, 8, 8), 0.1f}}));
  }
  tracker.finish();
  ASSERT_EQ(tracker.tubes().size(), 1u);
  EXPECT_EQ(tracker.tubes()[0].entries.size(), 30u);
  EXPECT_EQ(tracker.tubes()[0].first_frame(), 1);
  EXPECT_EQ(tracker.tubes()[0].last_frame(), 30);
}

TEST(TubeTracker, LongGapClosesTube) {
  TubeTracker tracker(5);
  for (int64_t f = 0; f < 10; ++f) tracker.observe(f, scored({{box(0, 0, 8, 8), 0.1f}}));
  for (int64_t f = 10; f < 16; ++f) tracker.observe(f, {});  // 6-frame gap
  for (int64_t f = 16; f < 20; ++f) tracker.observe(f, scored({{box(8, 8, 16, 16), 0.2f}}));
  tracker.finish();
  ASSERT_EQ(tracker.tubes().size(), 2u);
  EXPECT_EQ(tracker.tubes()[0].last_frame(), 9);
  EXPECT_EQ(tracker.tubes()[1].first_frame(), 16);
}

TEST(TubeTracker, ShortGapIsBridgedContiguously) {
  TubeTracker tracker(5);
  for (int64_t f = 0; f < 5; ++f) tracker.observe(f, scored({{box(0, 0, 8, 8), 0.1f}}));
  for (int64_t f = 5; f < 8; ++f) tracker.observe(f, {});  // 3-frame gap, tolerated
  tracker.observe(8, scored({{box(16, 16, 24, 24), 0.3f}}));
  tracker.finish();
  ASSERT_EQ(tracker.tubes().size(), 1u);
  const auto& entries = tracker.tubes()[0].entries;
  ASSERT_EQ(entries.size(), 9u);
  for (size_t i = 0; i < entries.size(); ++i) {
    ASSERT_EQ(entries[i].frame, static_cast<int64_t>(i));
  }
  // Bridged frames hold the last real box.
  EXPECT_EQ(entries[6].box.x1, 0.0f);
  EXPECT_EQ(entries[8].box.x1, 16.0f);
}

TEST(TubeTracker, TubesAreAlwaysContiguous) {
  std::mt19937 gen(17);
  TubeTracker tracker(5);
  for (int64_t f = 0; f < 200; ++f) {
    if (gen() % 3 == 0) {
      tracker.observe(f, {});
    } else {
      const float x1 = gen() % 40;
      tracker.observe(f, scored({{box(x1, x1, x1 + 10, x1 + 10), 0.1f}}));
    }
  }
  tracker.finish();
  ASSERT_FALSE(tracker.tubes().empty());
  for (const auto& tube : tracker.tubes()) {
    for (size_t i = 1; i < tube.entries.size(); ++i) {
      ASSERT_EQ(tube.entries[i].frame, tube.entries[i - 1].frame + 1);
    }
  }
}

TEST(TemporalMask, ConstantSeriesNeverActive) {
  TemporalActionMask mask(0.5, 5);
  for (int t = 0; t < 50; ++t) EXPECT_FALSE(mask.update(2.5f));
}

TEST(TemporalMask, StepJumpFires) {
  TemporalActionMask mask(0.5, 5);
  for (int t = 0; t < 20; ++t) EXPECT_FALSE(mask.update(1.0f));
  EXPECT_TRUE(mask.update(5.0f));
}

TEST(TemporalMask, WarmupSuppressesEarlyFrames) {
  TemporalActionMask mask(0.5, 5);
  EXPECT_FALSE(mask.update(0.0f));
  // A huge jump inside warm-up must stay inactive.
  EXPECT_FALSE(mask.update(100.0f));
  EXPECT_FALSE(mask.update(0.0f));
  EXPECT_FALSE(mask.update(0.0f));
  EXPECT_FALSE(mask.update(0.0f));
  // After warm-up a fresh jump fires.
  EXPECT_TRUE(mask.update(10000.0f));
}

TEST(GazeSaliency, OneHotPeaksAtCellPixelCenter) {
  // 8x8 grid on 56x56: scale 7 per cell, cell (2,3) center = (17.5, 24.5),
  // i.e. pixel (17, 24) exactly.
  AttentionMap a = one_hot_attention(8, 8, 2, 3);
  GazeOutput g = gaze_saliency(a, 56, 56);
  EXPECT_EQ(g.x, 17u);
  EXPECT_EQ(g.y, 24u);
}

TEST(GazeSaliency, UniformAlphaFallsBackToScanOrder) {
  AttentionMap a = uniform_attention(8, 8);
  GazeOutput g = gaze_saliency(a, 64, 64);
  EXPECT_EQ(g.x, 0u);
  EXPECT_EQ(g.y, 0u);
  for (size_t i = 0; i < g.saliency.size(); ++i) {
    ASSERT_NEAR(g.saliency[i], 1.0 / (64.0 * 64.0), 1e-9);
  }
}

TEST(GazeSaliency, RenormalizedToUnitMass) {
  for (int trial = 0; trial < 10; ++trial) {
    Tensor e = oracle::random_tensor({8, 8}, 60 + trial, 0.0f, 10.0f);
    AttentionMap a = error_attention(e);
    GazeOutput g = gaze_saliency(a, 64, 48);
    double sum = 0.0;
    for (size_t i = 0; i < g.saliency.size(); ++i) sum += g.saliency[i];
    ASSERT_NEAR(sum, 1.0, 1e-5);
  }
}

TEST(EnergyConfig, Validation) {
  EnergyConfig bad;
  bad.k = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = EnergyConfig{};
  bad.w_alpha = 1.5f;
  EXPECT_THROW(bad.validate(), ConfigError);
}
