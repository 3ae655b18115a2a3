#include "presage/predictor.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "oracle.hpp"

using namespace presage;

namespace {

StackConfig small_config(uint32_t w = 2, uint32_t h = 2, uint32_t d = 4, uint32_t hidden = 8) {
  StackConfig cfg;
  cfg.grid_w = w;
  cfg.grid_h = h;
  cfg.feature_depth = d;
  cfg.hidden = hidden;
  cfg.bptt_window = 8;
  cfg.seed = 99;
  return cfg;
}

FeatureGrid random_grid(uint32_t w, uint32_t h, uint32_t d, uint32_t seed,
                        int64_t frame = 0, float amp = 1.0f) {
  FeatureGrid g(w, h, d, frame);
  g.values = oracle::random_tensor({w, h, d}, seed, -amp, amp);
  return g;
}

// Frames as the double-precision oracle wants them: [T][n][d].
std::vector<std::vector<oracle::Vec>> to_oracle_frames(const std::vector<FeatureGrid>& frames) {
  std::vector<std::vector<oracle::Vec>> out;
  for (const auto& g : frames) {
    std::vector<oracle::Vec> f(g.locations(), oracle::Vec(g.d));
    for (uint32_t loc = 0; loc < g.locations(); ++loc) {
      for (uint32_t k = 0; k < g.d; ++k) {
        f[loc][k] = g.values[static_cast<size_t>(loc) * g.d + k];
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<float> flatten_gradients(PredictorStack::StackGradients& g) {
  std::vector<float> out;
  g.for_each_tensor([&](const Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i) out.push_back(t[i]);
  });
  return out;
}

}  // namespace

TEST(StackForward, ZeroWeightsPredictZero) {
  StackConfig cfg = small_config();
  PredictorStack stack(cfg);
  for (int l = 0; l < 3; ++l) {
    stack.layer(l).for_each_tensor([](const char*, Tensor& t) { t.fill(0.0f); });
  }
  stack.head_weights().fill(0.0f);
  stack.head_bias().fill(0.0f);
  FeatureGrid g = random_grid(2, 2, 4, 1);
  FeatureGrid pred = stack.forward(g);
  for (size_t i = 0; i < pred.values.size(); ++i) EXPECT_FLOAT_EQ(pred.values[i], 0.0f);
}

TEST(StackForward, SharedWeightsAreLocationEquivariant) {
  StackConfig cfg = small_config(3, 2, 4, 8);
  PredictorStack a(cfg), b(cfg);
  FeatureGrid g = random_grid(3, 2, 4, 7);
  // Permute the 6 locations with a fixed cycle.
  const std::array<uint32_t, 6> perm = {3, 0, 5, 1, 4, 2};
  FeatureGrid gp(3, 2, 4, 0);
  for (uint32_t loc = 0; loc < 6; ++loc) {
    for (uint32_t k = 0; k < 4; ++k) {
      gp.values[static_cast<size_t>(perm[loc]) * 4 + k] =
          g.values[static_cast<size_t>(loc) * 4 + k];
    }
  }
  FeatureGrid pa = a.forward(g);
  FeatureGrid pb = b.forward(gp);
  for (uint32_t loc = 0; loc < 6; ++loc) {
    for (uint32_t k = 0; k < 4; ++k) {
      EXPECT_FLOAT_EQ(pa.values[static_cast<size_t>(loc) * 4 + k],
                      pb.values[static_cast<size_t>(perm[loc]) * 4 + k]);
    }
  }
}

TEST(StackForward, SingleCellMatchesScalarChainOracle) {
  StackConfig cfg = small_config(1, 1, 4, 6);
  PredictorStack stack(cfg);
  std::vector<FeatureGrid> frames = {random_grid(1, 1, 4, 11), random_grid(1, 1, 4, 12),
                                     random_grid(1, 1, 4, 13)};
  FeatureGrid pred;
  for (const auto& f : frames) pred = stack.forward(f);

  auto params = oracle::StackParams::from(stack);
  oracle::Vec h[3], m[3];
  for (int l = 0; l < 3; ++l) {
    h[l] = oracle::Vec(6, 0.0);
    m[l] = oracle::Vec(6, 0.0);
  }
  oracle::Vec out(4, 0.0);
  for (const auto& f : frames) {
    oracle::Vec x(4);
    for (int k = 0; k < 4; ++k) x[k] = f.values[k];
    oracle::cell_step(params.cells[0], x, h[0], m[0], nullptr);
    oracle::cell_step(params.cells[1], h[0], h[1], m[1], &m[0]);
    oracle::cell_step(params.cells[2], h[1], h[2], m[2], &m[1]);
  }
  for (int k = 0; k < 4; ++k) {
    double acc = params.head_b[k];
    for (int c = 0; c < 6; ++c) acc += params.head_w[k][c] * h[2][c];
    out[k] = acc;
  }
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(pred.values[k], out[k], 1e-5);
}

TEST(ZohLoss, StaticSceneScoresZero) {
  FeatureGrid cur = random_grid(3, 3, 5, 21);
  FeatureGrid next = cur;  // unchanged scene
  FeatureGrid pred = random_grid(3, 3, 5, 22);
  auto outcome = PredictorStack::zoh_loss(pred, next, cur);
  EXPECT_FLOAT_EQ(outcome.error_scalar, 0.0f);
  for (size_t i = 0; i < outcome.error_map.size(); ++i) {
    EXPECT_FLOAT_EQ(outcome.error_map[i], 0.0f);
  }
}

TEST(ZohLoss, PerfectPredictionScoresZero) {
  FeatureGrid cur = random_grid(3, 3, 5, 23);
  FeatureGrid next = random_grid(3, 3, 5, 24);
  auto outcome = PredictorStack::zoh_loss(next, next, cur);
  EXPECT_FLOAT_EQ(outcome.error_scalar, 0.0f);
}

TEST(ZohLoss, HandCaseMatchesScalarOracle) {
  FeatureGrid cur(2, 2, 1), next(2, 2, 1), pred(2, 2, 1);
  cur.values = Tensor::from_data({2, 2, 1}, {1.0f, 2.0f, 3.0f, 4.0f});
  next.values = Tensor::from_data({2, 2, 1}, {1.5f, 2.0f, 2.0f, 5.0f});
  pred.values = Tensor::from_data({2, 2, 1}, {1.0f, 1.0f, 2.5f, 4.5f});
  auto outcome = PredictorStack::zoh_loss(pred, next, cur);
  // Per location: zoh = |next-cur|, e = zoh * |next-pred|^2 (d=1).
  const double e0 = 0.5 * 0.5 * 0.5;
  const double e1 = 0.0 * 1.0 * 1.0;
  const double e2 = 1.0 * 0.5 * 0.5;
  const double e3 = 1.0 * 0.5 * 0.5;
  EXPECT_NEAR(outcome.error_map[0], e0, 1e-7);
  EXPECT_NEAR(outcome.error_map[1], e1, 1e-7);
  EXPECT_NEAR(outcome.error_map[2], e2, 1e-7);
  EXPECT_NEAR(outcome.error_map[3], e3, 1e-7);
  EXPECT_NEAR(outcome.error_scalar, (e0 + e1 + e2 + e3) / 4.0, 1e-7);
}

TEST(ZohLoss, ScalarEqualsMapMean) {
  for (int trial = 0; trial < 20; ++trial) {
    FeatureGrid cur = random_grid(4, 3, 6, 100 + trial);
    FeatureGrid next = random_grid(4, 3, 6, 200 + trial);
    FeatureGrid pred = random_grid(4, 3, 6, 300 + trial);
    auto outcome = PredictorStack::zoh_loss(pred, next, cur);
    double mean = 0.0;
    for (size_t i = 0; i < outcome.error_map.size(); ++i) mean += outcome.error_map[i];
    mean /= outcome.error_map.size();
    ASSERT_NEAR(outcome.error_scalar, mean, 1e-6);
  }
}

// Full 3-layer stack + head + loss on a 2x2x4 grid with d_h=8 (the
// acceptance geometry): analytic gradients against double-precision central
// finite differences, single step.
TEST(Gradients, FullStackSingleStepFiniteDifference) {
  StackConfig cfg = small_config();
  PredictorStack stack(cfg);
  std::vector<FeatureGrid> frames = {random_grid(2, 2, 4, 31, 0),
                                     random_grid(2, 2, 4, 32, 1)};
  FeatureGrid pred = stack.forward(frames[0]);
  auto outcome = PredictorStack::zoh_loss(pred, frames[1], frames[0]);
  auto grads = stack.compute_gradients(outcome);
  std::vector<float> analytic = flatten_gradients(grads);

  auto params = oracle::StackParams::from(stack);
  auto fd = oracle::stack_fd_gradients(params, to_oracle_frames(frames), cfg.hidden);
  ASSERT_EQ(analytic.size(), fd.size());
  for (size_t i = 0; i < analytic.size(); ++i) {
    if (std::abs(fd[i]) >= 1e-3) {
      ASSERT_LT(std::abs(analytic[i] - fd[i]) / std::abs(fd[i]), 1e-3)
          << "param " << i << ": analytic " << analytic[i] << " fd " << fd[i];
    } else {
      ASSERT_NEAR(analytic[i], fd[i], 1e-5) << "param " << i;
    }
  }
}

// Same comparison with gradients flowing through three time steps: exercises
// the recurrent paths, the memory carry, and the cross-layer injection
// through time.
TEST(Gradients, MultiStepBpttFiniteDifference) {
  StackConfig cfg = small_config(2, 1, 3, 5);
  cfg.bptt_window = 8;
  PredictorStack stack(cfg);
  std::vector<FeatureGrid> frames;
  for (int t = 0; t < 4; ++t) frames.push_back(random_grid(2, 1, 3, 40 + t, t));
  FeatureGrid pred;
  for (int t = 0; t < 3; ++t) pred = stack.forward(frames[t]);
  auto outcome = PredictorStack::zoh_loss(pred, frames[3], frames[2]);
  auto grads = stack.compute_gradients(outcome);
  std::vector<float> analytic = flatten_gradients(grads);

  auto params = oracle::StackParams::from(stack);
  auto fd = oracle::stack_fd_gradients(params, to_oracle_frames(frames), cfg.hidden);
  ASSERT_EQ(analytic.size(), fd.size());
  for (size_t i = 0; i < analytic.size(); ++i) {
    if (std::abs(fd[i]) >= 1e-3) {
      ASSERT_LT(std::abs(analytic[i] - fd[i]) / std::abs(fd[i]), 1e-3) << "param " << i;
    } else {
      ASSERT_NEAR(analytic[i], fd[i], 1e-5) << "param " << i;
    }
  }
}

// Truncation: a short window must still produce finite, usable gradients
// when the stream is longer than the window.
TEST(Gradients, WindowTruncatesHistory) {
  StackConfig cfg = small_config(2, 1, 3, 5);
  cfg.bptt_window = 2;
  PredictorStack stack(cfg);
  std::vector<FeatureGrid> frames;
  for (int t = 0; t < 5; ++t) frames.push_back(random_grid(2, 1, 3, 50 + t, t));
  FeatureGrid pred;
  for (int t = 0; t < 4; ++t) pred = stack.forward(frames[t]);
  auto outcome = PredictorStack::zoh_loss(pred, frames[4], frames[3]);
  auto grads = stack.compute_gradients(outcome);
  bool any_nonzero = false;
  grads.for_each_tensor([&](const Tensor& t) {
    ASSERT_TRUE(t.all_finite());
    for (size_t i = 0; i < t.size(); ++i) any_nonzero |= t[i] != 0.0f;
  });
  EXPECT_TRUE(any_nonzero);
}

TEST(ContinualUpdate, ZeroMaskLeavesParamsBitIdentical) {
  StackConfig cfg = small_config();
  PredictorStack stack(cfg);
  FeatureGrid f0 = random_grid(2, 2, 4, 61, 0);
  FeatureGrid pred = stack.forward(f0);
  const uint64_t before = stack.params_checksum();
  auto outcome = PredictorStack::zoh_loss(pred, f0, f0);  // static: mask is zero
  EXPECT_FLOAT_EQ(outcome.error_scalar, 0.0f);
  stack.continual_update(outcome);
  EXPECT_EQ(stack.params_checksum(), before);
}

TEST(ContinualUpdate, DescentAtSmallLearningRate) {
  for (int trial = 0; trial < 5; ++trial) {
    StackConfig cfg = small_config(2, 2, 4, 8);
    cfg.seed = 100 + trial;
    cfg.lr.initial = 1e-6;
    cfg.lr.floor = 1e-12;
    PredictorStack stack(cfg);
    FeatureGrid f0 = random_grid(2, 2, 4, 70 + trial, 0, 2.0f);
    FeatureGrid f1 = random_grid(2, 2, 4, 80 + trial, 1, 2.0f);

    // Loss of the unmodified parameters, measured from a fresh state.
    PredictorStack frozen(cfg);
    FeatureGrid pred_before = frozen.forward(f0);
    const float loss_before =
        PredictorStack::zoh_loss(pred_before, f1, f0).error_scalar;

    FeatureGrid pred = stack.forward(f0);
    auto outcome = PredictorStack::zoh_loss(pred, f1, f0);
    stack.continual_update(outcome);

    // Fresh stack carrying the updated parameters, zero states.
    Checkpoint ck;
    stack.save_state(ck, false);
    PredictorStack updated(cfg);
    updated.restore_state(ck, false);
    FeatureGrid pred_after = updated.forward(f0);
    const float loss_after = PredictorStack::zoh_loss(pred_after, f1, f0).error_scalar;
    EXPECT_LE(loss_after, loss_before + 1e-7) << "trial " << trial;
  }
}

TEST(ContinualUpdate, DeterministicAcrossRuns) {
  auto run = [] {
    StackConfig cfg = small_config(3, 3, 4, 8);
    PredictorStack stack(cfg);
    FeatureGrid prev = random_grid(3, 3, 4, 90, 0);
    FeatureGrid pred = stack.forward(prev);
    for (int t = 1; t < 12; ++t) {
      FeatureGrid cur = random_grid(3, 3, 4, 90 + t, t);
      auto outcome = PredictorStack::zoh_loss(pred, cur, prev);
      stack.adapt_learning_rate(outcome.error_scalar);
      stack.continual_update(outcome);
      pred = stack.forward(cur);
      prev = cur;
    }
    return stack.params_checksum();
  };
  EXPECT_EQ(run(), run());
}

TEST(AdaptLearningRate, InitialValueAndSurpriseRule) {
  StackConfig cfg = small_config();
  PredictorStack stack(cfg);
  EXPECT_DOUBLE_EQ(stack.learning_rate(), 1e-8);
  // First frame seeds the running mean; not counted as a surprise.
  stack.adapt_learning_rate(1.0f);
  EXPECT_NEAR(stack.learning_rate(), 1e-8 * (1.0 - 1e-3), 1e-15);
  // A value above the running mean scales the rate by 1 + 1e-2.
  const double before = stack.learning_rate();
  stack.adapt_learning_rate(5.0f);
  EXPECT_NEAR(stack.learning_rate(), before * 1.01, 1e-15);
}

TEST(AdaptLearningRate, ZeroErrorStreamDecaysMonotonically) {
  StackConfig cfg = small_config();
  PredictorStack stack(cfg);
  double prev = stack.learning_rate();
  for (int t = 0; t < 200; ++t) {
    const double lr = stack.adapt_learning_rate(0.0f);
    ASSERT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_LT(prev, 1e-8);
  EXPECT_GE(prev, cfg.lr.floor);
}

TEST(AdaptLearningRate, ClampsToBounds) {
  StackConfig cfg = small_config();
  cfg.lr.initial = 1e-2;
  PredictorStack stack(cfg);
  float e = 1.0f;
  for (int t = 0; t < 300; ++t) {
    e *= 2.0f;  // always above the running mean
    const double lr = stack.adapt_learning_rate(std::min(e, 1e20f));
    ASSERT_LE(lr, cfg.lr.ceil);
    ASSERT_GE(lr, cfg.lr.floor);
  }
  EXPECT_DOUBLE_EQ(stack.learning_rate(), cfg.lr.ceil);
}

TEST(Memory, WindowBoundsCacheGrowth) {
  StackConfig cfg = small_config(4, 4, 8, 16);
  cfg.bptt_window = 4;
  PredictorStack stack(cfg);
  size_t after_window = 0;
  for (int t = 0; t < 32; ++t) {
    stack.forward(random_grid(4, 4, 8, 700 + t, t));
    if (t == 7) after_window = stack.memory_bytes();
    if (t > 7) ASSERT_EQ(stack.memory_bytes(), after_window);
  }
}

TEST(Checkpoint, ParamsRoundTrip) {
  auto dir = std::filesystem::temp_directory_path() / "presage_ck_params";
  std::filesystem::remove_all(dir);
  StackConfig cfg = small_config();
  PredictorStack a(cfg);
  FeatureGrid f0 = random_grid(2, 2, 4, 801, 0);
  FeatureGrid f1 = random_grid(2, 2, 4, 802, 1);
  FeatureGrid pred = a.forward(f0);
  auto outcome = PredictorStack::zoh_loss(pred, f1, f0);
  a.adapt_learning_rate(outcome.error_scalar);
  a.continual_update(outcome);
  Checkpoint ck;
  a.save_state(ck, false);
  ck.save(dir.string());

  PredictorStack b(cfg);
  b.restore_state(Checkpoint::load(dir.string()), false);
  EXPECT_EQ(a.params_checksum(), b.params_checksum());
  EXPECT_DOUBLE_EQ(a.learning_rate(), b.learning_rate());
  EXPECT_DOUBLE_EQ(a.error_stats().mean, b.error_stats().mean);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, FullStateRoundTripContinuesIdentically) {
  auto dir = std::filesystem::temp_directory_path() / "presage_ck_full";
  std::filesystem::remove_all(dir);
  StackConfig cfg = small_config(2, 2, 4, 8);
  PredictorStack a(cfg);
  FeatureGrid prev = random_grid(2, 2, 4, 900, 0);
  FeatureGrid pred = a.forward(prev);
  for (int t = 1; t < 6; ++t) {
    FeatureGrid cur = random_grid(2, 2, 4, 900 + t, t);
    auto outcome = PredictorStack::zoh_loss(pred, cur, prev);
    a.adapt_learning_rate(outcome.error_scalar);
    a.continual_update(outcome);
    pred = a.forward(cur);
    prev = cur;
  }
  Checkpoint ck;
  a.save_state(ck, true);
  ck.save(dir.string());
  PredictorStack b(cfg);
  b.restore_state(Checkpoint::load(dir.string()), true);

  for (int t = 6; t < 10; ++t) {
    FeatureGrid cur = random_grid(2, 2, 4, 900 + t, t);
    auto oa = PredictorStack::zoh_loss(pred, cur, prev);
    a.adapt_learning_rate(oa.error_scalar);
    a.continual_update(oa);
    b.adapt_learning_rate(oa.error_scalar);
    b.continual_update(oa);
    FeatureGrid pa = a.forward(cur);
    FeatureGrid pb = b.forward(cur);
    for (size_t i = 0; i < pa.values.size(); ++i) ASSERT_EQ(pa.values[i], pb.values[i]);
    pred = pa;
    prev = cur;
  }
  EXPECT_EQ(a.params_checksum(), b.params_checksum());
  std::filesystem::remove_all(dir);
}

TEST(ContinualUpdate, RequiresForwardCache) {
  StackConfig cfg = small_config();
  PredictorStack stack(cfg);
  auto outcome = PredictorStack::zoh_loss(random_grid(2, 2, 4, 1), random_grid(2, 2, 4, 2),
                                          random_grid(2, 2, 4, 3));
  EXPECT_THROW(stack.continual_update(outcome), UsageError);
}
