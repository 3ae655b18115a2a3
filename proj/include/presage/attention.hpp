#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "presage/errors.hpp"
#include "presage/predictor.hpp"
#include "presage/proposals.hpp"
#include "presage/tensor.hpp"

namespace presage {

// Softmax of the per-location prediction errors: the attention map over
// grid cells. Entries are nonnegative and sum to 1.
struct AttentionMap {
  Tensor alpha;  // {w, h}
  int64_t frame_index = -1;

  uint32_t w() const { return alpha.dim(0); }
  uint32_t h() const { return alpha.dim(1); }

  // Cell with the largest weight; ties resolve to the smallest (i, then j).
  std::pair<uint32_t, uint32_t> argmax_cell() const {
    size_t best = 0;
    for (size_t k = 1; k < alpha.size(); ++k) {
      if (alpha[k] > alpha[best]) best = k;
    }
    return {static_cast<uint32_t>(best / h()), static_cast<uint32_t>(best % h())};
  }
};

inline AttentionMap error_attention(const Tensor& error_map, int64_t frame_index = -1) {
  AttentionMap a;
  a.alpha = softmax2d(error_map);
  a.frame_index = frame_index;
  return a;
}

struct EnergyConfig {
  uint32_t k = 10;
  float w_alpha = 0.75f;
  float w_t = 0.0f;  // 0 disables the temporal-consistency term

  void validate() const {
    if (k < 1) throw ConfigError("energy: k must be >= 1");
    if (w_alpha < 0.0f || w_alpha > 1.0f) throw ConfigError("energy: w_alpha must be in [0,1]");
    if (w_t < 0.0f) throw ConfigError("energy: w_t must be >= 0");
  }
};

// Pixel-space center of a grid cell.
inline std::pair<float, float> cell_center(uint32_t i, uint32_t j, uint32_t grid_w,
                                           uint32_t grid_h, float frame_w, float frame_h) {
  return {(i + 0.5f) * frame_w / grid_w, (j + 0.5f) * frame_h / grid_h};
}

// Energy of one proposal: w_alpha * (distance from box center to the pixel
// location of the attention argmax) + w_t * (distance to the nearest box
// selected at the previous frame), both normalized by the frame diagonal.
// An empty prev set contributes no temporal cost.
inline float box_energy(const BoxProposal& box, const AttentionMap& att,
                        const std::vector<BoxProposal>& prev_selected,
                        const EnergyConfig& cfg, float frame_w, float frame_h) {
  require_valid_box(box, frame_w, frame_h, "box_energy");
  const float diag = std::sqrt(frame_w * frame_w + frame_h * frame_h);
  const auto [ai, aj] = att.argmax_cell();
  const auto [px, py] = cell_center(ai, aj, att.w(), att.h(), frame_w, frame_h);
  const float dx = box.cx() - px, dy = box.cy() - py;
  const float phi = std::sqrt(dx * dx + dy * dy) / diag;
  float delta = 0.0f;
  if (cfg.w_t > 0.0f && !prev_selected.empty()) {
    float best = std::numeric_limits<float>::max();
    for (const auto& p : prev_selected) {
      const float ex = box.cx() - p.cx(), ey = box.cy() - p.cy();
      best = std::min(best, ex * ex + ey * ey);
    }
    delta = std::sqrt(best) / diag;
  }
  return cfg.w_alpha * phi + cfg.w_t * delta;
}

struct ScoredBox {
  BoxProposal box;
  float energy = 0.0f;
};

// The min(k, |proposals|) lowest-energy proposals in ascending energy.
// Ties: smaller area, then lexicographic coordinates, then input order, so
// the selected set does not depend on how the proposal list was permuted.
inline std::vector<ScoredBox> select_topk(const std::vector<BoxProposal>& proposals,
                                          const AttentionMap& att,
                                          const std::vector<BoxProposal>& prev_selected,
                                          const EnergyConfig& cfg, float frame_w,
                                          float frame_h) {
  cfg.validate();
  std::vector<ScoredBox> scored;
  scored.reserve(proposals.size());
  for (const auto& b : proposals) {
    scored.push_back({b, box_energy(b, att, prev_selected, cfg, frame_w, frame_h)});
  }
  std::vector<size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const ScoredBox& sa = scored[a];
    const ScoredBox& sb = scored[b];
    if (sa.energy != sb.energy) return sa.energy < sb.energy;
    if (sa.box.area() != sb.box.area()) return sa.box.area() < sb.box.area();
    const auto ka = std::array<float, 4>{sa.box.x1, sa.box.y1, sa.box.x2, sa.box.y2};
    const auto kb = std::array<float, 4>{sb.box.x1, sb.box.y1, sb.box.x2, sb.box.y2};
    if (ka != kb) return ka < kb;
    return a < b;
  });
  const size_t take = std::min<size_t>(cfg.k, scored.size());
  std::vector<ScoredBox> out;
  out.reserve(take);
  for (size_t r = 0; r < take; ++r) out.push_back(scored[order[r]]);
  return out;
}

// ---------------------------------------------------------------------------
// Streaming tube linkage: the rank-1 selection extends the primary tube.
// Gaps of up to gap_tolerance frames are bridged by holding the last box;
// longer gaps terminate the tube and the next selection starts a fresh one.
// ---------------------------------------------------------------------------

struct TubeEntry {
  int64_t frame = 0;
  BoxProposal box;
  float energy = 0.0f;
};

struct ActionTube {
  std::vector<TubeEntry> entries;

  int64_t first_frame() const { return entries.front().frame; }
  int64_t last_frame() const { return entries.back().frame; }
  double mean_energy() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.energy;
    return entries.empty() ? 0.0 : s / entries.size();
  }
};

class TubeTracker {
 public:
  explicit TubeTracker(uint32_t gap_tolerance = 5) : gap_tolerance_(gap_tolerance) {}

  void observe(int64_t frame, const std::vector<ScoredBox>& selected) {
    if (selected.empty()) {
      if (!current_.entries.empty()) {
        gap_++;
        if (gap_ > gap_tolerance_) close_current();
      }
      return;
    }
    const ScoredBox& top = selected.front();
    if (!current_.entries.empty() && gap_ > 0) {
      // Bridge the gap with the last box so tube frames stay contiguous.
      const TubeEntry hold = current_.entries.back();
      for (int64_t f = hold.frame + 1; f < frame; ++f) {
        current_.entries.push_back({f, hold.box, hold.energy});
      }
    }
    current_.entries.push_back({frame, top.box, top.energy});
    gap_ = 0;
  }

  void finish() { close_current(); }

  const std::vector<ActionTube>& tubes() const { return tubes_; }
  const ActionTube& current() const { return current_; }

 private:
  void close_current() {
    if (!current_.entries.empty()) {
      tubes_.push_back(std::move(current_));
      current_ = ActionTube{};
    }
    gap_ = 0;
  }

  uint32_t gap_tolerance_;
  uint32_t gap_ = 0;
  ActionTube current_;
  std::vector<ActionTube> tubes_;
};

// ---------------------------------------------------------------------------
// Temporal localization: a frame is action-active when its prediction error
// exceeds the running mean by threshold_sigma standard deviations. The first
// warmup updates always report inactive.
// ---------------------------------------------------------------------------

class TemporalActionMask {
 public:
  explicit TemporalActionMask(double threshold_sigma = 0.5, uint32_t warmup = 5)
      : threshold_sigma_(threshold_sigma), warmup_(warmup) {}

  bool update(float e_t) {
    const bool over = stats_.initialized &&
                      static_cast<double>(e_t) > stats_.mean + threshold_sigma_ * stats_.stddev();
    stats_.update(e_t);
    updates_++;
    return updates_ > warmup_ && over;
  }

  const ErrorStats& stats() const { return stats_; }
  uint64_t updates() const { return updates_; }
  void restore(const ErrorStats& stats, uint64_t updates) {
    stats_ = stats;
    updates_ = updates;
  }

 private:
  double threshold_sigma_;
  uint32_t warmup_;
  ErrorStats stats_;
  uint64_t updates_ = 0;
};

// ---------------------------------------------------------------------------
// Gaze saliency: bilinear upsampling of the attention map to frame
// resolution, renormalized to sum 1. The gaze point is the pixel argmax
// (ties: smallest y, then x).
// ---------------------------------------------------------------------------

struct GazeOutput {
  Tensor saliency;  // {H, W}, sums to 1
  uint32_t x = 0, y = 0;
};

inline GazeOutput gaze_saliency(const AttentionMap& att, uint32_t frame_w, uint32_t frame_h) {
  const uint32_t gw = att.w(), gh = att.h();
  GazeOutput out;
  out.saliency = Tensor({frame_h, frame_w});
  const float sx = static_cast<float>(frame_w) / gw;
  const float sy = static_cast<float>(frame_h) / gh;
  double sum = 0.0;
  float best = -1.0f;
  for (uint32_t y = 0; y < frame_h; ++y) {
    const float gy = std::clamp((y + 0.5f) / sy - 0.5f, 0.0f, static_cast<float>(gh - 1));
    const uint32_t j0 = static_cast<uint32_t>(gy);
    const uint32_t j1 = std::min(j0 + 1, gh - 1);
    const float fy = gy - j0;
    for (uint32_t x = 0; x < frame_w; ++x) {
      const float gx = std::clamp((x + 0.5f) / sx - 0.5f, 0.0f, static_cast<float>(gw - 1));
      const uint32_t i0 = static_cast<uint32_t>(gx);
      const uint32_t i1 = std::min(i0 + 1, gw - 1);
      const float fx = gx - i0;
      const float v = att.alpha.at(i0, j0) * (1 - fx) * (1 - fy) +
                      att.alpha.at(i1, j0) * fx * (1 - fy) +
                      att.alpha.at(i0, j1) * (1 - fx) * fy +
                      att.alpha.at(i1, j1) * fx * fy;
      out.saliency[static_cast<size_t>(y) * frame_w + x] = v;
      sum += v;
      if (v > best) {
        best = v;
        out.x = x;
        out.y = y;
      }
    }
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (size_t k = 0; k < out.saliency.size(); ++k) out.saliency[k] *= inv;
  return out;
}

}  // namespace presage
