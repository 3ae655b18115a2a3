#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "presage/checkpoint.hpp"
#include "presage/encoder.hpp"
#include "presage/errors.hpp"
#include "presage/lstm.hpp"
#include "presage/tensor.hpp"

namespace presage {

struct LrSchedule {
  double initial = 1e-8;
  double delta_minus = 1e-2;  // growth factor on surprising frames
  double delta_plus = 1e-3;   // decay factor on predictable frames
  double floor = 1e-10;
  double ceil = 1e-2;

  void validate() const {
    if (initial <= 0 || delta_minus <= 0 || delta_plus <= 0 || floor <= 0 || ceil <= 0) {
      throw ConfigError("learning-rate constants must be positive");
    }
    if (floor > ceil) throw ConfigError("learning-rate floor exceeds ceiling");
  }
};

// Exponentially weighted running mean/variance, factor 0.99, seeded from the
// first sample.
struct ErrorStats {
  bool initialized = false;
  double mean = 0.0;
  double var = 0.0;
  uint64_t samples = 0;
  double decay = 0.99;

  void update(double e) {
    if (!initialized) {
      mean = e;
      var = 0.0;
      initialized = true;
    } else {
      const double delta = e - mean;
      mean += (1.0 - decay) * delta;
      var = decay * (var + (1.0 - decay) * delta * delta);
    }
    samples++;
  }

  double stddev() const { return std::sqrt(std::max(0.0, var)); }
};

struct StackConfig {
  uint32_t grid_w = 8;
  uint32_t grid_h = 8;
  uint32_t feature_depth = 32;
  uint32_t hidden = 64;
  uint32_t bptt_window = 8;
  uint64_t seed = 13;
  float clip_norm = 1.0f;
  LrSchedule lr;

  uint32_t locations() const { return grid_w * grid_h; }
};

// Result of scoring one prediction against the observed next frame.
struct PredictionOutcome {
  FeatureGrid predicted;   // f̂ for the frame that has now arrived
  float error_scalar = 0;  // E(t): mean over locations of error_map
  Tensor error_map;        // {w, h}, zoh-weighted squared L1 per location
  Tensor zoh_mask;         // {w, h}, mean |Δ observed| per location
  Tensor loss_grad;        // [locations × depth], dE/dprediction
};

// Three-layer hierarchical recurrent predictor. The cell runs per grid
// location with shared weights; layer l>1 takes the lower layer's current
// hidden state as input and receives its current memory as an additive
// candidate-gate bias. An affine head maps the top hidden state back to
// feature depth. Updates are truncated BPTT, one step per observed frame.
class PredictorStack {
 public:
  explicit PredictorStack(const StackConfig& cfg) : cfg_(cfg) {
    cfg_.lr.validate();
    if (cfg_.bptt_window == 0) throw ConfigError("bptt window must be >= 1");
    Rng rng(cfg_.seed);
    layers_[0] = LstmCellParams::seeded(cfg_.feature_depth, cfg_.hidden, rng);
    layers_[1] = LstmCellParams::seeded(cfg_.hidden, cfg_.hidden, rng);
    layers_[2] = LstmCellParams::seeded(cfg_.hidden, cfg_.hidden, rng);
    head_w_ = rng.gaussian_tensor({cfg_.feature_depth, cfg_.hidden}, 0.1f);
    head_b_ = Tensor({cfg_.feature_depth});
    const uint32_t n = cfg_.locations();
    for (int l = 0; l < 3; ++l) {
      h_[l] = Tensor({n, cfg_.hidden});
      m_[l] = Tensor({n, cfg_.hidden});
    }
    lr_ = cfg_.lr.initial;
  }

  const StackConfig& config() const { return cfg_; }
  double learning_rate() const { return lr_; }
  const ErrorStats& error_stats() const { return stats_; }
  uint64_t frames_seen() const { return frames_seen_; }
  const Tensor& hidden_top() const { return h_[2]; }
  LstmCellParams& layer(int l) { return layers_[l]; }
  const LstmCellParams& layer(int l) const { return layers_[l]; }
  Tensor& head_weights() { return head_w_; }
  Tensor& head_bias() { return head_b_; }

  // Consumes the grid for frame t, returns the prediction for frame t+1.
  FeatureGrid forward(const FeatureGrid& f_t) {
    if (f_t.w != cfg_.grid_w || f_t.h != cfg_.grid_h || f_t.d != cfg_.feature_depth) {
      throw ShapeError("stack forward: grid dims do not match configuration");
    }
    StepCache step;
    Tensor x = f_t.as_matrix();
    auto l1 = lstm_cell_forward(layers_[0], x, h_[0], m_[0]);
    auto l2 = lstm_cell_forward(layers_[1], l1.h, h_[1], m_[1], &l1.m);
    auto l3 = lstm_cell_forward(layers_[2], l2.h, h_[2], m_[2], &l2.m);

    FeatureGrid pred(cfg_.grid_w, cfg_.grid_h, cfg_.feature_depth,
                     f_t.frame_index >= 0 ? f_t.frame_index + 1 : -1);
    Tensor y = matmul_nt(l3.h, head_w_);
    const uint32_t n = cfg_.locations(), d = cfg_.feature_depth;
    for (uint32_t row = 0; row < n; ++row) {
      float* out = pred.values.data() + static_cast<size_t>(row) * d;
      const float* src = y.data() + static_cast<size_t>(row) * d;
      for (uint32_t j = 0; j < d; ++j) out[j] = src[j] + head_b_[j];
    }

    h_[0] = l1.h;
    m_[0] = l1.m;
    h_[1] = l2.h;
    m_[1] = l2.m;
    h_[2] = l3.h;
    m_[2] = l3.m;
    step.layers[0] = std::move(l1.cache);
    step.layers[1] = std::move(l2.cache);
    step.layers[2] = std::move(l3.cache);
    window_.push_back(std::move(step));
    if (window_.size() > cfg_.bptt_window) window_.pop_front();
    frames_seen_++;
    return pred;
  }

  // Weighted zero-order-hold loss between prediction and observation:
  //   ẑ(i,j)  = (1/d) Σ_d |next - cur|          (observed change magnitude)
  //   e(i,j)  = ẑ(i,j) · (Σ_d |next - pred|)²   (masked squared L1 error)
  //   E       = (1/n_f) Σ_ij e(i,j)
  static PredictionOutcome zoh_loss(const FeatureGrid& predicted,
                                    const FeatureGrid& observed_next,
                                    const FeatureGrid& observed_cur) {
    if (!predicted.same_dims(observed_next) || !predicted.same_dims(observed_cur)) {
      throw ShapeError("zoh_loss: grids must share dims");
    }
    const uint32_t w = predicted.w, h = predicted.h, d = predicted.d;
    const uint32_t n = w * h;
    PredictionOutcome out;
    out.predicted = predicted;
    out.error_map = Tensor({w, h});
    out.zoh_mask = Tensor({w, h});
    out.loss_grad = Tensor({n, d});
    const float inv_nf = 1.0f / static_cast<float>(n);
    double total = 0.0;
    for (uint32_t loc = 0; loc < n; ++loc) {
      const float* fp = predicted.values.data() + static_cast<size_t>(loc) * d;
      const float* fn = observed_next.values.data() + static_cast<size_t>(loc) * d;
      const float* fc = observed_cur.values.data() + static_cast<size_t>(loc) * d;
      float zoh = 0.0f, s = 0.0f;
      for (uint32_t k = 0; k < d; ++k) {
        zoh += std::abs(fn[k] - fc[k]);
        s += std::abs(fn[k] - fp[k]);
      }
      zoh /= static_cast<float>(d);
      const float e = zoh * s * s;
      out.error_map[loc] = e;
      out.zoh_mask[loc] = zoh;
      total += e;
      float* g = out.loss_grad.data() + static_cast<size_t>(loc) * d;
      const float coef = -2.0f * inv_nf * zoh * s;
      for (uint32_t k = 0; k < d; ++k) {
        const float diff = fn[k] - fp[k];
        g[k] = coef * (diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f));
      }
    }
    out.error_scalar = static_cast<float>(total / n);
    return out;
  }

  // Gradients of one update step, in parameter order.
  struct StackGradients {
    std::array<LstmGrads, 3> layers;
    Tensor head_w;
    Tensor head_b;

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
      for (auto& l : layers) l.for_each_tensor(fn);
      fn(head_w);
      fn(head_b);
    }
  };

  // Backpropagates the loss of the latest forward through at most
  // bptt_window cached steps; pure (does not modify the stack).
  StackGradients compute_gradients(const PredictionOutcome& outcome) const {
    if (window_.empty()) {
      throw UsageError("continual_update: no forward cache available");
    }
    const uint32_t n = cfg_.locations();
    if (outcome.loss_grad.rank() != 2 || outcome.loss_grad.dim(0) != n ||
        outcome.loss_grad.dim(1) != cfg_.feature_depth) {
      throw ShapeError("continual_update: outcome does not match configuration");
    }

    StackGradients out{{LstmGrads::zeros_like(layers_[0]), LstmGrads::zeros_like(layers_[1]),
                        LstmGrads::zeros_like(layers_[2])},
                       Tensor(head_w_.dims()),
                       Tensor(head_b_.dims())};
    std::array<LstmGrads, 3>& grads = out.layers;
    Tensor& head_w_grad = out.head_w;
    Tensor& head_b_grad = out.head_b;

    const Tensor& h_top = window_.back().layers[2].h;
    matmul_tn_accumulate(outcome.loss_grad, h_top, head_w_grad);
    for (uint32_t row = 0; row < n; ++row) {
      for (uint32_t j = 0; j < cfg_.feature_depth; ++j) {
        head_b_grad[j] += outcome.loss_grad.at(row, j);
      }
    }

    // Gradient carried to step s-1 through each layer's recurrence.
    std::array<Tensor, 3> dh_next, dm_next;
    for (int l = 0; l < 3; ++l) {
      dh_next[l] = Tensor({n, cfg_.hidden});
      dm_next[l] = Tensor({n, cfg_.hidden});
    }

    for (size_t idx = window_.size(); idx-- > 0;) {
      const StepCache& step = window_[idx];
      const bool loss_step = (idx + 1 == window_.size());

      Tensor dh3 = dh_next[2];
      if (loss_step) {
        Tensor from_head = matmul(outcome.loss_grad, head_w_);
        for (size_t k = 0; k < dh3.size(); ++k) dh3[k] += from_head[k];
      }
      auto b3 = lstm_cell_backward(layers_[2], step.layers[2], dh3, dm_next[2], grads[2]);
      dh_next[2] = std::move(b3.dh_prev);
      dm_next[2] = std::move(b3.dm_prev);

      Tensor dh2 = dh_next[1];
      for (size_t k = 0; k < dh2.size(); ++k) dh2[k] += b3.dx[k];
      Tensor dm2 = dm_next[1];
      for (size_t k = 0; k < dm2.size(); ++k) dm2[k] += b3.dg_inject[k];
      auto b2 = lstm_cell_backward(layers_[1], step.layers[1], dh2, dm2, grads[1]);
      dh_next[1] = std::move(b2.dh_prev);
      dm_next[1] = std::move(b2.dm_prev);

      Tensor dh1 = dh_next[0];
      for (size_t k = 0; k < dh1.size(); ++k) dh1[k] += b2.dx[k];
      Tensor dm1 = dm_next[0];
      for (size_t k = 0; k < dm1.size(); ++k) dm1[k] += b2.dg_inject[k];
      auto b1 = lstm_cell_backward(layers_[0], step.layers[0], dh1, dm1, grads[0]);
      dh_next[0] = std::move(b1.dh_prev);
      dm_next[0] = std::move(b1.dm_prev);
      // b1.dx is the gradient w.r.t. the observed grid; it ends here.
    }
    return out;
  }

  // One gradient step at the current learning rate, with the global gradient
  // norm clipped to clip_norm. Exactly one call per observed frame.
  void continual_update(const PredictionOutcome& outcome) {
    StackGradients grads = compute_gradients(outcome);

    double sq = 0.0;
    auto add_sq = [&sq](const Tensor& t) {
      for (size_t k = 0; k < t.size(); ++k) sq += static_cast<double>(t[k]) * t[k];
    };
    grads.for_each_tensor(add_sq);
    const double norm = std::sqrt(sq);
    float scale = static_cast<float>(lr_);
    if (norm > cfg_.clip_norm) {
      scale = static_cast<float>(lr_ * cfg_.clip_norm / norm);
    }

    for (int l = 0; l < 3; ++l) {
      apply_update(layers_[l].W_i, grads.layers[l].W_i, scale);
      apply_update(layers_[l].W_f, grads.layers[l].W_f, scale);
      apply_update(layers_[l].W_o, grads.layers[l].W_o, scale);
      apply_update(layers_[l].W_g, grads.layers[l].W_g, scale);
      apply_update(layers_[l].W_hi, grads.layers[l].W_hi, scale);
      apply_update(layers_[l].W_hf, grads.layers[l].W_hf, scale);
      apply_update(layers_[l].W_ho, grads.layers[l].W_ho, scale);
      apply_update(layers_[l].W_hg, grads.layers[l].W_hg, scale);
      apply_update(layers_[l].b_i, grads.layers[l].b_i, scale);
      apply_update(layers_[l].b_f, grads.layers[l].b_f, scale);
      apply_update(layers_[l].b_o, grads.layers[l].b_o, scale);
      apply_update(layers_[l].b_g, grads.layers[l].b_g, scale);
    }
    apply_update(head_w_, grads.head_w, scale);
    apply_update(head_b_, grads.head_b, scale);
  }

  // Surprise rule: errors above the running mean speed learning up by
  // (1 + Δ-), predictable frames decay it by (1 - Δ+); clamped to
  // [floor, ceil]; the running mean then absorbs the new error.
  double adapt_learning_rate(float e_t) {
    const bool surprise = stats_.initialized && static_cast<double>(e_t) > stats_.mean;
    if (surprise) {
      lr_ *= (1.0 + cfg_.lr.delta_minus);
    } else {
      lr_ *= (1.0 - cfg_.lr.delta_plus);
    }
    lr_ = std::min(cfg_.lr.ceil, std::max(cfg_.lr.floor, lr_));
    stats_.update(e_t);
    return lr_;
  }

  // Bytes of retained state: parameters, hidden/memory states and the BPTT
  // cache window. Constant in stream length once the window is full.
  size_t memory_bytes() const {
    size_t total = head_w_.byte_size() + head_b_.byte_size();
    for (const auto& l : layers_) {
      l.for_each_tensor([&](const char*, const Tensor& t) { total += t.byte_size(); });
    }
    for (int l = 0; l < 3; ++l) total += h_[l].byte_size() + m_[l].byte_size();
    for (const auto& step : window_) {
      for (const auto& c : step.layers) total += c.byte_size();
    }
    return total;
  }

  uint64_t params_checksum() const {
    uint64_t hash = 1469598103934665603ull;
    auto mix = [&hash](const Tensor& t) {
      for (size_t i = 0; i < t.size(); ++i) {
        uint32_t bits;
        float v = t[i];
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) {
          hash ^= (bits >> (8 * b)) & 0xff;
          hash *= 1099511628211ull;
        }
      }
    };
    for (const auto& l : layers_) {
      l.for_each_tensor([&](const char*, const Tensor& t) { mix(t); });
    }
    mix(head_w_);
    mix(head_b_);
    return hash;
  }

  // Parameters, learning rate and error history always; with full=true also
  // the stream state (hidden/memory states and the BPTT cache window) needed
  // for bit-identical resume.
  void save_state(Checkpoint& ck, bool full) const {
    for (int l = 0; l < 3; ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      layers_[l].for_each_tensor(
          [&](const char* name, const Tensor& t) { ck.add(prefix + name, t); });
    }
    ck.add("head.W", head_w_);
    ck.add("head.b", head_b_);
    ck.scalars["learning_rate"] = lr_;
    ck.scalars["err_mean"] = stats_.mean;
    ck.scalars["err_var"] = stats_.var;
    ck.scalars["err_initialized"] = stats_.initialized ? 1 : 0;
    ck.scalars["err_samples"] = stats_.samples;
    ck.scalars["frames_seen"] = frames_seen_;
    ck.scalars["hidden"] = cfg_.hidden;
    ck.scalars["feature_depth"] = cfg_.feature_depth;
    ck.scalars["grid_w"] = cfg_.grid_w;
    ck.scalars["grid_h"] = cfg_.grid_h;
    if (full) {
      for (int l = 0; l < 3; ++l) {
        ck.add("state.h" + std::to_string(l), h_[l]);
        ck.add("state.m" + std::to_string(l), m_[l]);
      }
      ck.scalars["cache_steps"] = window_.size();
      for (size_t s = 0; s < window_.size(); ++s) {
        for (int l = 0; l < 3; ++l) {
          const std::string p = "cache" + std::to_string(s) + ".layer" + std::to_string(l) + ".";
          const LstmCache& c = window_[s].layers[l];
          ck.add(p + "x", c.x);
          ck.add(p + "h_prev", c.h_prev);
          ck.add(p + "m_prev", c.m_prev);
          ck.add(p + "i", c.i);
          ck.add(p + "f", c.f);
          ck.add(p + "o", c.o);
          ck.add(p + "g", c.g);
          ck.add(p + "m", c.m);
          ck.add(p + "h", c.h);
        }
      }
    }
  }

  void restore_state(const Checkpoint& ck, bool full) {
    if (static_cast<uint32_t>(ck.scalar("hidden")) != cfg_.hidden ||
        static_cast<uint32_t>(ck.scalar("feature_depth")) != cfg_.feature_depth ||
        static_cast<uint32_t>(ck.scalar("grid_w")) != cfg_.grid_w ||
        static_cast<uint32_t>(ck.scalar("grid_h")) != cfg_.grid_h) {
      throw ConfigError("checkpoint dims do not match configuration");
    }
    for (int l = 0; l < 3; ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      layers_[l].for_each_tensor([&](const char* name, Tensor& t) {
        const Tensor& src = ck.tensor(prefix + name);
        if (!src.same_shape(t)) throw FormatError("checkpoint tensor shape mismatch");
        t = src;
      });
    }
    head_w_ = ck.tensor("head.W");
    head_b_ = ck.tensor("head.b");
    lr_ = ck.scalar("learning_rate");
    stats_.mean = ck.scalar("err_mean");
    stats_.var = ck.scalar("err_var");
    stats_.initialized = ck.scalar("err_initialized") != 0;
    stats_.samples = static_cast<uint64_t>(ck.scalar("err_samples"));
    frames_seen_ = static_cast<uint64_t>(ck.scalar("frames_seen"));
    if (full) {
      for (int l = 0; l < 3; ++l) {
        h_[l] = ck.tensor("state.h" + std::to_string(l));
        m_[l] = ck.tensor("state.m" + std::to_string(l));
      }
      window_.clear();
      const size_t steps = static_cast<size_t>(ck.scalar("cache_steps"));
      for (size_t s = 0; s < steps; ++s) {
        StepCache step;
        for (int l = 0; l < 3; ++l) {
          const std::string p = "cache" + std::to_string(s) + ".layer" + std::to_string(l) + ".";
          LstmCache& c = step.layers[l];
          c.x = ck.tensor(p + "x");
          c.h_prev = ck.tensor(p + "h_prev");
          c.m_prev = ck.tensor(p + "m_prev");
          c.i = ck.tensor(p + "i");
          c.f = ck.tensor(p + "f");
          c.o = ck.tensor(p + "o");
          c.g = ck.tensor(p + "g");
          c.m = ck.tensor(p + "m");
          c.h = ck.tensor(p + "h");
          c.valid = true;
        }
        window_.push_back(std::move(step));
      }
    }
  }

 private:
  struct StepCache {
    std::array<LstmCache, 3> layers;
  };

  static void apply_update(Tensor& param, const Tensor& grad, float scale) {
    for (size_t k = 0; k < param.size(); ++k) param[k] -= scale * grad[k];
  }

  StackConfig cfg_;
  std::array<LstmCellParams, 3> layers_;
  Tensor head_w_, head_b_;
  std::array<Tensor, 3> h_, m_;
  std::deque<StepCache> window_;
  double lr_ = 1e-8;
  ErrorStats stats_;
  uint64_t frames_seen_ = 0;
};

}  // namespace presage
