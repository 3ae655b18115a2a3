#pragma once

#include <cmath>
#include <optional>

#include "presage/tensor.hpp"

namespace presage {

// Recurrent cell weights, one set per stack layer. Gate order throughout the
// code is i (input), f (forget), o (output), g (candidate).
struct LstmCellParams {
  Tensor W_i, W_f, W_o, W_g;      // [d_h × d_in]
  Tensor W_hi, W_hf, W_ho, W_hg;  // [d_h × d_h]
  Tensor b_i, b_f, b_o, b_g;      // [d_h]
  uint32_t input_size = 0;
  uint32_t hidden_size = 0;

  static LstmCellParams zeros(uint32_t d_in, uint32_t d_h) {
    LstmCellParams p;
    p.input_size = d_in;
    p.hidden_size = d_h;
    p.W_i = Tensor({d_h, d_in});
    p.W_f = Tensor({d_h, d_in});
    p.W_o = Tensor({d_h, d_in});
    p.W_g = Tensor({d_h, d_in});
    p.W_hi = Tensor({d_h, d_h});
    p.W_hf = Tensor({d_h, d_h});
    p.W_ho = Tensor({d_h, d_h});
    p.W_hg = Tensor({d_h, d_h});
    p.b_i = Tensor({d_h});
    p.b_f = Tensor({d_h});
    p.b_o = Tensor({d_h});
    p.b_g = Tensor({d_h});
    return p;
  }

  // Gaussian weights, zero biases except the forget gate, which starts open.
  static LstmCellParams seeded(uint32_t d_in, uint32_t d_h, Rng& rng,
                               float stddev = 0.1f, float forget_bias = 1.0f) {
    LstmCellParams p = zeros(d_in, d_h);
    for (Tensor* w : {&p.W_i, &p.W_f, &p.W_o, &p.W_g, &p.W_hi, &p.W_hf, &p.W_ho, &p.W_hg}) {
      for (size_t i = 0; i < w->size(); ++i) {
        (*w)[i] = static_cast<float>(rng.gaussian() * stddev);
      }
    }
    p.b_f.fill(forget_bias);
    return p;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("W_i", W_i); fn("W_f", W_f); fn("W_o", W_o); fn("W_g", W_g);
    fn("W_hi", W_hi); fn("W_hf", W_hf); fn("W_ho", W_ho); fn("W_hg", W_hg);
    fn("b_i", b_i); fn("b_f", b_f); fn("b_o", b_o); fn("b_g", b_g);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<LstmCellParams*>(this)->for_each_tensor(
        [&](const char* name, Tensor& t) { fn(name, const_cast<const Tensor&>(t)); });
  }
};

// Everything the backward pass needs from one forward call. Rows are
// independent instances (spatial locations of the grid).
struct LstmCache {
  Tensor x;        // [n × d_in]
  Tensor h_prev;   // [n × d_h]
  Tensor m_prev;   // [n × d_h]
  Tensor i, f, o, g;  // gate activations [n × d_h]
  Tensor m;        // new memory [n × d_h]
  Tensor h;        // new hidden [n × d_h]
  bool valid = false;

  size_t byte_size() const {
    return x.byte_size() + h_prev.byte_size() + m_prev.byte_size() +
           i.byte_size() + f.byte_size() + o.byte_size() + g.byte_size() +
           m.byte_size() + h.byte_size();
  }
};

struct LstmStepOutput {
  Tensor h;  // [n × d_h]
  Tensor m;  // [n × d_h]
  LstmCache cache;
};

// Gradients w.r.t. the cell parameters. Accumulated across BPTT steps.
struct LstmGrads {
  Tensor W_i, W_f, W_o, W_g;
  Tensor W_hi, W_hf, W_ho, W_hg;
  Tensor b_i, b_f, b_o, b_g;

  static LstmGrads zeros_like(const LstmCellParams& p) {
    LstmGrads g;
    g.W_i = Tensor(p.W_i.dims());
    g.W_f = Tensor(p.W_f.dims());
    g.W_o = Tensor(p.W_o.dims());
    g.W_g = Tensor(p.W_g.dims());
    g.W_hi = Tensor(p.W_hi.dims());
    g.W_hf = Tensor(p.W_hf.dims());
    g.W_ho = Tensor(p.W_ho.dims());
    g.W_hg = Tensor(p.W_hg.dims());
    g.b_i = Tensor(p.b_i.dims());
    g.b_f = Tensor(p.b_f.dims());
    g.b_o = Tensor(p.b_o.dims());
    g.b_g = Tensor(p.b_g.dims());
    return g;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn(W_i); fn(W_f); fn(W_o); fn(W_g);
    fn(W_hi); fn(W_hf); fn(W_ho); fn(W_hg);
    fn(b_i); fn(b_f); fn(b_o); fn(b_g);
  }
};

// Gradients flowing out of one backward step.
struct LstmStepGrads {
  Tensor dx;        // [n × d_in]
  Tensor dh_prev;   // [n × d_h]
  Tensor dm_prev;   // [n × d_h]
  Tensor dg_inject; // [n × d_h] gradient w.r.t. the additive g-gate injection
};

namespace detail {

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// gates = x·W^T + h_prev·Wh^T + b (row-broadcast bias)
inline Tensor gate_preact(const Tensor& x, const Tensor& h_prev, const Tensor& W,
                          const Tensor& Wh, const Tensor& b) {
  Tensor a = matmul_nt(x, W);
  Tensor r = matmul_nt(h_prev, Wh);
  const size_t n = a.dim(0), d = a.dim(1);
  for (size_t row = 0; row < n; ++row) {
    float* pa = a.data() + row * d;
    const float* pr = r.data() + row * d;
    const float* pb = b.data();
    for (size_t j = 0; j < d; ++j) pa[j] += pr[j] + pb[j];
  }
  return a;
}

}  // namespace detail

// One cell step over n independent rows. `g_inject`, when present, is added
// to the candidate-gate pre-activation before tanh; the hierarchical stack
// uses it to feed the lower layer's memory into the layer above.
inline LstmStepOutput lstm_cell_forward(const LstmCellParams& p, const Tensor& x,
                                        const Tensor& h_prev, const Tensor& m_prev,
                                        const Tensor* g_inject = nullptr) {
  require_rank(x, 2, "lstm x");
  require_rank(h_prev, 2, "lstm h_prev");
  require_rank(m_prev, 2, "lstm m_prev");
  const uint32_t n = x.dim(0);
  if (x.dim(1) != p.input_size) throw ShapeError("lstm: x depth != input_size");
  if (h_prev.dim(0) != n || h_prev.dim(1) != p.hidden_size)
    throw ShapeError("lstm: h_prev shape mismatch");
  if (m_prev.dim(0) != n || m_prev.dim(1) != p.hidden_size)
    throw ShapeError("lstm: m_prev shape mismatch");
  if (g_inject && (g_inject->dim(0) != n || g_inject->dim(1) != p.hidden_size))
    throw ShapeError("lstm: g_inject shape mismatch");

  LstmStepOutput out;
  Tensor ai = detail::gate_preact(x, h_prev, p.W_i, p.W_hi, p.b_i);
  Tensor af = detail::gate_preact(x, h_prev, p.W_f, p.W_hf, p.b_f);
  Tensor ao = detail::gate_preact(x, h_prev, p.W_o, p.W_ho, p.b_o);
  Tensor ag = detail::gate_preact(x, h_prev, p.W_g, p.W_hg, p.b_g);
  if (g_inject) {
    for (size_t k = 0; k < ag.size(); ++k) ag[k] += (*g_inject)[k];
  }
  const size_t total = ai.size();
  out.h = Tensor({n, p.hidden_size});
  out.m = Tensor({n, p.hidden_size});
  for (size_t k = 0; k < total; ++k) {
    const float iv = detail::sigmoidf(ai[k]);
    const float fv = detail::sigmoidf(af[k]);
    const float ov = detail::sigmoidf(ao[k]);
    const float gv = std::tanh(ag[k]);
    const float mv = fv * m_prev[k] + iv * gv;
    ai[k] = iv;
    af[k] = fv;
    ao[k] = ov;
    ag[k] = gv;
    out.m[k] = mv;
    out.h[k] = ov * std::tanh(mv);
  }
  out.cache.x = x;
  out.cache.h_prev = h_prev;
  out.cache.m_prev = m_prev;
  out.cache.i = std::move(ai);
  out.cache.f = std::move(af);
  out.cache.o = std::move(ao);
  out.cache.g = std::move(ag);
  out.cache.m = out.m;
  out.cache.h = out.h;
  out.cache.valid = true;
  return out;
}

// Backward through one cell step. `dh` and `dm_in` are the loss gradients
// arriving at h_t and m_t from outside the cell; parameter gradients are
// accumulated into `grads`.
inline LstmStepGrads lstm_cell_backward(const LstmCellParams& p, const LstmCache& cache,
                                        const Tensor& dh, const Tensor& dm_in,
                                        LstmGrads& grads) {
  if (!cache.valid) throw UsageError("lstm_cell_backward: no forward cache");
  const uint32_t n = cache.x.dim(0);
  if (dh.rank() != 2 || dh.dim(0) != n || dh.dim(1) != p.hidden_size)
    throw ShapeError("lstm backward: dh shape mismatch");
  if (dm_in.rank() != 2 || !dm_in.same_shape(dh))
    throw ShapeError("lstm backward: dm shape mismatch");

  const size_t total = dh.size();
  Tensor da_i({n, p.hidden_size}), da_f({n, p.hidden_size});
  Tensor da_o({n, p.hidden_size}), da_g({n, p.hidden_size});
  LstmStepGrads out;
  out.dm_prev = Tensor({n, p.hidden_size});
  for (size_t k = 0; k < total; ++k) {
    const float iv = cache.i[k], fv = cache.f[k], ov = cache.o[k], gv = cache.g[k];
    const float tm = std::tanh(cache.m[k]);
    const float dhk = dh[k];
    da_o[k] = dhk * tm * ov * (1.0f - ov);
    const float dm = dm_in[k] + dhk * ov * (1.0f - tm * tm);
    da_f[k] = dm * cache.m_prev[k] * fv * (1.0f - fv);
    da_i[k] = dm * gv * iv * (1.0f - iv);
    da_g[k] = dm * iv * (1.0f - gv * gv);
    out.dm_prev[k] = dm * fv;
  }

  // dx = Σ_gate da·W ; dh_prev = Σ_gate da·Wh
  out.dx = matmul(da_i, p.W_i);
  {
    Tensor t = matmul(da_f, p.W_f);
    for (size_t k = 0; k < out.dx.size(); ++k) out.dx[k] += t[k];
    t = matmul(da_o, p.W_o);
    for (size_t k = 0; k < out.dx.size(); ++k) out.dx[k] += t[k];
    t = matmul(da_g, p.W_g);
    for (size_t k = 0; k < out.dx.size(); ++k) out.dx[k] += t[k];
  }
  out.dh_prev = matmul(da_i, p.W_hi);
  {
    Tensor t = matmul(da_f, p.W_hf);
    for (size_t k = 0; k < out.dh_prev.size(); ++k) out.dh_prev[k] += t[k];
    t = matmul(da_o, p.W_ho);
    for (size_t k = 0; k < out.dh_prev.size(); ++k) out.dh_prev[k] += t[k];
    t = matmul(da_g, p.W_hg);
    for (size_t k = 0; k < out.dh_prev.size(); ++k) out.dh_prev[k] += t[k];
  }

  // dW = da^T · x ; dWh = da^T · h_prev ; db = column sums of da
  matmul_tn_accumulate(da_i, cache.x, grads.W_i);
  matmul_tn_accumulate(da_f, cache.x, grads.W_f);
  matmul_tn_accumulate(da_o, cache.x, grads.W_o);
  matmul_tn_accumulate(da_g, cache.x, grads.W_g);
  matmul_tn_accumulate(da_i, cache.h_prev, grads.W_hi);
  matmul_tn_accumulate(da_f, cache.h_prev, grads.W_hf);
  matmul_tn_accumulate(da_o, cache.h_prev, grads.W_ho);
  matmul_tn_accumulate(da_g, cache.h_prev, grads.W_hg);
  const uint32_t d = p.hidden_size;
  for (uint32_t row = 0; row < n; ++row) {
    for (uint32_t j = 0; j < d; ++j) {
      grads.b_i[j] += da_i.at(row, j);
      grads.b_f[j] += da_f.at(row, j);
      grads.b_o[j] += da_o.at(row, j);
      grads.b_g[j] += da_g.at(row, j);
    }
  }
  out.dg_inject = std::move(da_g);
  return out;
}

}  // namespace presage
