#pragma once

#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "presage/errors.hpp"
#include "presage/image.hpp"
#include "presage/tensor.hpp"

namespace presage {

// Per-frame spatial feature grid. values has dims {w, h, d}, row-major, so
// location (i, j) with i along width and j along height starts at
// (i*h + j)*d. STF1 files storing grids use the same layout.
struct FeatureGrid {
  uint32_t w = 0, h = 0, d = 0;
  Tensor values;
  int64_t frame_index = -1;

  FeatureGrid() = default;
  FeatureGrid(uint32_t w_, uint32_t h_, uint32_t d_, int64_t frame = -1)
      : w(w_), h(h_), d(d_), values(Tensor({w_, h_, d_})), frame_index(frame) {}

  uint32_t locations() const { return w * h; }

  float* cell(uint32_t i, uint32_t j) {
    return values.data() + (static_cast<size_t>(i) * h + j) * d;
  }
  const float* cell(uint32_t i, uint32_t j) const {
    return values.data() + (static_cast<size_t>(i) * h + j) * d;
  }

  bool same_dims(const FeatureGrid& o) const {
    return w == o.w && h == o.h && d == o.d;
  }

  // Copy of the grid viewed as a [locations × depth] matrix.
  Tensor as_matrix() const {
    return Tensor::from_data({locations(), d}, values.values());
  }
};

struct ConvLayerSpec {
  uint32_t kernel = 3;
  uint32_t stride = 2;
  uint32_t channels = 8;
  uint32_t pool = 1;  // non-overlapping average pooling factor
};

struct EncoderConfig {
  uint32_t input_width = 64;
  uint32_t input_height = 64;
  // Three strided layers, 64x64 -> 8x8x32. The narrow receptive field (9 px
  // at stride 8) keeps the error attention from smearing past object bounds.
  std::vector<ConvLayerSpec> layers = {{3, 2, 8, 1}, {2, 2, 16, 1}, {2, 2, 32, 1}};
  uint64_t seed = 11;
  std::string weights_path;  // optional: load weights instead of seeding

  static EncoderConfig desk_scale() { return EncoderConfig{}; }

  // 224×224 → 14×14×512, the scale used with a pretrained backbone.
  static EncoderConfig paper_scale() {
    EncoderConfig c;
    c.input_width = 224;
    c.input_height = 224;
    c.layers = {{5, 4, 64, 1}, {3, 2, 128, 1}, {3, 2, 512, 1}};
    return c;
  }
};

// Pixel interval [lo, hi) of one grid axis index.
struct PixelInterval {
  int64_t lo = 0;
  int64_t hi = 0;
  bool intersects(int64_t a, int64_t b) const { return lo < b && a < hi; }
};

// Frozen convolutional feature extractor. Weights are derived once from the
// seed (rows orthonormalized via Gram-Schmidt on seeded Gaussians) and never
// touched by the learner; tanh keeps features in (-1, 1).
class ConvEncoder {
 public:
  explicit ConvEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.layers.empty()) throw ConfigError("encoder: needs at least one layer");
    uint32_t w = cfg.input_width, h = cfg.input_height, c = 3;
    for (const auto& l : cfg.layers) {
      if (l.kernel == 0 || l.stride == 0 || l.channels == 0 || l.pool == 0) {
        throw ConfigError("encoder: layer parameters must be positive");
      }
      const uint32_t pad = (l.kernel - 1) / 2;
      auto conv_out = [&](uint32_t in) -> uint32_t {
        const int64_t o = (static_cast<int64_t>(in) + 2 * pad - l.kernel) / l.stride + 1;
        if (o < 1) throw ConfigError("encoder: layer shrinks output below 1");
        return static_cast<uint32_t>(o);
      };
      w = conv_out(w) / l.pool;
      h = conv_out(h) / l.pool;
      if (w == 0 || h == 0) throw ConfigError("encoder: pooling shrinks output below 1");
      c = l.channels;
      out_dims_.push_back({w, h, c});
    }
    out_w_ = w;
    out_h_ = h;
    out_d_ = c;

    if (!cfg.weights_path.empty()) {
      load_weights(cfg.weights_path);
    } else {
      seed_weights();
    }
  }

  uint32_t out_width() const { return out_w_; }
  uint32_t out_height() const { return out_h_; }
  uint32_t out_depth() const { return out_d_; }

  FeatureGrid encode(const Image& frame) const {
    if (frame.width != cfg_.input_width || frame.height != cfg_.input_height) {
      throw ShapeError("encode: frame is " + std::to_string(frame.width) + "x" +
                       std::to_string(frame.height) + ", config wants " +
                       std::to_string(cfg_.input_width) + "x" +
                       std::to_string(cfg_.input_height));
    }
    // Normalize: scale to [0,1], then (v - 0.5) / 0.25.
    uint32_t w = frame.width, h = frame.height, c = 3;
    std::vector<float> buf(static_cast<size_t>(w) * h * c);
    for (size_t i = 0; i < buf.size(); ++i) {
      buf[i] = (frame.pixels[i] / 255.0f - 0.5f) * 4.0f;
    }
    for (size_t li = 0; li < cfg_.layers.size(); ++li) {
      buf = conv_layer(buf, w, h, c, li);
      w = conv_w_[li];
      h = conv_h_[li];
      c = cfg_.layers[li].channels;
      if (cfg_.layers[li].pool > 1) {
        buf = avg_pool(buf, w, h, c, cfg_.layers[li].pool);
        w /= cfg_.layers[li].pool;
        h /= cfg_.layers[li].pool;
      }
    }
    // Transpose y-major conv output into the grid's x-major layout.
    FeatureGrid grid(out_w_, out_h_, out_d_);
    for (uint32_t j = 0; j < out_h_; ++j) {
      for (uint32_t i = 0; i < out_w_; ++i) {
        const float* src = buf.data() + (static_cast<size_t>(j) * out_w_ + i) * out_d_;
        std::copy(src, src + out_d_, grid.cell(i, j));
      }
    }
    return grid;
  }

  // Input-pixel interval covered by grid index i on one axis.
  PixelInterval receptive_field(uint32_t index, bool horizontal) const {
    int64_t stride = 1, offset = 0, extent = 1;
    for (const auto& l : cfg_.layers) {
      const int64_t pad = (l.kernel - 1) / 2;
      offset -= pad * stride;
      extent += (l.kernel - 1) * stride;
      stride *= l.stride;
      if (l.pool > 1) {
        extent += (l.pool - 1) * stride;
        stride *= l.pool;
      }
    }
    const int64_t in = horizontal ? cfg_.input_width : cfg_.input_height;
    const int64_t lo = static_cast<int64_t>(index) * stride + offset;
    return {std::max<int64_t>(0, lo), std::min(in, lo + extent)};
  }

  uint64_t weights_checksum() const {
    uint64_t hash = 1469598103934665603ull;  // FNV-1a
    auto mix = [&](const Tensor& t) {
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
    for (size_t li = 0; li < weights_.size(); ++li) {
      mix(weights_[li]);
      mix(biases_[li]);
    }
    return hash;
  }

  void save_weights(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    for (size_t li = 0; li < weights_.size(); ++li) {
      write_stf1(os, weights_[li]);
      write_stf1(os, biases_[li]);
    }
  }

 private:
  void seed_weights() {
    Rng rng(cfg_.seed);
    uint32_t in_c = 3;
    for (const auto& l : cfg_.layers) {
      const uint32_t fanin = l.kernel * l.kernel * in_c;
      Tensor w = rng.gaussian_tensor({l.channels, fanin}, 1.0f);
      orthonormalize_rows(w);
      weights_.push_back(std::move(w));
      biases_.push_back(Tensor({l.channels}));
      in_c = l.channels;
    }
    compute_conv_dims();
  }

  void load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint32_t in_c = 3;
    for (size_t li = 0; li < cfg_.layers.size(); ++li) {
      const auto& l = cfg_.layers[li];
      auto w = read_stf1(is);
      auto b = read_stf1(is);
      if (!w || !b) throw FormatError("encoder weights file too short: " + path);
      const uint32_t fanin = l.kernel * l.kernel * in_c;
      if (w->rank() != 2 || w->dim(0) != l.channels || w->dim(1) != fanin) {
        throw ShapeError("encoder weights: layer " + std::to_string(li) + " shape mismatch");
      }
      if (b->rank() != 1 || b->dim(0) != l.channels) {
        throw ShapeError("encoder bias: layer " + std::to_string(li) + " shape mismatch");
      }
      weights_.push_back(std::move(*w));
      biases_.push_back(std::move(*b));
      in_c = l.channels;
    }
    compute_conv_dims();
  }

  void compute_conv_dims() {
    uint32_t w = cfg_.input_width, h = cfg_.input_height;
    for (const auto& l : cfg_.layers) {
      const uint32_t pad = (l.kernel - 1) / 2;
      w = static_cast<uint32_t>((static_cast<int64_t>(w) + 2 * pad - l.kernel) / l.stride + 1);
      h = static_cast<uint32_t>((static_cast<int64_t>(h) + 2 * pad - l.kernel) / l.stride + 1);
      conv_w_.push_back(w);
      conv_h_.push_back(h);
      w /= l.pool;
      h /= l.pool;
    }
  }

  static void orthonormalize_rows(Tensor& w) {
    const uint32_t rows = w.dim(0), cols = w.dim(1);
    const uint32_t ortho = std::min(rows, cols);
    for (uint32_t r = 0; r < rows; ++r) {
      float* wr = w.data() + static_cast<size_t>(r) * cols;
      if (r < ortho) {
        for (uint32_t p = 0; p < r; ++p) {
          const float* wp = w.data() + static_cast<size_t>(p) * cols;
          double dot = 0.0;
          for (uint32_t c = 0; c < cols; ++c) dot += wr[c] * static_cast<double>(wp[c]);
          for (uint32_t c = 0; c < cols; ++c) wr[c] -= static_cast<float>(dot) * wp[c];
        }
      }
      double norm = 0.0;
      for (uint32_t c = 0; c < cols; ++c) norm += static_cast<double>(wr[c]) * wr[c];
      const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm, 1e-12)));
      for (uint32_t c = 0; c < cols; ++c) wr[c] *= inv;
    }
  }

  std::vector<float> conv_layer(const std::vector<float>& in, uint32_t in_w,
                                uint32_t in_h, uint32_t in_c, size_t li) const {
    const auto& l = cfg_.layers[li];
    const uint32_t out_w = conv_w_[li], out_h = conv_h_[li];
    const int64_t pad = (l.kernel - 1) / 2;
    const Tensor& w = weights_[li];
    const Tensor& b = biases_[li];
    std::vector<float> out(static_cast<size_t>(out_w) * out_h * l.channels);
    for (uint32_t oy = 0; oy < out_h; ++oy) {
      for (uint32_t ox = 0; ox < out_w; ++ox) {
        float* op = out.data() + (static_cast<size_t>(oy) * out_w + ox) * l.channels;
        for (uint32_t oc = 0; oc < l.channels; ++oc) {
          const float* wk = w.data() + static_cast<size_t>(oc) * w.dim(1);
          float acc = b[oc];
          for (uint32_t ky = 0; ky < l.kernel; ++ky) {
            const int64_t iy = static_cast<int64_t>(oy) * l.stride + ky - pad;
            if (iy < 0 || iy >= in_h) continue;
            for (uint32_t kx = 0; kx < l.kernel; ++kx) {
              const int64_t ix = static_cast<int64_t>(ox) * l.stride + kx - pad;
              if (ix < 0 || ix >= in_w) continue;
              const float* ip = in.data() + (static_cast<size_t>(iy) * in_w + ix) * in_c;
              const float* wp = wk + (static_cast<size_t>(ky) * l.kernel + kx) * in_c;
              for (uint32_t ic = 0; ic < in_c; ++ic) acc += ip[ic] * wp[ic];
            }
          }
          op[oc] = std::tanh(acc);
        }
      }
    }
    return out;
  }

  static std::vector<float> avg_pool(const std::vector<float>& in, uint32_t in_w,
                                     uint32_t in_h, uint32_t c, uint32_t q) {
    const uint32_t out_w = in_w / q, out_h = in_h / q;
    std::vector<float> out(static_cast<size_t>(out_w) * out_h * c, 0.0f);
    const float inv = 1.0f / static_cast<float>(q * q);
    for (uint32_t oy = 0; oy < out_h; ++oy) {
      for (uint32_t ox = 0; ox < out_w; ++ox) {
        float* op = out.data() + (static_cast<size_t>(oy) * out_w + ox) * c;
        for (uint32_t dy = 0; dy < q; ++dy) {
          for (uint32_t dx = 0; dx < q; ++dx) {
            const float* ip =
                in.data() + (static_cast<size_t>(oy * q + dy) * in_w + ox * q + dx) * c;
            for (uint32_t ch = 0; ch < c; ++ch) op[ch] += ip[ch];
          }
        }
        for (uint32_t ch = 0; ch < c; ++ch) op[ch] *= inv;
      }
    }
    return out;
  }

  EncoderConfig cfg_;
  std::vector<Tensor> weights_;  // per layer [C_out × k*k*C_in]
  std::vector<Tensor> biases_;   // per layer [C_out]
  std::vector<uint32_t> conv_w_, conv_h_;  // pre-pool conv output dims
  struct Dims { uint32_t w, h, c; };
  std::vector<Dims> out_dims_;
  uint32_t out_w_ = 0, out_h_ = 0, out_d_ = 0;
};

// ---------------------------------------------------------------------------
// Grid sources: the predictor consumes grids either from the encoder or from
// a file of precomputed features. Reads are counted per frame index.
// ---------------------------------------------------------------------------

class GridSource {
 public:
  virtual ~GridSource() = default;
  virtual std::optional<FeatureGrid> next() = 0;
  virtual const std::vector<uint32_t>& read_counts() const = 0;
  virtual void seek(int64_t upto) = 0;
  // Raw pixels of the most recent frame, when the source has them.
  virtual const Image* last_image() const { return nullptr; }
};

// Streams STF1 records (rank 3, dims {w,h,d}) from one file; one grid
// buffered at a time.
class FeatureSequenceReader : public GridSource {
 public:
  explicit FeatureSequenceReader(const std::string& path)
      : is_(path, std::ios::binary), path_(path) {
    if (!is_) throw IoError("cannot open: " + path);
  }

  std::optional<FeatureGrid> next() override {
    auto t = read_stf1(is_);
    if (!t) return std::nullopt;
    if (t->rank() != 3) {
      throw FormatError("feature sequence " + path_ + ": frame " +
                        std::to_string(index_) + " has rank " +
                        std::to_string(t->rank()) + ", expected 3");
    }
    FeatureGrid g;
    g.w = t->dim(0);
    g.h = t->dim(1);
    g.d = t->dim(2);
    g.values = std::move(*t);
    g.frame_index = index_;
    if (index_ == 0) {
      w_ = g.w;
      h_ = g.h;
      d_ = g.d;
    } else if (g.w != w_ || g.h != h_ || g.d != d_) {
      throw FormatError("feature sequence " + path_ + ": frame " +
                        std::to_string(index_) + " dims differ from frame 0");
    }
    if (read_counts_.size() <= static_cast<size_t>(index_)) {
      read_counts_.resize(index_ + 1, 0);
    }
    read_counts_[index_]++;
    index_++;
    return g;
  }

  void seek(int64_t upto) override {
    while (index_ < upto) {
      auto g = next();
      if (!g) break;
      read_counts_[g->frame_index]--;  // a skip is not a processed read
    }
  }

  const std::vector<uint32_t>& read_counts() const override { return read_counts_; }

 private:
  std::ifstream is_;
  std::string path_;
  int64_t index_ = 0;
  uint32_t w_ = 0, h_ = 0, d_ = 0;
  std::vector<uint32_t> read_counts_;
};

// Wraps a pixel FrameSource with the frozen encoder.
class EncodingGridSource : public GridSource {
 public:
  EncodingGridSource(std::unique_ptr<FrameSource> frames, const ConvEncoder& encoder)
      : frames_(std::move(frames)), encoder_(encoder) {}

  std::optional<FeatureGrid> next() override {
    const int64_t index = frames_->cursor();
    auto img = frames_->next();
    if (!img) return std::nullopt;
    last_image_ = std::move(*img);
    FeatureGrid g = encoder_.encode(last_image_);
    g.frame_index = index;
    return g;
  }

  void seek(int64_t upto) override { frames_->seek(upto); }

  const std::vector<uint32_t>& read_counts() const override {
    return frames_->read_counts();
  }

  const Image* last_image() const override {
    return last_image_.pixels.empty() ? nullptr : &last_image_;
  }

 private:
  std::unique_ptr<FrameSource> frames_;
  const ConvEncoder& encoder_;
  Image last_image_;
};

}  // namespace presage
