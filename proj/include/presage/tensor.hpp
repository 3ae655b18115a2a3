#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "presage/errors.hpp"

namespace presage {

// Dense row-major float32 tensor. All numeric state in the engine (weights,
// feature grids, error maps, checkpoints) lives in this type.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<uint32_t> dims, float fill = 0.0f)
      : dims_(std::move(dims)), data_(checked_size(dims_), fill) {}

  static Tensor from_data(std::vector<uint32_t> dims, std::vector<float> data) {
    Tensor t;
    if (checked_size(dims) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match dims product " +
                       std::to_string(checked_size(dims)));
    }
    t.dims_ = std::move(dims);
    t.data_ = std::move(data);
    return t;
  }

  size_t rank() const { return dims_.size(); }
  uint32_t dim(size_t i) const { return dims_.at(i); }
  const std::vector<uint32_t>& dims() const { return dims_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](size_t i) { return data_[i]; }
  float operator[](size_t i) const { return data_[i]; }

  // Rank-2 accessor: row r, column c.
  float& at(size_t r, size_t c) { return data_[r * dims_[1] + c]; }
  float at(size_t r, size_t c) const { return data_[r * dims_[1] + c]; }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  size_t byte_size() const {
    return data_.size() * sizeof(float) + dims_.size() * sizeof(uint32_t);
  }

 private:
  static size_t checked_size(const std::vector<uint32_t>& dims) {
    size_t n = 1;
    for (uint32_t d : dims) {
      if (d == 0) throw ShapeError("tensor dims must be positive");
      n *= d;
    }
    return dims.empty() ? 0 : n;
  }

  std::vector<uint32_t> dims_;
  std::vector<float> data_;
};

inline void assert_finite(const Tensor& t, const std::string& context) {
  if (!t.all_finite()) {
    throw ValidationError("non-finite value in " + context);
  }
}

inline void require_rank(const Tensor& t, size_t r, const std::string& context) {
  if (t.rank() != r) {
    throw ShapeError(context + ": expected rank " + std::to_string(r) +
                     ", got " + std::to_string(t.rank()));
  }
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937 is fully specified by the standard, so streams
// are reproducible across runs for a fixed seed.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  // Uniform in [0, 1), 24 bits of resolution, one draw per call.
  double uniform() {
    return static_cast<double>(gen_() >> 8) * (1.0 / 16777216.0);
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  uint32_t next_u32() { return gen_(); }

  // Uniform integer in [0, n).
  uint32_t uniform_index(uint32_t n) {
    return static_cast<uint32_t>(uniform() * n) % n;
  }

  // Standard normal via Box-Muller.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Tensor gaussian_tensor(std::vector<uint32_t> dims, float stddev) {
    Tensor t(std::move(dims));
    for (size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<float>(gaussian() * stddev);
    }
    return t;
  }

 private:
  std::mt19937 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Linear algebra. Accumulation order is fixed (ascending k), so results are
// bit-stable for a given build: every rerun of the stream reproduces the
// same bytes.
// ---------------------------------------------------------------------------

// a [m×k] · b [k×n] -> [m×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dims disagree (" + std::to_string(a.dim(1)) +
                     " vs " + std::to_string(b.dim(0)) + ")");
  }
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
  Tensor c({static_cast<uint32_t>(m), static_cast<uint32_t>(n)});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (size_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    const float* arow = pa + i * k;
    for (size_t kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = pb + kk * n;
      for (size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
  return c;
}

// a [m×k] · b [n×k]^T -> [m×n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt lhs");
  require_rank(b, 2, "matmul_nt rhs");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: inner dims disagree");
  }
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({static_cast<uint32_t>(m), static_cast<uint32_t>(n)});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (size_t i = 0; i < m; ++i) {
    const float* arow = pa + i * k;
    float* crow = pc + i * n;
    for (size_t j = 0; j < n; ++j) {
      const float* brow = pb + j * k;
      float acc = 0.0f;
      for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = acc;
    }
  }
  return c;
}

// a [k×m]^T · b [k×n] -> [m×n]; accumulates into `into` when provided.
inline void matmul_tn_accumulate(const Tensor& a, const Tensor& b, Tensor& into) {
  require_rank(a, 2, "matmul_tn lhs");
  require_rank(b, 2, "matmul_tn rhs");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: inner dims disagree");
  }
  const size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (into.rank() != 2 || into.dim(0) != m || into.dim(1) != n) {
    throw ShapeError("matmul_tn: output shape mismatch");
  }
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = into.data();
  for (size_t kk = 0; kk < k; ++kk) {
    const float* arow = pa + kk * m;
    const float* brow = pb + kk * n;
    for (size_t i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = pc + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(1), b.dim(1)});
  matmul_tn_accumulate(a, b, c);
  return c;
}

// Softmax over all entries of a rank-2 map, stabilized by max subtraction.
inline Tensor softmax2d(const Tensor& e) {
  require_rank(e, 2, "softmax2d");
  Tensor out(e.dims());
  float mx = e[0];
  for (size_t i = 1; i < e.size(); ++i) mx = std::max(mx, e[i]);
  double sum = 0.0;
  for (size_t i = 0; i < e.size(); ++i) {
    const double v = std::exp(static_cast<double>(e[i]) - mx);
    out[i] = static_cast<float>(v);
    sum += v;
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// STF1 tensor file format: magic "STF1", u32-LE rank, rank × u32-LE dims,
// row-major float32-LE payload. Records may be concatenated back to back in
// one file to form a sequence.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool read_u32_le(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
      (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace detail

inline void write_stf1(std::ostream& os, const Tensor& t) {
  os.write("STF1", 4);
  detail::write_u32_le(os, static_cast<uint32_t>(t.rank()));
  for (size_t i = 0; i < t.rank(); ++i) detail::write_u32_le(os, t.dim(i));
  for (size_t i = 0; i < t.size(); ++i) {
    uint32_t bits;
    float v = t[i];
    std::memcpy(&bits, &v, 4);
    detail::write_u32_le(os, bits);
  }
  if (!os) throw IoError("STF1 write failed");
}

// Reads one record. Returns nullopt at a clean end-of-stream; throws
// FormatError on bad magic and IoError on a mid-record truncation.
inline std::optional<Tensor> read_stf1(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 1)) return std::nullopt;  // clean EOF
  if (!is.read(magic + 1, 3)) throw IoError("STF1: truncated magic");
  if (std::memcmp(magic, "STF1", 4) != 0) {
    throw FormatError("STF1: bad magic bytes");
  }
  uint32_t rank = 0;
  if (!detail::read_u32_le(is, rank)) throw IoError("STF1: truncated rank");
  if (rank > 8) throw FormatError("STF1: implausible rank " + std::to_string(rank));
  std::vector<uint32_t> dims(rank);
  size_t n = 1;
  for (uint32_t& d : dims) {
    if (!detail::read_u32_le(is, d)) throw IoError("STF1: truncated dims");
    if (d == 0) throw FormatError("STF1: zero dimension");
    n *= d;
  }
  std::vector<float> data(n);
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits;
    if (!detail::read_u32_le(is, bits)) throw IoError("STF1: truncated payload");
    float v;
    std::memcpy(&v, &bits, 4);
    data[i] = v;
  }
  return Tensor::from_data(std::move(dims), std::move(data));
}

inline void save_stf1(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_stf1(os, t);
}

inline Tensor load_stf1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  auto t = read_stf1(is);
  if (!t) throw FormatError("empty STF1 file: " + path);
  return std::move(*t);
}

}  // namespace presage
