#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "presage/errors.hpp"
#include "presage/tensor.hpp"

namespace presage {

// 8-bit RGB frame, row-major y/x/channel.
struct Image {
  uint32_t width = 0;
  uint32_t height = 0;
  std::vector<uint8_t> pixels;  // height*width*3

  Image() = default;
  Image(uint32_t w, uint32_t h, uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, fill) {}

  uint8_t& at(uint32_t x, uint32_t y, uint32_t c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  uint8_t at(uint32_t x, uint32_t y, uint32_t c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

// ---------------------------------------------------------------------------
// Portable pixmap (P6, maxval 255) I/O.
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed: " + path);
}

namespace detail {
inline int ppm_next_token(std::istream& is, std::string& tok) {
  tok.clear();
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {  // comment to end of line
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = is.get();
  }
  return tok.empty() ? EOF : 0;
}
}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::string tok;
  if (detail::ppm_next_token(is, tok) == EOF || tok != "P6") {
    throw FormatError("not a binary PPM (P6): " + path);
  }
  auto read_int = [&](const char* what) {
    if (detail::ppm_next_token(is, tok) == EOF) {
      throw FormatError(std::string("PPM: missing ") + what + ": " + path);
    }
    return std::stoul(tok);
  };
  const uint32_t w = static_cast<uint32_t>(read_int("width"));
  const uint32_t h = static_cast<uint32_t>(read_int("height"));
  const uint32_t maxval = static_cast<uint32_t>(read_int("maxval"));
  if (maxval != 255) throw FormatError("PPM: only maxval 255 supported: " + path);
  Image img(w, h);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size()))) {
    throw IoError("PPM: truncated pixel data: " + path);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Frame sources. Sequential, single pass; every next() is counted per frame
// index so the streaming contract (each frame read exactly once) can be
// checked by tests.
// ---------------------------------------------------------------------------

class FrameSource {
 public:
  virtual ~FrameSource() = default;

  std::optional<Image> next() {
    auto img = fetch(cursor_);
    if (img) {
      if (read_counts_.size() <= static_cast<size_t>(cursor_)) {
        read_counts_.resize(cursor_ + 1, 0);
      }
      read_counts_[cursor_]++;
      cursor_++;
    }
    return img;
  }

  // Skips frames [cursor, upto) without decoding them; used by resume.
  virtual void seek(int64_t upto) { cursor_ = upto; }

  int64_t cursor() const { return cursor_; }
  const std::vector<uint32_t>& read_counts() const { return read_counts_; }

 protected:
  virtual std::optional<Image> fetch(int64_t index) = 0;

 private:
  int64_t cursor_ = 0;
  std::vector<uint32_t> read_counts_;
};

// Directory of numbered .ppm files, lexicographic order.
class DirectoryFrameSource : public FrameSource {
 public:
  explicit DirectoryFrameSource(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") {
        files_.push_back(e.path().string());
      }
    }
    std::sort(files_.begin(), files_.end());
    if (files_.empty()) throw IoError("no .ppm frames in: " + dir);
  }

  size_t frame_count() const { return files_.size(); }

 protected:
  std::optional<Image> fetch(int64_t index) override {
    if (index < 0 || static_cast<size_t>(index) >= files_.size()) return std::nullopt;
    return read_ppm(files_[index]);
  }

 private:
  std::vector<std::string> files_;
};

// Single STF1 record with dims T×H×W×3; frames decoded one at a time so
// memory stays constant in T.
class VideoTensorFrameSource : public FrameSource {
 public:
  explicit VideoTensorFrameSource(const std::string& path) : is_(path, std::ios::binary) {
    if (!is_) throw IoError("cannot open: " + path);
    char magic[4];
    if (!is_.read(magic, 4) || std::memcmp(magic, "STF1", 4) != 0) {
      throw FormatError("not an STF1 file: " + path);
    }
    uint32_t rank = 0;
    if (!detail::read_u32_le(is_, rank) || rank != 4) {
      throw FormatError("video tensor must be rank 4 (T,H,W,3): " + path);
    }
    uint32_t dims[4];
    for (uint32_t& d : dims) {
      if (!detail::read_u32_le(is_, d)) throw IoError("truncated STF1 header: " + path);
    }
    if (dims[3] != 3) throw FormatError("video tensor last dim must be 3: " + path);
    frames_ = dims[0];
    height_ = dims[1];
    width_ = dims[2];
    payload_start_ = is_.tellg();
  }

  size_t frame_count() const { return frames_; }

  void seek(int64_t upto) override {
    FrameSource::seek(upto);
    is_.clear();
    is_.seekg(payload_start_ + static_cast<std::streamoff>(upto) * frame_bytes());
  }

 protected:
  std::optional<Image> fetch(int64_t index) override {
    if (index < 0 || static_cast<uint64_t>(index) >= frames_) return std::nullopt;
    Image img(width_, height_);
    const size_t n = img.pixels.size();
    for (size_t i = 0; i < n; ++i) {
      uint32_t bits;
      if (!detail::read_u32_le(is_, bits)) throw IoError("truncated video tensor");
      float v;
      std::memcpy(&v, &bits, 4);
      const float clamped = std::min(255.0f, std::max(0.0f, v));
      img.pixels[i] = static_cast<uint8_t>(clamped + 0.5f);
    }
    return img;
  }

 private:
  std::streamoff frame_bytes() const {
    return static_cast<std::streamoff>(height_) * width_ * 3 * 4;
  }

  std::ifstream is_;
  uint64_t frames_ = 0;
  uint32_t height_ = 0, width_ = 0;
  std::streamoff payload_start_ = 0;
};

}  // namespace presage
