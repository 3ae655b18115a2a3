#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "presage/errors.hpp"
#include "presage/image.hpp"

namespace presage {

// Class-agnostic candidate rectangle, pixel coordinates, inclusive-exclusive.
struct BoxProposal {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  enum class Source { grid, framediff, external };
  Source source = Source::external;
  std::optional<float> score;  // carried through, never used by selection

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  float cx() const { return 0.5f * (x1 + x2); }
  float cy() const { return 0.5f * (y1 + y2); }

  bool valid(float frame_w, float frame_h) const {
    return x1 >= 0 && y1 >= 0 && x1 < x2 && y1 < y2 && x2 <= frame_w && y2 <= frame_h;
  }
};

inline void require_valid_box(const BoxProposal& b, float w, float h,
                              const std::string& context) {
  if (!b.valid(w, h)) {
    throw ValidationError(context + ": box [" + std::to_string(b.x1) + "," +
                          std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
                          std::to_string(b.y2) + "] invalid for " +
                          std::to_string(w) + "x" + std::to_string(h) + " frame");
  }
}

// Intersection over union of two boxes.
inline double iou(const BoxProposal& a, const BoxProposal& b) {
  const double ix = std::max(0.0, static_cast<double>(std::min(a.x2, b.x2)) -
                                      std::max(a.x1, b.x1));
  const double iy = std::max(0.0, static_cast<double>(std::min(a.y2, b.y2)) -
                                      std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

// ---------------------------------------------------------------------------
// Anchor lattice over the frame: for each scale s, boxes of size s×s placed
// every round(s*stride_fraction) pixels. Order: scale-major, then x, then y.
// ---------------------------------------------------------------------------

inline std::vector<BoxProposal> grid_proposals(uint32_t frame_w, uint32_t frame_h,
                                               const std::vector<uint32_t>& scales,
                                               double stride_fraction) {
  if (scales.empty()) throw ConfigError("grid_proposals: scales must be nonempty");
  if (stride_fraction <= 0.0) throw ConfigError("grid_proposals: stride fraction must be > 0");
  std::vector<BoxProposal> out;
  for (uint32_t s : scales) {
    if (s == 0 || s > std::min(frame_w, frame_h)) {
      throw ConfigError("grid_proposals: scale " + std::to_string(s) +
                        " exceeds frame " + std::to_string(frame_w) + "x" +
                        std::to_string(frame_h));
    }
    const uint32_t step = std::max<uint32_t>(1, static_cast<uint32_t>(std::lround(s * stride_fraction)));
    for (uint32_t x = 0; x + s <= frame_w; x += step) {
      for (uint32_t y = 0; y + s <= frame_h; y += step) {
        BoxProposal b;
        b.x1 = static_cast<float>(x);
        b.y1 = static_cast<float>(y);
        b.x2 = static_cast<float>(x + s);
        b.y2 = static_cast<float>(y + s);
        b.source = BoxProposal::Source::grid;
        out.push_back(b);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Motion regions from frame differencing: threshold the per-pixel absolute
// difference (max over channels), take 8-connected components, keep those
// with area >= min_area, grow each tight box by 10% per side, clip to frame.
// ---------------------------------------------------------------------------

inline std::vector<BoxProposal> framediff_proposals(const Image& prev, const Image& cur,
                                                    uint32_t diff_threshold,
                                                    uint32_t min_area) {
  if (prev.width != cur.width || prev.height != cur.height) {
    throw ShapeError("framediff_proposals: frame dims differ");
  }
  const uint32_t w = cur.width, h = cur.height;
  std::vector<uint8_t> mask(static_cast<size_t>(w) * h, 0);
  for (uint32_t y = 0; y < h; ++y) {
    for (uint32_t x = 0; x < w; ++x) {
      uint32_t d = 0;
      for (uint32_t c = 0; c < 3; ++c) {
        d = std::max<uint32_t>(d, static_cast<uint32_t>(
                                      std::abs(static_cast<int>(cur.at(x, y, c)) -
                                               static_cast<int>(prev.at(x, y, c)))));
      }
      if (d > diff_threshold) mask[static_cast<size_t>(y) * w + x] = 1;
    }
  }

  std::vector<BoxProposal> out;
  std::vector<std::pair<uint32_t, uint32_t>> stack;
  for (uint32_t sy = 0; sy < h; ++sy) {
    for (uint32_t sx = 0; sx < w; ++sx) {
      if (mask[static_cast<size_t>(sy) * w + sx] != 1) continue;
      uint32_t minx = sx, maxx = sx, miny = sy, maxy = sy, area = 0;
      stack.clear();
      stack.emplace_back(sx, sy);
      mask[static_cast<size_t>(sy) * w + sx] = 2;
      while (!stack.empty()) {
        auto [x, y] = stack.back();
        stack.pop_back();
        ++area;
        minx = std::min(minx, x);
        maxx = std::max(maxx, x);
        miny = std::min(miny, y);
        maxy = std::max(maxy, y);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int64_t nx = static_cast<int64_t>(x) + dx;
            const int64_t ny = static_cast<int64_t>(y) + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            uint8_t& m = mask[static_cast<size_t>(ny) * w + nx];
            if (m == 1) {
              m = 2;
              stack.emplace_back(static_cast<uint32_t>(nx), static_cast<uint32_t>(ny));
            }
          }
        }
      }
      if (area < min_area) continue;
      const float bw = static_cast<float>(maxx - minx + 1);
      const float bh = static_cast<float>(maxy - miny + 1);
      BoxProposal b;
      b.x1 = std::max(0.0f, minx - 0.1f * bw);
      b.y1 = std::max(0.0f, miny - 0.1f * bh);
      b.x2 = std::min(static_cast<float>(w), (maxx + 1) + 0.1f * bw);
      b.y2 = std::min(static_cast<float>(h), (maxy + 1) + 0.1f * bh);
      b.source = BoxProposal::Source::framediff;
      b.score = static_cast<float>(area);
      out.push_back(b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// External proposals: one JSON record per line,
//   {"frame": <int>, "boxes": [[x1,y1,x2,y2], ...]}
// Boxes are validated against the frame dims; errors carry line numbers.
// ---------------------------------------------------------------------------

inline std::map<int64_t, std::vector<BoxProposal>> load_external_proposals(
    const std::string& path, uint32_t frame_w, uint32_t frame_h) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::map<int64_t, std::vector<BoxProposal>> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!rec.contains("frame") || !rec["frame"].is_number_integer()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": missing integer 'frame'");
    }
    const int64_t frame = rec["frame"].get<int64_t>();
    if (!rec.contains("boxes") || !rec["boxes"].is_array()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": missing 'boxes' array");
    }
    for (const auto& jb : rec["boxes"]) {
      if (!jb.is_array() || jb.size() != 4) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": box must be [x1,y1,x2,y2]");
      }
      BoxProposal b;
      b.x1 = jb[0].get<float>();
      b.y1 = jb[1].get<float>();
      b.x2 = jb[2].get<float>();
      b.y2 = jb[3].get<float>();
      b.source = BoxProposal::Source::external;
      try {
        require_valid_box(b, static_cast<float>(frame_w), static_cast<float>(frame_h),
                          "external proposal");
      } catch (const ValidationError& e) {
        throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
      out[frame].push_back(b);
    }
  }
  return out;
}

// Concatenates already-ordered strategy outputs, drops near-duplicates
// (IoU > dedup_iou keeps the earlier box), caps the total.
inline std::vector<BoxProposal> merge_proposals(
    const std::vector<std::vector<BoxProposal>>& lists, double dedup_iou = 0.95,
    size_t cap = 100) {
  std::vector<BoxProposal> out;
  for (const auto& list : lists) {
    for (const auto& b : list) {
      bool dup = false;
      for (const auto& kept : out) {
        if (iou(kept, b) > dedup_iou) {
          dup = true;
          break;
        }
      }
      if (!dup) {
        out.push_back(b);
        if (out.size() >= cap) return out;
      }
    }
  }
  return out;
}

}  // namespace presage
