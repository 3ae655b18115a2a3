#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "presage/errors.hpp"
#include "presage/image.hpp"
#include "presage/metrics.hpp"
#include "presage/tensor.hpp"

namespace presage {

enum class Background { flat, noise, scrolling };
enum class Trajectory { stationary, linear, circular, zigzag };

inline const char* trajectory_name(Trajectory t) {
  switch (t) {
    case Trajectory::stationary: return "stationary";
    case Trajectory::linear: return "linear";
    case Trajectory::circular: return "circular";
    case Trajectory::zigzag: return "zigzag";
  }
  return "?";
}

struct SpriteSpec {
  uint32_t size = 16;
  uint64_t texture_seed = 1;
  Trajectory trajectory = Trajectory::linear;
  double speed = 2.0;          // px per frame
  int64_t t0 = 0, t1 = 59;     // rendered only within [t0, t1]
  double start_x = 8, start_y = 8;
  double dir_x = 1.0, dir_y = 0.0;  // linear heading (normalized internally)
  double radius = 0.0;              // circular orbit radius; 0 = min(W,H)/4
  double phase = 0.0;               // circular start angle
  uint32_t zigzag_period = 8;       // frames between vertical direction flips
};

struct SceneConfig {
  uint32_t width = 64;
  uint32_t height = 64;
  Background background = Background::flat;
  std::vector<SpriteSpec> sprites;
  uint64_t seed = 1;
  uint32_t length = 60;
  double scroll_vx = 1.0, scroll_vy = 0.5;  // scrolling background velocity
};

struct GeneratedScene {
  std::vector<Image> frames;
  GtVideo ground_truth;
};

namespace detail {

// Reflect x into [lo, hi] (triangle wrap), the border-bounce rule shared by
// the renderer and the ground truth.
inline double reflect(double x, double lo, double hi) {
  if (hi <= lo) return lo;
  const double period = 2.0 * (hi - lo);
  double m = std::fmod(x - lo, period);
  if (m < 0) m += period;
  return m <= (hi - lo) ? lo + m : lo + (period - m);
}

inline std::pair<int64_t, int64_t> sprite_position(const SpriteSpec& s, uint32_t w,
                                                   uint32_t h, int64_t t) {
  const double max_x = static_cast<double>(w) - s.size;
  const double max_y = static_cast<double>(h) - s.size;
  const double dt = static_cast<double>(t - s.t0);
  double x = s.start_x, y = s.start_y;
  switch (s.trajectory) {
    case Trajectory::stationary:
      break;
    case Trajectory::linear: {
      const double norm = std::sqrt(s.dir_x * s.dir_x + s.dir_y * s.dir_y);
      const double ux = norm > 0 ? s.dir_x / norm : 1.0;
      const double uy = norm > 0 ? s.dir_y / norm : 0.0;
      x += s.speed * dt * ux;
      y += s.speed * dt * uy;
      break;
    }
    case Trajectory::circular: {
      const double r = s.radius > 0 ? s.radius : std::min(w, h) / 4.0;
      const double cx = w / 2.0 - s.size / 2.0;
      const double cy = h / 2.0 - s.size / 2.0;
      const double omega = s.speed / std::max(1.0, r);
      x = cx + r * std::cos(s.phase + omega * dt);
      y = cy + r * std::sin(s.phase + omega * dt);
      break;
    }
    case Trajectory::zigzag: {
      x += s.speed * dt;
      const uint32_t p = std::max<uint32_t>(1, s.zigzag_period);
      const double ph = std::fmod(dt, 2.0 * p);
      const double tri = ph <= p ? ph : 2.0 * p - ph;
      y += s.speed * tri;
      break;
    }
  }
  x = reflect(x, 0.0, max_x);
  y = reflect(y, 0.0, max_y);
  return {std::llround(x), std::llround(y)};
}

}  // namespace detail

// Renders the configured scene. Deterministic for a fixed config: ground
// truth boxes are the exact rendered sprite rectangles, the video label is
// the first sprite's trajectory class, and the gaze track follows the first
// active sprite's center.
inline GeneratedScene generate(const SceneConfig& cfg, const std::string& video_id) {
  if (cfg.width == 0 || cfg.height == 0 || cfg.length == 0) {
    throw ConfigError("synth: frame dims and length must be positive");
  }
  for (const auto& s : cfg.sprites) {
    if (s.size == 0 || s.size > cfg.width || s.size > cfg.height) {
      throw ConfigError("synth: sprite size " + std::to_string(s.size) +
                        " does not fit in " + std::to_string(cfg.width) + "x" +
                        std::to_string(cfg.height));
    }
    if (s.t0 > s.t1) throw ConfigError("synth: sprite interval t0 > t1");
  }

  // Static background texture (shared by noise and scrolling modes). Kept in
  // a narrow bright-gray band around the sprites' mean so the actor's
  // internal motion signal is as strong as its silhouette.
  Rng bg_rng(cfg.seed * 7919 + 17);
  std::vector<uint8_t> bg_tex(static_cast<size_t>(cfg.width) * cfg.height);
  for (auto& v : bg_tex) v = static_cast<uint8_t>(180 + bg_rng.uniform_index(56));

  // Sprite textures: two-level noise around the background level.
  std::vector<std::vector<uint8_t>> sprite_tex;
  for (const auto& s : cfg.sprites) {
    Rng tex_rng(s.texture_seed * 6151 + 3);
    std::vector<uint8_t> tex(static_cast<size_t>(s.size) * s.size * 3);
    for (size_t px = 0; px < tex.size(); px += 3) {
      const uint8_t v = tex_rng.uniform_index(2) ? 255 : 160;
      tex[px] = tex[px + 1] = tex[px + 2] = v;
    }
    sprite_tex.push_back(std::move(tex));
  }

  GeneratedScene out;
  out.ground_truth.id = video_id;
  out.ground_truth.label =
      cfg.sprites.empty() ? "none" : trajectory_name(cfg.sprites.front().trajectory);
  out.ground_truth.tubes.resize(cfg.sprites.size());

  for (int64_t t = 0; t < static_cast<int64_t>(cfg.length); ++t) {
    Image frame(cfg.width, cfg.height);
    switch (cfg.background) {
      case Background::flat:
        std::fill(frame.pixels.begin(), frame.pixels.end(), 207);
        break;
      case Background::noise:
        for (uint32_t y = 0; y < cfg.height; ++y) {
          for (uint32_t x = 0; x < cfg.width; ++x) {
            const uint8_t v = bg_tex[static_cast<size_t>(y) * cfg.width + x];
            for (uint32_t c = 0; c < 3; ++c) frame.at(x, y, c) = v;
          }
        }
        break;
      case Background::scrolling: {
        const int64_t ox = std::llround(cfg.scroll_vx * t);
        const int64_t oy = std::llround(cfg.scroll_vy * t);
        for (uint32_t y = 0; y < cfg.height; ++y) {
          const uint32_t sy = static_cast<uint32_t>(((y + oy) % cfg.height + cfg.height) % cfg.height);
          for (uint32_t x = 0; x < cfg.width; ++x) {
            const uint32_t sx = static_cast<uint32_t>(((x + ox) % cfg.width + cfg.width) % cfg.width);
            const uint8_t v = bg_tex[static_cast<size_t>(sy) * cfg.width + sx];
            for (uint32_t c = 0; c < 3; ++c) frame.at(x, y, c) = v;
          }
        }
        break;
      }
    }

    bool gaze_done = false;
    for (size_t si = 0; si < cfg.sprites.size(); ++si) {
      const SpriteSpec& s = cfg.sprites[si];
      if (t < s.t0 || t > s.t1) continue;
      const auto [sx, sy] = detail::sprite_position(s, cfg.width, cfg.height, t);
      for (uint32_t dy = 0; dy < s.size; ++dy) {
        for (uint32_t dx = 0; dx < s.size; ++dx) {
          const uint32_t px = static_cast<uint32_t>(sx + dx);
          const uint32_t py = static_cast<uint32_t>(sy + dy);
          const uint8_t* tp = sprite_tex[si].data() + (static_cast<size_t>(dy) * s.size + dx) * 3;
          for (uint32_t c = 0; c < 3; ++c) frame.at(px, py, c) = tp[c];
        }
      }
      TubeEntry e;
      e.frame = t;
      e.box.x1 = static_cast<float>(sx);
      e.box.y1 = static_cast<float>(sy);
      e.box.x2 = static_cast<float>(sx + s.size);
      e.box.y2 = static_cast<float>(sy + s.size);
      out.ground_truth.tubes[si].entries.push_back(e);
      if (!gaze_done) {
        out.ground_truth.gaze.emplace_back(t, sx + s.size / 2.0, sy + s.size / 2.0);
        gaze_done = true;
      }
    }
    out.frames.push_back(std::move(frame));
  }

  // Drop tubes for sprites that never became active.
  std::erase_if(out.ground_truth.tubes,
                [](const ActionTube& t) { return t.entries.empty(); });
  return out;
}

inline nlohmann::ordered_json ground_truth_json(const GtVideo& gt) {
  nlohmann::ordered_json rec;
  rec["video"] = gt.id;
  rec["label"] = gt.label;
  auto tubes = nlohmann::ordered_json::array();
  for (size_t ti = 0; ti < gt.tubes.size(); ++ti) {
    for (const auto& e : gt.tubes[ti].entries) {
      nlohmann::ordered_json je;
      je["frame"] = e.frame;
      je["box"] = {e.box.x1, e.box.y1, e.box.x2, e.box.y2};
      if (gt.tubes.size() > 1) je["tube"] = ti;
      tubes.push_back(je);
    }
  }
  rec["tubes"] = tubes;
  auto gaze = nlohmann::ordered_json::array();
  for (const auto& [f, x, y] : gt.gaze) gaze.push_back({static_cast<double>(f), x, y});
  rec["gaze"] = gaze;
  return rec;
}

inline void write_frames_dir(const std::string& dir, const std::vector<Image>& frames) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (size_t i = 0; i < frames.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06zu.ppm", i);
    write_ppm(dir + "/" + name, frames[i]);
  }
}

// ---------------------------------------------------------------------------
// Fixed acceptance corpus: 20 single-sprite localization sequences with
// action interval [20,40], 30 clustering sequences in 3 trajectory classes,
// 10 gaze sequences. All seeds are fixed here; regeneration is bit-identical.
// ---------------------------------------------------------------------------

struct SuiteSequence {
  std::string id;
  std::string section;  // localization | clustering | gaze
  std::string frames_dir;
  std::string label;
  uint64_t seed = 0;
};

struct SuiteManifest {
  std::string root;
  std::vector<SuiteSequence> sequences;
  std::string gt_path(const std::string& section) const {
    return root + "/gt_" + section + ".jsonl";
  }

  std::vector<SuiteSequence> section(const std::string& name) const {
    std::vector<SuiteSequence> out;
    for (const auto& s : sequences) {
      if (s.section == name) out.push_back(s);
    }
    return out;
  }
};

inline SceneConfig suite_localization_config(uint32_t i) {
  SceneConfig cfg;
  cfg.seed = 1000 + i;
  cfg.background = (i % 2 == 0) ? Background::flat : Background::noise;
  SpriteSpec s;
  s.size = 20 + (i % 3) * 2;  // 20, 22, 24
  s.texture_seed = 500 + i;
  s.trajectory = std::array<Trajectory, 3>{Trajectory::linear, Trajectory::zigzag,
                                           Trajectory::circular}[i % 3];
  s.speed = 1.25 + 0.15 * (i % 3);
  s.t0 = 20;
  s.t1 = 40;
  s.start_x = 6 + (i * 5) % 22;
  s.start_y = 6 + (i * 7) % 22;
  s.dir_x = (i % 4 < 2) ? 1.0 : 0.7;
  s.dir_y = (i % 4 < 2) ? 0.25 : 1.0;
  s.phase = 0.6 * i;
  s.radius = 13 + (i % 3);
  s.zigzag_period = 8;
  cfg.sprites = {s};
  return cfg;
}

// One actor, three motion patterns: the sprite is shared across the whole
// clustering suite so the only class signal is the trajectory dynamics.
inline SceneConfig suite_clustering_config(Trajectory traj, uint32_t i) {
  SceneConfig cfg;
  cfg.seed = 2000 + static_cast<uint32_t>(traj) * 100 + i;
  cfg.background = Background::flat;
  SpriteSpec s;
  s.size = 18;
  s.texture_seed = 900;
  s.trajectory = traj;
  s.t1 = 59;
  // Within a class, videos differ only by nuisances the representation is
  // built to absorb: cell-aligned vertical translation, onset time, and
  // orbit phase. The motion pattern itself is the class.
  s.start_x = 8;
  s.start_y = 4 + 8 * (i % 3);
  s.t0 = 2 + (i / 3) % 3;
  switch (traj) {
    case Trajectory::linear:
      s.speed = 1.0;
      s.dir_x = 1.0;
      s.dir_y = 0.25;
      break;
    case Trajectory::circular:
      s.speed = 2.6455;  // two full revolutions at radius 12 over the video
      s.radius = 12;
      s.phase = 0.628 * i;
      s.t0 = 2;
      break;
    case Trajectory::zigzag:
      s.speed = 6.0;
      s.zigzag_period = 2;
      break;
    default:
      break;
  }
  cfg.sprites = {s};
  return cfg;
}

inline SceneConfig suite_gaze_config(uint32_t i) {
  SceneConfig cfg;
  cfg.seed = 3000 + i;
  cfg.background = (i % 2 == 0) ? Background::flat : Background::noise;
  SpriteSpec s;
  s.size = 18 + (i % 2) * 4;
  s.texture_seed = 700 + i;
  s.trajectory = (i % 2 == 0) ? Trajectory::linear : Trajectory::circular;
  s.speed = 2.0 + 0.25 * (i % 3);
  s.t0 = 0;
  s.t1 = 59;
  s.start_x = 10 + (i * 5) % 24;
  s.start_y = 10 + (i * 3) % 24;
  s.dir_x = 1.0;
  s.dir_y = 0.3 + 0.15 * (i % 3);
  s.radius = 15;
  s.phase = 0.5 * i;
  cfg.sprites = {s};
  return cfg;
}

inline SuiteManifest make_benchmark_suite(const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  SuiteManifest manifest;
  manifest.root = out_dir;

  auto emit = [&](const SceneConfig& cfg, const std::string& id, const std::string& section,
                  std::ofstream& gt_os) {
    GeneratedScene scene = generate(cfg, id);
    const std::string dir = out_dir + "/" + id;
    write_frames_dir(dir, scene.frames);
    gt_os << ground_truth_json(scene.ground_truth).dump() << "\n";
    manifest.sequences.push_back(
        {id, section, dir, scene.ground_truth.label, cfg.seed});
  };

  {
    std::ofstream gt(manifest.gt_path("localization"));
    if (!gt) throw IoError("cannot write gt in " + out_dir);
    for (uint32_t i = 0; i < 20; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "loc_%02u", i);
      emit(suite_localization_config(i), id, "localization", gt);
    }
  }
  {
    std::ofstream gt(manifest.gt_path("clustering"));
    if (!gt) throw IoError("cannot write gt in " + out_dir);
    const std::array<Trajectory, 3> classes = {Trajectory::linear, Trajectory::circular,
                                               Trajectory::zigzag};
    for (Trajectory traj : classes) {
      for (uint32_t i = 0; i < 10; ++i) {
        char id[48];
        std::snprintf(id, sizeof(id), "cls_%s_%02u", trajectory_name(traj), i);
        emit(suite_clustering_config(traj, i), id, "clustering", gt);
      }
    }
  }
  {
    std::ofstream gt(manifest.gt_path("gaze"));
    if (!gt) throw IoError("cannot write gt in " + out_dir);
    for (uint32_t i = 0; i < 10; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "gaze_%02u", i);
      emit(suite_gaze_config(i), id, "gaze", gt);
    }
  }

  nlohmann::ordered_json index;
  index["version"] = 1;
  auto seqs = nlohmann::ordered_json::array();
  for (const auto& s : manifest.sequences) {
    nlohmann::ordered_json js;
    js["id"] = s.id;
    js["section"] = s.section;
    js["frames"] = s.frames_dir;
    js["label"] = s.label;
    js["seed"] = s.seed;
    js["gt"] = manifest.gt_path(s.section);
    seqs.push_back(js);
  }
  index["sequences"] = seqs;
  std::ofstream os(out_dir + "/suite.json");
  if (!os) throw IoError("cannot write suite index in " + out_dir);
  os << index.dump(2) << "\n";
  return manifest;
}

inline SuiteManifest load_suite(const std::string& dir) {
  std::ifstream is(dir + "/suite.json");
  if (!is) throw IoError("cannot open suite index: " + dir + "/suite.json");
  nlohmann::json index;
  try {
    is >> index;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir + "/suite.json: " + e.what());
  }
  SuiteManifest manifest;
  manifest.root = dir;
  for (const auto& js : index["sequences"]) {
    manifest.sequences.push_back({js["id"].get<std::string>(), js["section"].get<std::string>(),
                                  js["frames"].get<std::string>(), js["label"].get<std::string>(),
                                  js["seed"].get<uint64_t>()});
  }
  return manifest;
}

}  // namespace presage
