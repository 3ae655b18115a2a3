#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "presage/attention.hpp"
#include "presage/checkpoint.hpp"
#include "presage/clustering.hpp"
#include "presage/encoder.hpp"
#include "presage/errors.hpp"
#include "presage/metrics.hpp"
#include "presage/predictor.hpp"
#include "presage/proposals.hpp"
#include "presage/synth.hpp"

namespace presage {

// ---------------------------------------------------------------------------
// Configuration: flat `key = value` text with [section] headers, `#` or `;`
// comments. CLI flags override file values via "section.key=value" pairs.
// ---------------------------------------------------------------------------

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_text(std::istream& is, const std::string& origin) {
  ConfigMap out;
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": unterminated section");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    out[section.empty() ? key : section + "." + key] = value;
  }
  return out;
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  return parse_config_text(is, path);
}

inline void apply_override(ConfigMap& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must be section.key=value: " + kv);
  }
  cfg[kv.substr(0, eq)] = kv.substr(eq + 1);
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

class ConfigReader {
 public:
  explicit ConfigReader(const ConfigMap& map) : map_(map) {}

  std::string str(const std::string& key, const std::string& dflt) const {
    auto it = map_.find(key);
    return it == map_.end() ? dflt : it->second;
  }
  double num(const std::string& key, double dflt) const {
    auto it = map_.find(key);
    if (it == map_.end()) return dflt;
    try {
      size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config " + key + ": not a number: " + it->second);
    }
  }
  int64_t integer(const std::string& key, int64_t dflt) const {
    const double v = num(key, static_cast<double>(dflt));
    const int64_t i = static_cast<int64_t>(v);
    if (static_cast<double>(i) != v) throw ConfigError("config " + key + ": not an integer");
    return i;
  }
  bool flag(const std::string& key, bool dflt) const {
    auto it = map_.find(key);
    if (it == map_.end()) return dflt;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError("config " + key + ": not a boolean: " + it->second);
  }
  bool has(const std::string& key) const { return map_.count(key) > 0; }

 private:
  const ConfigMap& map_;
};

// Layer spec token string: "k3 s2 c8 p1".
inline ConvLayerSpec parse_layer_spec(const std::string& s) {
  ConvLayerSpec spec;
  spec.pool = 1;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) {
    if (tok.size() < 2) throw ConfigError("bad encoder layer token: " + tok);
    const uint32_t v = static_cast<uint32_t>(std::stoul(tok.substr(1)));
    switch (tok[0]) {
      case 'k': spec.kernel = v; break;
      case 's': spec.stride = v; break;
      case 'c': spec.channels = v; break;
      case 'p': spec.pool = v; break;
      default: throw ConfigError("bad encoder layer token: " + tok);
    }
  }
  return spec;
}

}  // namespace detail

struct RunConfig {
  std::string mode = "localize";  // localize | gaze
  std::string input;
  std::string input_kind = "auto";  // auto | frames_dir | video | features
  std::string output;
  std::string saliency_out;
  std::string feature_out;
  std::string checkpoint_out;
  std::string resume_from;
  std::string params_in;
  uint64_t max_records = 0;  // 0 = unlimited
  uint32_t frame_width = 64, frame_height = 64;  // used for feature input

  EncoderConfig encoder;
  uint32_t hidden = 64;
  uint32_t bptt_window = 8;
  uint64_t predictor_seed = 13;
  float feature_scale = 1.0f;
  float clip_norm = 1.0f;
  LrSchedule lr;

  EnergyConfig energy;
  // Motion-fitted proposals carry the localization precision; the anchor
  // lattice degenerates to one full-frame box as the fallback candidate for
  // motionless stretches. Denser lattices are a config away.
  std::vector<std::string> strategies = {"framediff", "grid"};
  std::vector<uint32_t> grid_scales = {64};
  double grid_stride = 1.0;
  uint32_t diff_threshold = 12;
  uint32_t min_area = 16;
  std::string external_proposals;
  double dedup_iou = 0.95;
  uint32_t max_proposals = 100;

  double temporal_sigma = 0.5;
  uint32_t warmup = 5;
  uint32_t tube_gap = 5;

  static RunConfig from_map(const ConfigMap& map) {
    detail::ConfigReader r(map);
    RunConfig c;
    c.mode = r.str("run.mode", c.mode);
    if (c.mode != "localize" && c.mode != "gaze") {
      throw ConfigError("run.mode must be localize or gaze");
    }
    c.input = r.str("run.input", "");
    c.input_kind = r.str("run.input_kind", c.input_kind);
    c.output = r.str("run.output", "");
    c.saliency_out = r.str("run.saliency_out", "");
    c.feature_out = r.str("run.feature_out", "");
    c.checkpoint_out = r.str("run.checkpoint_out", "");
    c.resume_from = r.str("run.resume", "");
    c.params_in = r.str("run.params_in", "");
    c.max_records = static_cast<uint64_t>(r.integer("run.max_records", c.max_records));
    c.frame_width = static_cast<uint32_t>(r.integer("run.frame_width", c.frame_width));
    c.frame_height = static_cast<uint32_t>(r.integer("run.frame_height", c.frame_height));

    c.encoder.input_width =
        static_cast<uint32_t>(r.integer("encoder.width", c.encoder.input_width));
    c.encoder.input_height =
        static_cast<uint32_t>(r.integer("encoder.height", c.encoder.input_height));
    c.encoder.seed = static_cast<uint64_t>(r.integer("encoder.seed", c.encoder.seed));
    c.encoder.weights_path = r.str("encoder.weights", "");
    std::vector<ConvLayerSpec> layers;
    for (int li = 1;; ++li) {
      const std::string key = "encoder.layer" + std::to_string(li);
      if (!r.has(key)) break;
      layers.push_back(detail::parse_layer_spec(r.str(key, "")));
    }
    if (!layers.empty()) c.encoder.layers = std::move(layers);

    c.hidden = static_cast<uint32_t>(r.integer("predictor.hidden", c.hidden));
    c.bptt_window = static_cast<uint32_t>(r.integer("predictor.window", c.bptt_window));
    c.predictor_seed = static_cast<uint64_t>(r.integer("predictor.seed", c.predictor_seed));
    c.feature_scale = static_cast<float>(r.num("predictor.feature_scale", c.feature_scale));
    c.clip_norm = static_cast<float>(r.num("predictor.clip_norm", c.clip_norm));

    c.lr.initial = r.num("lr.initial", c.lr.initial);
    c.lr.delta_minus = r.num("lr.delta_minus", c.lr.delta_minus);
    c.lr.delta_plus = r.num("lr.delta_plus", c.lr.delta_plus);
    c.lr.floor = r.num("lr.min", c.lr.floor);
    c.lr.ceil = r.num("lr.max", c.lr.ceil);
    c.lr.validate();

    c.energy.k = static_cast<uint32_t>(r.integer("energy.k", c.energy.k));
    c.energy.w_alpha = static_cast<float>(r.num("energy.w_alpha", c.energy.w_alpha));
    c.energy.w_t = static_cast<float>(r.num("energy.w_t", c.energy.w_t));
    c.energy.validate();

    if (r.has("proposals.strategies")) {
      c.strategies = detail::split_list(r.str("proposals.strategies", ""));
    }
    if (r.has("proposals.grid_scales")) {
      c.grid_scales.clear();
      for (const auto& s : detail::split_list(r.str("proposals.grid_scales", ""))) {
        c.grid_scales.push_back(static_cast<uint32_t>(std::stoul(s)));
      }
    }
    c.grid_stride = r.num("proposals.grid_stride", c.grid_stride);
    c.diff_threshold =
        static_cast<uint32_t>(r.integer("proposals.diff_threshold", c.diff_threshold));
    c.min_area = static_cast<uint32_t>(r.integer("proposals.min_area", c.min_area));
    c.external_proposals = r.str("proposals.external", "");
    c.dedup_iou = r.num("proposals.dedup_iou", c.dedup_iou);
    c.max_proposals =
        static_cast<uint32_t>(r.integer("proposals.max_per_frame", c.max_proposals));

    c.temporal_sigma = r.num("attention.temporal_sigma", c.temporal_sigma);
    c.warmup = static_cast<uint32_t>(r.integer("attention.warmup", c.warmup));
    c.tube_gap = static_cast<uint32_t>(r.integer("attention.tube_gap", c.tube_gap));
    return c;
  }
};

// ---------------------------------------------------------------------------
// Per-frame streaming record:
//   {"frame": n, "E": e, "active": bool,
//    "boxes": [[x1,y1,x2,y2,energy], ...], "gaze": [x, y]}
// ---------------------------------------------------------------------------

struct FrameRecord {
  int64_t frame = 0;
  float error = 0.0f;
  bool active = false;
  std::vector<ScoredBox> boxes;
  uint32_t gaze_x = 0, gaze_y = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json rec;
    rec["frame"] = frame;
    rec["E"] = error;
    rec["active"] = active;
    auto jb = nlohmann::ordered_json::array();
    for (const auto& sb : boxes) {
      jb.push_back({sb.box.x1, sb.box.y1, sb.box.x2, sb.box.y2, sb.energy});
    }
    rec["boxes"] = jb;
    rec["gaze"] = {gaze_x, gaze_y};
    return rec;
  }

  static FrameRecord from_json(const nlohmann::json& rec, const std::string& where) {
    FrameRecord fr;
    if (!rec.contains("frame") || !rec.contains("E") || !rec.contains("active") ||
        !rec.contains("boxes") || !rec.contains("gaze")) {
      throw FormatError(where + ": record missing required fields");
    }
    fr.frame = rec["frame"].get<int64_t>();
    fr.error = rec["E"].get<float>();
    fr.active = rec["active"].get<bool>();
    for (const auto& jb : rec["boxes"]) {
      if (!jb.is_array() || jb.size() != 5) {
        throw FormatError(where + ": box must be [x1,y1,x2,y2,energy]");
      }
      ScoredBox sb;
      sb.box.x1 = jb[0].get<float>();
      sb.box.y1 = jb[1].get<float>();
      sb.box.x2 = jb[2].get<float>();
      sb.box.y2 = jb[3].get<float>();
      sb.energy = jb[4].get<float>();
      fr.boxes.push_back(sb);
    }
    if (!rec["gaze"].is_array() || rec["gaze"].size() != 2) {
      throw FormatError(where + ": gaze must be [x,y]");
    }
    fr.gaze_x = rec["gaze"][0].get<uint32_t>();
    fr.gaze_y = rec["gaze"][1].get<uint32_t>();
    return fr;
  }
};

inline std::vector<FrameRecord> parse_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open records: " + path);
  std::vector<FrameRecord> out;
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
    out.push_back(FrameRecord::from_json(rec, path + ":" + std::to_string(lineno)));
  }
  return out;
}

// Action tubes from a record stream: frames flagged active contribute their
// rank-1 box; the gap rule matches the live tracker, so reconstruction from
// records agrees with the tubes the run itself linked.
inline std::vector<ActionTube> records_to_tubes(const std::vector<FrameRecord>& records,
                                                uint32_t gap_tolerance = 5) {
  TubeTracker tracker(gap_tolerance);
  static const std::vector<ScoredBox> kEmpty;
  for (const auto& r : records) {
    tracker.observe(r.frame, (r.active && !r.boxes.empty()) ? r.boxes : kEmpty);
  }
  tracker.finish();
  return tracker.tubes();
}

// ---------------------------------------------------------------------------
// The streaming run loop.
// ---------------------------------------------------------------------------

struct FrameObservation {
  int64_t frame = 0;
  const PredictionOutcome* outcome = nullptr;
  const AttentionMap* attention = nullptr;
  const std::vector<ScoredBox>* selected = nullptr;
  bool active = false;
  const GazeOutput* gaze = nullptr;
  const Tensor* hidden_top = nullptr;
};

class RunObserver {
 public:
  virtual ~RunObserver() = default;
  virtual void on_frame(const FrameObservation&) = 0;
};

struct RunSinks {
  std::ostream* records = nullptr;
  std::ostream* saliency = nullptr;
  RunObserver* observer = nullptr;
};

struct RunResult {
  std::vector<FrameRecord> records;
  std::vector<ActionTube> tubes;
  std::vector<float> video_feature;  // empty when no record was produced
  std::vector<uint32_t> read_counts;
  size_t state_bytes_high_water = 0;
  double final_learning_rate = 0.0;
  uint64_t frames_consumed = 0;
  uint64_t encoder_checksum_before = 0;
  uint64_t encoder_checksum_after = 0;
};

namespace detail {

inline std::string detect_input_kind(const std::string& path, const std::string& hint) {
  if (hint != "auto") return hint;
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) return "frames_dir";
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open input: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "STF1", 4) != 0) {
    throw FormatError("input is neither a directory nor an STF1 file: " + path);
  }
  uint32_t rank = 0;
  if (!read_u32_le(is, rank)) throw IoError("truncated STF1 header: " + path);
  if (rank == 4) return "video";
  if (rank == 3) return "features";
  throw FormatError("input tensor rank " + std::to_string(rank) +
                    " is neither a video (4) nor a feature sequence (3): " + path);
}

inline Tensor image_to_tensor(const Image& img) {
  Tensor t({img.height, img.width, 3});
  for (size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i];
  return t;
}

inline Image tensor_to_image(const Tensor& t) {
  Image img(t.dim(1), t.dim(0));
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<uint8_t>(std::min(255.0f, std::max(0.0f, t[i])));
  }
  return img;
}

}  // namespace detail

inline RunResult run_stream(const RunConfig& cfg, const RunSinks& sinks = {}) {
  if (cfg.input.empty()) throw ConfigError("run.input is required");
  const std::string kind = detail::detect_input_kind(cfg.input, cfg.input_kind);
  const bool pixel_input = kind != "features";
  for (const auto& s : cfg.strategies) {
    if (s != "grid" && s != "framediff" && s != "external") {
      throw ConfigError("unknown proposal strategy: " + s);
    }
    if (s == "framediff" && !pixel_input) {
      throw ConfigError("framediff proposals need pixel input, got features");
    }
    if (s == "external" && cfg.external_proposals.empty()) {
      throw ConfigError("external strategy requires proposals.external path");
    }
  }

  std::unique_ptr<ConvEncoder> encoder;
  std::unique_ptr<GridSource> source;
  uint32_t frame_w = cfg.frame_width, frame_h = cfg.frame_height;
  if (pixel_input) {
    encoder = std::make_unique<ConvEncoder>(cfg.encoder);
    std::unique_ptr<FrameSource> frames;
    if (kind == "frames_dir") {
      frames = std::make_unique<DirectoryFrameSource>(cfg.input);
    } else {
      frames = std::make_unique<VideoTensorFrameSource>(cfg.input);
    }
    source = std::make_unique<EncodingGridSource>(std::move(frames), *encoder);
    frame_w = cfg.encoder.input_width;
    frame_h = cfg.encoder.input_height;
  } else {
    source = std::make_unique<FeatureSequenceReader>(cfg.input);
  }

  const bool use_grid =
      std::count(cfg.strategies.begin(), cfg.strategies.end(), "grid") > 0;
  const bool use_external =
      std::count(cfg.strategies.begin(), cfg.strategies.end(), "external") > 0;

  std::vector<BoxProposal> anchor_boxes;
  if (use_grid) {
    anchor_boxes = grid_proposals(frame_w, frame_h, cfg.grid_scales, cfg.grid_stride);
  }
  std::map<int64_t, std::vector<BoxProposal>> external;
  if (use_external) {
    external = load_external_proposals(cfg.external_proposals, frame_w, frame_h);
  }

  RunResult result;
  if (encoder) result.encoder_checksum_before = encoder->weights_checksum();

  std::unique_ptr<PredictorStack> predictor;
  std::unique_ptr<VideoFeatureAccumulator> features;
  TubeTracker tubes(cfg.tube_gap);
  TemporalActionMask mask(cfg.temporal_sigma, cfg.warmup);
  std::vector<BoxProposal> prev_selected;
  FeatureGrid prev_grid;
  FeatureGrid prev_pred;
  Image prev_image;
  bool have_prev = false;
  uint64_t emitted = 0;

  auto make_predictor = [&](const FeatureGrid& g) {
    StackConfig sc;
    sc.grid_w = g.w;
    sc.grid_h = g.h;
    sc.feature_depth = g.d;
    sc.hidden = cfg.hidden;
    sc.bptt_window = cfg.bptt_window;
    sc.seed = cfg.predictor_seed;
    sc.clip_norm = cfg.clip_norm;
    sc.lr = cfg.lr;
    predictor = std::make_unique<PredictorStack>(sc);
    features = std::make_unique<VideoFeatureAccumulator>(cfg.hidden);
    if (!cfg.params_in.empty()) {
      predictor->restore_state(Checkpoint::load(cfg.params_in), false);
    }
  };

  // Resume: restore full stream state and skip already-processed frames.
  if (!cfg.resume_from.empty()) {
    Checkpoint ck = Checkpoint::load(cfg.resume_from);
    const int64_t next_frame = static_cast<int64_t>(ck.scalar("next_frame"));
    StackConfig sc;
    sc.grid_w = static_cast<uint32_t>(ck.scalar("grid_w"));
    sc.grid_h = static_cast<uint32_t>(ck.scalar("grid_h"));
    sc.feature_depth = static_cast<uint32_t>(ck.scalar("feature_depth"));
    sc.hidden = cfg.hidden;
    sc.bptt_window = cfg.bptt_window;
    sc.seed = cfg.predictor_seed;
    sc.clip_norm = cfg.clip_norm;
    sc.lr = cfg.lr;
    predictor = std::make_unique<PredictorStack>(sc);
    predictor->restore_state(ck, true);
    features = std::make_unique<VideoFeatureAccumulator>(cfg.hidden);
    {
      const Tensor& fmax = ck.tensor("stream.feature_max");
      features->restore(fmax.values(), static_cast<uint64_t>(ck.scalar("feature_frames")));
    }
    ErrorStats ms;
    ms.mean = ck.scalar("mask_mean");
    ms.var = ck.scalar("mask_var");
    ms.initialized = ck.scalar("mask_initialized") != 0;
    ms.samples = static_cast<uint64_t>(ck.scalar("mask_samples"));
    mask.restore(ms, static_cast<uint64_t>(ck.scalar("mask_updates")));
    {
      const Tensor& pg = ck.tensor("stream.prev_grid");
      prev_grid.w = pg.dim(0);
      prev_grid.h = pg.dim(1);
      prev_grid.d = pg.dim(2);
      prev_grid.values = pg;
      prev_grid.frame_index = next_frame - 1;
      const Tensor& pp = ck.tensor("stream.prev_pred");
      prev_pred.w = pp.dim(0);
      prev_pred.h = pp.dim(1);
      prev_pred.d = pp.dim(2);
      prev_pred.values = pp;
      prev_pred.frame_index = next_frame;
    }
    if (ck.has_tensor("stream.prev_image")) {
      prev_image = detail::tensor_to_image(ck.tensor("stream.prev_image"));
    }
    if (ck.has_tensor("stream.prev_selected")) {
      const Tensor& ps = ck.tensor("stream.prev_selected");
      for (uint32_t r = 0; r < ps.dim(0); ++r) {
        BoxProposal b;
        b.x1 = ps.at(r, 0);
        b.y1 = ps.at(r, 1);
        b.x2 = ps.at(r, 2);
        b.y2 = ps.at(r, 3);
        prev_selected.push_back(b);
      }
    }
    have_prev = true;
    source->seek(next_frame);
  }

  std::ofstream saliency_file;
  std::ostream* saliency_sink = sinks.saliency;
  if (!cfg.saliency_out.empty()) {
    saliency_file.open(cfg.saliency_out, std::ios::binary);
    if (!saliency_file) throw IoError("cannot open for write: " + cfg.saliency_out);
    saliency_sink = &saliency_file;
  }
  std::ofstream records_file;
  std::ostream* records_sink = sinks.records;
  if (!cfg.output.empty()) {
    records_file.open(cfg.output);
    if (!records_file) throw IoError("cannot open for write: " + cfg.output);
    records_sink = &records_file;
  }

  auto track_memory = [&]() {
    size_t bytes = predictor ? predictor->memory_bytes() : 0;
    bytes += prev_grid.values.byte_size() + prev_pred.values.byte_size();
    bytes += prev_image.pixels.size();
    if (features) bytes += features->running_max().size() * sizeof(float);
    result.state_bytes_high_water = std::max(result.state_bytes_high_water, bytes);
  };

  while (true) {
    auto grid = source->next();
    if (!grid) break;
    result.frames_consumed++;
    if (cfg.feature_scale != 1.0f) {
      for (size_t k = 0; k < grid->values.size(); ++k) {
        grid->values[k] *= cfg.feature_scale;
      }
    }
    assert_finite(grid->values, "feature grid at frame " + std::to_string(grid->frame_index));

    if (!have_prev) {
      make_predictor(*grid);
      prev_pred = predictor->forward(*grid);
      prev_grid = std::move(*grid);
      if (pixel_input) prev_image = *source->last_image();
      have_prev = true;
      track_memory();
      continue;
    }
    if (!grid->same_dims(prev_grid)) {
      throw ValidationError("frame " + std::to_string(grid->frame_index) +
                            ": grid dims changed mid-stream");
    }

    const int64_t n = grid->frame_index;
    PredictionOutcome outcome = PredictorStack::zoh_loss(prev_pred, *grid, prev_grid);
    if (!std::isfinite(outcome.error_scalar)) {
      throw ValidationError("frame " + std::to_string(n) + ": non-finite prediction error");
    }
    AttentionMap att = error_attention(outcome.error_map, n);
    {
      double s = 0.0;
      for (size_t k = 0; k < att.alpha.size(); ++k) s += att.alpha[k];
      if (std::abs(s - 1.0) > 1e-6) {
        throw ValidationError("frame " + std::to_string(n) + ": attention sum " +
                              std::to_string(s));
      }
    }

    std::vector<std::vector<BoxProposal>> lists;
    for (const auto& strat : cfg.strategies) {
      if (strat == "grid") {
        lists.push_back(anchor_boxes);
      } else if (strat == "framediff") {
        lists.push_back(framediff_proposals(prev_image, *source->last_image(),
                                            cfg.diff_threshold, cfg.min_area));
      } else {
        auto it = external.find(n);
        lists.push_back(it == external.end() ? std::vector<BoxProposal>{} : it->second);
      }
    }
    std::vector<BoxProposal> merged = merge_proposals(lists, cfg.dedup_iou, cfg.max_proposals);
    std::vector<ScoredBox> selected = select_topk(merged, att, prev_selected, cfg.energy,
                                                  static_cast<float>(frame_w),
                                                  static_cast<float>(frame_h));
    const bool active = mask.update(outcome.error_scalar);
    static const std::vector<ScoredBox> kEmpty;
    tubes.observe(n, active ? selected : kEmpty);
    GazeOutput gaze = gaze_saliency(att, frame_w, frame_h);
    features->add(predictor->hidden_top(), att);
    predictor->adapt_learning_rate(outcome.error_scalar);
    predictor->continual_update(outcome);

    FrameRecord rec;
    rec.frame = n;
    rec.error = outcome.error_scalar;
    rec.active = active;
    rec.boxes = selected;
    rec.gaze_x = gaze.x;
    rec.gaze_y = gaze.y;
    if (records_sink) (*records_sink) << rec.to_json().dump() << "\n";
    if (saliency_sink) write_stf1(*saliency_sink, gaze.saliency);
    if (sinks.observer) {
      FrameObservation obs;
      obs.frame = n;
      obs.outcome = &outcome;
      obs.attention = &att;
      obs.selected = &selected;
      obs.active = active;
      obs.gaze = &gaze;
      obs.hidden_top = &predictor->hidden_top();
      sinks.observer->on_frame(obs);
    }
    result.records.push_back(std::move(rec));
    emitted++;

    prev_selected.clear();
    for (const auto& sb : selected) prev_selected.push_back(sb.box);
    prev_pred = predictor->forward(*grid);
    prev_grid = std::move(*grid);
    if (pixel_input) prev_image = *source->last_image();
    track_memory();
    if (cfg.max_records > 0 && emitted >= cfg.max_records) break;
  }

  tubes.finish();
  result.tubes = tubes.tubes();
  if (features && features->frames() > 0) {
    result.video_feature = features->finalize();
  }
  result.read_counts = source->read_counts();
  result.final_learning_rate = predictor ? predictor->learning_rate() : 0.0;
  if (encoder) result.encoder_checksum_after = encoder->weights_checksum();

  if (!cfg.checkpoint_out.empty()) {
    if (!predictor) throw ValidationError("cannot checkpoint: no frames were processed");
    Checkpoint ck;
    predictor->save_state(ck, true);
    ck.scalars["next_frame"] = prev_grid.frame_index + 1;
    ck.scalars["mask_mean"] = mask.stats().mean;
    ck.scalars["mask_var"] = mask.stats().var;
    ck.scalars["mask_initialized"] = mask.stats().initialized ? 1 : 0;
    ck.scalars["mask_samples"] = mask.stats().samples;
    ck.scalars["mask_updates"] = mask.updates();
    ck.scalars["feature_frames"] = features->frames();
    ck.add("stream.feature_max",
           Tensor::from_data({static_cast<uint32_t>(features->running_max().size())},
                             features->running_max()));
    ck.add("stream.prev_grid", prev_grid.values);
    ck.add("stream.prev_pred", prev_pred.values);
    if (pixel_input && !prev_image.pixels.empty()) {
      ck.add("stream.prev_image", detail::image_to_tensor(prev_image));
    }
    if (!prev_selected.empty()) {
      Tensor ps({static_cast<uint32_t>(prev_selected.size()), 4});
      for (size_t r = 0; r < prev_selected.size(); ++r) {
        ps.at(r, 0) = prev_selected[r].x1;
        ps.at(r, 1) = prev_selected[r].y1;
        ps.at(r, 2) = prev_selected[r].x2;
        ps.at(r, 3) = prev_selected[r].y2;
      }
      ck.add("stream.prev_selected", ps);
    }
    ck.save(cfg.checkpoint_out);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation: metric records {"metric": name, "sigma": s?, "value": v}.
// ---------------------------------------------------------------------------

struct MetricRecord {
  std::string metric;
  std::optional<double> sigma;
  double value = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json rec;
    rec["metric"] = metric;
    if (sigma) rec["sigma"] = *sigma;
    rec["value"] = value;
    return rec;
  }
};

struct EvalConfig {
  std::vector<double> sigmas = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  GazeGeometry geometry;
  uint32_t tube_gap = 5;
  std::string assignments_path;  // optional cluster assignments for mAP labels

  void validate() const {
    if (sigmas.empty()) throw ConfigError("eval: sigma list is empty");
    for (double s : sigmas) {
      if (s <= 0.0 || s > 1.0) throw ConfigError("eval: sigma must be in (0,1]");
    }
    geometry.validate();
  }
};

inline std::map<std::string, uint32_t> parse_assignments(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open assignments: " + path);
  std::map<std::string, uint32_t> out;
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
    if (!rec.contains("video") || !rec.contains("cluster")) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": need video and cluster");
    }
    out[rec["video"].get<std::string>()] = rec["cluster"].get<uint32_t>();
  }
  return out;
}

// Checks that every gt video has a prediction file; throws with the full
// missing list otherwise.
inline void require_predictions(const std::string& pred_dir, const std::vector<GtVideo>& gts,
                                const std::string& suffix) {
  namespace fs = std::filesystem;
  std::string missing;
  for (const auto& gv : gts) {
    if (!fs::exists(pred_dir + "/" + gv.id + suffix)) {
      if (!missing.empty()) missing += ", ";
      missing += gv.id;
    }
  }
  if (!missing.empty()) {
    throw ValidationError("missing predictions for: " + missing);
  }
}

inline std::vector<MetricRecord> evaluate_localization(const std::string& pred_dir,
                                                       const std::vector<GtVideo>& gts,
                                                       const EvalConfig& cfg) {
  cfg.validate();
  require_predictions(pred_dir, gts, ".jsonl");

  std::optional<std::map<std::string, uint32_t>> clusters;
  if (!cfg.assignments_path.empty()) {
    clusters = parse_assignments(cfg.assignments_path);
  }

  std::vector<PredictedTube> preds;
  std::vector<std::pair<uint32_t, PredictedTube>> clustered;
  for (const auto& gv : gts) {
    const auto records = parse_records(pred_dir + "/" + gv.id + ".jsonl");
    for (const auto& tube : records_to_tubes(records, cfg.tube_gap)) {
      PredictedTube pt;
      pt.video = gv.id;
      pt.tube = tube;
      pt.confidence = -tube.mean_energy();
      if (clusters) {
        auto it = clusters->find(gv.id);
        if (it == clusters->end()) {
          throw ValidationError("no cluster assignment for video " + gv.id);
        }
        clustered.emplace_back(it->second, pt);
      } else {
        pt.label = gv.label;  // class-agnostic mode
        preds.push_back(std::move(pt));
      }
    }
  }
  if (clusters) {
    const auto mapping = majority_cluster_to_class(clustered, gts);
    for (auto& [cluster, pt] : clustered) {
      auto it = mapping.find(cluster);
      pt.label = it == mapping.end() ? std::string("unmapped") : it->second;
      preds.push_back(pt);
    }
  }

  std::vector<MetricRecord> out;
  for (double s : cfg.sigmas) {
    out.push_back({"recall", s, recall_at(preds, gts, s)});
  }
  for (double s : cfg.sigmas) {
    out.push_back({"map", s, map_at(preds, gts, s)});
  }
  for (const auto& [s, v] : auc_curve(preds, gts, cfg.sigmas)) {
    out.push_back({"auc", s, v});
  }
  return out;
}

inline std::vector<MetricRecord> evaluate_gaze(const std::string& pred_dir,
                                               const std::vector<GtVideo>& gts,
                                               const EvalConfig& cfg) {
  cfg.validate();
  require_predictions(pred_dir, gts, ".jsonl");
  require_predictions(pred_dir, gts, ".saliency.stf");

  std::vector<Tensor> maps;
  std::vector<std::pair<double, double>> fixations;
  std::vector<std::pair<double, double>> pred_points, gt_points;
  uint32_t frame_w = 0, frame_h = 0;
  for (const auto& gv : gts) {
    const auto records = parse_records(pred_dir + "/" + gv.id + ".jsonl");
    std::map<int64_t, std::pair<double, double>> gaze_gt;
    for (const auto& [f, x, y] : gv.gaze) gaze_gt[f] = {x, y};
    std::ifstream sal(pred_dir + "/" + gv.id + ".saliency.stf", std::ios::binary);
    if (!sal) throw IoError("cannot open saliency for " + gv.id);
    for (const auto& rec : records) {
      auto m = read_stf1(sal);
      if (!m) {
        throw FormatError("saliency sequence for " + gv.id + " shorter than records");
      }
      auto it = gaze_gt.find(rec.frame);
      if (it == gaze_gt.end()) continue;  // no gt gaze for this frame
      frame_h = m->dim(0);
      frame_w = m->dim(1);
      maps.push_back(std::move(*m));
      fixations.push_back(it->second);
      pred_points.emplace_back(rec.gaze_x + 0.5, rec.gaze_y + 0.5);
      gt_points.push_back(it->second);
    }
  }
  if (maps.empty()) {
    throw ValidationError("gaze evaluation: no overlapping frames between records and gt");
  }
  std::vector<MetricRecord> out;
  out.push_back({"gaze_auc", std::nullopt, gaze_auc(maps, fixations)});
  out.push_back({"gaze_aae", std::nullopt,
                 gaze_aae(pred_points, gt_points, cfg.geometry, frame_w, frame_h)});
  return out;
}

}  // namespace presage
