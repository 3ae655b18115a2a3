// presage: self-supervised action localization for streaming video.
//
// Subcommands:
//   run      single-pass stream: predict, localize, learn, emit records
//   gaze     run with mode=gaze
//   synth    synthetic scenes and the fixed benchmark suite
//   cluster  k-means over video features (K_gt, fixed k, or elbow)
//   eval     localization / gaze metrics against a ground-truth manifest

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "presage/clustering.hpp"
#include "presage/pipeline.hpp"
#include "presage/synth.hpp"

namespace {

using namespace presage;

struct RunArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string input, output, mode;
  int64_t seed = -1;
  int64_t max_records = -1;
};

RunConfig build_run_config(const RunArgs& args, const std::string& forced_mode) {
  ConfigMap map;
  std::string config_path = args.config_path;
  if (config_path.empty()) {
    if (const char* env = std::getenv("PRESAGE_CONFIG")) config_path = env;
  }
  if (!config_path.empty()) map = parse_config_file(config_path);
  for (const auto& kv : args.overrides) apply_override(map, kv);
  if (!args.input.empty()) map["run.input"] = args.input;
  if (!args.output.empty()) map["run.output"] = args.output;
  if (!args.mode.empty()) map["run.mode"] = args.mode;
  if (!forced_mode.empty()) map["run.mode"] = forced_mode;
  if (args.seed >= 0) map["predictor.seed"] = std::to_string(args.seed);
  if (args.max_records >= 0) map["run.max_records"] = std::to_string(args.max_records);
  return RunConfig::from_map(map);
}

int cmd_run(const RunArgs& args, const std::string& forced_mode) {
  RunConfig cfg = build_run_config(args, forced_mode);
  RunSinks sinks;
  if (cfg.output.empty()) sinks.records = &std::cout;
  RunResult result = run_stream(cfg, sinks);
  if (!cfg.feature_out.empty()) {
    if (result.video_feature.empty()) {
      throw ValidationError("no records produced; video feature unavailable");
    }
    save_stf1(cfg.feature_out,
              Tensor::from_data({static_cast<uint32_t>(result.video_feature.size())},
                                result.video_feature));
  }
  std::cerr << "frames=" << result.frames_consumed
            << " records=" << result.records.size() << " tubes=" << result.tubes.size()
            << " lr=" << result.final_learning_rate << "\n";
  return 0;
}

void add_run_flags(CLI::App* sub, RunArgs& args) {
  sub->add_option("--config", args.config_path,
                  "config file (default: $PRESAGE_CONFIG when set)");
  sub->add_option("--set", args.overrides, "override, section.key=value")->take_all();
  sub->add_option("--input", args.input, "frames dir, STF video, or STF feature sequence");
  sub->add_option("--output", args.output, "records file (default stdout)");
  sub->add_option("--seed", args.seed, "predictor seed");
  sub->add_option("--max-records", args.max_records, "stop after N records");
}

struct SynthArgs {
  std::string suite_dir;
  std::string out_dir;
  std::string video_id = "scene";
  std::string traj = "linear";
  std::string bg = "flat";
  uint32_t frames = 60, width = 64, height = 64, size = 16;
  double speed = 2.0;
  int64_t t0 = 0, t1 = -1;
  uint64_t seed = 1;
};

int cmd_synth(const SynthArgs& args) {
  if (!args.suite_dir.empty()) {
    SuiteManifest m = make_benchmark_suite(args.suite_dir);
    std::cerr << "suite: " << m.sequences.size() << " sequences in " << m.root << "\n";
    return 0;
  }
  if (args.out_dir.empty()) {
    throw ConfigError("synth: need --suite DIR or --out DIR");
  }
  SceneConfig cfg;
  cfg.width = args.width;
  cfg.height = args.height;
  cfg.length = args.frames;
  cfg.seed = args.seed;
  if (args.bg == "flat") cfg.background = Background::flat;
  else if (args.bg == "noise") cfg.background = Background::noise;
  else if (args.bg == "scrolling") cfg.background = Background::scrolling;
  else throw ConfigError("synth: unknown background " + args.bg);
  SpriteSpec s;
  s.size = args.size;
  s.speed = args.speed;
  s.texture_seed = args.seed + 101;
  s.t0 = args.t0;
  s.t1 = args.t1 < 0 ? args.frames - 1 : args.t1;
  s.start_x = args.width / 4.0;
  s.start_y = args.height / 4.0;
  if (args.traj == "stationary") s.trajectory = Trajectory::stationary;
  else if (args.traj == "linear") s.trajectory = Trajectory::linear;
  else if (args.traj == "circular") s.trajectory = Trajectory::circular;
  else if (args.traj == "zigzag") s.trajectory = Trajectory::zigzag;
  else throw ConfigError("synth: unknown trajectory " + args.traj);
  cfg.sprites = {s};
  GeneratedScene scene = generate(cfg, args.video_id);
  write_frames_dir(args.out_dir + "/" + args.video_id, scene.frames);
  std::ofstream gt(args.out_dir + "/gt.jsonl");
  if (!gt) throw IoError("cannot write gt in " + args.out_dir);
  gt << ground_truth_json(scene.ground_truth).dump() << "\n";
  std::cerr << "scene " << args.video_id << ": " << scene.frames.size() << " frames\n";
  return 0;
}

struct ClusterArgs {
  std::string features_dir;
  std::string gt_path;
  std::string out_path = "assignments.jsonl";
  std::string centroids_path;
  std::string report_path;
  int64_t k = 0;
  bool k_from_gt = false;
  std::string elbow;  // "LO:HI"
  uint32_t seeds = 5;
};

std::vector<VideoFeature> load_features_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".stf") {
      files.push_back(e.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<VideoFeature> out;
  for (const auto& f : files) {
    Tensor t = load_stf1(f);
    if (t.rank() != 1) throw FormatError("video feature must be rank 1: " + f);
    VideoFeature vf;
    vf.video_id = fs::path(f).stem().string();
    vf.values = t.values();
    out.push_back(std::move(vf));
  }
  if (out.empty()) throw IoError("no .stf features in: " + dir);
  return out;
}

int cmd_cluster(const ClusterArgs& args) {
  const auto features = load_features_dir(args.features_dir);

  std::map<std::string, std::string> labels;
  if (!args.gt_path.empty()) {
    for (const auto& gv : parse_ground_truth(args.gt_path)) labels[gv.id] = gv.label;
  }

  uint32_t fixed_k = static_cast<uint32_t>(args.k);
  if (args.k_from_gt) {
    if (labels.empty()) throw ConfigError("--k-from-gt needs --gt");
    std::set<std::string> distinct;
    for (const auto& [id, l] : labels) distinct.insert(l);
    fixed_k = static_cast<uint32_t>(distinct.size());
  }
  uint32_t elbow_lo = 0, elbow_hi = 0;
  if (!args.elbow.empty()) {
    const auto colon = args.elbow.find(':');
    if (colon == std::string::npos) throw ConfigError("--elbow wants LO:HI");
    elbow_lo = static_cast<uint32_t>(std::stoul(args.elbow.substr(0, colon)));
    elbow_hi = static_cast<uint32_t>(std::stoul(args.elbow.substr(colon + 1)));
  }
  if (fixed_k == 0 && args.elbow.empty()) {
    throw ConfigError("cluster: need --k, --k-from-gt, or --elbow");
  }
  if (args.seeds == 0) throw ConfigError("cluster: --seeds must be >= 1");

  struct SeedRun {
    uint64_t seed;
    uint32_t k;
    ClusteringResult result;
    double homogeneity = -1.0;
  };
  std::vector<SeedRun> runs;
  for (uint64_t seed = 1; seed <= args.seeds; ++seed) {
    SeedRun run;
    run.seed = seed;
    run.k = !args.elbow.empty() ? elbow_optimal_k(features, elbow_lo, elbow_hi, seed)
                                : fixed_k;
    run.result = kmeans(features, run.k, seed);
    if (!labels.empty()) {
      std::map<std::string, std::string> subset;
      for (const auto& [id, cluster] : run.result.assignments) {
        auto it = labels.find(id);
        if (it == labels.end()) {
          throw ValidationError("cluster: no gt label for video " + id);
        }
        subset[id] = it->second;
      }
      run.homogeneity = homogeneity(run.result.assignments, subset);
    }
    runs.push_back(std::move(run));
  }

  // Report the median-homogeneity run (ties: smaller seed); without labels,
  // the first seed.
  size_t pick = 0;
  double median_h = -1.0;
  if (!labels.empty()) {
    std::vector<double> hs;
    for (const auto& r : runs) hs.push_back(r.homogeneity);
    std::sort(hs.begin(), hs.end());
    median_h = hs[hs.size() / 2];
    for (size_t i = 0; i < runs.size(); ++i) {
      if (runs[i].homogeneity == median_h) {
        pick = i;
        break;
      }
    }
  }
  const SeedRun& best = runs[pick];

  {
    std::ofstream os(args.out_path);
    if (!os) throw IoError("cannot write: " + args.out_path);
    for (const auto& [id, cluster] : best.result.assignments) {
      nlohmann::ordered_json rec;
      rec["video"] = id;
      rec["cluster"] = cluster;
      os << rec.dump() << "\n";
    }
  }
  if (!args.centroids_path.empty()) {
    const uint32_t k = best.result.k;
    const uint32_t d = static_cast<uint32_t>(best.result.centroids.front().size());
    Tensor c({k, d});
    for (uint32_t i = 0; i < k; ++i) {
      for (uint32_t j = 0; j < d; ++j) c.at(i, j) = best.result.centroids[i][j];
    }
    save_stf1(args.centroids_path, c);
  }

  std::ofstream report_file;
  std::ostream* report = &std::cout;
  if (!args.report_path.empty()) {
    report_file.open(args.report_path);
    if (!report_file) throw IoError("cannot write: " + args.report_path);
    report = &report_file;
  }
  auto emit = [&](const std::string& name, double value) {
    nlohmann::ordered_json rec;
    rec["metric"] = name;
    rec["value"] = value;
    (*report) << rec.dump() << "\n";
  };
  emit("k", best.k);
  emit("inertia", best.result.inertia);
  if (!args.elbow.empty()) {
    std::vector<double> ks;
    for (const auto& r : runs) ks.push_back(r.k);
    std::sort(ks.begin(), ks.end());
    emit("k_opt_median", ks[ks.size() / 2]);
  }
  if (!labels.empty()) emit("homogeneity_median", median_h);
  return 0;
}

struct EvalArgs {
  std::string pred_dir;
  std::string gt_path;
  std::string mode = "localize";
  std::string out_path;
  std::string assignments;
  std::vector<double> sigmas;
  double viewing_distance = 60.0, screen_width = 40.0;
};

int cmd_eval(const EvalArgs& args) {
  EvalConfig cfg;
  if (!args.sigmas.empty()) cfg.sigmas = args.sigmas;
  cfg.geometry.viewing_distance = args.viewing_distance;
  cfg.geometry.screen_width = args.screen_width;
  cfg.assignments_path = args.assignments;
  const auto gts = parse_ground_truth(args.gt_path);
  std::vector<MetricRecord> metrics;
  if (args.mode == "localize") {
    metrics = evaluate_localization(args.pred_dir, gts, cfg);
  } else if (args.mode == "gaze") {
    metrics = evaluate_gaze(args.pred_dir, gts, cfg);
  } else {
    throw ConfigError("eval: mode must be localize or gaze");
  }
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!args.out_path.empty()) {
    out_file.open(args.out_path);
    if (!out_file) throw IoError("cannot write: " + args.out_path);
    out = &out_file;
  }
  for (const auto& m : metrics) (*out) << m.to_json().dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"presage: self-supervised action localization in streaming video"};
  app.require_subcommand(1);

  RunArgs run_args;
  RunArgs gaze_args;
  SynthArgs synth_args;
  ClusterArgs cluster_args;
  EvalArgs eval_args;

  CLI::App* run = app.add_subcommand("run", "single-pass streaming run");
  add_run_flags(run, run_args);
  run->add_option("--mode", run_args.mode, "localize | gaze");

  CLI::App* gaze = app.add_subcommand("gaze", "run with mode=gaze");
  add_run_flags(gaze, gaze_args);

  CLI::App* synth = app.add_subcommand("synth", "generate synthetic scenes");
  synth->add_option("--suite", synth_args.suite_dir, "emit the fixed benchmark suite here");
  synth->add_option("--out", synth_args.out_dir, "output dir for a single scene");
  synth->add_option("--video-id", synth_args.video_id, "scene id");
  synth->add_option("--traj", synth_args.traj, "stationary|linear|circular|zigzag");
  synth->add_option("--bg", synth_args.bg, "flat|noise|scrolling");
  synth->add_option("--frames", synth_args.frames, "sequence length");
  synth->add_option("--width", synth_args.width, "frame width");
  synth->add_option("--height", synth_args.height, "frame height");
  synth->add_option("--size", synth_args.size, "sprite size");
  synth->add_option("--speed", synth_args.speed, "sprite speed px/frame");
  synth->add_option("--t0", synth_args.t0, "first active frame");
  synth->add_option("--t1", synth_args.t1, "last active frame (-1 = end)");
  synth->add_option("--seed", synth_args.seed, "scene seed");

  CLI::App* cluster = app.add_subcommand("cluster", "cluster video features");
  cluster->add_option("--features", cluster_args.features_dir, "dir of <video>.stf features")
      ->required();
  cluster->add_option("--gt", cluster_args.gt_path, "ground-truth manifest (labels)");
  cluster->add_option("--out", cluster_args.out_path, "assignments output");
  cluster->add_option("--centroids", cluster_args.centroids_path, "centroids STF output");
  cluster->add_option("--report", cluster_args.report_path, "metric records output");
  cluster->add_option("--k", cluster_args.k, "fixed cluster count");
  cluster->add_flag("--k-from-gt", cluster_args.k_from_gt, "k = distinct gt labels");
  cluster->add_option("--elbow", cluster_args.elbow, "elbow sweep LO:HI");
  cluster->add_option("--seeds", cluster_args.seeds, "number of seeds (median reported)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate predictions");
  eval->add_option("--pred", eval_args.pred_dir, "dir of <video>.jsonl records")->required();
  eval->add_option("--gt", eval_args.gt_path, "ground-truth manifest")->required();
  eval->add_option("--mode", eval_args.mode, "localize | gaze");
  eval->add_option("--out", eval_args.out_path, "metric records output (default stdout)");
  eval->add_option("--assignments", eval_args.assignments, "cluster assignments for mAP labels");
  eval->add_option("--sigmas", eval_args.sigmas, "overlap thresholds")->take_all();
  eval->add_option("--viewing-distance", eval_args.viewing_distance, "gaze geometry (cm)");
  eval->add_option("--screen-width", eval_args.screen_width, "gaze geometry (cm)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_args, "");
    if (gaze->parsed()) return cmd_run(gaze_args, "gaze");
    if (synth->parsed()) return cmd_synth(synth_args);
    if (cluster->parsed()) return cmd_cluster(cluster_args);
    if (eval->parsed()) return cmd_eval(eval_args);
  } catch (const presage::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
