#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "presage/attention.hpp"
#include "presage/errors.hpp"
#include "presage/proposals.hpp"

namespace presage {

// ---------------------------------------------------------------------------
// Ground-truth schema: one JSON record per line,
//   {"video": id, "label": c,
//    "tubes": [{"frame": n, "box": [x1,y1,x2,y2], "tube": t?}, ...],
//    "gaze": [[n, x, y], ...]}
// The optional "tube" field separates instances when a video has several.
// ---------------------------------------------------------------------------

struct GtVideo {
  std::string id;
  std::string label;
  std::vector<ActionTube> tubes;
  std::vector<std::tuple<int64_t, double, double>> gaze;  // frame, x, y
};

inline std::vector<GtVideo> parse_ground_truth(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<GtVideo> out;
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
    GtVideo v;
    if (!rec.contains("video")) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": missing 'video'");
    }
    v.id = rec["video"].is_string() ? rec["video"].get<std::string>()
                                    : rec["video"].dump();
    v.label = rec.value("label", std::string{});
    std::map<int64_t, std::map<int64_t, TubeEntry>> by_tube;
    for (const auto& jt : rec.value("tubes", nlohmann::json::array())) {
      if (!jt.contains("frame") || !jt.contains("box") || jt["box"].size() != 4) {
        throw FormatError(path + ":" + std::to_string(lineno) +
                          ": tube entry needs 'frame' and a 4-element 'box'");
      }
      TubeEntry e;
      e.frame = jt["frame"].get<int64_t>();
      e.box.x1 = jt["box"][0].get<float>();
      e.box.y1 = jt["box"][1].get<float>();
      e.box.x2 = jt["box"][2].get<float>();
      e.box.y2 = jt["box"][3].get<float>();
      if (e.box.x1 < 0 || e.box.y1 < 0 || e.box.x2 <= e.box.x1 || e.box.y2 <= e.box.y1) {
        throw ValidationError(path + ":" + std::to_string(lineno) + ": degenerate gt box");
      }
      const int64_t tube_id = jt.value("tube", 0);
      auto& tube = by_tube[tube_id];
      if (tube.count(e.frame)) {
        throw ValidationError(path + ":" + std::to_string(lineno) + ": duplicate frame " +
                              std::to_string(e.frame) + " in tube " + std::to_string(tube_id));
      }
      tube[e.frame] = e;
    }
    for (auto& [tid, entries] : by_tube) {
      ActionTube t;
      int64_t expect = entries.begin()->first;
      for (auto& [frame, e] : entries) {
        if (frame != expect) {
          throw ValidationError(path + ":" + std::to_string(lineno) + ": tube " +
                                std::to_string(tid) + " frames not contiguous");
        }
        t.entries.push_back(e);
        expect++;
      }
      v.tubes.push_back(std::move(t));
    }
    for (const auto& jg : rec.value("gaze", nlohmann::json::array())) {
      if (jg.size() != 3) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": gaze entry must be [n,x,y]");
      }
      v.gaze.emplace_back(jg[0].get<int64_t>(), jg[1].get<double>(), jg[2].get<double>());
    }
    out.push_back(std::move(v));
  }
  return out;
}

// A predicted tube with the video it belongs to, an optional class label and
// a ranking confidence (higher ranks earlier; the pipeline uses negated mean
// box energy).
struct PredictedTube {
  std::string video;
  std::string label;
  ActionTube tube;
  double confidence = 0.0;
};

// Mean per-frame IoU over the union of frames spanned by the two tubes;
// frames present in only one tube contribute 0.
inline double tube_iou(const ActionTube& a, const ActionTube& b) {
  if (a.entries.empty() || b.entries.empty()) return 0.0;
  std::map<int64_t, const TubeEntry*> am, bm;
  for (const auto& e : a.entries) am[e.frame] = &e;
  for (const auto& e : b.entries) bm[e.frame] = &e;
  std::set<int64_t> frames;
  for (const auto& [f, e] : am) frames.insert(f);
  for (const auto& [f, e] : bm) frames.insert(f);
  double total = 0.0;
  for (int64_t f : frames) {
    auto ia = am.find(f);
    auto ib = bm.find(f);
    if (ia != am.end() && ib != bm.end()) {
      total += iou(ia->second->box, ib->second->box);
    }
  }
  return total / static_cast<double>(frames.size());
}

// Fraction of ground-truth tubes matched by at least one predicted tube of
// the same video with tube IoU >= sigma.
inline double recall_at(const std::vector<PredictedTube>& preds,
                        const std::vector<GtVideo>& gts, double sigma) {
  size_t n_gt = 0, hit = 0;
  for (const auto& gv : gts) {
    for (const auto& gt : gv.tubes) {
      n_gt++;
      for (const auto& p : preds) {
        if (p.video != gv.id) continue;
        if (tube_iou(p.tube, gt) >= sigma) {
          hit++;
          break;
        }
      }
    }
  }
  if (n_gt == 0) throw ValidationError("recall_at: no ground-truth tubes");
  return static_cast<double>(hit) / n_gt;
}

namespace detail {

// All-points interpolated AP from ranked TP/FP flags.
inline double average_precision(const std::vector<bool>& tp_ranked, size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  size_t tp = 0;
  for (size_t i = 0; i < tp_ranked.size(); ++i) {
    if (tp_ranked[i]) tp++;
    precision.push_back(static_cast<double>(tp) / (i + 1));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  // Precision envelope from the right.
  for (size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_r = 0.0;
  for (size_t i = 0; i < precision.size(); ++i) {
    if (recall[i] > prev_r) {
      ap += (recall[i] - prev_r) * precision[i];
      prev_r = recall[i];
    }
  }
  return ap;
}

}  // namespace detail

// Class-wise average precision with tube-IoU matching at sigma, averaged over
// the classes present in the ground truth. Detections are ranked by
// confidence; each gt tube matches at most once.
inline double map_at(const std::vector<PredictedTube>& preds,
                     const std::vector<GtVideo>& gts, double sigma) {
  std::set<std::string> classes;
  for (const auto& gv : gts) {
    if (!gv.tubes.empty()) classes.insert(gv.label);
  }
  if (classes.empty()) throw ValidationError("map_at: no ground-truth tubes");

  double ap_sum = 0.0;
  for (const auto& cls : classes) {
    struct GtRef {
      const ActionTube* tube;
      bool matched = false;
    };
    std::map<std::string, std::vector<GtRef>> gt_by_video;
    size_t n_gt = 0;
    for (const auto& gv : gts) {
      if (gv.label != cls) continue;
      for (const auto& t : gv.tubes) {
        gt_by_video[gv.id].push_back({&t, false});
        n_gt++;
      }
    }
    std::vector<const PredictedTube*> dets;
    for (const auto& p : preds) {
      if (p.label == cls) dets.push_back(&p);
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const PredictedTube* a, const PredictedTube* b) {
                       if (a->confidence != b->confidence) return a->confidence > b->confidence;
                       if (a->video != b->video) return a->video < b->video;
                       return a->tube.entries.front().frame < b->tube.entries.front().frame;
                     });
    std::vector<bool> tp_ranked;
    for (const PredictedTube* det : dets) {
      auto it = gt_by_video.find(det->video);
      bool tp = false;
      if (it != gt_by_video.end()) {
        double best = -1.0;
        GtRef* best_ref = nullptr;
        for (auto& ref : it->second) {
          if (ref.matched) continue;
          const double ti = tube_iou(det->tube, *ref.tube);
          if (ti > best) {
            best = ti;
            best_ref = &ref;
          }
        }
        if (best_ref && best >= sigma) {
          best_ref->matched = true;
          tp = true;
        }
      }
      tp_ranked.push_back(tp);
    }
    ap_sum += detail::average_precision(tp_ranked, n_gt);
  }
  return ap_sum / static_cast<double>(classes.size());
}

// Recall-versus-threshold series for localization curves.
inline std::vector<std::pair<double, double>> auc_curve(
    const std::vector<PredictedTube>& preds, const std::vector<GtVideo>& gts,
    const std::vector<double>& sigmas) {
  std::vector<std::pair<double, double>> out;
  for (double s : sigmas) out.emplace_back(s, recall_at(preds, gts, s));
  return out;
}

// Maps each cluster id to the gt class its tubes most often overlap best.
inline std::map<uint32_t, std::string> majority_cluster_to_class(
    const std::vector<std::pair<uint32_t, PredictedTube>>& clustered_preds,
    const std::vector<GtVideo>& gts) {
  std::map<uint32_t, std::map<std::string, size_t>> votes;
  for (const auto& [cluster, pred] : clustered_preds) {
    const GtVideo* gv = nullptr;
    for (const auto& g : gts) {
      if (g.id == pred.video) {
        gv = &g;
        break;
      }
    }
    if (!gv) continue;
    double best = 0.0;
    for (const auto& t : gv->tubes) best = std::max(best, tube_iou(pred.tube, t));
    if (best > 0.0) votes[cluster][gv->label]++;
  }
  std::map<uint32_t, std::string> out;
  for (const auto& [cluster, tally] : votes) {
    size_t best = 0;
    std::string label;
    for (const auto& [cls, cnt] : tally) {
      if (cnt > best) {
        best = cnt;
        label = cls;
      }
    }
    out[cluster] = label;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaze metrics.
// ---------------------------------------------------------------------------

// ROC area for saliency maps against one fixation per map: sweeping a
// threshold, TPR is the fraction of fixations at or above it, FPR the
// fraction of all pixels at or above it.
inline double gaze_auc(const std::vector<Tensor>& saliency_maps,
                       const std::vector<std::pair<double, double>>& fixations) {
  if (saliency_maps.size() != fixations.size() || saliency_maps.empty()) {
    throw ValidationError("gaze_auc: need one fixation per saliency map");
  }
  std::vector<float> fix_vals;
  std::vector<float> all_vals;
  for (size_t i = 0; i < saliency_maps.size(); ++i) {
    const Tensor& m = saliency_maps[i];
    require_rank(m, 2, "gaze_auc saliency");
    const uint32_t h = m.dim(0), w = m.dim(1);
    const auto [fx, fy] = fixations[i];
    const int64_t px = static_cast<int64_t>(std::floor(fx));
    const int64_t py = static_cast<int64_t>(std::floor(fy));
    if (px < 0 || py < 0 || px >= w || py >= h) {
      throw ValidationError("gaze_auc: fixation outside frame at map " + std::to_string(i));
    }
    fix_vals.push_back(m[static_cast<size_t>(py) * w + px]);
    for (size_t k = 0; k < m.size(); ++k) all_vals.push_back(m[k]);
  }
  std::sort(all_vals.begin(), all_vals.end());
  std::vector<float> thresholds = fix_vals;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<float>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double n_fix = static_cast<double>(fix_vals.size());
  const double n_all = static_cast<double>(all_vals.size());
  std::vector<std::pair<double, double>> roc;  // (FPR, TPR), ascending
  roc.emplace_back(0.0, 0.0);
  for (float th : thresholds) {
    size_t tp = 0;
    for (float v : fix_vals) {
      if (v >= th) tp++;
    }
    const size_t ge = all_vals.end() - std::lower_bound(all_vals.begin(), all_vals.end(), th);
    roc.emplace_back(ge / n_all, tp / n_fix);
  }
  roc.emplace_back(1.0, 1.0);
  double auc = 0.0;
  for (size_t i = 1; i < roc.size(); ++i) {
    auc += (roc[i].first - roc[i - 1].first) * (roc[i].second + roc[i - 1].second) * 0.5;
  }
  return auc;
}

// Screen geometry for converting pixel offsets to visual angles: an observer
// at viewing_distance from the center of a screen_width-wide screen (same
// units), square pixels.
struct GazeGeometry {
  double viewing_distance = 60.0;
  double screen_width = 40.0;

  void validate() const {
    if (viewing_distance <= 0.0 || screen_width <= 0.0) {
      throw ConfigError("gaze geometry requires positive viewing distance and screen width");
    }
  }
};

// Mean angular error in degrees between predicted and true gaze positions
// (continuous pixel coordinates in a W×H frame).
inline double gaze_aae(const std::vector<std::pair<double, double>>& pred,
                       const std::vector<std::pair<double, double>>& gt,
                       const GazeGeometry& geom, uint32_t frame_w, uint32_t frame_h) {
  geom.validate();
  if (pred.size() != gt.size() || pred.empty()) {
    throw ValidationError("gaze_aae: point lists must be nonempty and equal length");
  }
  const double unit = geom.screen_width / frame_w;  // physical units per pixel
  auto ray = [&](const std::pair<double, double>& p) {
    return std::array<double, 3>{(p.first - frame_w / 2.0) * unit,
                                 (p.second - frame_h / 2.0) * unit,
                                 geom.viewing_distance};
  };
  double total = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const auto a = ray(pred[i]);
    const auto b = ray(gt[i]);
    const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    const double cx = a[1] * b[2] - a[2] * b[1];
    const double cy = a[2] * b[0] - a[0] * b[2];
    const double cz = a[0] * b[1] - a[1] * b[0];
    const double cross = std::sqrt(cx * cx + cy * cy + cz * cz);
    total += std::atan2(cross, dot) * 180.0 / 3.14159265358979323846;
  }
  return total / pred.size();
}

}  // namespace presage
