#include "star/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace star {

namespace {

using json = nlohmann::ordered_json;

// Total order making every ranking deterministic under score ties.
bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.video_id != b.video_id) return a.video_id < b.video_id;
  if (a.start != b.start) return a.start < b.start;
  if (a.end != b.end) return a.end < b.end;
  return a.class_id < b.class_id;
}

std::string format_threshold(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

}  // namespace

double interval_iou(double a_start, double a_end, double b_start, double b_end) {
  if (a_start >= a_end || b_start >= b_end)
    throw std::invalid_argument("interval_iou: degenerate interval (start >= end)");
  const double inter = std::min(a_end, b_end) - std::max(a_start, b_start);
  if (inter <= 0.0) return 0.0;
  const double uni = (a_end - a_start) + (b_end - b_start) - inter;
  return inter / uni;
}

std::optional<double> average_precision(std::vector<Detection> detections,
                                        const std::vector<GtInstance>& gt, double iou_thresh) {
  if (gt.empty()) return std::nullopt;
  std::sort(detections.begin(), detections.end(), detection_before);
  std::vector<bool> matched(gt.size(), false);

  double precision_sum = 0.0;
  int tp = 0;
  for (std::size_t rank = 0; rank < detections.size(); ++rank) {
    const Detection& d = detections[rank];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (matched[g] || gt[g].video_id != d.video_id) continue;
      const double iou = interval_iou(d.start, d.end, gt[g].start, gt[g].end);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      matched[static_cast<std::size_t>(best)] = true;
      ++tp;
      precision_sum += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return precision_sum / static_cast<double>(gt.size());
}

double action_density(const std::vector<GtInstance>& video_gt, double duration) {
  if (duration <= 0.0) throw std::invalid_argument("action_density: duration must be > 0");
  std::vector<std::pair<double, double>> spans;
  for (const GtInstance& g : video_gt) spans.emplace_back(g.start, g.end);
  std::sort(spans.begin(), spans.end());
  double covered = 0.0;
  double cur_start = 0.0, cur_end = -1.0;
  bool open = false;
  for (const auto& [s, e] : spans) {
    if (!open || s > cur_end) {
      if (open) covered += cur_end - cur_start;
      cur_start = s;
      cur_end = e;
      open = true;
    } else {
      cur_end = std::max(cur_end, e);
    }
  }
  if (open) covered += cur_end - cur_start;
  return std::min(1.0, covered / duration);
}

namespace {

// Macro-average AP over classes with ground truth, for one detection/gt set.
struct MacroResult {
  std::vector<int> classes;
  std::vector<std::vector<double>> ap;
  std::map<double, double> map_per_threshold;
  std::optional<double> ave_map;
};

MacroResult macro_ap(const std::vector<Detection>& detections, const std::vector<GtInstance>& gt,
                     const std::vector<double>& thresholds) {
  MacroResult r;
  std::set<int> gt_classes;
  for (const GtInstance& g : gt) gt_classes.insert(g.class_id);
  r.classes.assign(gt_classes.begin(), gt_classes.end());

  for (int c : r.classes) {
    std::vector<Detection> dets;
    std::vector<GtInstance> cls_gt;
    for (const Detection& d : detections)
      if (d.class_id == c) dets.push_back(d);
    for (const GtInstance& g : gt)
      if (g.class_id == c) cls_gt.push_back(g);
    std::vector<double> row;
    for (double t : thresholds) row.push_back(*average_precision(dets, cls_gt, t));
    r.ap.push_back(std::move(row));
  }

  if (!r.classes.empty()) {
    double total = 0.0;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      double sum = 0.0;
      for (std::size_t c = 0; c < r.classes.size(); ++c) sum += r.ap[c][k];
      const double m = sum / static_cast<double>(r.classes.size());
      r.map_per_threshold[thresholds[k]] = m;
      total += m;
    }
    r.ave_map = total / static_cast<double>(thresholds.size());
  }
  return r;
}

}  // namespace

EvalReport mean_ap(const std::vector<Detection>& detections, const std::vector<GtInstance>& gt,
                   const std::vector<double>& thresholds,
                   const std::map<std::string, double>* video_durations) {
  if (thresholds.empty()) throw std::invalid_argument("mean_ap: thresholds must be nonempty");

  EvalReport report;
  report.thresholds = thresholds;

  MacroResult overall = macro_ap(detections, gt, thresholds);
  report.classes = overall.classes;
  report.ap = overall.ap;
  report.map_per_threshold = overall.map_per_threshold;
  report.ave_map = overall.ave_map.value_or(0.0);

  std::set<int> gt_classes(report.classes.begin(), report.classes.end());
  std::set<int> orphan;
  for (const Detection& d : detections)
    if (!gt_classes.count(d.class_id)) orphan.insert(d.class_id);
  for (int c : orphan)
    report.warnings.push_back("class " + std::to_string(c) +
                              " has detections but no ground truth; excluded from mAP");

  if (video_durations) {
    // Ten uniform density buckets over [0, 1]; mAP restricted to each bucket.
    std::map<std::string, std::vector<GtInstance>> by_video;
    for (const GtInstance& g : gt) by_video[g.video_id].push_back(g);
    std::vector<std::set<std::string>> bucket_videos(10);
    for (const auto& [id, duration] : *video_durations) {
      auto it = by_video.find(id);
      const double d =
          it == by_video.end() ? 0.0 : action_density(it->second, duration);
      const int b = std::min(9, static_cast<int>(d * 10.0));
      bucket_videos[static_cast<std::size_t>(b)].insert(id);
    }
    for (int b = 0; b < 10; ++b) {
      DensityBucket bucket;
      bucket.lo = b / 10.0;
      bucket.hi = (b + 1) / 10.0;
      bucket.videos = static_cast<int>(bucket_videos[static_cast<std::size_t>(b)].size());
      if (bucket.videos > 0) {
        std::vector<Detection> dets;
        std::vector<GtInstance> sub_gt;
        for (const Detection& d : detections)
          if (bucket_videos[static_cast<std::size_t>(b)].count(d.video_id)) dets.push_back(d);
        for (const GtInstance& g : gt)
          if (bucket_videos[static_cast<std::size_t>(b)].count(g.video_id)) sub_gt.push_back(g);
        bucket.ave_map = macro_ap(dets, sub_gt, thresholds).ave_map;
      }
      report.density_buckets.push_back(bucket);
    }
  }
  return report;
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "class";
  for (double t : report.thresholds) os << ",ap@" << format_threshold(t);
  os << "\n";
  char buf[64];
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    os << report.classes[c];
    for (std::size_t k = 0; k < report.thresholds.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.6f", report.ap[c][k]);
      os << "," << buf;
    }
    os << "\n";
  }
  return os.str();
}

std::string report_json(const EvalReport& report) {
  json j;
  json maps = json::object();
  for (const auto& [t, m] : report.map_per_threshold) maps[format_threshold(t)] = m;
  j["map_at"] = maps;
  j["ave_map"] = report.ave_map;
  json buckets = json::array();
  for (const DensityBucket& b : report.density_buckets) {
    json jb;
    jb["lo"] = b.lo;
    jb["hi"] = b.hi;
    jb["videos"] = b.videos;
    if (b.ave_map)
      jb["ave_map"] = *b.ave_map;
    else
      jb["ave_map"] = nullptr;
    buckets.push_back(jb);
  }
  j["density_buckets"] = buckets;
  if (!report.warnings.empty()) j["warnings"] = report.warnings;
  return j.dump(2) + "\n";
}

}  // namespace star
