#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "star/tensor.hpp"

namespace star {

// Ground-truth action instance, times in seconds.
struct GtInstance {
  std::string video_id;
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;
};

// A scored detection in seconds-space, as written to / read from the
// detections CSV.
struct Detection {
  std::string video_id;
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
};

// |intersection| / |union| of [a_start, a_end) and [b_start, b_end);
// 0 when disjoint. Throws on degenerate intervals (start >= end).
double interval_iou(double a_start, double a_end, double b_start, double b_end);

// THUMOS-style AP for one class: detections ranked by descending score, each
// greedily matched to the unmatched same-video ground truth of best IoU; a
// match with IoU >= iou_thresh is a true positive. AP is the sum of
// precision at every true positive divided by the ground-truth count.
// Returns nullopt when the class has no ground truth.
std::optional<double> average_precision(std::vector<Detection> detections,
                                        const std::vector<GtInstance>& gt, double iou_thresh);

struct DensityBucket {
  double lo = 0.0, hi = 0.0;
  int videos = 0;
  std::optional<double> ave_map;  // empty when the bucket has no ground truth
};

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<int> classes;  // classes with ground truth, ascending
  // ap[c][k] = AP of classes[c] at thresholds[k]; absent classes are skipped
  std::vector<std::vector<double>> ap;
  std::map<double, double> map_per_threshold;
  double ave_map = 0.0;
  std::vector<DensityBucket> density_buckets;
  std::vector<std::string> warnings;
};

// AP per (class, threshold), mAP per threshold, and their macro average.
// Classes present only in detections contribute a warning, not an AP.
// When video durations are supplied, adds a ten-bucket action-density
// breakdown of the macro average.
EvalReport mean_ap(const std::vector<Detection>& detections, const std::vector<GtInstance>& gt,
                   const std::vector<double>& thresholds,
                   const std::map<std::string, double>* video_durations = nullptr);

// |union of instance intervals| / duration, in [0, 1].
double action_density(const std::vector<GtInstance>& video_gt, double duration);

// Report emission: a class x threshold AP matrix as CSV and a JSON summary.
std::string report_csv(const EvalReport& report);
std::string report_json(const EvalReport& report);

}  // namespace star
