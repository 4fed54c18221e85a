#pragma once

#include <string>
#include <vector>

#include "star/evalkit.hpp"
#include "star/model.hpp"

namespace star {

enum class Stream { kRgb, kFlow, kFused };
const char* stream_name(Stream s);

// Candidate detection over segment indices, start <= end inclusive.
struct Proposal {
  int class_id = -1;
  Index start = 0;
  Index end = 0;
  Scalar score = 0.0;
  int step = -1;       // recurrent step the attention came from
  Stream stream = Stream::kFused;
};

// w_k = d logits[c] / d x_k at step t, parameters and other step inputs held
// fixed. traces must come from a single unroll.
Vector class_weights(const std::vector<StepTrace>& traces, const ModelParams& params, int t,
                     int c);

// Per-segment class response: xi_i = sum_k w_k * s_i^k.
Vector st_gradcam(const Vector& w, const Tensor& features);

// Convex attention fusion: lambda * rgb + (1 - lambda) * flow.
Vector fuse_attention(const Vector& alpha_rgb, const Vector& alpha_flow, Scalar lambda);

// Multi-threshold extraction on the attended signal fused_alpha * sigmoid(xi):
// for each threshold, maximal runs of consecutive super-threshold segments,
// scored by the run's mean signal. Duplicate intervals across thresholds keep
// the max score. class/step/stream stamp the returned proposals.
std::vector<Proposal> generate_proposals(const Vector& fused_alpha, const Vector& xi,
                                         const std::vector<Scalar>& thresholds, int class_id = -1,
                                         int step = -1, Stream stream = Stream::kFused);

// Greedy per-class suppression by descending score (ties: earlier start,
// then lower class). Drops any proposal overlapping a kept same-class one
// with IoU > iou_thresh. Kept proposals stay in descending-score order.
std::vector<Proposal> nms(std::vector<Proposal> proposals, Scalar iou_thresh);

struct LocalizeOptions {
  std::vector<Scalar> thresholds = {0.1, 0.2, 0.3, 0.4, 0.5};
  Scalar nms_iou = 0.4;
  Scalar lambda = 0.5;
  int t_max = 0;  // 0: defaults to the class count
  ModelOptions model;
};

// Full per-video localization: greedy unroll per stream, per-class attention
// fusion, attended class responses, proposal scoring (scaled by the 1:1-fused
// video-level class probability) and NMS.
struct VideoLocalization {
  std::vector<Proposal> detections;        // post-NMS, segment indices
  std::vector<Proposal> candidate_pool;    // pre-NMS, confidence-scaled
  std::vector<int> predicted_labels;       // union of emitted classes, ascending
  UnrollResult rgb_unroll, flow_unroll;
};
VideoLocalization localize_video(const Tensor& rgb_features, const Tensor& flow_features,
                                 const ModelParams& rgb_params, const ModelParams& flow_params,
                                 const LocalizeOptions& opt);

// Segment-index proposals to seconds-space detections.
Detection to_detection(const Proposal& p, const std::string& video_id, double segment_duration);

}  // namespace star
