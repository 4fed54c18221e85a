#pragma once

#include <iosfwd>
#include <map>

#include "star/config.hpp"
#include "star/dataio.hpp"
#include "star/localizer.hpp"
#include "star/objective.hpp"

namespace star {

struct NonFiniteLossError : std::runtime_error {
  int step;
  explicit NonFiniteLossError(int s)
      : std::runtime_error("non-finite loss at step " + std::to_string(s)), step(s) {}
};

struct CheckpointMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Weak supervision for one video in model indexing (END = num_classes - 1).
TrainingExample to_example(const VideoRecord& rec, const ModelDims& dims);

struct TrainedModel {
  ModelParams rgb, flow;
  AdamState adam_rgb, adam_flow;
  int step = 0;
};

// Writes both streams plus optimizer state and the step counter.
void save_training_checkpoint(const std::filesystem::path& path, const TrainedModel& model);
TrainedModel load_training_checkpoint(const std::filesystem::path& path);

// Streams are independent models over the shared weak labels; gradients are
// batch means in a fixed video order; one Adam step per stream per step.
// Appends one CSV row per step (mean of the two streams' batch terms) and
// checkpoints every cfg.checkpoint_every steps and at the end.
// Throws NonFiniteLossError naming the step when the loss degenerates.
TrainedModel train(const RunConfig& cfg, const std::vector<VideoRecord>& videos,
                   std::ostream& loss_csv, const TrainedModel* resume_from = nullptr);

extern const char* kLossCsvHeader;

// Per-video localization over a split; detection rows in seconds-space and
// the per-video predicted label sets.
struct InferenceOutput {
  std::vector<Detection> detections;
  std::map<std::string, std::vector<int>> predicted_labels;
};
InferenceOutput run_inference(const std::vector<VideoRecord>& videos, const ModelParams& rgb,
                              const ModelParams& flow, const LocalizeOptions& opt);

std::string detections_csv(const std::vector<Detection>& detections);
std::vector<Detection> parse_detections_csv(const std::string& text);
std::string labels_json(const std::map<std::string, std::vector<int>>& predicted);

// Exact-set accuracy of predicted label sets against ground-truth weak labels.
double label_set_accuracy(const std::vector<VideoRecord>& videos,
                          const std::map<std::string, std::vector<int>>& predicted);

std::vector<GtInstance> all_instances(const std::vector<VideoRecord>& videos);
std::map<std::string, double> video_durations(const std::vector<VideoRecord>& videos);

}  // namespace star
