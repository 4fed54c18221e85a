#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "star/evalkit.hpp"
#include "star/tensor.hpp"

namespace star {

// Sentinel END entry in a weak label list; maps to the model's last class.
constexpr int kEndLabel = -1;

// Weak supervision derived from instances: distinct classes ascending with
// END appended, and the per-label occurrence count (0 for END).
struct VideoAnnotation {
  std::vector<GtInstance> instances;
  std::vector<int> weak_labels;
  std::vector<Scalar> counts;
};

struct VideoRecord {
  std::string id;
  double duration = 0.0;          // seconds; N * segment_duration
  double segment_duration = 0.0;  // seconds per segment
  Tensor rgb;                     // [N x K]
  Tensor flow;                    // [N x K]
  VideoAnnotation annotation;

  Index segments() const { return rgb.rank() == 2 ? rgb.shape()[0] : 0; }
  Index feature_dim() const { return rgb.rank() == 2 ? rgb.shape()[1] : 0; }
};

std::pair<std::vector<int>, std::vector<Scalar>> derive_weak_labels(
    const std::vector<GtInstance>& instances);
VideoAnnotation make_annotation(std::vector<GtInstance> instances);

struct SynthConfig {
  int classes = 5;          // real classes, END excluded
  int feature_dim = 16;     // K
  int segments = 60;        // N
  int train_videos = 200;
  int test_videos = 50;
  int min_instances = 1;
  int max_instances = 3;
  int min_length = 4;       // instance length in segments
  int max_length = 12;
  double prototype_separation = 0.5;  // min pairwise cosine distance
  double noise_sigma = 0.1;
  double background_sigma = 0.1;
  bool co_occurrence = false;  // allow overlapping instances across classes
  std::uint64_t seed = 0;
  void validate() const;
};

struct Dataset {
  std::vector<VideoRecord> train, test;
};

// Deterministic given cfg.seed: unit-norm class prototypes per stream with
// pairwise cosine distance >= prototype_separation, instances written as
// prototype + noise, background as zero-mean noise.
Dataset synthesize_dataset(const SynthConfig& cfg);

// Feature binary: magic "STARFEAT1", then N and K as little-endian u64, then
// N*K little-endian f64 row-major. Manifest: JSON array of {id, duration,
// segment_duration, streams:{rgb,flow}, annotation, checksums}. Annotations:
// JSON instance lists with times at 3-decimal precision.
std::filesystem::path save_features(const std::vector<VideoRecord>& records,
                                    const std::filesystem::path& directory);
std::vector<VideoRecord> load_features(const std::filesystem::path& manifest_path);

void save_feature_file(const std::filesystem::path& path, const Tensor& features);
Tensor load_feature_file(const std::filesystem::path& path, const std::string& video_id);

// FNV-1a 64 over a file's bytes, as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

// Dataset root fallback used by the CLI when no --data-dir is given.
std::filesystem::path default_data_dir();

}  // namespace star
