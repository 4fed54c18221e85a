#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "star/dataio.hpp"
#include "star/localizer.hpp"
#include "star/objective.hpp"

namespace star {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Whole-run configuration. Every field has a default; values load from a
// JSON config file and CLI flags override file values.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path data_dir;  // empty: STAR_DATA_DIR or ./data
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;  // empty: <out_dir>/checkpoint.starckpt

  int steps = 2000;
  int batch_size = 8;
  int checkpoint_every = 100;
  Index hidden_dim = 32;
  Index attention_dim = 32;
  int t_max = 0;  // 0: class count
  double dropout = 0.0;    // drop probability on segment features
  double grad_clip = 0.0;  // global-norm cap per stream, 0 disables

  bool sparsity = true;
  bool coverage = true;
  bool ram = true;

  Hyperparams hyper;
  SynthConfig synth;
  std::vector<Scalar> thresholds = {0.1, 0.2, 0.3, 0.4, 0.5};
  Scalar nms_iou = 0.4;
  std::string split = "test";  // inference split

  std::filesystem::path resolved_data_dir() const {
    return data_dir.empty() ? default_data_dir() : data_dir;
  }
  std::filesystem::path resolved_checkpoint() const {
    return checkpoint.empty() ? out_dir / "checkpoint.starckpt" : checkpoint;
  }
  Hyperparams effective_hyper() const {
    Hyperparams hp = hyper;
    if (!sparsity) hp.beta = 0.0;
    if (!coverage) hp.gamma = 0.0;
    if (!ram) hp.delta = 0.0;
    return hp;
  }
  ModelOptions model_options() const { return {coverage, ram}; }
  LocalizeOptions localize_options() const {
    LocalizeOptions o;
    o.thresholds = thresholds;
    o.nms_iou = nms_iou;
    o.lambda = hyper.lambda;
    o.t_max = t_max;
    o.model = model_options();
    return o;
  }

  // Throws ConfigError naming the offending field.
  void validate() const;
};

RunConfig load_config_file(const std::filesystem::path& path);
std::string dump_config(const RunConfig& cfg);

}  // namespace star
