#include "star/config.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace star {

namespace {

using json = nlohmann::ordered_json;

template <typename T>
void read_field(const json& j, const char* name, T& into) {
  if (!j.contains(name)) return;
  try {
    into = j.at(name).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + name + "' has the wrong type");
  }
}

void read_path(const json& j, const char* name, std::filesystem::path& into) {
  std::string s = into.string();
  read_field(j, name, s);
  into = s;
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "' " + why);
  };
  if (steps < 0) fail("steps", "must be >= 0");
  if (batch_size <= 0) fail("batch_size", "must be positive");
  if (checkpoint_every <= 0) fail("checkpoint_every", "must be positive");
  if (hidden_dim <= 0) fail("model.hidden_dim", "must be positive");
  if (attention_dim <= 0) fail("model.attention_dim", "must be positive");
  if (t_max < 0) fail("t_max", "must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout", "must be in [0, 1)");
  if (grad_clip < 0.0) fail("grad_clip", "must be >= 0");
  if (nms_iou <= 0.0 || nms_iou > 1.0) fail("nms_iou", "must be in (0, 1]");
  if (thresholds.empty()) fail("thresholds", "must be nonempty");
  for (Scalar t : thresholds)
    if (t <= 0.0 || t >= 1.0) fail("thresholds", "entries must lie in (0, 1)");
  if (split != "train" && split != "test") fail("split", "must be 'train' or 'test'");
  try {
    hyper.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config field 'hyper': ") + e.what());
  }
  try {
    synth.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config field 'synth': ") + e.what());
  }
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }

  RunConfig cfg;
  read_field(j, "seed", cfg.seed);
  read_path(j, "data_dir", cfg.data_dir);
  read_path(j, "out_dir", cfg.out_dir);
  read_path(j, "checkpoint", cfg.checkpoint);
  read_field(j, "steps", cfg.steps);
  read_field(j, "batch_size", cfg.batch_size);
  read_field(j, "checkpoint_every", cfg.checkpoint_every);
  read_field(j, "t_max", cfg.t_max);
  read_field(j, "dropout", cfg.dropout);
  read_field(j, "grad_clip", cfg.grad_clip);
  read_field(j, "nms_iou", cfg.nms_iou);
  read_field(j, "thresholds", cfg.thresholds);
  read_field(j, "split", cfg.split);

  if (j.contains("model")) {
    const json& m = j.at("model");
    long long h = cfg.hidden_dim, a = cfg.attention_dim;
    read_field(m, "hidden_dim", h);
    read_field(m, "attention_dim", a);
    cfg.hidden_dim = static_cast<Index>(h);
    cfg.attention_dim = static_cast<Index>(a);
  }
  if (j.contains("modules")) {
    const json& m = j.at("modules");
    read_field(m, "sparsity", cfg.sparsity);
    read_field(m, "coverage", cfg.coverage);
    read_field(m, "ram", cfg.ram);
  }
  if (j.contains("hyper")) {
    const json& h = j.at("hyper");
    read_field(h, "beta", cfg.hyper.beta);
    read_field(h, "gamma", cfg.hyper.gamma);
    read_field(h, "delta", cfg.hyper.delta);
    read_field(h, "lr", cfg.hyper.lr);
    read_field(h, "adam_b1", cfg.hyper.adam_b1);
    read_field(h, "adam_b2", cfg.hyper.adam_b2);
    read_field(h, "adam_eps", cfg.hyper.adam_eps);
    read_field(h, "lambda", cfg.hyper.lambda);
  }
  if (j.contains("synth")) {
    const json& s = j.at("synth");
    read_field(s, "classes", cfg.synth.classes);
    read_field(s, "feature_dim", cfg.synth.feature_dim);
    read_field(s, "segments", cfg.synth.segments);
    read_field(s, "train_videos", cfg.synth.train_videos);
    read_field(s, "test_videos", cfg.synth.test_videos);
    read_field(s, "min_instances", cfg.synth.min_instances);
    read_field(s, "max_instances", cfg.synth.max_instances);
    read_field(s, "min_length", cfg.synth.min_length);
    read_field(s, "max_length", cfg.synth.max_length);
    read_field(s, "prototype_separation", cfg.synth.prototype_separation);
    read_field(s, "noise_sigma", cfg.synth.noise_sigma);
    read_field(s, "background_sigma", cfg.synth.background_sigma);
    read_field(s, "co_occurrence", cfg.synth.co_occurrence);
  }
  cfg.synth.seed = cfg.seed;
  return cfg;
}

std::string dump_config(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["data_dir"] = cfg.data_dir.string();
  j["out_dir"] = cfg.out_dir.string();
  j["checkpoint"] = cfg.checkpoint.string();
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["t_max"] = cfg.t_max;
  j["dropout"] = cfg.dropout;
  j["grad_clip"] = cfg.grad_clip;
  j["nms_iou"] = cfg.nms_iou;
  j["thresholds"] = cfg.thresholds;
  j["split"] = cfg.split;
  j["model"] = {{"hidden_dim", cfg.hidden_dim}, {"attention_dim", cfg.attention_dim}};
  j["modules"] = {{"sparsity", cfg.sparsity}, {"coverage", cfg.coverage}, {"ram", cfg.ram}};
  j["hyper"] = {{"beta", cfg.hyper.beta},       {"gamma", cfg.hyper.gamma},
                {"delta", cfg.hyper.delta},     {"lr", cfg.hyper.lr},
                {"adam_b1", cfg.hyper.adam_b1}, {"adam_b2", cfg.hyper.adam_b2},
                {"adam_eps", cfg.hyper.adam_eps}, {"lambda", cfg.hyper.lambda}};
  j["synth"] = {{"classes", cfg.synth.classes},
                {"feature_dim", cfg.synth.feature_dim},
                {"segments", cfg.synth.segments},
                {"train_videos", cfg.synth.train_videos},
                {"test_videos", cfg.synth.test_videos},
                {"min_instances", cfg.synth.min_instances},
                {"max_instances", cfg.synth.max_instances},
                {"min_length", cfg.synth.min_length},
                {"max_length", cfg.synth.max_length},
                {"prototype_separation", cfg.synth.prototype_separation},
                {"noise_sigma", cfg.synth.noise_sigma},
                {"background_sigma", cfg.synth.background_sigma},
                {"co_occurrence", cfg.synth.co_occurrence}};
  return j.dump(2) + "\n";
}

}  // namespace star
