#include "star/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "star/rng.hpp"

namespace star {

const char* kLossCsvHeader = "step,class_loss,sparsity_loss,cov_loss,ram_loss,total";

TrainingExample to_example(const VideoRecord& rec, const ModelDims& dims) {
  TrainingExample ex;
  ex.features = rec.rgb;  // caller swaps in the stream it trains
  for (std::size_t i = 0; i < rec.annotation.weak_labels.size(); ++i) {
    const int label = rec.annotation.weak_labels[i];
    if (label == kEndLabel) {
      ex.labels.push_back(static_cast<int>(dims.end_class()));
    } else {
      if (label < 0 || label >= dims.end_class())
        throw std::invalid_argument("video " + rec.id + ": class " + std::to_string(label) +
                                    " outside model range [0, " +
                                    std::to_string(dims.end_class()) + ")");
      ex.labels.push_back(label);
    }
    ex.counts.push_back(rec.annotation.counts[i]);
  }
  return ex;
}

namespace {

struct LossGraph {
  UnrollGraph graph;
  LossNodes nodes;
};

LossGraph& cached_graph(std::map<int, LossGraph>& cache, const ModelDims& dims,
                        const ModelOptions& opt, const Hyperparams& hp, int T) {
  auto it = cache.find(T);
  if (it == cache.end()) {
    LossGraph lg;
    lg.graph = build_unroll_graph(dims, opt, T);
    lg.nodes = append_loss(lg.graph, hp);
    it = cache.emplace(T, std::move(lg)).first;
  }
  return it->second;
}

Tensor apply_dropout(const Tensor& features, double drop_prob, std::uint64_t seed) {
  if (drop_prob <= 0.0) return features;
  Rng rng(seed);
  Tensor out = features;
  const Scalar scale = 1.0 / (1.0 - drop_prob);
  for (Index i = 0; i < out.size(); ++i)
    out[i] = rng.uniform() < drop_prob ? 0.0 : out[i] * scale;
  return out;
}

void clip_gradients(std::map<std::string, Tensor>& grads, double cap) {
  if (cap <= 0.0) return;
  Scalar sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.array().square().sum();
  const Scalar norm = std::sqrt(sq);
  if (norm <= cap) return;
  const Scalar scale = cap / norm;
  for (auto& [name, g] : grads) g.array() *= scale;
}

struct StreamState {
  ModelParams params;
  AdamState adam;
  std::map<int, LossGraph> graphs;
};

// One video's contribution: evaluates the loss graph, accumulates gradients
// and the four loss terms.
LossBreakdown accumulate_video(StreamState& st, const ModelDims& dims, const ModelOptions& opt,
                               const Hyperparams& hp, const TrainingExample& ex,
                               std::map<std::string, Tensor>& grad_sum) {
  LossGraph& lg = cached_graph(st.graphs, dims, opt, hp, static_cast<int>(ex.labels.size()));
  Bindings b = loss_bindings(dims, st.params, ex);
  Values v = lg.graph.tape.eval(b);
  std::map<std::string, Tensor> grads = lg.graph.tape.backward(lg.nodes.total, v);
  for (const std::string& name : ModelParams::names()) {
    auto [it, inserted] = grad_sum.try_emplace(name, grads.at(name));
    if (!inserted) it->second.array() += grads.at(name).array();
  }
  return compose_loss(v.at(lg.nodes.class_loss).value(), v.at(lg.nodes.sparsity_loss).value(),
                      v.at(lg.nodes.cov_loss).value(), v.at(lg.nodes.ram_loss).value(), hp);
}

}  // namespace

void save_training_checkpoint(const std::filesystem::path& path, const TrainedModel& model) {
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, t] : model.rgb.tensors) tensors["rgb/" + name] = t;
  for (const auto& [name, t] : model.flow.tensors) tensors["flow/" + name] = t;
  for (const auto& [name, t] : model.adam_rgb.m) tensors["adam/rgb/" + name + "/m"] = t;
  for (const auto& [name, t] : model.adam_rgb.v) tensors["adam/rgb/" + name + "/v"] = t;
  for (const auto& [name, t] : model.adam_flow.m) tensors["adam/flow/" + name + "/m"] = t;
  for (const auto& [name, t] : model.adam_flow.v) tensors["adam/flow/" + name + "/v"] = t;
  tensors["trainer/step"] = Tensor::scalar(static_cast<Scalar>(model.step));
  save_checkpoint(path, model.rgb.dims, tensors);
}

TrainedModel load_training_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  TrainedModel model;
  model.rgb.dims = ckpt.dims;
  model.flow.dims = ckpt.dims;
  for (const std::string& name : ModelParams::names()) {
    auto rgb = ckpt.tensors.find("rgb/" + name);
    auto flow = ckpt.tensors.find("flow/" + name);
    if (rgb == ckpt.tensors.end() || flow == ckpt.tensors.end())
      throw CheckpointMismatchError("checkpoint " + path.string() + ": missing tensor '" + name +
                                    "'");
    model.rgb.tensors[name] = rgb->second;
    model.flow.tensors[name] = flow->second;
    auto moment = [&](const std::string& key, std::map<std::string, Tensor>& into) {
      auto it = ckpt.tensors.find(key);
      if (it != ckpt.tensors.end()) into[name] = it->second;
    };
    moment("adam/rgb/" + name + "/m", model.adam_rgb.m);
    moment("adam/rgb/" + name + "/v", model.adam_rgb.v);
    moment("adam/flow/" + name + "/m", model.adam_flow.m);
    moment("adam/flow/" + name + "/v", model.adam_flow.v);
  }
  auto step = ckpt.tensors.find("trainer/step");
  model.step = step == ckpt.tensors.end() ? 0 : static_cast<int>(step->second.value());
  model.adam_rgb.t = model.step;
  model.adam_flow.t = model.step;
  return model;
}

TrainedModel train(const RunConfig& cfg, const std::vector<VideoRecord>& videos,
                   std::ostream& loss_csv, const TrainedModel* resume_from) {
  cfg.validate();
  if (videos.empty()) throw std::invalid_argument("train: no videos");

  ModelDims dims;
  dims.n_segments = videos.front().segments();
  dims.feature_dim = videos.front().feature_dim();
  dims.hidden_dim = cfg.hidden_dim;
  dims.attention_dim = cfg.attention_dim;
  dims.num_classes = cfg.synth.classes + 1;
  dims.validate();
  for (const VideoRecord& rec : videos)
    if (rec.segments() != dims.n_segments)
      throw std::invalid_argument("video " + rec.id + ": segment count " +
                                  std::to_string(rec.segments()) + " differs from model's " +
                                  std::to_string(dims.n_segments));

  const Hyperparams hp = cfg.effective_hyper();
  const ModelOptions opt = cfg.model_options();

  StreamState rgb, flow;
  int start_step = 0;
  if (resume_from) {
    if (resume_from->rgb.dims != dims)
      throw CheckpointMismatchError("resume checkpoint dims do not match the dataset/config");
    rgb.params = resume_from->rgb;
    flow.params = resume_from->flow;
    rgb.adam = resume_from->adam_rgb;
    flow.adam = resume_from->adam_flow;
    start_step = resume_from->step;
  } else {
    rgb.params = init_params(dims, mix_seed(cfg.seed, 1));
    flow.params = init_params(dims, mix_seed(cfg.seed, 2));
  }

  std::vector<TrainingExample> examples_rgb, examples_flow;
  for (const VideoRecord& rec : videos) {
    TrainingExample ex = to_example(rec, dims);
    examples_flow.push_back(ex);
    examples_flow.back().features = rec.flow;
    examples_rgb.push_back(std::move(ex));
  }

  // Deterministic batch schedule: a seeded shuffle per epoch, consumed in
  // batch_size chunks.
  std::vector<std::size_t> order(videos.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = 0;
  long long epoch = 0;
  auto reshuffle = [&]() {
    std::mt19937_64 g(mix_seed(cfg.seed, 0x54 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), g);
    cursor = 0;
  };
  reshuffle();

  std::filesystem::create_directories(cfg.out_dir);
  char row[256];

  TrainedModel out;
  for (int step = start_step + 1; step <= start_step + cfg.steps; ++step) {
    std::map<std::string, Tensor> grad_rgb, grad_flow;
    LossBreakdown batch{};
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        ++epoch;
        reshuffle();
      }
      const std::size_t vi = order[cursor++];
      TrainingExample ex_r = examples_rgb[vi];
      TrainingExample ex_f = examples_flow[vi];
      if (cfg.dropout > 0.0) {
        const std::uint64_t base =
            mix_seed(cfg.seed, 0xd0 + static_cast<std::uint64_t>(step) * 1000003ULL +
                                  static_cast<std::uint64_t>(vi) * 7919ULL);
        ex_r.features = apply_dropout(ex_r.features, cfg.dropout, base);
        ex_f.features = apply_dropout(ex_f.features, cfg.dropout, base ^ 1);
      }
      const LossBreakdown lr = accumulate_video(rgb, dims, opt, hp, ex_r, grad_rgb);
      const LossBreakdown lf = accumulate_video(flow, dims, opt, hp, ex_f, grad_flow);
      batch.class_loss += 0.5 * (lr.class_loss + lf.class_loss);
      batch.sparsity_loss += 0.5 * (lr.sparsity_loss + lf.sparsity_loss);
      batch.cov_loss += 0.5 * (lr.cov_loss + lf.cov_loss);
      batch.ram_loss += 0.5 * (lr.ram_loss + lf.ram_loss);
      batch.total += 0.5 * (lr.total + lf.total);
    }
    const Scalar inv = 1.0 / static_cast<Scalar>(cfg.batch_size);
    batch.class_loss *= inv;
    batch.sparsity_loss *= inv;
    batch.cov_loss *= inv;
    batch.ram_loss *= inv;
    batch.total *= inv;
    if (!std::isfinite(batch.total)) throw NonFiniteLossError(step);

    for (auto& [name, g] : grad_rgb) g.array() *= inv;
    for (auto& [name, g] : grad_flow) g.array() *= inv;
    clip_gradients(grad_rgb, cfg.grad_clip);
    clip_gradients(grad_flow, cfg.grad_clip);
    adam_step(rgb.params, grad_rgb, rgb.adam, hp);
    adam_step(flow.params, grad_flow, flow.adam, hp);

    std::snprintf(row, sizeof(row), "%d,%.9g,%.9g,%.9g,%.9g,%.9g", step, batch.class_loss,
                  batch.sparsity_loss, batch.cov_loss, batch.ram_loss, batch.total);
    loss_csv << row << "\n";

    out.rgb = rgb.params;
    out.flow = flow.params;
    out.adam_rgb = rgb.adam;
    out.adam_flow = flow.adam;
    out.step = step;
    if (step % cfg.checkpoint_every == 0)
      save_training_checkpoint(cfg.resolved_checkpoint(), out);
  }

  if (cfg.steps == 0) {
    out.rgb = rgb.params;
    out.flow = flow.params;
    out.adam_rgb = rgb.adam;
    out.adam_flow = flow.adam;
    out.step = start_step;
  }
  save_training_checkpoint(cfg.resolved_checkpoint(), out);
  return out;
}

InferenceOutput run_inference(const std::vector<VideoRecord>& videos, const ModelParams& rgb,
                              const ModelParams& flow, const LocalizeOptions& opt) {
  InferenceOutput out;
  for (const VideoRecord& rec : videos) {
    VideoLocalization loc = localize_video(rec.rgb, rec.flow, rgb, flow, opt);
    for (const Proposal& p : loc.detections)
      out.detections.push_back(to_detection(p, rec.id, rec.segment_duration));
    out.predicted_labels[rec.id] = loc.predicted_labels;
  }
  return out;
}

std::string detections_csv(const std::vector<Detection>& detections) {
  std::ostringstream os;
  os << "video,class,start,end,score\n";
  char row[256];
  for (const Detection& d : detections) {
    std::snprintf(row, sizeof(row), "%s,%d,%.3f,%.3f,%.6f", d.video_id.c_str(), d.class_id,
                  d.start, d.end, d.score);
    os << row << "\n";
  }
  return os.str();
}

std::vector<Detection> parse_detections_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "video,class,start,end,score")
    throw std::runtime_error("detections CSV: missing or unexpected header");
  std::vector<Detection> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Detection d;
    std::istringstream ls(line);
    std::string field;
    try {
      if (!std::getline(ls, d.video_id, ',')) throw std::invalid_argument("missing video");
      if (!std::getline(ls, field, ',')) throw std::invalid_argument("missing class");
      d.class_id = std::stoi(field);
      if (!std::getline(ls, field, ',')) throw std::invalid_argument("missing start");
      d.start = std::stod(field);
      if (!std::getline(ls, field, ',')) throw std::invalid_argument("missing end");
      d.end = std::stod(field);
      if (!std::getline(ls, field, ',')) throw std::invalid_argument("missing score");
      d.score = std::stod(field);
    } catch (const std::exception& e) {
      throw std::runtime_error("detections CSV line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::string labels_json(const std::map<std::string, std::vector<int>>& predicted) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, labels] : predicted) j[id] = labels;
  return j.dump(2) + "\n";
}

double label_set_accuracy(const std::vector<VideoRecord>& videos,
                          const std::map<std::string, std::vector<int>>& predicted) {
  if (videos.empty()) return 0.0;
  int exact = 0;
  for (const VideoRecord& rec : videos) {
    std::vector<int> truth;
    for (int label : rec.annotation.weak_labels)
      if (label != kEndLabel) truth.push_back(label);
    auto it = predicted.find(rec.id);
    const std::vector<int> empty;
    const std::vector<int>& pred = it == predicted.end() ? empty : it->second;
    if (pred == truth) ++exact;
  }
  return static_cast<double>(exact) / static_cast<double>(videos.size());
}

std::vector<GtInstance> all_instances(const std::vector<VideoRecord>& videos) {
  std::vector<GtInstance> out;
  for (const VideoRecord& rec : videos)
    out.insert(out.end(), rec.annotation.instances.begin(), rec.annotation.instances.end());
  return out;
}

std::map<std::string, double> video_durations(const std::vector<VideoRecord>& videos) {
  std::map<std::string, double> out;
  for (const VideoRecord& rec : videos) out[rec.id] = rec.duration;
  return out;
}

}  // namespace star
