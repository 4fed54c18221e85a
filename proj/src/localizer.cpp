#include "star/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace star {

namespace {

Scalar sigmoid(Scalar x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (1.0 + e);
}

bool proposal_before(const Proposal& a, const Proposal& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.start != b.start) return a.start < b.start;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.end != b.end) return a.end < b.end;
  return static_cast<int>(a.stream) < static_cast<int>(b.stream);
}

Scalar segment_iou(const Proposal& a, const Proposal& b) {
  return interval_iou(static_cast<double>(a.start), static_cast<double>(a.end + 1),
                      static_cast<double>(b.start), static_cast<double>(b.end + 1));
}

}  // namespace

const char* stream_name(Stream s) {
  switch (s) {
    case Stream::kRgb: return "rgb";
    case Stream::kFlow: return "flow";
    case Stream::kFused: return "fused";
  }
  return "?";
}

Vector class_weights(const std::vector<StepTrace>& traces, const ModelParams& params, int t,
                     int c) {
  if (t < 0 || t >= static_cast<int>(traces.size()))
    throw std::out_of_range("class_weights: step " + std::to_string(t) + " out of range");
  if (c < 0 || c >= params.dims.num_classes)
    throw std::out_of_range("class_weights: class " + std::to_string(c) + " out of range");
  const ModelDims& dims = params.dims;
  const StepTrace& step = traces[static_cast<std::size_t>(t)];

  Tape tape;
  ParamNodes p = add_param_inputs(tape, dims);
  Tape::NodeId x = tape.input("x", {dims.feature_dim});
  Tape::NodeId ram = tape.input("ram", {});
  Tape::NodeId y_in = tape.input("y_in", {dims.num_classes});
  Tape::NodeId h_prev = tape.input("h_prev", {dims.hidden_dim});
  Tape::NodeId cell_prev = tape.input("cell_prev", {dims.hidden_dim});
  RecurrenceNodes rec = append_recurrence(tape, dims, p, x, ram, y_in, h_prev, cell_prev);
  Tape::NodeId target = tape.sum(tape.slice(rec.logits, c, 1));

  Bindings b = params.as_bindings();
  b["x"] = Tensor::from_vector(step.x);
  b["ram"] = Tensor::scalar(step.ram);
  b["y_in"] = Tensor::one_hot(dims.num_classes, step.y_prev);
  const bool first = t == 0;
  b["h_prev"] = Tensor::from_vector(first ? Vector(Vector::Zero(dims.hidden_dim))
                                          : traces[static_cast<std::size_t>(t - 1)].h);
  b["cell_prev"] = Tensor::from_vector(first ? Vector(Vector::Zero(dims.hidden_dim))
                                             : traces[static_cast<std::size_t>(t - 1)].cell);
  Values v = tape.eval(b);
  return Vector(tape.backward(target, v).at("x").vec());
}

Vector st_gradcam(const Vector& w, const Tensor& features) {
  if (features.rank() != 2 || features.shape()[1] != w.size())
    throw std::invalid_argument("st_gradcam: weight length " + std::to_string(w.size()) +
                                " does not match features " + shape_str(features.shape()));
  return features.mat() * w;
}

Vector fuse_attention(const Vector& alpha_rgb, const Vector& alpha_flow, Scalar lambda) {
  if (alpha_rgb.size() != alpha_flow.size())
    throw std::invalid_argument("fuse_attention: length mismatch");
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("fuse_attention: lambda must be in [0, 1]");
  return lambda * alpha_rgb + (1.0 - lambda) * alpha_flow;
}

std::vector<Proposal> generate_proposals(const Vector& fused_alpha, const Vector& xi,
                                         const std::vector<Scalar>& thresholds, int class_id,
                                         int step, Stream stream) {
  if (thresholds.empty()) throw std::invalid_argument("generate_proposals: no thresholds");
  for (Scalar t : thresholds)
    if (t <= 0.0 || t >= 1.0)
      throw std::invalid_argument("generate_proposals: thresholds must lie in (0, 1)");
  if (fused_alpha.size() != xi.size())
    throw std::invalid_argument("generate_proposals: signal length mismatch");

  const Index n = fused_alpha.size();
  Vector signal(n);
  for (Index i = 0; i < n; ++i) signal[i] = fused_alpha[i] * sigmoid(xi[i]);

  std::map<std::pair<Index, Index>, Scalar> best;  // interval -> max score
  for (Scalar theta : thresholds) {
    Index i = 0;
    while (i < n) {
      if (signal[i] > theta) {
        Index j = i;
        Scalar sum = 0.0;
        while (j < n && signal[j] > theta) sum += signal[j++];
        const Scalar score = sum / static_cast<Scalar>(j - i);
        auto [it, inserted] = best.try_emplace({i, j - 1}, score);
        if (!inserted) it->second = std::max(it->second, score);
        i = j;
      } else {
        ++i;
      }
    }
  }

  std::vector<Proposal> out;
  for (const auto& [interval, score] : best)
    out.push_back({class_id, interval.first, interval.second, score, step, stream});
  return out;
}

std::vector<Proposal> nms(std::vector<Proposal> proposals, Scalar iou_thresh) {
  if (iou_thresh <= 0.0 || iou_thresh > 1.0)
    throw std::invalid_argument("nms: iou_thresh must be in (0, 1]");
  std::sort(proposals.begin(), proposals.end(), proposal_before);
  std::vector<Proposal> kept;
  for (const Proposal& p : proposals) {
    bool suppressed = false;
    for (const Proposal& k : kept) {
      if (k.class_id != p.class_id) continue;
      if (segment_iou(k, p) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

VideoLocalization localize_video(const Tensor& rgb_features, const Tensor& flow_features,
                                 const ModelParams& rgb_params, const ModelParams& flow_params,
                                 const LocalizeOptions& opt) {
  if (rgb_params.dims != flow_params.dims)
    throw std::invalid_argument("localize_video: stream dims differ");
  const ModelDims& dims = rgb_params.dims;
  const int end_class = static_cast<int>(dims.end_class());
  const int t_max = opt.t_max > 0 ? opt.t_max : static_cast<int>(dims.num_classes);

  VideoLocalization out;
  out.rgb_unroll = unroll(rgb_features, std::nullopt, t_max, rgb_params, opt.model);
  out.flow_unroll = unroll(flow_features, std::nullopt, t_max, flow_params, opt.model);

  // First step at which each stream emitted each class; END emits nothing.
  auto first_emission = [&](const UnrollResult& u) {
    std::map<int, int> step_of;
    for (std::size_t t = 0; t < u.emitted.size(); ++t)
      if (u.emitted[t] != end_class) step_of.try_emplace(u.emitted[t], static_cast<int>(t));
    return step_of;
  };
  const std::map<int, int> rgb_step = first_emission(out.rgb_unroll);
  const std::map<int, int> flow_step = first_emission(out.flow_unroll);

  std::set<int> classes;
  for (const auto& [c, t] : rgb_step) classes.insert(c);
  for (const auto& [c, t] : flow_step) classes.insert(c);
  out.predicted_labels.assign(classes.begin(), classes.end());

  // Video-level class probability, streams fused 1:1.
  auto best_prob = [&](const UnrollResult& u, int c) {
    Scalar best = 0.0;
    for (const StepTrace& s : u.steps) best = std::max(best, s.y_prob[c]);
    return best;
  };

  for (int c : classes) {
    const auto rit = rgb_step.find(c);
    const auto fit = flow_step.find(c);
    const bool in_rgb = rit != rgb_step.end();
    const bool in_flow = fit != flow_step.end();

    Vector fused;
    if (in_rgb && in_flow) {
      fused = fuse_attention(out.rgb_unroll.steps[static_cast<std::size_t>(rit->second)].alpha,
                             out.flow_unroll.steps[static_cast<std::size_t>(fit->second)].alpha,
                             opt.lambda);
    } else if (in_rgb) {
      fused = out.rgb_unroll.steps[static_cast<std::size_t>(rit->second)].alpha;
    } else {
      fused = out.flow_unroll.steps[static_cast<std::size_t>(fit->second)].alpha;
    }

    const Scalar confidence =
        0.5 * (best_prob(out.rgb_unroll, c) + best_prob(out.flow_unroll, c));
    const bool single_stream = in_rgb != in_flow;

    auto add_stream = [&](const UnrollResult& u, int t, const ModelParams& params,
                          const Tensor& features, Stream tag) {
      const Vector w = class_weights(u.steps, params, t, c);
      const Vector xi = st_gradcam(w, features);
      std::vector<Proposal> props = generate_proposals(
          fused, xi, opt.thresholds, c, t, single_stream ? Stream::kFused : tag);
      for (Proposal& p : props) {
        p.score *= confidence;
        out.candidate_pool.push_back(p);
      }
    };
    if (in_rgb) add_stream(out.rgb_unroll, rit->second, rgb_params, rgb_features, Stream::kRgb);
    if (in_flow)
      add_stream(out.flow_unroll, fit->second, flow_params, flow_features, Stream::kFlow);
  }

  out.detections = nms(out.candidate_pool, opt.nms_iou);
  return out;
}

Detection to_detection(const Proposal& p, const std::string& video_id, double segment_duration) {
  Detection d;
  d.video_id = video_id;
  d.class_id = p.class_id;
  d.start = static_cast<double>(p.start) * segment_duration;
  d.end = static_cast<double>(p.end + 1) * segment_duration;
  d.score = p.score;
  return d;
}

}  // namespace star
