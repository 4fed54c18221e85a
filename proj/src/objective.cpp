#include "star/objective.hpp"

#include <cmath>
#include <stdexcept>

namespace star {

namespace {

constexpr Scalar kLogClamp = 1e-12;  // must match the tape's log op

Tensor lower_triangular_ones(Index n) {
  Tensor t = Tensor::zeros({n, n});
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) t.mat()(i, j) = 1.0;
  return t;
}

void require_traces(const std::vector<StepTrace>& traces, const char* who) {
  if (traces.empty()) throw std::invalid_argument(std::string(who) + ": no traces");
}

}  // namespace

void Hyperparams::validate() const {
  if (beta < 0 || gamma < 0 || delta < 0)
    throw std::invalid_argument("hyperparams: loss weights must be >= 0");
  if (lr <= 0) throw std::invalid_argument("hyperparams: lr must be > 0");
  if (adam_b1 < 0 || adam_b1 >= 1 || adam_b2 < 0 || adam_b2 >= 1)
    throw std::invalid_argument("hyperparams: adam betas must lie in [0, 1)");
  if (adam_eps <= 0) throw std::invalid_argument("hyperparams: adam_eps must be > 0");
  if (lambda < 0 || lambda > 1) throw std::invalid_argument("hyperparams: lambda must be in [0, 1]");
}

Scalar classification_loss(const std::vector<StepTrace>& traces, const std::vector<int>& labels) {
  require_traces(traces, "classification_loss");
  if (labels.size() != traces.size())
    throw std::invalid_argument("classification_loss: one label per trace required");
  Scalar sum = 0.0;
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const int y = labels[t];
    if (y < 0 || y >= traces[t].y_prob.size())
      throw std::out_of_range("classification_loss: label " + std::to_string(y) + " out of range");
    sum += -std::log(std::max(traces[t].y_prob[y], kLogClamp));
  }
  return sum / static_cast<Scalar>(traces.size());
}

Scalar coverage_loss(const std::vector<StepTrace>& traces) {
  require_traces(traces, "coverage_loss");
  const std::size_t T = traces.size();
  if (T == 1) return 0.0;
  Scalar sum = 0.0;
  for (std::size_t t = 1; t < T; ++t) {
    Scalar inner = 0.0;
    Scalar cum_now = 0.0, cum_prev = 0.0;
    for (Index i = 0; i < traces[t].alpha.size(); ++i) {
      cum_now += traces[t].alpha[i];
      cum_prev += traces[t - 1].alpha[i];
      inner += cum_now - cum_prev;
    }
    sum += std::max(0.0, inner);
  }
  return sum / static_cast<Scalar>(T - 1);
}

Scalar ram_loss(const std::vector<StepTrace>& traces, const std::vector<Scalar>& counts) {
  require_traces(traces, "ram_loss");
  if (counts.size() != traces.size())
    throw std::invalid_argument("ram_loss: counts length " + std::to_string(counts.size()) +
                                " != steps " + std::to_string(traces.size()));
  Scalar sum = 0.0;
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const Scalar d = counts[t] - traces[t].ram;
    sum += d * d;
  }
  return sum / (2.0 * static_cast<Scalar>(traces.size()));
}

Scalar sparsity_loss(const std::vector<StepTrace>& traces) {
  require_traces(traces, "sparsity_loss");
  Scalar sum = 0.0;
  Index n = 0;
  for (const StepTrace& t : traces) {
    sum += t.alpha.array().abs().sum();
    n += t.alpha.size();
  }
  return sum / static_cast<Scalar>(n);
}

LossBreakdown compose_loss(Scalar class_l, Scalar sparsity_l, Scalar cov_l, Scalar ram_l,
                           const Hyperparams& hp) {
  LossBreakdown b;
  b.class_loss = class_l;
  b.sparsity_loss = sparsity_l;
  b.cov_loss = cov_l;
  b.ram_loss = ram_l;
  b.total = class_l + hp.beta * sparsity_l + hp.gamma * cov_l + hp.delta * ram_l;
  return b;
}

LossNodes append_loss(UnrollGraph& graph, const Hyperparams& hp) {
  hp.validate();
  Tape& tape = graph.tape;
  const int T = static_cast<int>(graph.steps.size());
  const Index N = graph.dims.n_segments;
  const Index C = graph.dims.num_classes;

  LossNodes out;

  // classification: -(1/T) sum_t log(y_prob . y_target)
  Tape::NodeId class_sum = -1;
  for (int t = 1; t <= T; ++t) {
    Tape::NodeId target = tape.input("y_target_" + std::to_string(t), {C});
    Tape::NodeId picked = tape.matmul(graph.steps[static_cast<std::size_t>(t - 1)].y_prob, target);
    Tape::NodeId nll = tape.scale(tape.log(picked), -1.0);
    class_sum = t == 1 ? nll : tape.add(class_sum, nll);
  }
  out.class_loss = tape.scale(class_sum, 1.0 / T);

  // sparsity: mean |alpha| over all steps and segments
  std::vector<Tape::NodeId> alphas;
  for (const StepNodes& s : graph.steps) alphas.push_back(s.alpha);
  out.sparsity_loss = tape.scale(tape.l1_norm(tape.concat(alphas)), 1.0 / (T * N));

  // coverage: hinged gain of prefix attention mass between consecutive steps
  if (T == 1) {
    out.cov_loss = tape.constant(Tensor::scalar(0.0));
  } else {
    Tape::NodeId tri = tape.constant(lower_triangular_ones(N));
    std::vector<Tape::NodeId> cums;
    for (const StepNodes& s : graph.steps) cums.push_back(tape.matmul(tri, s.alpha));
    Tape::NodeId cov_sum = -1;
    for (int t = 2; t <= T; ++t) {
      Tape::NodeId gain = tape.hinge(tape.sum(tape.sub(cums[static_cast<std::size_t>(t - 1)],
                                                       cums[static_cast<std::size_t>(t - 2)])));
      cov_sum = t == 2 ? gain : tape.add(cov_sum, gain);
    }
    out.cov_loss = tape.scale(cov_sum, 1.0 / (T - 1));
  }

  // repetition alignment: (1/2T) || counts - ram ||^2
  std::vector<Tape::NodeId> rams;
  for (const StepNodes& s : graph.steps) rams.push_back(s.ram);
  Tape::NodeId counts = tape.input("counts", {static_cast<Index>(T)});
  out.ram_loss = tape.scale(tape.l2_squared(tape.sub(counts, tape.concat(rams))), 1.0 / (2.0 * T));

  out.total = tape.add(
      tape.add(out.class_loss, tape.scale(out.sparsity_loss, hp.beta)),
      tape.add(tape.scale(out.cov_loss, hp.gamma), tape.scale(out.ram_loss, hp.delta)));

  tape.mark_output("loss/class", out.class_loss);
  tape.mark_output("loss/sparsity", out.sparsity_loss);
  tape.mark_output("loss/cov", out.cov_loss);
  tape.mark_output("loss/ram", out.ram_loss);
  tape.mark_output("loss/total", out.total);
  return out;
}

Bindings loss_bindings(const ModelDims& dims, const ModelParams& params,
                       const TrainingExample& ex) {
  const int T = static_cast<int>(ex.labels.size());
  Bindings b = params.as_bindings();
  b["S"] = ex.features;
  for (int t = 1; t <= T; ++t) {
    const int fed = t == 1 ? static_cast<int>(dims.end_class())
                           : ex.labels[static_cast<std::size_t>(t - 2)];
    b["y_in_" + std::to_string(t)] = Tensor::one_hot(dims.num_classes, fed);
    b["y_target_" + std::to_string(t)] =
        Tensor::one_hot(dims.num_classes, ex.labels[static_cast<std::size_t>(t - 1)]);
  }
  Tensor counts = Tensor::zeros({static_cast<Index>(T)});
  if (ex.counts.size() != ex.labels.size())
    throw std::invalid_argument("training example: counts length != labels length");
  for (int t = 0; t < T; ++t) counts[t] = ex.counts[static_cast<std::size_t>(t)];
  b["counts"] = counts;
  return b;
}

LossBreakdown total_loss(const std::vector<TrainingExample>& batch, const ModelParams& params,
                         const Hyperparams& hp, const ModelOptions& opt) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  Scalar class_l = 0, spa_l = 0, cov_l = 0, ram_l = 0;
  for (const TrainingExample& ex : batch) {
    UnrollGraph g = build_unroll_graph(params.dims, opt, static_cast<int>(ex.labels.size()));
    LossNodes nodes = append_loss(g, hp);
    Values v = g.tape.eval(loss_bindings(params.dims, params, ex));
    class_l += v.at(nodes.class_loss).value();
    spa_l += v.at(nodes.sparsity_loss).value();
    cov_l += v.at(nodes.cov_loss).value();
    ram_l += v.at(nodes.ram_loss).value();
  }
  const Scalar m = static_cast<Scalar>(batch.size());
  return compose_loss(class_l / m, spa_l / m, cov_l / m, ram_l / m, hp);
}

void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               const Hyperparams& hp) {
  hp.validate();
  state.t += 1;
  const Scalar b1 = hp.adam_b1, b2 = hp.adam_b2;
  const Scalar corr1 = 1.0 - std::pow(b1, static_cast<Scalar>(state.t));
  const Scalar corr2 = 1.0 - std::pow(b2, static_cast<Scalar>(state.t));
  for (auto& [name, p] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adam_step: missing gradient for " + name);
    const Tensor& g = git->second;
    if (!g.same_shape(p))
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
    Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    if (!m.same_shape(p) || !v.same_shape(p))
      throw std::invalid_argument("adam_step: moment shape mismatch for " + name);
    m.array() = b1 * m.array() + (1.0 - b1) * g.array();
    v.array() = b2 * v.array() + (1.0 - b2) * g.array().square();
    p.array() -= hp.lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + hp.adam_eps);
  }
}

}  // namespace star
