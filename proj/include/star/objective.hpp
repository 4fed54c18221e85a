#pragma once

#include <vector>

#include "star/model.hpp"

namespace star {

struct Hyperparams {
  Scalar beta = 1e-4;    // sparsity weight
  Scalar gamma = 1e-4;   // coverage weight
  Scalar delta = 1e-6;   // repetition-alignment weight
  Scalar lr = 1e-4;
  Scalar adam_b1 = 0.9;
  Scalar adam_b2 = 0.999;
  Scalar adam_eps = 1e-8;
  Scalar lambda = 0.5;   // rgb/flow attention fusion ratio, used at inference
  void validate() const;
};

struct LossBreakdown {
  Scalar class_loss = 0.0;
  Scalar sparsity_loss = 0.0;
  Scalar cov_loss = 0.0;
  Scalar ram_loss = 0.0;
  Scalar total = 0.0;
};

// Value-level loss terms over recorded traces. Each has a graph twin in
// append_loss below; the two agree to rounding and are cross-checked in tests.

// -(1/T) sum_t log y_prob[label_t], teacher-forced traces.
Scalar classification_loss(const std::vector<StepTrace>& traces, const std::vector<int>& labels);

// (1/(T-1)) sum_{t>=2} max(0, sum_i(cumsum_i(alpha_t) - cumsum_i(alpha_{t-1}))).
Scalar coverage_loss(const std::vector<StepTrace>& traces);

// (1/2T) sum_t (count_t - ram_t)^2; counts include a 0 for the END step.
Scalar ram_loss(const std::vector<StepTrace>& traces, const std::vector<Scalar>& counts);

// sum_t sum_i |alpha_{t,i}| / (T*N).
Scalar sparsity_loss(const std::vector<StepTrace>& traces);

LossBreakdown compose_loss(Scalar class_l, Scalar sparsity_l, Scalar cov_l, Scalar ram_l,
                           const Hyperparams& hp);

// Appends the four-term objective to a teacher-forced unroll graph. Adds
// inputs "y_target_<t>" (one-hot [C]) and "counts" [T]; marks outputs
// "loss/class", "loss/sparsity", "loss/cov", "loss/ram", "loss/total".
struct LossNodes {
  Tape::NodeId class_loss, sparsity_loss, cov_loss, ram_loss, total;
};
LossNodes append_loss(UnrollGraph& graph, const Hyperparams& hp);

// One video's worth of supervision: the model-indexed label sequence
// (ascending classes then END) and per-step occurrence counts.
struct TrainingExample {
  Tensor features;           // [N x K]
  std::vector<int> labels;   // ends with END
  std::vector<Scalar> counts;
};

// Bindings for one teacher-forced example against a graph with append_loss.
Bindings loss_bindings(const ModelDims& dims, const ModelParams& params,
                       const TrainingExample& ex);

// Batch objective: teacher-forces every example and averages the four terms.
// Differentiable end to end through the same graphs the trainer uses.
LossBreakdown total_loss(const std::vector<TrainingExample>& batch, const ModelParams& params,
                         const Hyperparams& hp, const ModelOptions& opt = {});

// Adam with bias correction. Moments are allocated lazily on first use.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  long long t = 0;
};
void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               const Hyperparams& hp);

}  // namespace star
