#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "star/tape.hpp"
#include "star/tensor.hpp"

namespace star {

// The last class index is the reserved END label that terminates sequences.
struct ModelDims {
  Index n_segments = 0;     // N
  Index feature_dim = 0;    // K
  Index hidden_dim = 0;     // H
  Index attention_dim = 0;  // A
  Index num_classes = 0;    // C, including END

  Index end_class() const { return num_classes - 1; }
  Index lstm_input_dim() const { return feature_dim + num_classes + 1; }
  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

// Ablation switches. Disabling coverage forces the gate to 1; disabling the
// repetition head feeds 0 in place of its value.
struct ModelOptions {
  bool coverage = true;
  bool ram = true;
  bool operator==(const ModelOptions&) const = default;
};

// All trainable tensors of one stream, keyed by fixed names:
//   W_alpha [H x A], U_alpha [K x A], v_alpha [A], Z [N], u_cov [H], w_r [],
//   W_x [K+C+1 x 4H], W_h [H x 4H], b_lstm [4H], W_o [C x H]
// Stored in the orientation the forward pass consumes; W_o rows are classes.
struct ModelParams {
  ModelDims dims;
  std::map<std::string, Tensor> tensors;

  static const std::vector<std::string>& names();
  const Tensor& at(const std::string& name) const { return tensors.at(name); }
  Tensor& at(const std::string& name) { return tensors.at(name); }
  Bindings as_bindings() const { return {tensors.begin(), tensors.end()}; }
};

// Glorot-uniform weights, zero biases, forget-gate bias 1. Z and w_r start at
// zero: the coverage offset i - sum(alpha*k) is unnormalized, so any sizable
// Z saturates the gate, and w_r scales sum(alpha) ~ N/2 into the LSTM input.
ModelParams init_params(const ModelDims& dims, std::uint64_t seed);

// Per-recurrent-step record extracted from an evaluated graph.
struct StepTrace {
  Vector alpha;       // assembly weights, each in (0,1)
  Vector cov;         // coverage gates
  Vector energy_hat;  // gated energies; alpha = sigmoid(energy_hat)
  Vector x;           // assembled instance-pattern
  Scalar ram = 0.0;   // repetition head value
  Vector h, cell;
  Vector logits, y_prob;
  int y_prev = 0;     // label fed at this step (END acts as start token)
};

// Node ids of one recurrent step inside a tape.
struct StepNodes {
  Tape::NodeId alpha, cov, energy, x, ram, h, cell, logits, y_prob;
};

struct ParamNodes {
  std::map<std::string, Tape::NodeId> ids;
  Tape::NodeId at(const std::string& name) const { return ids.at(name); }
};

// Declares one tape input per parameter tensor.
ParamNodes add_param_inputs(Tape& tape, const ModelDims& dims);

// Attention assembly for one step: coverage gate, gated energies, sigmoid
// assembly weights, assembled feature and repetition value.
struct AttentionNodes {
  Tape::NodeId alpha, cov, energy, x, ram;
};
AttentionNodes append_attention(Tape& tape, const ModelDims& dims, const ModelOptions& opt,
                                const ParamNodes& params, Tape::NodeId features,
                                Tape::NodeId h_prev, Tape::NodeId alpha_prev);

// LSTM cell over concat(x, onehot(y_prev), ram) plus the class head.
struct RecurrenceNodes {
  Tape::NodeId h, cell, logits, y_prob;
};
RecurrenceNodes append_recurrence(Tape& tape, const ModelDims& dims, const ParamNodes& params,
                                  Tape::NodeId x, Tape::NodeId ram, Tape::NodeId y_prev_onehot,
                                  Tape::NodeId h_prev, Tape::NodeId cell_prev);

StepNodes append_step(Tape& tape, const ModelDims& dims, const ModelOptions& opt,
                      const ParamNodes& params, Tape::NodeId features, Tape::NodeId h_prev,
                      Tape::NodeId cell_prev, Tape::NodeId alpha_prev,
                      Tape::NodeId y_prev_onehot);

// T teacher-forced steps. Inputs: "S" [N x K], "y_in_<t>" one-hot [C] for
// t = 1..T, plus one input per parameter. Step 1 starts from zero state and
// zero previous attention.
struct UnrollGraph {
  Tape tape;
  ModelDims dims;
  ModelOptions options;
  std::vector<StepNodes> steps;
};
UnrollGraph build_unroll_graph(const ModelDims& dims, const ModelOptions& opt, int T);

// Single step with explicit state inputs "h_prev", "cell_prev", "alpha_prev",
// "y_in"; drives greedy decoding.
struct StepGraph {
  Tape tape;
  ModelDims dims;
  ModelOptions options;
  StepNodes step;
};
StepGraph build_step_graph(const ModelDims& dims, const ModelOptions& opt);

// Value-level operations (each evaluates a small graph).
struct AttentionResult {
  Vector alpha, cov;
  Vector x;
  Scalar ram;
};
AttentionResult attention_step(const Tensor& features, const Vector& h_prev,
                               const Vector& alpha_prev, const ModelParams& params,
                               const ModelOptions& opt = {});

struct RecurrenceResult {
  Vector h, cell, logits, y_prob;
};
RecurrenceResult recurrent_step(const Vector& h_prev, const Vector& cell_prev, int y_prev_index,
                                const Vector& x, Scalar ram, const ModelParams& params);

// Teacher forcing when `labels` is given (must end with END); greedy argmax
// feeding otherwise, stopping at the first END emission or after t_max steps.
struct UnrollResult {
  std::vector<StepTrace> steps;
  std::vector<int> emitted;  // per step: forced label or greedy emission
  bool truncated = false;    // t_max reached without an END emission
};
UnrollResult unroll(const Tensor& features, const std::optional<std::vector<int>>& labels,
                    int t_max, const ModelParams& params, const ModelOptions& opt = {});

StepTrace extract_trace(const Values& values, const StepNodes& nodes, int y_prev);

// Checkpoint file: magic "STARCKPT1", dims as five u64, then each named
// tensor as (u64 name length, name bytes, u64 rank, u64 extents, f64 data),
// all little-endian.
void save_checkpoint(const std::filesystem::path& path, const ModelDims& dims,
                     const std::map<std::string, Tensor>& tensors);
struct Checkpoint {
  ModelDims dims;
  std::map<std::string, Tensor> tensors;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace star
