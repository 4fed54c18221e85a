#pragma once

#include <map>
#include <string>
#include <vector>

#include "star/tensor.hpp"

namespace star {

// Op set closed over everything the model needs; see Tape for shape rules.
enum class OpKind {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kConcat,
  kSlice,
  kSum,
  kMean,
  kSigmoid,
  kTanh,
  kSoftmax,
  kLog,
  kHinge,
  kL1Norm,
  kL2Squared,
};

const char* op_name(OpKind kind);

// The differentiable ops, in a fixed order (used by the check command/suite).
const std::vector<OpKind>& differentiable_ops();

using Bindings = std::map<std::string, Tensor>;

class Tape;

// Every node's output value, materialized by Tape::eval.
class Values {
 public:
  const Tensor& at(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  // Outputs marked by name on the tape.
  const Tensor& named(const std::string& name) const;
  std::map<std::string, Tensor> named_all() const;

 private:
  friend class Tape;
  std::vector<Tensor> nodes_;
  const Tape* tape_ = nullptr;
};

// Reverse-mode gradient tape over rank<=2 tensors. Topological order equals
// append order; the backward pass walks nodes in strict reverse append order.
//
// Shape rules:
//   matmul: (m*k, k*n)->m*n, (m*k, vec k)->vec m, (vec m, m*n)->vec n,
//           (vec n, vec n)->scalar
//   add:    same shape; (m*n, vec n) broadcast over rows; scalar broadcast
//   mul:    same shape; scalar broadcast
//   concat: rank<=1 operands -> vector; slice: vector -> vector
//   sum/mean/l1_norm/l2_squared: any -> scalar; softmax: vector -> vector
//   sigmoid/tanh/log/hinge: elementwise
// log clamps its argument at 1e-12. Non-finite values are an error surfaced
// by eval, never propagated.
class Tape {
 public:
  using NodeId = int;

  NodeId input(const std::string& name, Shape shape);
  NodeId constant(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId concat(const std::vector<NodeId>& parts);
  NodeId slice(NodeId a, Index offset, Index extent);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  NodeId softmax(NodeId a);
  NodeId log(NodeId a);
  NodeId hinge(NodeId a);  // max(x, 0) elementwise
  NodeId l1_norm(NodeId a);
  NodeId l2_squared(NodeId a);

  // Composites over the closed op set.
  NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }
  NodeId scale(NodeId a, Scalar s) { return mul(a, constant(Tensor::scalar(s))); }

  void mark_output(const std::string& name, NodeId id);

  const Shape& shape(NodeId id) const;
  int size() const { return static_cast<int>(nodes_.size()); }
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }
  const std::vector<std::string>& input_names() const { return input_names_; }

  // Deterministic: identical bindings produce bit-identical outputs.
  Values eval(const Bindings& bindings) const;

  // Gradient of the scalar node `output` w.r.t. every input, keyed by input
  // name; each gradient has the input's shape. Requires the Values from eval.
  std::map<std::string, Tensor> backward(NodeId output, const Values& values) const;

  // Test hook: corrupts the sigmoid gradient rule so checks must fail.
  void inject_gradient_fault(bool on) { gradient_fault_ = on; }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Shape shape;
    std::string name;      // kInput
    Tensor value;          // kConstant
    Index offset = 0;      // kSlice
    Index extent = 0;      // kSlice
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const;
  [[noreturn]] void fail(NodeId id, const std::string& msg) const;
  Tensor eval_node(NodeId id, const Node& n, const Values& v) const;
  void backward_node(NodeId id, const Node& n, const Values& v, const Tensor& grad,
                     std::vector<Tensor>& adjoint) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> outputs_;
  std::vector<std::string> input_names_;
  bool gradient_fault_ = false;
};

// Finite-difference verification of the tape's backward pass.
struct GradReport {
  std::map<std::string, Scalar> max_rel_err;  // per checked input
  Scalar worst = 0.0;
  Scalar tolerance = 0.0;
  Scalar step = 0.0;
  bool pass = false;
};

// Central differences (f(x+h)-f(x-h))/2h per scalar coordinate of each named
// input. Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
GradReport check_gradients(const Tape& tape, Tape::NodeId output, const Bindings& bindings,
                           const std::vector<std::string>& names, Scalar step, Scalar tol);

// Checks every input on the tape.
GradReport check_gradients(const Tape& tape, Tape::NodeId output, const Bindings& bindings,
                           Scalar step, Scalar tol);

}  // namespace star
