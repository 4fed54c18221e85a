#include "star/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace star {

namespace {

constexpr Scalar kLogClamp = 1e-12;

// Keeps sigmoid outputs strictly inside (0,1) even at saturation.
Scalar stable_sigmoid(Scalar x) {
  Scalar y;
  if (x >= 0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const Scalar e = std::exp(x);
    y = e / (1.0 + e);
  }
  const Scalar lo = 1e-300;
  const Scalar hi = 1.0 - 1e-16;
  return std::min(std::max(y, lo), hi);
}

bool is_scalar(const Shape& s) { return s.empty(); }
bool is_vector(const Shape& s) { return s.size() == 1; }
bool is_matrix(const Shape& s) { return s.size() == 2; }

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLog: return "log";
    case OpKind::kHinge: return "hinge";
    case OpKind::kL1Norm: return "l1_norm";
    case OpKind::kL2Squared: return "l2_squared";
  }
  return "?";
}

const std::vector<OpKind>& differentiable_ops() {
  static const std::vector<OpKind> ops = {
      OpKind::kMatMul, OpKind::kAdd,     OpKind::kMul,  OpKind::kConcat,
      OpKind::kSlice,  OpKind::kSum,     OpKind::kMean, OpKind::kSigmoid,
      OpKind::kTanh,   OpKind::kSoftmax, OpKind::kLog,  OpKind::kHinge,
      OpKind::kL1Norm, OpKind::kL2Squared};
  return ops;
}

const Tensor& Values::named(const std::string& name) const {
  if (!tape_) throw std::logic_error("Values not produced by Tape::eval");
  auto it = tape_->outputs().find(name);
  if (it == tape_->outputs().end())
    throw std::out_of_range("no tape output named '" + name + "'");
  return at(it->second);
}

std::map<std::string, Tensor> Values::named_all() const {
  std::map<std::string, Tensor> out;
  if (!tape_) return out;
  for (const auto& [name, id] : tape_->outputs()) out.emplace(name, at(id));
  return out;
}

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("tape node id out of range");
  return nodes_[static_cast<std::size_t>(id)];
}

void Tape::fail(NodeId id, const std::string& msg) const {
  throw std::runtime_error("tape node " + std::to_string(id) + " (" +
                           op_name(node(id).kind) + "): " + msg);
}

const Shape& Tape::shape(NodeId id) const { return node(id).shape; }

Tape::NodeId Tape::input(const std::string& name, Shape shape) {
  if (name.empty()) throw std::invalid_argument("input name must be nonempty");
  for (const auto& n : nodes_)
    if (n.kind == OpKind::kInput && n.name == name)
      throw std::invalid_argument("duplicate input name '" + name + "'");
  input_names_.push_back(name);
  Node n;
  n.kind = OpKind::kInput;
  n.name = name;
  n.shape = std::move(shape);
  return push(std::move(n));
}

Tape::NodeId Tape::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  Shape out;
  if (is_matrix(sa) && is_matrix(sb) && sa[1] == sb[0]) {
    out = {sa[0], sb[1]};
  } else if (is_matrix(sa) && is_vector(sb) && sa[1] == sb[0]) {
    out = {sa[0]};
  } else if (is_vector(sa) && is_matrix(sb) && sa[0] == sb[0]) {
    out = {sb[1]};
  } else if (is_vector(sa) && is_vector(sb) && sa[0] == sb[0]) {
    out = {};
  } else {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " and " +
                                shape_str(sb));
  }
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.shape = std::move(out);
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  Shape out;
  if (sa == sb) {
    out = sa;
  } else if (is_scalar(sb)) {
    out = sa;
  } else if (is_scalar(sa)) {
    out = sb;
  } else if (is_matrix(sa) && is_vector(sb) && sa[1] == sb[0]) {
    out = sa;  // vector added to every row
  } else if (is_vector(sa) && is_matrix(sb) && sb[1] == sa[0]) {
    out = sb;
  } else {
    throw std::invalid_argument("add: incompatible shapes " + shape_str(sa) + " and " +
                                shape_str(sb));
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.shape = std::move(out);
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  Shape out;
  if (sa == sb) {
    out = sa;
  } else if (is_scalar(sb)) {
    out = sa;
  } else if (is_scalar(sa)) {
    out = sb;
  } else {
    throw std::invalid_argument("mul: incompatible shapes " + shape_str(sa) + " and " +
                                shape_str(sb));
  }
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.shape = std::move(out);
  return push(std::move(n));
}

Tape::NodeId Tape::concat(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Index total = 0;
  for (NodeId p : parts) {
    const Shape& s = shape(p);
    if (s.size() > 1)
      throw std::invalid_argument("concat: rank<=1 operands required, got " + shape_str(s));
    total += Tensor::num_elements(s);
  }
  Node n;
  n.kind = OpKind::kConcat;
  n.inputs = parts;
  n.shape = {total};
  return push(std::move(n));
}

Tape::NodeId Tape::slice(NodeId a, Index offset, Index extent) {
  const Shape& s = shape(a);
  if (!is_vector(s)) throw std::invalid_argument("slice: vector operand required");
  if (offset < 0 || extent <= 0 || offset + extent > s[0])
    throw std::invalid_argument("slice: range [" + std::to_string(offset) + ", " +
                                std::to_string(offset + extent) + ") outside " + shape_str(s));
  Node n;
  n.kind = OpKind::kSlice;
  n.inputs = {a};
  n.shape = {extent};
  n.offset = offset;
  n.extent = extent;
  return push(std::move(n));
}

Tape::NodeId Tape::softmax(NodeId a) {
  if (!is_vector(shape(a))) throw std::invalid_argument("softmax: vector operand required");
  Node n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {a};
  n.shape = shape(a);
  return push(std::move(n));
}

#define STAR_ELEMENTWISE(fn, op)                     \
  Tape::NodeId Tape::fn(NodeId a) {                  \
    Node n;                                          \
    n.kind = op;                                     \
    n.inputs = {a};                                  \
    n.shape = shape(a);                              \
    return push(std::move(n));                       \
  }

STAR_ELEMENTWISE(sigmoid, OpKind::kSigmoid)
STAR_ELEMENTWISE(tanh, OpKind::kTanh)
STAR_ELEMENTWISE(log, OpKind::kLog)
STAR_ELEMENTWISE(hinge, OpKind::kHinge)
#undef STAR_ELEMENTWISE

#define STAR_REDUCTION(fn, op)                       \
  Tape::NodeId Tape::fn(NodeId a) {                  \
    Node n;                                          \
    n.kind = op;                                     \
    n.inputs = {a};                                  \
    n.shape = {};                                    \
    return push(std::move(n));                       \
  }

STAR_REDUCTION(sum, OpKind::kSum)
STAR_REDUCTION(mean, OpKind::kMean)
STAR_REDUCTION(l1_norm, OpKind::kL1Norm)
STAR_REDUCTION(l2_squared, OpKind::kL2Squared)
#undef STAR_REDUCTION

void Tape::mark_output(const std::string& name, NodeId id) {
  node(id);  // range check
  outputs_[name] = id;
}

Tensor Tape::eval_node(NodeId id, const Node& n, const Values& v) const {
  auto in = [&](std::size_t k) -> const Tensor& { return v.at(n.inputs[k]); };
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
      throw std::logic_error("leaf evaluated as op");
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() == 2 && b.rank() == 2) {
        return Tensor::from_matrix(a.mat() * b.mat());
      } else if (a.rank() == 2 && b.rank() == 1) {
        return Tensor::from_vector(a.mat() * b.vec());
      } else if (a.rank() == 1 && b.rank() == 2) {
        return Tensor::from_vector(b.mat().transpose() * a.vec());
      }
      return Tensor::scalar(a.vec().dot(b.vec()));
    }
    case OpKind::kAdd: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        Tensor out = a;
        out.array() += b.array();
        return out;
      }
      if (b.rank() == 0) {
        Tensor out = a;
        out.array() += b.value();
        return out;
      }
      if (a.rank() == 0) {
        Tensor out = b;
        out.array() += a.value();
        return out;
      }
      const Tensor& m = a.rank() == 2 ? a : b;
      const Tensor& r = a.rank() == 2 ? b : a;
      Tensor out = m;
      out.mat().rowwise() += r.vec().transpose();
      return out;
    }
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        Tensor out = a;
        out.array() *= b.array();
        return out;
      }
      const Tensor& big = a.rank() == 0 ? b : a;
      const Tensor& s = a.rank() == 0 ? a : b;
      Tensor out = big;
      out.array() *= s.value();
      return out;
    }
    case OpKind::kConcat: {
      Tensor out = Tensor::zeros(n.shape);
      Index pos = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& p = in(k);
        out.vec().segment(pos, p.size()) = p.vec();
        pos += p.size();
      }
      return out;
    }
    case OpKind::kSlice: {
      return Tensor::from_vector(in(0).vec().segment(n.offset, n.extent));
    }
    case OpKind::kSum:
      return Tensor::scalar(in(0).array().sum());
    case OpKind::kMean:
      return Tensor::scalar(in(0).array().mean());
    case OpKind::kSigmoid: {
      Tensor out = in(0);
      for (Index i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(out[i]);
      return out;
    }
    case OpKind::kTanh: {
      Tensor out = in(0);
      out.array() = out.array().tanh();
      return out;
    }
    case OpKind::kSoftmax: {
      // max-subtraction for stability
      Vector x = in(0).vec();
      const Scalar m = x.maxCoeff();
      Vector e = (x.array() - m).exp();
      return Tensor::from_vector(e / e.sum());
    }
    case OpKind::kLog: {
      Tensor out = in(0);
      out.array() = out.array().max(kLogClamp).log();
      return out;
    }
    case OpKind::kHinge: {
      Tensor out = in(0);
      out.array() = out.array().max(0.0);
      return out;
    }
    case OpKind::kL1Norm:
      return Tensor::scalar(in(0).array().abs().sum());
    case OpKind::kL2Squared:
      return Tensor::scalar(in(0).array().square().sum());
  }
  fail(id, "unhandled op");
}

Values Tape::eval(const Bindings& bindings) const {
  Values v;
  v.tape_ = this;
  v.nodes_.resize(nodes_.size());
  for (NodeId id = 0; id < size(); ++id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::kInput) {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) fail(id, "unbound input '" + n.name + "'");
      if (it->second.shape() != n.shape)
        fail(id, "binding '" + n.name + "' has shape " + shape_str(it->second.shape()) +
                     ", tape expects " + shape_str(n.shape));
      if (!it->second.all_finite()) fail(id, "non-finite value bound to '" + n.name + "'");
      v.nodes_[static_cast<std::size_t>(id)] = it->second;
      continue;
    }
    if (n.kind == OpKind::kConstant) {
      v.nodes_[static_cast<std::size_t>(id)] = n.value;
      continue;
    }
    Tensor out = eval_node(id, n, v);
    if (!out.all_finite()) fail(id, "non-finite output");
    v.nodes_[static_cast<std::size_t>(id)] = std::move(out);
  }
  return v;
}

void Tape::backward_node(NodeId id, const Node& n, const Values& v, const Tensor& grad,
                         std::vector<Tensor>& adjoint) const {
  auto in = [&](std::size_t k) -> const Tensor& { return v.at(n.inputs[k]); };
  // Adjoints are pre-sized to each node's shape, so accumulation is plain +=.
  auto accumulate = [&](std::size_t k, const Tensor& g) {
    adjoint[static_cast<std::size_t>(n.inputs[k])].array() += g.array();
  };
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
      return;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() == 2 && b.rank() == 2) {
        accumulate(0, Tensor::from_matrix(grad.mat() * b.mat().transpose()));
        accumulate(1, Tensor::from_matrix(a.mat().transpose() * grad.mat()));
      } else if (a.rank() == 2 && b.rank() == 1) {
        accumulate(0, Tensor::from_matrix(grad.vec() * b.vec().transpose()));
        accumulate(1, Tensor::from_vector(a.mat().transpose() * grad.vec()));
      } else if (a.rank() == 1 && b.rank() == 2) {
        accumulate(0, Tensor::from_vector(b.mat() * grad.vec()));
        accumulate(1, Tensor::from_matrix(a.vec() * grad.vec().transpose()));
      } else {
        Tensor ga = b;
        ga.array() *= grad.value();
        Tensor gb = a;
        gb.array() *= grad.value();
        accumulate(0, ga);
        accumulate(1, gb);
      }
      return;
    }
    case OpKind::kAdd: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      auto reduce_to = [&](const Tensor& like) -> Tensor {
        if (like.shape() == grad.shape()) return grad;
        if (like.rank() == 0) return Tensor::scalar(grad.array().sum());
        // vector broadcast over matrix rows: sum over rows
        return Tensor::from_vector(grad.mat().colwise().sum().transpose());
      };
      accumulate(0, reduce_to(a));
      accumulate(1, reduce_to(b));
      return;
    }
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        Tensor ga = grad;
        ga.array() *= b.array();
        Tensor gb = grad;
        gb.array() *= a.array();
        accumulate(0, ga);
        accumulate(1, gb);
        return;
      }
      const bool a_is_scalar = a.rank() == 0;
      const Tensor& big = a_is_scalar ? b : a;
      const Tensor& s = a_is_scalar ? a : b;
      Tensor g_big = grad;
      g_big.array() *= s.value();
      Tensor g_s = Tensor::scalar((grad.array() * big.array()).sum());
      accumulate(a_is_scalar ? 1 : 0, g_big);
      accumulate(a_is_scalar ? 0 : 1, g_s);
      return;
    }
    case OpKind::kConcat: {
      Index pos = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& p = in(k);
        Tensor g = Tensor::zeros(p.shape());
        g.vec() = grad.vec().segment(pos, p.size());
        pos += p.size();
        accumulate(k, g);
      }
      return;
    }
    case OpKind::kSlice: {
      Tensor g = Tensor::zeros(in(0).shape());
      g.vec().segment(n.offset, n.extent) = grad.vec();
      accumulate(0, g);
      return;
    }
    case OpKind::kSum: {
      Tensor g = Tensor::full(in(0).shape(), grad.value());
      accumulate(0, g);
      return;
    }
    case OpKind::kMean: {
      Tensor g = Tensor::full(in(0).shape(), grad.value() / static_cast<Scalar>(in(0).size()));
      accumulate(0, g);
      return;
    }
    case OpKind::kSigmoid: {
      const Tensor& y = v.at(id);
      Tensor g = grad;
      g.array() *= y.array() * (1.0 - y.array());
      if (gradient_fault_) g.array() *= 1.01;
      accumulate(0, g);
      return;
    }
    case OpKind::kTanh: {
      const Tensor& y = v.at(id);
      Tensor g = grad;
      g.array() *= 1.0 - y.array().square();
      accumulate(0, g);
      return;
    }
    case OpKind::kSoftmax: {
      const Tensor& y = v.at(id);
      const Scalar dot = (grad.array() * y.array()).sum();
      Tensor g = grad;
      g.array() = y.array() * (grad.array() - dot);
      accumulate(0, g);
      return;
    }
    case OpKind::kLog: {
      const Tensor& x = in(0);
      Tensor g = grad;
      for (Index i = 0; i < g.size(); ++i) g[i] = x[i] > kLogClamp ? g[i] / x[i] : 0.0;
      accumulate(0, g);
      return;
    }
    case OpKind::kHinge: {
      const Tensor& x = in(0);
      Tensor g = grad;
      for (Index i = 0; i < g.size(); ++i) g[i] = x[i] > 0.0 ? g[i] : 0.0;
      accumulate(0, g);
      return;
    }
    case OpKind::kL1Norm: {
      const Tensor& x = in(0);
      Tensor g = Tensor::zeros(x.shape());
      for (Index i = 0; i < x.size(); ++i)
        g[i] = x[i] > 0.0 ? grad.value() : (x[i] < 0.0 ? -grad.value() : 0.0);
      accumulate(0, g);
      return;
    }
    case OpKind::kL2Squared: {
      const Tensor& x = in(0);
      Tensor g = Tensor::zeros(x.shape());
      g.array() = 2.0 * grad.value() * x.array();
      accumulate(0, g);
      return;
    }
  }
}

std::map<std::string, Tensor> Tape::backward(NodeId output, const Values& values) const {
  const Node& out = node(output);
  if (!is_scalar(out.shape))
    throw std::invalid_argument("backward: output node " + std::to_string(output) +
                                " is not scalar, shape " + shape_str(out.shape));
  std::vector<Tensor> adjoint(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) adjoint[i] = Tensor::zeros(nodes_[i].shape);
  adjoint[static_cast<std::size_t>(output)] = Tensor::scalar(1.0);

  for (NodeId id = output; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::kInput || n.kind == OpKind::kConstant) continue;
    const Tensor& g = adjoint[static_cast<std::size_t>(id)];
    backward_node(id, n, values, g, adjoint);
  }

  std::map<std::string, Tensor> grads;
  for (NodeId id = 0; id < size(); ++id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::kInput) grads[n.name] = adjoint[static_cast<std::size_t>(id)];
  }
  return grads;
}

GradReport check_gradients(const Tape& tape, Tape::NodeId output, const Bindings& bindings,
                           const std::vector<std::string>& names, Scalar step, Scalar tol) {
  if (step <= 0.0) throw std::invalid_argument("check_gradients: step must be > 0");
  if (tol <= 0.0) throw std::invalid_argument("check_gradients: tol must be > 0");

  Values values = tape.eval(bindings);
  std::map<std::string, Tensor> analytic = tape.backward(output, values);

  GradReport report;
  report.tolerance = tol;
  report.step = step;
  for (const std::string& name : names) {
    auto bound = bindings.find(name);
    if (bound == bindings.end())
      throw std::invalid_argument("check_gradients: no binding for '" + name + "'");
    const Tensor& a = analytic.at(name);
    Bindings perturbed = bindings;
    Tensor& x = perturbed[name];
    Scalar worst = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar x0 = x[i];
      if (x0 + step == x0) throw std::invalid_argument("check_gradients: step underflows at '" +
                                                       name + "'[" + std::to_string(i) + "]");
      x[i] = x0 + step;
      const Scalar fp = tape.eval(perturbed).at(output).value();
      x[i] = x0 - step;
      const Scalar fm = tape.eval(perturbed).at(output).value();
      x[i] = x0;
      const Scalar numeric = (fp - fm) / (2.0 * step);
      const Scalar ai = a[i];
      const Scalar denom = std::max({Scalar(1.0), std::abs(ai), std::abs(numeric)});
      worst = std::max(worst, std::abs(ai - numeric) / denom);
    }
    report.max_rel_err[name] = worst;
    report.worst = std::max(report.worst, worst);
  }
  report.pass = report.worst <= tol;
  return report;
}

GradReport check_gradients(const Tape& tape, Tape::NodeId output, const Bindings& bindings,
                           Scalar step, Scalar tol) {
  return check_gradients(tape, output, bindings, tape.input_names(), step, tol);
}

}  // namespace star
