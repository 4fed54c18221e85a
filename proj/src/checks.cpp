#include "star/checks.hpp"

#include <cmath>

#include "star/localizer.hpp"
#include "star/rng.hpp"

namespace star {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, Scalar lo = -1.0, Scalar hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from the op's nondifferentiable points.
Tensor random_away_from_zero(Shape shape, Rng& rng, Scalar margin) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) {
    const Scalar mag = margin + rng.uniform(0.0, 1.5);
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

struct OpCase {
  Tape tape;
  Bindings bindings;
  Tape::NodeId output;
};

OpCase build_op_case(OpKind kind, Rng& rng) {
  OpCase c;
  Tape& t = c.tape;
  switch (kind) {
    case OpKind::kMatMul: {
      Tape::NodeId a = t.input("a", {3, 4});
      Tape::NodeId b = t.input("b", {4, 2});
      c.output = t.sum(t.matmul(a, b));
      c.bindings["a"] = random_tensor({3, 4}, rng);
      c.bindings["b"] = random_tensor({4, 2}, rng);
      return c;
    }
    case OpKind::kAdd: {
      Tape::NodeId a = t.input("a", {3, 4});
      Tape::NodeId b = t.input("b", {4});
      c.output = t.sum(t.mul(t.add(a, b), t.constant(random_tensor({3, 4}, rng))));
      c.bindings["a"] = random_tensor({3, 4}, rng);
      c.bindings["b"] = random_tensor({4}, rng);
      return c;
    }
    case OpKind::kMul: {
      Tape::NodeId a = t.input("a", {5});
      Tape::NodeId b = t.input("b", {5});
      c.output = t.sum(t.mul(a, b));
      c.bindings["a"] = random_tensor({5}, rng);
      c.bindings["b"] = random_tensor({5}, rng);
      return c;
    }
    case OpKind::kConcat: {
      Tape::NodeId a = t.input("a", {2});
      Tape::NodeId b = t.input("b", {});
      Tape::NodeId d = t.input("d", {3});
      c.output = t.matmul(t.concat({a, b, d}), t.constant(random_tensor({6}, rng)));
      c.bindings["a"] = random_tensor({2}, rng);
      c.bindings["b"] = random_tensor({}, rng);
      c.bindings["d"] = random_tensor({3}, rng);
      return c;
    }
    case OpKind::kSlice: {
      Tape::NodeId a = t.input("a", {7});
      c.output = t.matmul(t.slice(a, 2, 3), t.constant(random_tensor({3}, rng)));
      c.bindings["a"] = random_tensor({7}, rng);
      return c;
    }
    case OpKind::kSum: {
      Tape::NodeId a = t.input("a", {2, 3});
      c.output = t.sum(a);
      c.bindings["a"] = random_tensor({2, 3}, rng);
      return c;
    }
    case OpKind::kMean: {
      Tape::NodeId a = t.input("a", {6});
      c.output = t.mean(a);
      c.bindings["a"] = random_tensor({6}, rng);
      return c;
    }
    case OpKind::kSigmoid: {
      Tape::NodeId a = t.input("a", {5});
      c.output = t.matmul(t.sigmoid(a), t.constant(random_tensor({5}, rng)));
      c.bindings["a"] = random_tensor({5}, rng, -2.0, 2.0);
      return c;
    }
    case OpKind::kTanh: {
      Tape::NodeId a = t.input("a", {5});
      c.output = t.matmul(t.tanh(a), t.constant(random_tensor({5}, rng)));
      c.bindings["a"] = random_tensor({5}, rng, -2.0, 2.0);
      return c;
    }
    case OpKind::kSoftmax: {
      Tape::NodeId a = t.input("a", {5});
      c.output = t.matmul(t.softmax(a), t.constant(random_tensor({5}, rng)));
      c.bindings["a"] = random_tensor({5}, rng, -2.0, 2.0);
      return c;
    }
    case OpKind::kLog: {
      Tape::NodeId a = t.input("a", {5});
      c.output = t.sum(t.log(a));
      c.bindings["a"] = random_tensor({5}, rng, 0.2, 2.0);
      return c;
    }
    case OpKind::kHinge: {
      Tape::NodeId a = t.input("a", {6});
      c.output = t.matmul(t.hinge(a), t.constant(random_tensor({6}, rng)));
      c.bindings["a"] = random_away_from_zero({6}, rng, 0.1);
      return c;
    }
    case OpKind::kL1Norm: {
      Tape::NodeId a = t.input("a", {6});
      c.output = t.l1_norm(a);
      c.bindings["a"] = random_away_from_zero({6}, rng, 0.1);
      return c;
    }
    case OpKind::kL2Squared: {
      Tape::NodeId a = t.input("a", {6});
      c.output = t.l2_squared(a);
      c.bindings["a"] = random_tensor({6}, rng);
      return c;
    }
    case OpKind::kInput:
    case OpKind::kConstant:
      break;
  }
  throw std::logic_error("build_op_case: not a differentiable op");
}

}  // namespace

std::vector<OpCheckResult> run_op_gradient_checks(std::uint64_t seed, int points, Scalar tol,
                                                  bool inject_fault) {
  std::vector<OpCheckResult> results;
  Rng rng(mix_seed(seed, 0x09));
  for (OpKind kind : differentiable_ops()) {
    OpCheckResult r;
    r.op = op_name(kind);
    for (int p = 0; p < points; ++p) {
      OpCase c = build_op_case(kind, rng);
      c.tape.inject_gradient_fault(inject_fault);
      GradReport rep = check_gradients(c.tape, c.output, c.bindings, 1e-5, tol);
      r.max_rel_err = std::max(r.max_rel_err, rep.worst);
    }
    r.pass = r.max_rel_err <= tol;
    results.push_back(std::move(r));
  }
  return results;
}

ModelParams random_params(const ModelDims& dims, std::uint64_t seed) {
  ModelParams p = init_params(dims, seed);
  Rng rng(mix_seed(seed, 0x77));
  for (const std::string& name : ModelParams::names()) {
    Tensor& t = p.at(name);
    for (Index i = 0; i < t.size(); ++i) t[i] += rng.uniform(-0.3, 0.3);
  }
  return p;
}

GradReport run_full_loss_check(std::uint64_t seed, Scalar step, Scalar tol, bool inject_fault) {
  const ModelDims dims{8, 4, 8, 8, 3};
  const int T = 2;
  UnrollGraph graph = build_unroll_graph(dims, ModelOptions{}, T);
  Hyperparams hp;  // paper defaults
  LossNodes loss = append_loss(graph, hp);
  graph.tape.inject_gradient_fault(inject_fault);

  ModelParams params = random_params(dims, seed);
  Rng rng(mix_seed(seed, 0x10));
  TrainingExample ex;
  ex.features = random_tensor({dims.n_segments, dims.feature_dim}, rng);
  ex.labels = {0, static_cast<int>(dims.end_class())};
  ex.counts = {2.0, 0.0};
  Bindings b = loss_bindings(dims, params, ex);
  return check_gradients(graph.tape, loss.total, b, ModelParams::names(), step, tol);
}

IdentityCheckResult run_decomposition_identity_check(std::uint64_t seed, int draws) {
  IdentityCheckResult result;
  result.draws = draws;
  Rng rng(mix_seed(seed, 0x12));
  for (int d = 0; d < draws; ++d) {
    ModelDims dims;
    dims.n_segments = rng.uniform_int(4, 10);
    dims.feature_dim = rng.uniform_int(3, 6);
    dims.hidden_dim = rng.uniform_int(4, 8);
    dims.attention_dim = rng.uniform_int(4, 8);
    dims.num_classes = rng.uniform_int(3, 5);
    ModelParams params = random_params(dims, rng.next_u64());
    Tensor features = random_tensor({dims.n_segments, dims.feature_dim}, rng);

    // random teacher-forced label sequence
    const int real_classes = static_cast<int>(dims.end_class());
    const int t_count = static_cast<int>(rng.uniform_int(1, std::min(3, real_classes)));
    std::vector<int> labels;
    for (int i = 0; i < real_classes && static_cast<int>(labels.size()) < t_count; ++i)
      if (rng.uniform() < 0.6 || real_classes - i <= t_count - static_cast<int>(labels.size()))
        labels.push_back(i);
    labels.push_back(real_classes);

    UnrollResult u =
        unroll(features, labels, static_cast<int>(dims.num_classes), params, ModelOptions{});
    const int t = static_cast<int>(rng.uniform_int(0, static_cast<int>(u.steps.size()) - 1));
    const int c = static_cast<int>(rng.uniform_int(0, real_classes));

    const Vector w = class_weights(u.steps, params, t, c);
    const Vector xi = st_gradcam(w, features);
    const StepTrace& trace = u.steps[static_cast<std::size_t>(t)];
    const Scalar lhs = trace.alpha.dot(xi);
    const Scalar rhs = w.dot(trace.x);
    const Scalar err = std::abs(lhs - rhs) / std::max(Scalar(1.0), std::abs(rhs));
    result.worst_err = std::max(result.worst_err, err);
  }
  result.pass = result.worst_err <= result.bound;
  return result;
}

}  // namespace star
