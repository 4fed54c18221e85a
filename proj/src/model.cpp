#include "star/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "star/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts unsupported");

namespace star {

namespace {

constexpr char kCheckpointMagic[] = "STARCKPT1";
constexpr std::size_t kMagicLen = 9;

Tensor glorot_uniform(Shape shape, Index fan_in, Index fan_out, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const Scalar r = std::sqrt(6.0 / static_cast<Scalar>(fan_in + fan_out));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-r, r);
  return t;
}

Tensor position_vector(Index n) {
  Tensor t = Tensor::zeros({n});
  for (Index i = 0; i < n; ++i) t[i] = static_cast<Scalar>(i + 1);  // 1-based
  return t;
}

int argmax_lowest(const Vector& v) {
  int best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace

void ModelDims::validate() const {
  auto positive = [](Index v, const char* field) {
    if (v <= 0)
      throw std::invalid_argument(std::string("model dims: ") + field + " must be positive");
  };
  positive(n_segments, "n_segments");
  positive(feature_dim, "feature_dim");
  positive(hidden_dim, "hidden_dim");
  positive(attention_dim, "attention_dim");
  if (num_classes < 2)
    throw std::invalid_argument("model dims: num_classes must be >= 2 (one class plus END)");
}

const std::vector<std::string>& ModelParams::names() {
  static const std::vector<std::string> kNames = {"W_alpha", "U_alpha", "v_alpha", "Z", "u_cov",
                                                  "w_r",     "W_x",     "W_h",     "b_lstm", "W_o"};
  return kNames;
}

ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  const Index N = dims.n_segments, K = dims.feature_dim, H = dims.hidden_dim,
              A = dims.attention_dim, C = dims.num_classes, D = dims.lstm_input_dim();
  Rng rng(seed);
  ModelParams p;
  p.dims = dims;
  // Draw order is the fixed names() order; changing it changes checkpoints.
  p.tensors["W_alpha"] = glorot_uniform({H, A}, H, A, rng);
  p.tensors["U_alpha"] = glorot_uniform({K, A}, K, A, rng);
  p.tensors["v_alpha"] = glorot_uniform({A}, A, 1, rng);
  p.tensors["Z"] = Tensor::zeros({N});
  p.tensors["u_cov"] = glorot_uniform({H}, H, 1, rng);
  p.tensors["w_r"] = Tensor::scalar(0.0);
  p.tensors["W_x"] = glorot_uniform({D, 4 * H}, D, 4 * H, rng);
  p.tensors["W_h"] = glorot_uniform({H, 4 * H}, H, 4 * H, rng);
  Tensor b = Tensor::zeros({4 * H});
  for (Index i = H; i < 2 * H; ++i) b[i] = 1.0;  // forget gate opens at init
  p.tensors["b_lstm"] = std::move(b);
  p.tensors["W_o"] = glorot_uniform({C, H}, H, C, rng);
  return p;
}

ParamNodes add_param_inputs(Tape& tape, const ModelDims& dims) {
  const Index N = dims.n_segments, K = dims.feature_dim, H = dims.hidden_dim,
              A = dims.attention_dim, C = dims.num_classes, D = dims.lstm_input_dim();
  ParamNodes p;
  p.ids["W_alpha"] = tape.input("W_alpha", {H, A});
  p.ids["U_alpha"] = tape.input("U_alpha", {K, A});
  p.ids["v_alpha"] = tape.input("v_alpha", {A});
  p.ids["Z"] = tape.input("Z", {N});
  p.ids["u_cov"] = tape.input("u_cov", {H});
  p.ids["w_r"] = tape.input("w_r", {});
  p.ids["W_x"] = tape.input("W_x", {D, 4 * H});
  p.ids["W_h"] = tape.input("W_h", {H, 4 * H});
  p.ids["b_lstm"] = tape.input("b_lstm", {4 * H});
  p.ids["W_o"] = tape.input("W_o", {C, H});
  return p;
}

AttentionNodes append_attention(Tape& tape, const ModelDims& dims, const ModelOptions& opt,
                                const ParamNodes& params, Tape::NodeId features,
                                Tape::NodeId h_prev, Tape::NodeId alpha_prev) {
  const Index N = dims.n_segments;
  AttentionNodes out;

  // e_i = v_alpha . tanh(W_alpha h_prev + U_alpha s_i), gated by coverage.
  Tape::NodeId premix = tape.tanh(tape.add(tape.matmul(features, params.at("U_alpha")),
                                           tape.matmul(h_prev, params.at("W_alpha"))));
  Tape::NodeId energy_raw = tape.matmul(premix, params.at("v_alpha"));  // [N]

  if (opt.coverage) {
    // cov_i = sigmoid(Z_i * (i - sum_k alpha_prev_k * k) + u_cov . h_prev)
    Tape::NodeId pos = tape.constant(position_vector(N));
    Tape::NodeId centroid = tape.matmul(alpha_prev, pos);
    Tape::NodeId offsets = tape.sub(pos, centroid);
    Tape::NodeId gate_pre =
        tape.add(tape.mul(params.at("Z"), offsets), tape.matmul(params.at("u_cov"), h_prev));
    out.cov = tape.sigmoid(gate_pre);
    out.energy = tape.mul(out.cov, energy_raw);
  } else {
    out.cov = tape.constant(Tensor::full({N}, 1.0));
    out.energy = energy_raw;
  }

  out.alpha = tape.sigmoid(out.energy);
  out.x = tape.matmul(out.alpha, features);
  out.ram = opt.ram ? tape.mul(params.at("w_r"), tape.sum(out.alpha))
                    : tape.constant(Tensor::scalar(0.0));
  return out;
}

RecurrenceNodes append_recurrence(Tape& tape, const ModelDims& dims, const ParamNodes& params,
                                  Tape::NodeId x, Tape::NodeId ram, Tape::NodeId y_prev_onehot,
                                  Tape::NodeId h_prev, Tape::NodeId cell_prev) {
  const Index H = dims.hidden_dim;
  Tape::NodeId lstm_in = tape.concat({x, y_prev_onehot, ram});
  Tape::NodeId pre = tape.add(tape.add(tape.matmul(lstm_in, params.at("W_x")),
                                       tape.matmul(h_prev, params.at("W_h"))),
                              params.at("b_lstm"));
  Tape::NodeId gate_i = tape.sigmoid(tape.slice(pre, 0, H));
  Tape::NodeId gate_f = tape.sigmoid(tape.slice(pre, H, H));
  Tape::NodeId gate_g = tape.tanh(tape.slice(pre, 2 * H, H));
  Tape::NodeId gate_o = tape.sigmoid(tape.slice(pre, 3 * H, H));

  RecurrenceNodes out;
  out.cell = tape.add(tape.mul(gate_f, cell_prev), tape.mul(gate_i, gate_g));
  out.h = tape.mul(gate_o, tape.tanh(out.cell));
  out.logits = tape.matmul(params.at("W_o"), out.h);
  out.y_prob = tape.softmax(out.logits);
  return out;
}

StepNodes append_step(Tape& tape, const ModelDims& dims, const ModelOptions& opt,
                      const ParamNodes& params, Tape::NodeId features, Tape::NodeId h_prev,
                      Tape::NodeId cell_prev, Tape::NodeId alpha_prev,
                      Tape::NodeId y_prev_onehot) {
  AttentionNodes att = append_attention(tape, dims, opt, params, features, h_prev, alpha_prev);
  RecurrenceNodes rec =
      append_recurrence(tape, dims, params, att.x, att.ram, y_prev_onehot, h_prev, cell_prev);
  return {att.alpha, att.cov, att.energy, att.x, att.ram, rec.h, rec.cell, rec.logits, rec.y_prob};
}

static void mark_step_outputs(Tape& tape, const StepNodes& s, int t) {
  const std::string p = "t" + std::to_string(t) + "/";
  tape.mark_output(p + "alpha", s.alpha);
  tape.mark_output(p + "cov", s.cov);
  tape.mark_output(p + "energy", s.energy);
  tape.mark_output(p + "x", s.x);
  tape.mark_output(p + "ram", s.ram);
  tape.mark_output(p + "h", s.h);
  tape.mark_output(p + "cell", s.cell);
  tape.mark_output(p + "logits", s.logits);
  tape.mark_output(p + "y_prob", s.y_prob);
}

UnrollGraph build_unroll_graph(const ModelDims& dims, const ModelOptions& opt, int T) {
  dims.validate();
  if (T < 1) throw std::invalid_argument("unroll graph needs T >= 1");
  UnrollGraph g;
  g.dims = dims;
  g.options = opt;
  ParamNodes params = add_param_inputs(g.tape, dims);
  Tape::NodeId features = g.tape.input("S", {dims.n_segments, dims.feature_dim});
  Tape::NodeId h = g.tape.constant(Tensor::zeros({dims.hidden_dim}));
  Tape::NodeId cell = g.tape.constant(Tensor::zeros({dims.hidden_dim}));
  Tape::NodeId alpha_prev = g.tape.constant(Tensor::zeros({dims.n_segments}));
  for (int t = 1; t <= T; ++t) {
    Tape::NodeId y_in = g.tape.input("y_in_" + std::to_string(t), {dims.num_classes});
    StepNodes s = append_step(g.tape, dims, opt, params, features, h, cell, alpha_prev, y_in);
    mark_step_outputs(g.tape, s, t);
    g.steps.push_back(s);
    h = s.h;
    cell = s.cell;
    alpha_prev = s.alpha;
  }
  return g;
}

StepGraph build_step_graph(const ModelDims& dims, const ModelOptions& opt) {
  dims.validate();
  StepGraph g;
  g.dims = dims;
  g.options = opt;
  ParamNodes params = add_param_inputs(g.tape, dims);
  Tape::NodeId features = g.tape.input("S", {dims.n_segments, dims.feature_dim});
  Tape::NodeId h_prev = g.tape.input("h_prev", {dims.hidden_dim});
  Tape::NodeId cell_prev = g.tape.input("cell_prev", {dims.hidden_dim});
  Tape::NodeId alpha_prev = g.tape.input("alpha_prev", {dims.n_segments});
  Tape::NodeId y_in = g.tape.input("y_in", {dims.num_classes});
  g.step = append_step(g.tape, dims, opt, params, features, h_prev, cell_prev, alpha_prev, y_in);
  mark_step_outputs(g.tape, g.step, 1);
  return g;
}

StepTrace extract_trace(const Values& values, const StepNodes& nodes, int y_prev) {
  StepTrace t;
  t.alpha = values.at(nodes.alpha).vec();
  t.cov = values.at(nodes.cov).vec();
  t.energy_hat = values.at(nodes.energy).vec();
  t.x = values.at(nodes.x).vec();
  t.ram = values.at(nodes.ram).value();
  t.h = values.at(nodes.h).vec();
  t.cell = values.at(nodes.cell).vec();
  t.logits = values.at(nodes.logits).vec();
  t.y_prob = values.at(nodes.y_prob).vec();
  t.y_prev = y_prev;
  return t;
}

AttentionResult attention_step(const Tensor& features, const Vector& h_prev,
                               const Vector& alpha_prev, const ModelParams& params,
                               const ModelOptions& opt) {
  const ModelDims& dims = params.dims;
  Tape tape;
  ParamNodes p = add_param_inputs(tape, dims);
  Tape::NodeId s = tape.input("S", {dims.n_segments, dims.feature_dim});
  Tape::NodeId h = tape.input("h_prev", {dims.hidden_dim});
  Tape::NodeId a = tape.input("alpha_prev", {dims.n_segments});
  AttentionNodes nodes = append_attention(tape, dims, opt, p, s, h, a);
  Bindings b = params.as_bindings();
  b["S"] = features;
  b["h_prev"] = Tensor::from_vector(h_prev);
  b["alpha_prev"] = Tensor::from_vector(alpha_prev);
  Values v = tape.eval(b);
  return {Vector(v.at(nodes.alpha).vec()), Vector(v.at(nodes.cov).vec()),
          Vector(v.at(nodes.x).vec()), v.at(nodes.ram).value()};
}

RecurrenceResult recurrent_step(const Vector& h_prev, const Vector& cell_prev, int y_prev_index,
                                const Vector& x, Scalar ram, const ModelParams& params) {
  const ModelDims& dims = params.dims;
  if (y_prev_index < 0 || y_prev_index >= dims.num_classes)
    throw std::out_of_range("recurrent_step: class id " + std::to_string(y_prev_index) +
                            " out of range [0, " + std::to_string(dims.num_classes) + ")");
  Tape tape;
  ParamNodes p = add_param_inputs(tape, dims);
  Tape::NodeId xn = tape.input("x", {dims.feature_dim});
  Tape::NodeId ramn = tape.input("ram", {});
  Tape::NodeId yn = tape.input("y_in", {dims.num_classes});
  Tape::NodeId hn = tape.input("h_prev", {dims.hidden_dim});
  Tape::NodeId cn = tape.input("cell_prev", {dims.hidden_dim});
  RecurrenceNodes nodes = append_recurrence(tape, dims, p, xn, ramn, yn, hn, cn);
  Bindings b = params.as_bindings();
  b["x"] = Tensor::from_vector(x);
  b["ram"] = Tensor::scalar(ram);
  b["y_in"] = Tensor::one_hot(dims.num_classes, y_prev_index);
  b["h_prev"] = Tensor::from_vector(h_prev);
  b["cell_prev"] = Tensor::from_vector(cell_prev);
  Values v = tape.eval(b);
  return {Vector(v.at(nodes.h).vec()), Vector(v.at(nodes.cell).vec()),
          Vector(v.at(nodes.logits).vec()), Vector(v.at(nodes.y_prob).vec())};
}

UnrollResult unroll(const Tensor& features, const std::optional<std::vector<int>>& labels,
                    int t_max, const ModelParams& params, const ModelOptions& opt) {
  const ModelDims& dims = params.dims;
  if (t_max < 1) throw std::invalid_argument("unroll: t_max must be >= 1");
  const int end_class = static_cast<int>(dims.end_class());

  UnrollResult result;
  if (labels) {
    if (labels->empty()) throw std::invalid_argument("unroll: empty label sequence");
    if (static_cast<int>(labels->size()) > t_max)
      throw std::invalid_argument("unroll: label sequence longer than t_max");
    if (labels->back() != end_class)
      throw std::invalid_argument("unroll: label sequence must end with the END class");
    for (int y : *labels)
      if (y < 0 || y >= dims.num_classes)
        throw std::out_of_range("unroll: label " + std::to_string(y) + " out of range");

    const int T = static_cast<int>(labels->size());
    UnrollGraph g = build_unroll_graph(dims, opt, T);
    Bindings b = params.as_bindings();
    b["S"] = features;
    for (int t = 1; t <= T; ++t) {
      const int fed = t == 1 ? end_class : (*labels)[static_cast<std::size_t>(t - 2)];
      b["y_in_" + std::to_string(t)] = Tensor::one_hot(dims.num_classes, fed);
    }
    Values v = g.tape.eval(b);
    for (int t = 0; t < T; ++t) {
      const int fed = t == 0 ? end_class : (*labels)[static_cast<std::size_t>(t - 1)];
      result.steps.push_back(extract_trace(v, g.steps[static_cast<std::size_t>(t)], fed));
    }
    result.emitted = *labels;
    return result;
  }

  // Greedy decoding; ties break toward the lowest class index.
  StepGraph g = build_step_graph(dims, opt);
  Bindings b = params.as_bindings();
  b["S"] = features;
  Vector h = Vector::Zero(dims.hidden_dim);
  Vector cell = Vector::Zero(dims.hidden_dim);
  Vector alpha_prev = Vector::Zero(dims.n_segments);
  int fed = end_class;
  result.truncated = true;
  for (int t = 1; t <= t_max; ++t) {
    b["h_prev"] = Tensor::from_vector(h);
    b["cell_prev"] = Tensor::from_vector(cell);
    b["alpha_prev"] = Tensor::from_vector(alpha_prev);
    b["y_in"] = Tensor::one_hot(dims.num_classes, fed);
    Values v = g.tape.eval(b);
    StepTrace trace = extract_trace(v, g.step, fed);
    const int emitted = argmax_lowest(trace.y_prob);
    h = trace.h;
    cell = trace.cell;
    alpha_prev = trace.alpha;
    result.steps.push_back(std::move(trace));
    result.emitted.push_back(emitted);
    fed = emitted;
    if (emitted == end_class) {
      result.truncated = false;
      break;
    }
  }
  return result;
}

namespace {

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& in, const std::filesystem::path& path) {
  const long long at = static_cast<long long>(in.tellg());
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw std::runtime_error("checkpoint " + path.string() + ": truncated at byte offset " +
                             std::to_string(at));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelDims& dims,
                     const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, kMagicLen);
  for (Index d : {dims.n_segments, dims.feature_dim, dims.hidden_dim, dims.attention_dim,
                  dims.num_classes})
    write_u64(out, static_cast<std::uint64_t>(d));
  write_u64(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<std::uint64_t>(tensor.rank()));
    for (Index e : tensor.shape()) write_u64(out, static_cast<std::uint64_t>(e));
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(sizeof(Scalar) * tensor.size()));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[kMagicLen] = {};
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kCheckpointMagic, kMagicLen) != 0)
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic");

  Checkpoint ckpt;
  ckpt.dims.n_segments = static_cast<Index>(read_u64(in, path));
  ckpt.dims.feature_dim = static_cast<Index>(read_u64(in, path));
  ckpt.dims.hidden_dim = static_cast<Index>(read_u64(in, path));
  ckpt.dims.attention_dim = static_cast<Index>(read_u64(in, path));
  ckpt.dims.num_classes = static_cast<Index>(read_u64(in, path));

  const std::uint64_t count = read_u64(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = read_u64(in, path);
    if (name_len > 4096)
      throw std::runtime_error("checkpoint " + path.string() + ": implausible name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw std::runtime_error("checkpoint " + path.string() + ": truncated tensor name");
    const std::uint64_t rank = read_u64(in, path);
    if (rank > 2) throw std::runtime_error("checkpoint " + path.string() + ": rank > 2");
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      const std::uint64_t e = read_u64(in, path);
      total *= e;
      if (total > (1ull << 30))
        throw std::runtime_error("checkpoint " + path.string() + ": implausible tensor size");
      shape.push_back(static_cast<Index>(e));
    }
    Tensor t = Tensor::zeros(shape);
    const long long at = static_cast<long long>(in.tellg());
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(Scalar) * t.size())))
      throw std::runtime_error("checkpoint " + path.string() + ": truncated data for '" + name +
                               "' at byte offset " + std::to_string(at));
    if (!t.all_finite())
      throw std::runtime_error("checkpoint " + path.string() + ": non-finite values in '" + name +
                               "'");
    ckpt.tensors[name] = std::move(t);
  }
  return ckpt;
}

}  // namespace star
