#include "moodnet/layers.hpp"

#include <cmath>

#include "moodnet/common/error.hpp"

namespace moodnet {

Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

namespace {

// Recurrent kernels: uniform with row variance matching orthogonal rows
// (unit expected row norm).
Tensor recurrent_uniform(std::vector<std::size_t> shape, std::size_t hidden, Rng& rng) {
  double bound = std::sqrt(3.0 / static_cast<double>(hidden));
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Dense::Dense(std::size_t in, std::size_t out, Rng& rng)
    : weight("w", glorot_uniform({in, out}, in, out, rng)), bias("b", Tensor::zeros({out})) {}

Var Dense::forward(Tape& tape, Var x) {
  if (x.value().rank() != 2) {
    throw Error(errc::shape_mismatch,
                "dense: expected rank-2 input, got " + x.value().shape_str());
  }
  return ops::add(ops::matmul(x, tape.watch(weight)), tape.watch(bias));
}

void Dense::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  weight.name = prefix + ".w";
  bias.name = prefix + ".b";
  out.push_back(&weight);
  out.push_back(&bias);
}

Conv1d::Conv1d(std::size_t in_channels, std::size_t maps, std::size_t kernel, std::size_t stride,
               Rng& rng)
    : stride(stride),
      weight("w", glorot_uniform({maps, in_channels, kernel}, in_channels * kernel,
                                 maps * kernel, rng)),
      bias("b", Tensor::zeros({maps})) {}

Var Conv1d::forward(Tape& tape, Var x) {
  return ops::conv1d_temporal(x, tape.watch(weight), tape.watch(bias), stride);
}

void Conv1d::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  weight.name = prefix + ".w";
  bias.name = prefix + ".b";
  out.push_back(&weight);
  out.push_back(&bias);
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t maps, std::size_t kernel, std::size_t stride,
               Rng& rng)
    : stride(stride),
      weight("w", glorot_uniform({maps, in_channels, kernel, kernel},
                                 in_channels * kernel * kernel, maps * kernel * kernel, rng)),
      bias("b", Tensor::zeros({maps})) {}

Var Conv2d::forward(Tape& tape, Var x) {
  return ops::conv2d(x, tape.watch(weight), tape.watch(bias), stride);
}

void Conv2d::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  weight.name = prefix + ".w";
  bias.name = prefix + ".b";
  out.push_back(&weight);
  out.push_back(&bias);
}

BatchNorm::BatchNorm(std::size_t channels, double eps, double momentum)
    : eps(eps),
      momentum(momentum),
      gamma("gamma", Tensor::full({channels}, 1.0)),
      beta("beta", Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

Var BatchNorm::forward(Tape& tape, Var x) {
  return ops::batchnorm(x, tape.watch(gamma), tape.watch(beta), running_mean, running_var, eps,
                        momentum);
}

void BatchNorm::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  gamma.name = prefix + ".gamma";
  beta.name = prefix + ".beta";
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNorm::collect_state(const std::string& prefix,
                              std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + ".running_mean", &running_mean);
  out.emplace_back(prefix + ".running_var", &running_var);
}

Var Activation::forward(Tape& tape, Var x) {
  (void)tape;
  switch (act) {
    case ActKind::Relu: return ops::relu(x);
    case ActKind::Tanh: return ops::tanh(x);
    case ActKind::Sigmoid: return ops::sigmoid(x);
    case ActKind::Linear: return x;
  }
  throw Error(errc::bad_argument, "unknown activation");
}

std::string Activation::kind() const {
  switch (act) {
    case ActKind::Relu: return "relu";
    case ActKind::Tanh: return "tanh";
    case ActKind::Sigmoid: return "sigmoid";
    case ActKind::Linear: return "linear";
  }
  return "?";
}

Var MergeChannels::forward(Tape& tape, Var x) {
  (void)tape;
  const Tensor& X = x.value();
  if (X.rank() != 4) {
    throw Error(errc::shape_mismatch,
                "merge_channels: expected rank-4 input, got " + X.shape_str());
  }
  return ops::reshape(x, {X.dim(0), X.dim(1) * X.dim(2), X.dim(3)});
}

Lstm::Lstm(std::size_t input_dim, std::size_t hidden, Rng& rng, bool return_sequence)
    : input_dim(input_dim),
      hidden(hidden),
      return_sequence(return_sequence),
      wx("wx", glorot_uniform({input_dim, 4 * hidden}, input_dim, hidden, rng)),
      wh("wh", recurrent_uniform({hidden, 4 * hidden}, hidden, rng)),
      b("b", Tensor::zeros({4 * hidden})) {
  // Forget-gate bias at 1 keeps memory open early in training.
  for (std::size_t i = hidden; i < 2 * hidden; ++i) b.value[i] = 1.0;
}

std::pair<Var, Var> Lstm::step(Tape& tape, Var x_t, Var h_prev, Var c_prev) {
  Var z = ops::add(ops::add(ops::matmul(x_t, tape.watch(wx)), ops::matmul(h_prev, tape.watch(wh))),
                   tape.watch(b));
  std::size_t H = hidden;
  Var i = ops::sigmoid(ops::slice_cols(z, 0, H));
  Var f = ops::sigmoid(ops::slice_cols(z, H, H));
  Var g = ops::tanh(ops::slice_cols(z, 2 * H, H));
  Var o = ops::sigmoid(ops::slice_cols(z, 3 * H, H));
  Var c = ops::add(ops::mul(f, c_prev), ops::mul(i, g));
  Var h = ops::mul(o, ops::tanh(c));
  return {h, c};
}

Var Lstm::forward(Tape& tape, Var x) {
  const Tensor& X = x.value();
  if (X.rank() != 3 || X.dim(1) != input_dim) {
    throw Error(errc::shape_mismatch,
                "lstm: expected [B," + std::to_string(input_dim) + ",T], got " + X.shape_str());
  }
  std::size_t batch = X.dim(0), T = X.dim(2);
  Var h = tape.leaf(Tensor::zeros({batch, hidden}));
  Var c = tape.leaf(Tensor::zeros({batch, hidden}));
  std::vector<Var> states;
  if (return_sequence) states.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    auto [hn, cn] = step(tape, ops::slice_time(x, t), h, c);
    h = hn;
    c = cn;
    if (return_sequence) states.push_back(h);
  }
  if (return_sequence) return ops::stack_time(states);
  return h;
}

void Lstm::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  wx.name = prefix + ".wx";
  wh.name = prefix + ".wh";
  b.name = prefix + ".b";
  out.push_back(&wx);
  out.push_back(&wh);
  out.push_back(&b);
}

Gru::Gru(std::size_t input_dim, std::size_t hidden, Rng& rng)
    : input_dim(input_dim),
      hidden(hidden),
      wx("wx", glorot_uniform({input_dim, 3 * hidden}, input_dim, hidden, rng)),
      wh("wh", recurrent_uniform({hidden, 3 * hidden}, hidden, rng)),
      b("b", Tensor::zeros({3 * hidden})) {}

Var Gru::step(Tape& tape, Var x_t, Var h_prev) {
  std::size_t H = hidden;
  Var wxv = tape.watch(wx);
  Var whv = tape.watch(wh);
  Var bv = tape.watch(b);
  Var xz = ops::matmul(x_t, wxv);                                  // [B,3H]
  Var hz = ops::matmul(h_prev, ops::slice_cols(whv, 0, 2 * H));    // [B,2H]
  Var z = ops::sigmoid(ops::add(ops::add(ops::slice_cols(xz, 0, H), ops::slice_cols(hz, 0, H)),
                                ops::slice_cols(bv, 0, H)));
  Var r = ops::sigmoid(ops::add(ops::add(ops::slice_cols(xz, H, H), ops::slice_cols(hz, H, H)),
                                ops::slice_cols(bv, H, H)));
  // Candidate uses the reset-gated previous state: tanh(x W_n + (r*h) U_n + b_n).
  Var rh = ops::mul(r, h_prev);
  Var n = ops::tanh(ops::add(ops::add(ops::slice_cols(xz, 2 * H, H),
                                      ops::matmul(rh, ops::slice_cols(whv, 2 * H, H))),
                             ops::slice_cols(bv, 2 * H, H)));
  Var one_minus_z = ops::affine(z, -1.0, 1.0);
  return ops::add(ops::mul(z, h_prev), ops::mul(one_minus_z, n));
}

Var Gru::forward(Tape& tape, Var x) {
  const Tensor& X = x.value();
  if (X.rank() != 3 || X.dim(1) != input_dim) {
    throw Error(errc::shape_mismatch,
                "gru: expected [B," + std::to_string(input_dim) + ",T], got " + X.shape_str());
  }
  std::size_t batch = X.dim(0), T = X.dim(2);
  Var h = tape.leaf(Tensor::zeros({batch, hidden}));
  for (std::size_t t = 0; t < T; ++t) h = step(tape, ops::slice_time(x, t), h);
  return h;
}

void Gru::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  wx.name = prefix + ".wx";
  wh.name = prefix + ".wh";
  b.name = prefix + ".b";
  out.push_back(&wx);
  out.push_back(&wh);
  out.push_back(&b);
}

BiLstm::BiLstm(std::size_t input_dim, std::size_t hidden, Rng& rng)
    : fwd(input_dim, hidden, rng), bwd(input_dim, hidden, rng) {}

Var BiLstm::forward(Tape& tape, Var x) {
  const Tensor& X = x.value();
  if (X.rank() != 3) {
    throw Error(errc::shape_mismatch, "bilstm: expected rank-3 input, got " + X.shape_str());
  }
  std::size_t batch = X.dim(0), T = X.dim(2);
  Var hf = tape.leaf(Tensor::zeros({batch, fwd.hidden}));
  Var cf = tape.leaf(Tensor::zeros({batch, fwd.hidden}));
  for (std::size_t t = 0; t < T; ++t) {
    auto [h, c] = fwd.step(tape, ops::slice_time(x, t), hf, cf);
    hf = h;
    cf = c;
  }
  Var hb = tape.leaf(Tensor::zeros({batch, bwd.hidden}));
  Var cb = tape.leaf(Tensor::zeros({batch, bwd.hidden}));
  for (std::size_t t = T; t-- > 0;) {
    auto [h, c] = bwd.step(tape, ops::slice_time(x, t), hb, cb);
    hb = h;
    cb = c;
  }
  return ops::concat(hf, hb, 1);
}

void BiLstm::collect_params(const std::string& prefix, std::vector<Parameter*>& out) {
  fwd.collect_params(prefix + ".fwd", out);
  bwd.collect_params(prefix + ".bwd", out);
}

ModelGraph::ModelGraph(std::string kind, std::vector<LayerStack> branches, LayerStack head,
                       std::vector<std::vector<std::size_t>> input_shapes)
    : kind_(std::move(kind)),
      branches_(std::move(branches)),
      head_(std::move(head)),
      input_shapes_(std::move(input_shapes)) {
  if (branches_.empty() || branches_.size() != input_shapes_.size()) {
    throw Error(errc::bad_argument, "model graph needs one input shape per branch");
  }
  for (std::size_t bi = 0; bi < branches_.size(); ++bi) {
    std::string bp = branches_.size() == 1 ? "net" : "branch" + std::to_string(bi);
    for (std::size_t li = 0; li < branches_[bi].size(); ++li) {
      Layer& l = *branches_[bi][li];
      std::string prefix = bp + "." + std::to_string(li) + "." + l.kind();
      l.collect_params(prefix, params_);
      l.collect_state(prefix, state_);
    }
  }
  for (std::size_t li = 0; li < head_.size(); ++li) {
    Layer& l = *head_[li];
    std::string prefix = "head." + std::to_string(li) + "." + l.kind();
    l.collect_params(prefix, params_);
    l.collect_state(prefix, state_);
  }
}

Var ModelGraph::forward(Tape& tape, std::span<const Tensor> inputs) {
  if (inputs.size() != branches_.size()) {
    throw Error(errc::shape_mismatch,
                kind_ + ": expected " + std::to_string(branches_.size()) + " inputs, got " +
                    std::to_string(inputs.size()));
  }
  std::vector<Var> outs;
  outs.reserve(branches_.size());
  for (std::size_t bi = 0; bi < branches_.size(); ++bi) {
    const Tensor& in = inputs[bi];
    const auto& want = input_shapes_[bi];
    bool ok = in.rank() == want.size() + 1;
    for (std::size_t d = 0; ok && d < want.size(); ++d) ok = in.dim(d + 1) == want[d];
    if (!ok) {
      throw Error(errc::shape_mismatch,
                  kind_ + ": branch " + std::to_string(bi) + " expects [batch, " +
                      Tensor::shape_str(want).substr(1) + ", got " + in.shape_str());
    }
    Var v = tape.leaf(in);
    for (auto& layer : branches_[bi]) v = layer->forward(tape, v);
    outs.push_back(v);
  }
  Var merged = outs[0];
  for (std::size_t bi = 1; bi < outs.size(); ++bi) merged = ops::concat(merged, outs[bi], 1);
  for (auto& layer : head_) merged = layer->forward(tape, merged);
  return merged;
}

std::vector<std::pair<std::string, Tensor*>> ModelGraph::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (Parameter* p : params_) out.emplace_back(p->name, &p->value);
  for (auto& [name, t] : state_) out.emplace_back(name, t);
  return out;
}

}  // namespace moodnet
