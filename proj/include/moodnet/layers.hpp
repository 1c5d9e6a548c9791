#ifndef MOODNET_LAYERS_HPP
#define MOODNET_LAYERS_HPP

#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moodnet/autodiff.hpp"
#include "moodnet/rng.hpp"
#include "moodnet/tensor.hpp"

namespace moodnet {

enum class ActKind { Relu, Tanh, Sigmoid, Linear };

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var forward(Tape& tape, Var x) = 0;
  virtual std::string kind() const = 0;
  // Trainable parameters, named with the given prefix on first call.
  virtual void collect_params(const std::string& prefix, std::vector<Parameter*>& out) = 0;
  // Non-trainable state that must survive checkpointing (batchnorm running stats).
  virtual void collect_state(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor*>>& out) {
    (void)prefix;
    (void)out;
  }
};

using LayerStack = std::vector<std::unique_ptr<Layer>>;

class Dense : public Layer {
 public:
  Dense(std::size_t in, std::size_t out, Rng& rng);
  Var forward(Tape& tape, Var x) override;  // x [B,in]
  std::string kind() const override { return "dense"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;

  Parameter weight, bias;
};

class Conv1d : public Layer {
 public:
  Conv1d(std::size_t in_channels, std::size_t maps, std::size_t kernel, std::size_t stride,
         Rng& rng);
  Var forward(Tape& tape, Var x) override;  // x [B,Cin,L]
  std::string kind() const override { return "conv1d"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;

  std::size_t stride;
  Parameter weight, bias;
};

class Conv2d : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t maps, std::size_t kernel, std::size_t stride,
         Rng& rng);
  Var forward(Tape& tape, Var x) override;  // x [B,Cin,H,W]
  std::string kind() const override { return "conv2d"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;

  std::size_t stride;
  Parameter weight, bias;
};

class MaxPool1d : public Layer {
 public:
  MaxPool1d(std::size_t size, std::size_t stride) : size(size), stride(stride) {}
  Var forward(Tape& tape, Var x) override { return ops::maxpool1d(x, size, stride); }
  std::string kind() const override { return "maxpool1d"; }
  void collect_params(const std::string&, std::vector<Parameter*>&) override {}

  std::size_t size, stride;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(std::size_t size, std::size_t stride) : size(size), stride(stride) {}
  Var forward(Tape& tape, Var x) override { return ops::maxpool2d(x, size, stride); }
  std::string kind() const override { return "maxpool2d"; }
  void collect_params(const std::string&, std::vector<Parameter*>&) override {}

  std::size_t size, stride;
};

class BatchNorm : public Layer {
 public:
  explicit BatchNorm(std::size_t channels, double eps = 1e-5, double momentum = 0.9);
  Var forward(Tape& tape, Var x) override;
  std::string kind() const override { return "batchnorm"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;

  double eps, momentum;
  Parameter gamma, beta;
  Tensor running_mean, running_var;
};

class Dropout : public Layer {
 public:
  explicit Dropout(double drop_p) : drop_p(drop_p) {}
  Var forward(Tape& tape, Var x) override { return ops::dropout(x, drop_p); }
  std::string kind() const override { return "dropout"; }
  void collect_params(const std::string&, std::vector<Parameter*>&) override {}

  double drop_p;
};

class Activation : public Layer {
 public:
  explicit Activation(ActKind act) : act(act) {}
  Var forward(Tape& tape, Var x) override;
  std::string kind() const override;
  void collect_params(const std::string&, std::vector<Parameter*>&) override {}

  ActKind act;
};

class Flatten : public Layer {
 public:
  Var forward(Tape& tape, Var x) override { return ops::flatten(x); }
  std::string kind() const override { return "flatten"; }
  void collect_params(const std::string&, std::vector<Parameter*>&) override {}
};

// Merges conv feature maps and the reduced embedding axis into one feature
// dimension so a recurrent layer can step over the remaining time axis:
// [B,C,H,W] -> [B,C*H,W].
class MergeChannels : public Layer {
 public:
  Var forward(Tape& tape, Var x) override;
  std::string kind() const override { return "merge_channels"; }
  void collect_params(const std::string&, std::vector<Parameter*>&) override {}
};

// LSTM with forget gate. Input [B,D,T]; emits the final hidden state [B,H]
// or, with return_sequence, the stacked states [B,H,T]. Gate order in the
// fused matrices is i, f, g, o; the forget-gate bias starts at 1.
class Lstm : public Layer {
 public:
  Lstm(std::size_t input_dim, std::size_t hidden, Rng& rng, bool return_sequence = false);
  Var forward(Tape& tape, Var x) override;
  // One recurrence step; public so tests can compare against hand-coded
  // gate equations.
  std::pair<Var, Var> step(Tape& tape, Var x_t, Var h_prev, Var c_prev);
  std::string kind() const override { return "lstm"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;

  std::size_t input_dim, hidden;
  bool return_sequence;
  Parameter wx, wh, b;  // [D,4H], [H,4H], [4H]
};

// GRU per the gating convention where the update gate carries the previous
// state: h_t = z*h_prev + (1-z)*h_tilde. Fused gate order is z, r, n.
class Gru : public Layer {
 public:
  Gru(std::size_t input_dim, std::size_t hidden, Rng& rng);
  Var forward(Tape& tape, Var x) override;
  Var step(Tape& tape, Var x_t, Var h_prev);
  std::string kind() const override { return "gru"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;

  std::size_t input_dim, hidden;
  Parameter wx, wh, b;  // [D,3H], [H,3H], [3H]
};

// Forward and backward LSTMs over the sequence; final states concatenated
// to [B,2H].
class BiLstm : public Layer {
 public:
  BiLstm(std::size_t input_dim, std::size_t hidden, Rng& rng);
  Var forward(Tape& tape, Var x) override;
  std::string kind() const override { return "bilstm"; }
  void collect_params(const std::string& prefix, std::vector<Parameter*>& out) override;

  Lstm fwd, bwd;
};

// A composed differentiable model: one layer stack per input branch, an
// optional head applied after concatenating 2-D branch outputs. All the
// builders in models.hpp produce output shape [batch, 2].
class ModelGraph {
 public:
  ModelGraph(std::string kind, std::vector<LayerStack> branches, LayerStack head,
             std::vector<std::vector<std::size_t>> input_shapes);

  // One batched tensor per branch, layouts per input_shapes() plus a
  // leading batch axis.
  Var forward(Tape& tape, std::span<const Tensor> inputs);

  const std::string& kind() const { return kind_; }
  const std::vector<std::vector<std::size_t>>& input_shapes() const { return input_shapes_; }
  std::size_t num_branches() const { return branches_.size(); }

  std::vector<Parameter*>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor*>>& state_tensors() const { return state_; }

  // Parameters plus state, for checkpointing.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();

  LayerStack& branch(std::size_t i) { return branches_[i]; }
  LayerStack& head() { return head_; }

 private:
  std::string kind_;
  std::vector<LayerStack> branches_;
  LayerStack head_;
  std::vector<std::vector<std::size_t>> input_shapes_;
  std::vector<Parameter*> params_;
  std::vector<std::pair<std::string, Tensor*>> state_;
};

// Uniform in +-sqrt(6/(fan_in+fan_out)).
Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng);

}  // namespace moodnet

#endif
