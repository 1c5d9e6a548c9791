#ifndef MOODNET_AUTODIFF_HPP
#define MOODNET_AUTODIFF_HPP

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moodnet/rng.hpp"
#include "moodnet/tensor.hpp"

namespace moodnet {

enum class Mode { Train, Infer };

// Named trainable tensor. Gradient always has the value's shape and is
// zero after zero_grad(); backward() accumulates into it additively.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid for the
// lifetime of the tape that produced it.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = static_cast<std::size_t>(-1);

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
};

// Define-by-run tape: executed primitives are recorded in execution order,
// which is also the topological order used by the reverse sweep. A tape is
// built per forward pass and confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t node)>;

  explicit Tape(Mode mode = Mode::Train, std::uint64_t seed = 0x5EED);

  Mode mode() const { return mode_; }
  bool recording() const { return mode_ == Mode::Train; }
  Rng& rng() { return rng_; }

  // Record an input/constant. No backward rule; gradients still accumulate
  // into its buffer so downstream rules need no special cases.
  Var leaf(Tensor value);

  // Record a leaf aliasing a Parameter's value; after backward() the node's
  // gradient is added into the parameter's grad field.
  Var watch(Parameter& p);

  // Low-level extension point used by the primitive ops (and by tests that
  // need a deliberately wrong rule): record a computed value together with
  // the indices it was computed from and the rule that propagates the
  // output gradient back to them. In infer mode the rule is dropped.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  // Reverse sweep from a scalar loss. Visits each recorded node once, in
  // reverse execution order; fan-out accumulates additively. Watched
  // parameters receive their gradients; a second call without a new
  // forward pass is an error.
  void backward(Var loss);

  const Tensor& value(std::size_t node) const { return nodes_[node].value; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Gradient buffers are valid during and after backward().
  Tensor& grad_buffer(std::size_t node);
  const Tensor& grad(Var v) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<std::pair<std::size_t, Parameter*>> watched_;
  Mode mode_;
  Rng rng_;
  bool backward_done_ = false;
};

namespace ops {

// Primitive set. Every op validates shapes, records a backward rule (train
// mode), and checks the published output for finiteness.

Var matmul(Var a, Var b);                    // [m,k] x [k,n] -> [m,n]
Var add(Var a, Var b);                       // b broadcast over leading axes of a
Var mul(Var a, Var b);                       // elementwise, same shape
Var affine(Var x, double scale, double shift);  // scale*x + shift elementwise
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);
Var conv1d_temporal(Var x, Var w, Var b, std::size_t stride);  // x [B,Ci,L], w [Co,Ci,k], b [Co]
Var maxpool1d(Var x, std::size_t size, std::size_t stride);    // x [B,C,L]
Var conv2d(Var x, Var w, Var b, std::size_t stride);           // x [B,Ci,H,W], w [Co,Ci,kh,kw]
Var maxpool2d(Var x, std::size_t size, std::size_t stride);    // square window
// Normalizes over every axis except axis 1 (feature maps / features).
// Train mode uses batch statistics and updates the running ones in place;
// infer mode reads the running statistics.
Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
              double eps, double momentum);
Var concat(Var a, Var b, std::size_t axis);
Var mean_over_axis(Var x, std::size_t axis);
// Inverted dropout: train mode zeroes with probability drop_p and scales
// kept entries by 1/(1-drop_p); infer mode is the identity.
Var dropout(Var x, double drop_p);
Var mse_loss(Var pred, Var target);          // scalar mean of squared differences

// Shape plumbing (exact-gradient, zero-arithmetic ops).
Var reshape(Var x, std::vector<std::size_t> shape);
Var flatten(Var x);                          // [B,...] -> [B, prod(rest)]
Var slice_time(Var x, std::size_t t);        // [B,D,T] -> [B,D] at step t
Var slice_cols(Var x, std::size_t start, std::size_t len);  // [B,N] -> [B,len]
Var stack_time(std::span<const Var> steps);  // T x [B,D] -> [B,D,T]

}  // namespace ops

}  // namespace moodnet

#endif
