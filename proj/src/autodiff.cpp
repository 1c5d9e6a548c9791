#include "moodnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "moodnet/common/error.hpp"

namespace moodnet {

const Tensor& Var::value() const { return tape->value(index); }

Tape::Tape(Mode mode, std::uint64_t seed) : mode_(mode), rng_(seed) {}

Var Tape::leaf(Tensor value) {
  // Leaves are the entry point for external data; checking them here means
  // every downstream input is finite by induction, so ops only need to
  // validate their own outputs.
  if (!value.all_finite()) {
    throw Error(errc::non_finite, "non-finite input tensor of shape " + value.shape_str());
  }
  nodes_.push_back(Node{std::move(value), {}, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::watch(Parameter& p) {
  Var v = leaf(p.value);
  if (recording()) watched_.emplace_back(v.index, &p);
  return v;
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (recording()) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward)});
  } else {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
  }
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t node) { return grads_[node]; }

const Tensor& Tape::grad(Var v) const {
  if (grads_.empty()) throw Error(errc::bad_argument, "grad requested before backward()");
  return grads_[v.index];
}

void Tape::backward(Var loss) {
  if (!recording()) {
    throw Error(errc::bad_argument, "backward() requires a tape in train mode");
  }
  if (backward_done_) {
    throw Error(errc::backward_consumed,
                "backward() called twice on one tape; run a new forward pass");
  }
  if (loss.tape != this) throw Error(errc::bad_argument, "loss was recorded on another tape");
  if (loss.value().size() != 1) {
    throw Error(errc::not_scalar, "loss must be scalar, got shape " + loss.value().shape_str());
  }
  backward_done_ = true;

  grads_.clear();
  grads_.reserve(nodes_.size());
  for (const Node& n : nodes_) grads_.emplace_back(Tensor::zeros(n.value.shape()));

  // Only ancestors of the loss can carry gradient; skip the rest.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<std::size_t> stack{loss.index};
  reachable[loss.index] = 1;
  while (!stack.empty()) {
    std::size_t i = stack.back();
    stack.pop_back();
    for (std::size_t in : nodes_[i].inputs) {
      if (!reachable[in]) {
        reachable[in] = 1;
        stack.push_back(in);
      }
    }
  }

  grads_[loss.index].fill(1.0);
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (reachable[i] && nodes_[i].backward) nodes_[i].backward(*this, i);
  }

  for (auto& [node, param] : watched_) {
    const Tensor& g = grads_[node];
    double* acc = param->grad.data();
    const double* src = g.data();
    for (std::size_t k = 0; k < g.size(); ++k) acc[k] += src[k];
  }
}

namespace ops {
namespace {

void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) {
    throw Error(errc::bad_argument, std::string(op) + ": operands on different tapes");
  }
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(errc::shape_mismatch,
              std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                  b.shape_str());
}

Var publish(Tape& t, const char* op, Tensor value, std::vector<std::size_t> inputs,
            Tape::BackwardFn fn) {
  if (!value.all_finite()) {
    throw Error(errc::non_finite, std::string(op) + ": non-finite output");
  }
  return t.push(std::move(value), std::move(inputs), std::move(fn));
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_error("matmul", A, B);
  std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A.data() + i * k;
    double* crow = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  std::size_t ai = a.index, bi = b.index;
  return publish(*a.tape, "matmul", std::move(C), {ai, bi},
                 [ai, bi, m, k, n](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   const Tensor& A = t.value(ai);
                   const Tensor& B = t.value(bi);
                   Tensor& dA = t.grad_buffer(ai);
                   Tensor& dB = t.grad_buffer(bi);
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* grow = G.data() + i * n;
                     double* darow = dA.data() + i * k;
                     for (std::size_t p = 0; p < k; ++p) {
                       const double* brow = B.data() + p * n;
                       double acc = 0;
                       for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                       darow[p] += acc;
                     }
                     const double* arow = A.data() + i * k;
                     for (std::size_t p = 0; p < k; ++p) {
                       double av = arow[p];
                       double* dbrow = dB.data() + p * n;
                       for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                     }
                   }
                 });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!is_shape_suffix(B.shape(), A.shape())) shape_error("add", A, B);
  Tensor out = A;
  std::size_t bn = B.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % bn];
  std::size_t ai = a.index, bi = b.index;
  return publish(*a.tape, "add", std::move(out), {ai, bi},
                 [ai, bi, bn](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dA = t.grad_buffer(ai);
                   Tensor& dB = t.grad_buffer(bi);
                   for (std::size_t i = 0; i < G.size(); ++i) {
                     dA[i] += G[i];
                     dB[i % bn] += G[i];  // sum-reduce over broadcast axes
                   }
                 });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!A.same_shape(B)) shape_error("mul", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  std::size_t ai = a.index, bi = b.index;
  return publish(*a.tape, "mul", std::move(out), {ai, bi},
                 [ai, bi](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   const Tensor& A = t.value(ai);
                   const Tensor& B = t.value(bi);
                   Tensor& dA = t.grad_buffer(ai);
                   Tensor& dB = t.grad_buffer(bi);
                   for (std::size_t i = 0; i < G.size(); ++i) {
                     dA[i] += G[i] * B[i];
                     dB[i] += G[i] * A[i];
                   }
                 });
}

Var affine(Var x, double scale, double shift) {
  const Tensor& X = x.value();
  Tensor out = X;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * out[i] + shift;
  std::size_t xi = x.index;
  return publish(*x.tape, "affine", std::move(out), {xi},
                 [xi, scale](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i) dX[i] += scale * G[i];
                 });
}

Var sigmoid(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-X[i]));
  std::size_t xi = x.index;
  return publish(*x.tape, "sigmoid", std::move(out), {xi},
                 [xi](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   const Tensor& Y = t.value(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i)
                     dX[i] += G[i] * Y[i] * (1.0 - Y[i]);
                 });
}

Var tanh(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(X[i]);
  std::size_t xi = x.index;
  return publish(*x.tape, "tanh", std::move(out), {xi},
                 [xi](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   const Tensor& Y = t.value(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i)
                     dX[i] += G[i] * (1.0 - Y[i] * Y[i]);
                 });
}

Var relu(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > 0 ? X[i] : 0.0;
  std::size_t xi = x.index;
  return publish(*x.tape, "relu", std::move(out), {xi},
                 [xi](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   const Tensor& X = t.value(xi);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i)
                     if (X[i] > 0) dX[i] += G[i];
                 });
}

Var conv1d_temporal(Var x, Var w, Var b, std::size_t stride) {
  require_same_tape(x, w, "conv1d_temporal");
  require_same_tape(x, b, "conv1d_temporal");
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& Bv = b.value();
  if (X.rank() != 3 || W.rank() != 3 || X.dim(1) != W.dim(1)) shape_error("conv1d_temporal", X, W);
  std::size_t batch = X.dim(0), cin = X.dim(1), len = X.dim(2);
  std::size_t cout = W.dim(0), k = W.dim(2);
  if (Bv.rank() != 1 || Bv.dim(0) != cout) shape_error("conv1d_temporal", W, Bv);
  if (stride == 0) throw Error(errc::bad_argument, "conv1d_temporal: stride must be positive");
  if (len < k) {
    throw Error(errc::shape_mismatch,
                "conv1d_temporal: kernel " + std::to_string(k) + " longer than input " +
                    std::to_string(len));
  }
  std::size_t lout = (len - k) / stride + 1;
  Tensor out({batch, cout, lout});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* orow = out.data() + (bi * cout + co) * lout;
      double bias = Bv[co];
      for (std::size_t t = 0; t < lout; ++t) orow[t] = bias;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xrow = X.data() + (bi * cin + ci) * len;
        const double* wrow = W.data() + (co * cin + ci) * k;
        for (std::size_t t = 0; t < lout; ++t) {
          const double* xw = xrow + t * stride;
          double acc = 0;
          for (std::size_t j = 0; j < k; ++j) acc += xw[j] * wrow[j];
          orow[t] += acc;
        }
      }
    }
  }
  std::size_t xi = x.index, wi = w.index, bidx = b.index;
  return publish(*x.tape, "conv1d_temporal", std::move(out), {xi, wi, bidx},
                 [xi, wi, bidx, batch, cin, len, cout, k, lout, stride](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   const Tensor& X = t.value(xi);
                   const Tensor& W = t.value(wi);
                   Tensor& dX = t.grad_buffer(xi);
                   Tensor& dW = t.grad_buffer(wi);
                   Tensor& dB = t.grad_buffer(bidx);
                   for (std::size_t bi = 0; bi < batch; ++bi) {
                     for (std::size_t co = 0; co < cout; ++co) {
                       const double* grow = G.data() + (bi * cout + co) * lout;
                       double gsum = 0;
                       for (std::size_t tt = 0; tt < lout; ++tt) gsum += grow[tt];
                       dB[co] += gsum;
                       for (std::size_t ci = 0; ci < cin; ++ci) {
                         const double* xrow = X.data() + (bi * cin + ci) * len;
                         const double* wrow = W.data() + (co * cin + ci) * k;
                         double* dxrow = dX.data() + (bi * cin + ci) * len;
                         double* dwrow = dW.data() + (co * cin + ci) * k;
                         for (std::size_t tt = 0; tt < lout; ++tt) {
                           double g = grow[tt];
                           if (g == 0.0) continue;
                           const double* xw = xrow + tt * stride;
                           double* dxw = dxrow + tt * stride;
                           for (std::size_t j = 0; j < k; ++j) {
                             dxw[j] += g * wrow[j];
                             dwrow[j] += g * xw[j];
                           }
                         }
                       }
                     }
                   }
                 });
}

Var maxpool1d(Var x, std::size_t size, std::size_t stride) {
  const Tensor& X = x.value();
  if (X.rank() != 3) {
    throw Error(errc::shape_mismatch, "maxpool1d: expected rank-3 input, got " + X.shape_str());
  }
  if (size == 0 || stride == 0) throw Error(errc::bad_argument, "maxpool1d: size/stride must be positive");
  std::size_t batch = X.dim(0), ch = X.dim(1), len = X.dim(2);
  if (len < size) {
    throw Error(errc::shape_mismatch,
                "maxpool1d: window " + std::to_string(size) + " longer than input " +
                    std::to_string(len));
  }
  std::size_t lout = (len - size) / stride + 1;
  Tensor out({batch, ch, lout});
  auto argmax = std::make_shared<std::vector<std::size_t>>(batch * ch * lout);
  std::size_t idx = 0;
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double* xrow = X.data() + (bi * ch + c) * len;
      for (std::size_t t = 0; t < lout; ++t, ++idx) {
        std::size_t base = t * stride;
        std::size_t best = base;
        double bv = xrow[base];
        for (std::size_t j = 1; j < size; ++j) {
          if (xrow[base + j] > bv) {
            bv = xrow[base + j];
            best = base + j;
          }
        }
        out[idx] = bv;
        (*argmax)[idx] = (bi * ch + c) * len + best;
      }
    }
  }
  std::size_t xi = x.index;
  return publish(*x.tape, "maxpool1d", std::move(out), {xi},
                 [xi, argmax](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i) dX[(*argmax)[i]] += G[i];
                 });
}

Var conv2d(Var x, Var w, Var b, std::size_t stride) {
  require_same_tape(x, w, "conv2d");
  require_same_tape(x, b, "conv2d");
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& Bv = b.value();
  if (X.rank() != 4 || W.rank() != 4 || X.dim(1) != W.dim(1)) shape_error("conv2d", X, W);
  std::size_t batch = X.dim(0), cin = X.dim(1), h = X.dim(2), wd = X.dim(3);
  std::size_t cout = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  if (Bv.rank() != 1 || Bv.dim(0) != cout) shape_error("conv2d", W, Bv);
  if (stride == 0) throw Error(errc::bad_argument, "conv2d: stride must be positive");
  if (h < kh || wd < kw) {
    throw Error(errc::shape_mismatch, "conv2d: kernel larger than input " + X.shape_str());
  }
  std::size_t ho = (h - kh) / stride + 1, wo = (wd - kw) / stride + 1;
  Tensor out({batch, cout, ho, wo});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t co = 0; co < cout; ++co) {
      double bias = Bv[co];
      for (std::size_t i = 0; i < ho; ++i) {
        double* orow = out.data() + ((bi * cout + co) * ho + i) * wo;
        for (std::size_t j = 0; j < wo; ++j) orow[j] = bias;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t di = 0; di < kh; ++di) {
            const double* xrow = X.data() + ((bi * cin + ci) * h + i * stride + di) * wd;
            const double* wrow = W.data() + ((co * cin + ci) * kh + di) * kw;
            for (std::size_t j = 0; j < wo; ++j) {
              const double* xw = xrow + j * stride;
              double acc = 0;
              for (std::size_t dj = 0; dj < kw; ++dj) acc += xw[dj] * wrow[dj];
              orow[j] += acc;
            }
          }
        }
      }
    }
  }
  std::size_t xi = x.index, wi = w.index, bidx = b.index;
  return publish(
      *x.tape, "conv2d", std::move(out), {xi, wi, bidx},
      [xi, wi, bidx, batch, cin, h, wd, cout, kh, kw, ho, wo, stride](Tape& t, std::size_t node) {
        const Tensor& G = t.grad_buffer(node);
        const Tensor& X = t.value(xi);
        const Tensor& W = t.value(wi);
        Tensor& dX = t.grad_buffer(xi);
        Tensor& dW = t.grad_buffer(wi);
        Tensor& dB = t.grad_buffer(bidx);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t i = 0; i < ho; ++i) {
              const double* grow = G.data() + ((bi * cout + co) * ho + i) * wo;
              for (std::size_t j = 0; j < wo; ++j) {
                double g = grow[j];
                if (g == 0.0) continue;
                dB[co] += g;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  for (std::size_t di = 0; di < kh; ++di) {
                    const double* xrow =
                        X.data() + ((bi * cin + ci) * h + i * stride + di) * wd + j * stride;
                    double* dxrow =
                        dX.data() + ((bi * cin + ci) * h + i * stride + di) * wd + j * stride;
                    const double* wrow = W.data() + ((co * cin + ci) * kh + di) * kw;
                    double* dwrow = dW.data() + ((co * cin + ci) * kh + di) * kw;
                    for (std::size_t dj = 0; dj < kw; ++dj) {
                      dxrow[dj] += g * wrow[dj];
                      dwrow[dj] += g * xrow[dj];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Var maxpool2d(Var x, std::size_t size, std::size_t stride) {
  const Tensor& X = x.value();
  if (X.rank() != 4) {
    throw Error(errc::shape_mismatch, "maxpool2d: expected rank-4 input, got " + X.shape_str());
  }
  if (size == 0 || stride == 0) throw Error(errc::bad_argument, "maxpool2d: size/stride must be positive");
  std::size_t batch = X.dim(0), ch = X.dim(1), h = X.dim(2), w = X.dim(3);
  if (h < size || w < size) {
    throw Error(errc::shape_mismatch, "maxpool2d: window larger than input " + X.shape_str());
  }
  std::size_t ho = (h - size) / stride + 1, wo = (w - size) / stride + 1;
  Tensor out({batch, ch, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t idx = 0;
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double* plane = X.data() + (bi * ch + c) * h * w;
      for (std::size_t i = 0; i < ho; ++i) {
        for (std::size_t j = 0; j < wo; ++j, ++idx) {
          std::size_t bestpos = (i * stride) * w + j * stride;
          double bv = plane[bestpos];
          for (std::size_t di = 0; di < size; ++di) {
            for (std::size_t dj = 0; dj < size; ++dj) {
              std::size_t pos = (i * stride + di) * w + (j * stride + dj);
              if (plane[pos] > bv) {
                bv = plane[pos];
                bestpos = pos;
              }
            }
          }
          out[idx] = bv;
          (*argmax)[idx] = (bi * ch + c) * h * w + bestpos;
        }
      }
    }
  }
  std::size_t xi = x.index;
  return publish(*x.tape, "maxpool2d", std::move(out), {xi},
                 [xi, argmax](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i) dX[(*argmax)[i]] += G[i];
                 });
}

namespace {

// Channel layout for batchnorm: axis 1 holds the feature maps/features,
// statistics reduce over every other axis.
struct BnLayout {
  std::size_t channels, inner, count;  // count = elements per channel
};

BnLayout bn_layout(const Tensor& X) {
  if (X.rank() < 2) {
    throw Error(errc::shape_mismatch, "batchnorm: expected rank >= 2, got " + X.shape_str());
  }
  std::size_t channels = X.dim(1);
  std::size_t inner = 1;
  for (std::size_t a = 2; a < X.rank(); ++a) inner *= X.dim(a);
  return {channels, inner, X.dim(0) * inner};
}

}  // namespace

Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
              double eps, double momentum) {
  require_same_tape(x, gamma, "batchnorm");
  require_same_tape(x, beta, "batchnorm");
  const Tensor& X = x.value();
  BnLayout lay = bn_layout(X);
  const Tensor& Gm = gamma.value();
  const Tensor& Bt = beta.value();
  if (Gm.size() != lay.channels || Bt.size() != lay.channels ||
      running_mean.size() != lay.channels || running_var.size() != lay.channels) {
    shape_error("batchnorm", X, Gm);
  }
  std::size_t batch = X.dim(0), C = lay.channels, inner = lay.inner;
  auto index_of = [C, inner](std::size_t b, std::size_t c, std::size_t i) {
    return (b * C + c) * inner + i;
  };

  bool train = x.tape->recording();
  Tensor mean({C}), var({C});
  if (train) {
    double m = static_cast<double>(lay.count);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += X[index_of(b, c, i)];
      mean[c] = s / m;
      double sv = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          double d = X[index_of(b, c, i)] - mean[c];
          sv += d * d;
        }
      var[c] = sv / m;
      running_mean[c] = momentum * running_mean[c] + (1.0 - momentum) * mean[c];
      running_var[c] = momentum * running_var[c] + (1.0 - momentum) * var[c];
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  Tensor out(X.shape());
  auto xhat = std::make_shared<Tensor>(X.shape());
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < inner; ++i) {
        std::size_t p = index_of(b, c, i);
        double xh = (X[p] - mean[c]) * inv_std[c];
        (*xhat)[p] = xh;
        out[p] = Gm[c] * xh + Bt[c];
      }
    }
  }
  std::size_t xi = x.index, gi = gamma.index, bi2 = beta.index;
  auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
  return publish(
      *x.tape, "batchnorm", std::move(out), {xi, gi, bi2},
      [xi, gi, bi2, batch, C, inner, xhat, istd, index_of](Tape& t, std::size_t node) {
        const Tensor& G = t.grad_buffer(node);
        const Tensor& Gm = t.value(gi);
        Tensor& dX = t.grad_buffer(xi);
        Tensor& dGm = t.grad_buffer(gi);
        Tensor& dBt = t.grad_buffer(bi2);
        double m = static_cast<double>(batch * inner);
        for (std::size_t c = 0; c < C; ++c) {
          // dxhat = g * gamma; then the usual batch-statistics chain rule.
          double sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < inner; ++i) {
              std::size_t p = index_of(b, c, i);
              double dxh = G[p] * Gm[c];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * (*xhat)[p];
              dGm[c] += G[p] * (*xhat)[p];
              dBt[c] += G[p];
            }
          }
          double scale = (*istd)[c] / m;
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < inner; ++i) {
              std::size_t p = index_of(b, c, i);
              double dxh = G[p] * Gm[c];
              dX[p] += scale * (m * dxh - sum_dxhat - (*xhat)[p] * sum_dxhat_xhat);
            }
          }
        }
      });
}

Var concat(Var a, Var b, std::size_t axis) {
  require_same_tape(a, b, "concat");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != B.rank() || axis >= A.rank()) shape_error("concat", A, B);
  for (std::size_t d = 0; d < A.rank(); ++d) {
    if (d != axis && A.dim(d) != B.dim(d)) shape_error("concat", A, B);
  }
  std::vector<std::size_t> shape = A.shape();
  shape[axis] += B.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= A.dim(d);
  for (std::size_t d = axis + 1; d < A.rank(); ++d) inner *= A.dim(d);
  std::size_t wa = A.dim(axis) * inner, wb = B.dim(axis) * inner;
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (wa + wb), A.data() + o * wa, wa * sizeof(double));
    std::memcpy(out.data() + o * (wa + wb) + wa, B.data() + o * wb, wb * sizeof(double));
  }
  std::size_t ai = a.index, bi = b.index;
  return publish(*a.tape, "concat", std::move(out), {ai, bi},
                 [ai, bi, outer, wa, wb](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dA = t.grad_buffer(ai);
                   Tensor& dB = t.grad_buffer(bi);
                   // Upstream gradient splits exactly at the boundary.
                   for (std::size_t o = 0; o < outer; ++o) {
                     const double* g = G.data() + o * (wa + wb);
                     double* da = dA.data() + o * wa;
                     double* db = dB.data() + o * wb;
                     for (std::size_t i = 0; i < wa; ++i) da[i] += g[i];
                     for (std::size_t i = 0; i < wb; ++i) db[i] += g[wa + i];
                   }
                 });
}

Var mean_over_axis(Var x, std::size_t axis) {
  const Tensor& X = x.value();
  if (axis >= X.rank()) {
    throw Error(errc::shape_mismatch,
                "mean_over_axis: axis " + std::to_string(axis) + " out of range for " +
                    X.shape_str());
  }
  std::size_t outer = 1, inner = 1, n = X.dim(axis);
  for (std::size_t d = 0; d < axis; ++d) outer *= X.dim(d);
  for (std::size_t d = axis + 1; d < X.rank(); ++d) inner *= X.dim(d);
  std::vector<std::size_t> shape;
  for (std::size_t d = 0; d < X.rank(); ++d)
    if (d != axis) shape.push_back(X.dim(d));
  if (shape.empty()) shape.push_back(1);
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += X[(o * n + j) * inner + i];
      out[o * inner + i] = s / static_cast<double>(n);
    }
  }
  std::size_t xi = x.index;
  return publish(*x.tape, "mean_over_axis", std::move(out), {xi},
                 [xi, outer, inner, n](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   double invn = 1.0 / static_cast<double>(n);
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t i = 0; i < inner; ++i) {
                       double g = G[o * inner + i] * invn;
                       for (std::size_t j = 0; j < n; ++j) dX[(o * n + j) * inner + i] += g;
                     }
                 });
}

Var dropout(Var x, double drop_p) {
  if (drop_p < 0.0 || drop_p >= 1.0) {
    throw Error(errc::bad_argument, "dropout: drop probability must be in [0, 1)");
  }
  if (!x.tape->recording() || drop_p == 0.0) return x;  // identity at inference
  const Tensor& X = x.value();
  double keep = 1.0 - drop_p;
  auto mask = std::make_shared<std::vector<double>>(X.size());
  Rng& rng = x.tape->rng();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    double m = rng.uniform() >= drop_p ? 1.0 / keep : 0.0;  // inverted dropout
    (*mask)[i] = m;
    out[i] = X[i] * m;
  }
  std::size_t xi = x.index;
  return publish(*x.tape, "dropout", std::move(out), {xi},
                 [xi, mask](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i) dX[i] += G[i] * (*mask)[i];
                 });
}

Var mse_loss(Var pred, Var target) {
  require_same_tape(pred, target, "mse_loss");
  const Tensor& P = pred.value();
  const Tensor& T = target.value();
  if (!P.same_shape(T)) shape_error("mse_loss", P, T);
  double acc = 0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    double d = P[i] - T[i];
    acc += d * d;
  }
  double n = static_cast<double>(P.size());
  Tensor out = Tensor::scalar(acc / n);
  std::size_t pi = pred.index, ti = target.index;
  return publish(*pred.tape, "mse_loss", std::move(out), {pi, ti},
                 [pi, ti, n](Tape& t, std::size_t node) {
                   double g = t.grad_buffer(node)[0];
                   const Tensor& P = t.value(pi);
                   const Tensor& T = t.value(ti);
                   Tensor& dP = t.grad_buffer(pi);
                   Tensor& dT = t.grad_buffer(ti);
                   double c = 2.0 * g / n;
                   for (std::size_t i = 0; i < P.size(); ++i) {
                     double d = c * (P[i] - T[i]);
                     dP[i] += d;
                     dT[i] -= d;
                   }
                 });
}

Var reshape(Var x, std::vector<std::size_t> shape) {
  const Tensor& X = x.value();
  Tensor out = X.reshaped(shape);
  std::size_t xi = x.index;
  return publish(*x.tape, "reshape", std::move(out), {xi},
                 [xi](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t i = 0; i < G.size(); ++i) dX[i] += G[i];
                 });
}

Var flatten(Var x) {
  const Tensor& X = x.value();
  if (X.rank() == 2) return x;
  std::size_t batch = X.dim(0);
  return reshape(x, {batch, X.size() / batch});
}

Var slice_time(Var x, std::size_t t) {
  const Tensor& X = x.value();
  if (X.rank() != 3 || t >= X.dim(2)) {
    throw Error(errc::shape_mismatch,
                "slice_time: step " + std::to_string(t) + " out of range for " + X.shape_str());
  }
  std::size_t batch = X.dim(0), d = X.dim(1), T = X.dim(2);
  Tensor out({batch, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] = X[(b * d + j) * T + t];
  std::size_t xi = x.index;
  return publish(*x.tape, "slice_time", std::move(out), {xi},
                 [xi, batch, d, T, t](Tape& tp, std::size_t node) {
                   const Tensor& G = tp.grad_buffer(node);
                   Tensor& dX = tp.grad_buffer(xi);
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t j = 0; j < d; ++j) dX[(b * d + j) * T + t] += G[b * d + j];
                 });
}

Var slice_cols(Var x, std::size_t start, std::size_t len) {
  const Tensor& X = x.value();
  if (X.rank() > 2 || start + len > X.dim(X.rank() - 1)) {
    throw Error(errc::shape_mismatch,
                "slice_cols: range [" + std::to_string(start) + ", " +
                    std::to_string(start + len) + ") out of bounds for " + X.shape_str());
  }
  if (X.rank() == 1) {
    Tensor out({len});
    std::memcpy(out.data(), X.data() + start, len * sizeof(double));
    std::size_t xi1 = x.index;
    return publish(*x.tape, "slice_cols", std::move(out), {xi1},
                   [xi1, start, len](Tape& t, std::size_t node) {
                     const Tensor& G = t.grad_buffer(node);
                     Tensor& dX = t.grad_buffer(xi1);
                     for (std::size_t j = 0; j < len; ++j) dX[start + j] += G[j];
                   });
  }
  std::size_t batch = X.dim(0), n = X.dim(1);
  Tensor out({batch, len});
  for (std::size_t b = 0; b < batch; ++b)
    std::memcpy(out.data() + b * len, X.data() + b * n + start, len * sizeof(double));
  std::size_t xi = x.index;
  return publish(*x.tape, "slice_cols", std::move(out), {xi},
                 [xi, batch, n, start, len](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   Tensor& dX = t.grad_buffer(xi);
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t j = 0; j < len; ++j)
                       dX[b * n + start + j] += G[b * len + j];
                 });
}

Var stack_time(std::span<const Var> steps) {
  if (steps.empty()) throw Error(errc::bad_argument, "stack_time: no steps");
  const Tensor& first = steps[0].value();
  if (first.rank() != 2) {
    throw Error(errc::shape_mismatch, "stack_time: steps must be rank-2, got " + first.shape_str());
  }
  std::size_t batch = first.dim(0), d = first.dim(1), T = steps.size();
  std::vector<std::size_t> inputs;
  inputs.reserve(T);
  Tensor out({batch, d, T});
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor& S = steps[t].value();
    if (!S.same_shape(first)) shape_error("stack_time", first, S);
    inputs.push_back(steps[t].index);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < d; ++j) out[(b * d + j) * T + t] = S[b * d + j];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(inputs);
  return publish(*steps[0].tape, "stack_time", std::move(out), std::move(inputs),
                 [idx, batch, d, T](Tape& t, std::size_t node) {
                   const Tensor& G = t.grad_buffer(node);
                   for (std::size_t s = 0; s < T; ++s) {
                     Tensor& dS = t.grad_buffer((*idx)[s]);
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t j = 0; j < d; ++j)
                         dS[b * d + j] += G[(b * d + j) * T + s];
                   }
                 });
}

}  // namespace ops
}  // namespace moodnet
