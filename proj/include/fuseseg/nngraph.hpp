#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fuseseg/common.hpp"

namespace fuseseg::nn {

struct Shape5 {
  int n = 1, c = 1, d = 1, h = 1, w = 1;

  int64_t numel() const {
    return static_cast<int64_t>(n) * c * d * h * w;
  }
  int64_t spatial() const { return static_cast<int64_t>(d) * h * w; }
  bool operator==(const Shape5&) const = default;
  std::string str() const;
};

// Dense 5-D tensor. Logical shape is (N, C, D, H, W); memory layout is
// channels-last: flat index = (((n*D + d)*H + h)*W + w)*C + c. The layout
// keeps per-voxel channel vectors contiguous, which is what the conv GEMM
// formulation and the softmax/normalization kernels want.
template <typename T>
struct TensorT {
  Shape5 shape;
  std::vector<T> data;

  static TensorT zeros(const Shape5& s) {
    TensorT t;
    t.shape = s;
    t.data.assign(static_cast<size_t>(s.numel()), T(0));
    return t;
  }
  static TensorT full(const Shape5& s, T v) {
    TensorT t = zeros(s);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int64_t numel() const { return shape.numel(); }
  size_t idx(int n, int c, int d, int h, int w) const {
    return (((static_cast<size_t>(n) * shape.d + d) * shape.h + h) * shape.w + w) *
               shape.c + c;
  }
  T at(int n, int c, int d, int h, int w) const { return data[idx(n, c, d, h, w)]; }
  T& at(int n, int c, int d, int h, int w) { return data[idx(n, c, d, h, w)]; }
};

using Tensor5 = TensorT<float>;
using Tensor5d = TensorT<double>;

Tensor5d widen(const Tensor5& t);
Tensor5 narrow(const Tensor5d& t);

// One recorded operation output. Backward closures accumulate into the
// parents' grad buffers; the tape owns all nodes.
template <typename T>
struct NodeT {
  TensorT<T> value;
  std::vector<T> grad;  // allocated by Tape::backward when needed
  bool requires_grad = false;
  std::function<void()> backward;

  T* grad_data() { return grad.data(); }
};

// Define-by-run tape: insertion order is a topological order, so the
// reverse sweep visits every node exactly once.
template <typename T>
class TapeT {
 public:
  NodeT<T>* leaf(TensorT<T> v, bool requires_grad = false);
  NodeT<T>* record(TensorT<T> v, bool requires_grad, std::function<void()> backward);

  // Seeds root (a scalar node) with grad 1 and runs the reverse sweep.
  void backward(NodeT<T>* root);

  void clear();
  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<NodeT<T>>> nodes_;
};

using Tape = TapeT<float>;
using Taped = TapeT<double>;

struct ConvSpec {
  std::array<int, 3> stride{1, 1, 1};  // d, h, w
  std::array<int, 3> pad{0, 0, 0};
};

// Direct cross-correlation (no kernel flip). x: (N,Cin,D,H,W),
// w: (Cout,Cin,kd,kh,kw), b: (1,Cout,1,1,1). Output dims per axis:
// floor((in + 2*pad - k)/stride) + 1, all >= 1. Errors: ShapeMismatch.
template <typename T>
NodeT<T>* conv3d(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* w, NodeT<T>* b, const ConvSpec& spec);

// Adjoint of strided conv3d; w: (Cin,Cout,kd,kh,kw); output dims
// (in-1)*stride + k.
template <typename T>
NodeT<T>* conv3d_transpose(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* w,
                           const std::array<int, 3>& stride);

// Per-(sample, channel) standardization over D*H*W with population
// variance; gamma/beta: (1,C,1,1,1).
template <typename T>
NodeT<T>* instance_norm(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* gamma, NodeT<T>* beta,
                        T eps = T(1e-5));

template <typename T>
NodeT<T>* leaky_relu(TapeT<T>& tape, NodeT<T>* x, T slope = T(0.01));

template <typename T>
NodeT<T>* concat_channels(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b);

// Numerically stable per-voxel softmax over the channel axis (C >= 2).
template <typename T>
NodeT<T>* softmax_channels(TapeT<T>& tape, NodeT<T>* x);

template <typename T>
NodeT<T>* select_channel(TapeT<T>& tape, NodeT<T>* x, int channel);

template <typename T>
NodeT<T>* add(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b);

template <typename T>
NodeT<T>* scale(TapeT<T>& tape, NodeT<T>* a, T s);

// dot(x, weights) as a scalar node; the reduction used to build scalar
// objectives out of tensor-valued ops (gradcheck uses it).
template <typename T>
NodeT<T>* weighted_sum(TapeT<T>& tape, NodeT<T>* x, const TensorT<T>& weights);

// Mean over voxels of -[y ln p + (1-y) ln(1-p)] with p clamped to
// [1e-7, 1-1e-7]. p and y share shape, single channel.
template <typename T>
NodeT<T>* bce_loss(TapeT<T>& tape, NodeT<T>* p, const TensorT<T>& y);

// 1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth).
template <typename T>
NodeT<T>* soft_dice_loss(TapeT<T>& tape, NodeT<T>* p, const TensorT<T>& y,
                         T smooth = T(1));

template <typename T>
struct CombinedLoss {
  NodeT<T>* total = nullptr;                 // mean over labels of (bce + dice)
  std::vector<NodeT<T>*> bce, dice;          // per label, for logging
};

template <typename T>
CombinedLoss<T> combined_loss(TapeT<T>& tape, const std::vector<NodeT<T>*>& head_probs,
                              const std::vector<TensorT<T>>& targets, T smooth = T(1));

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Standard bias-corrected Adam over a fixed list of parameter tensors.
class AdamState {
 public:
  AdamState(const std::vector<int64_t>& param_sizes, const AdamConfig& cfg = {});

  // grads[i] must point at param_sizes[i] floats. Errors: ShapeMismatch.
  void step(const std::vector<Tensor5*>& params, const std::vector<const float*>& grads);

  int64_t t() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// Finite-difference gradient verification, run entirely in double
// ("64-bit shadow mode"). `build` constructs a scalar objective from the
// given inputs on the provided tape; every input element is perturbed by
// +-h. Relative error is |analytic - numeric| / max(1, |analytic|,
// |numeric|).
struct GradCheckIssue {
  int input_index;
  int64_t flat_index;
  double analytic, numeric, rel_err;
};

struct GradCheckReport {
  double max_rel_err = 0;
  std::vector<GradCheckIssue> violations;  // entries exceeding tol
  bool passed() const { return violations.empty(); }
};

using GraphBuilder =
    std::function<NodeT<double>*(TapeT<double>&, const std::vector<NodeT<double>*>&)>;

GradCheckReport gradcheck(const GraphBuilder& build, const std::vector<Tensor5d>& inputs,
                          double h = 1e-3, double tol = 1e-3);

}  // namespace fuseseg::nn
