#pragma once

// Reverse-mode differentiation over rank-2 tensors.
//
// A Tape records every node created during one forward evaluation. Node
// creation order is a topological order, so backward() simply walks the
// nodes in reverse. Parameters enter a tape as leaves; their gradients stay
// on the tape until accumulate_param_grads() adds them to the store, which
// lets independent tapes run concurrently over a shared read-only model.

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "cosynorm/tensor.hpp"

namespace cosynorm {

template <typename S>
class Tape;

/// Handle to a node on a tape.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const S> value() const;
  S item() const { return value()[0]; }
  Tensor<S> to_tensor() const;
};

template <typename S>
class Tape {
 public:
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    Parameter<S>* param = nullptr;
    std::function<void(Tape&)> backward;
  };

  /// With record_grad == false no backward closures are stored (inference).
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(std::size_t rows, std::size_t cols, std::vector<S> value);
  Var<S> constant(const Tensor<S>& t);
  Var<S> param(Parameter<S>& p);

  /// Seeds d(loss)/d(loss) = 1; loss must be 1x1.
  void backward(Var<S> loss);
  void accumulate_param_grads() const;

  bool record_grad() const { return record_grad_; }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds a node. The closure runs only if some input requires a gradient.
  Var<S> push(std::size_t rows, std::size_t cols, std::vector<S> value,
              std::initializer_list<Var<S>> inputs, std::function<void(Tape&)> backward);

  /// Gradient buffer of a node, allocated on first use.
  std::vector<S>& grad(int id);

 private:
  bool record_grad_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<S>*, int> bound_;
};

// ---- elementwise and broadcasting ----
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, S c);
template <typename S> Var<S> add_scalar(Var<S> a, S c);
/// a (n x m) + r (1 x m) broadcast over rows.
template <typename S> Var<S> add_row(Var<S> a, Var<S> r);
/// a (n x m) * r (1 x m) broadcast over rows.
template <typename S> Var<S> mul_row(Var<S> a, Var<S> r);
template <typename S> Var<S> broadcast_rows(Var<S> r, std::size_t n);
template <typename S> Var<S> silu(Var<S> a);

// ---- linear algebra ----
template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
template <typename S> Var<S> transpose(Var<S> a);
/// x W + b with W (in x out), b (1 x out).
template <typename S> Var<S> affine(Var<S> x, Var<S> w, Var<S> b);

// ---- shape ----
template <typename S> Var<S> concat_cols(Var<S> a, Var<S> b);
template <typename S> Var<S> slice_cols(Var<S> a, std::size_t start, std::size_t count);
/// Rows of a zero-padded input gathered for a 1-D convolution: output row j
/// holds input rows j*stride + o - kernel/2 for o in [0, kernel).
template <typename S> Var<S> conv_frames(Var<S> x, std::size_t kernel, std::size_t stride);
template <typename S> Var<S> detach(Var<S> a);

// ---- reductions ----
template <typename S> Var<S> mean_rows(Var<S> a);
template <typename S> Var<S> sum_all(Var<S> a);
template <typename S> Var<S> mean_all(Var<S> a);
/// mean((a - target)^2) over every element.
template <typename S> Var<S> mse(Var<S> a, const std::vector<S>& target);

// ---- normalization ----
inline constexpr double kLayerNormEps = 1e-6;
/// Per-row standardization without affine parameters.
template <typename S> Var<S> layer_norm(Var<S> a);
template <typename S> Var<S> softmax_rows(Var<S> a);
template <typename S> Var<S> log_softmax_rows(Var<S> a);

// ---- attention ----
inline constexpr double kRopeBase = 10000.0;
/// Rotates each head's channel pairs (2i, 2i+1) by position * base^(-2i/head_dim).
template <typename S>
Var<S> rope(Var<S> x, std::span<const double> positions, std::size_t n_heads,
            double base = kRopeBase);
/// softmax(Q K^T / sqrt(d_head)) V per head. Positional rotation is applied by the caller.
template <typename S> Var<S> attention(Var<S> q, Var<S> k, Var<S> v, std::size_t n_heads);

}  // namespace cosynorm
