#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "deepsca/random.hpp"
#include "deepsca/tensor.hpp"

// Reverse-mode differentiation over Tensor-valued operations.
//
// Each op builds a node holding its value, its inputs and a closure that
// pushes the output gradient into the inputs. Calling backward() on a result
// walks the recorded graph in reverse topological order. Nodes that do not
// (transitively) depend on a leaf with requires_grad receive no gradient.
namespace deepsca {

class Variable {
 public:
  /// Adds the contribution of `grad_out` to the gradients of `inputs`.
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Variable> inputs)>;

  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);
  /// Leaf sharing storage with `value` (used for parameters).
  static Variable shared(std::shared_ptr<const Tensor> value, bool requires_grad);
  static Variable make(Tensor value, std::vector<Variable> inputs, BackwardFn fn);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return *node_->value; }
  const Shape& shape() const { return node_->value->shape; }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.data.empty(); }
  const Tensor& grad() const { return node_->grad; }
  /// Gradient buffer, zero-initialised on first access.
  Tensor& grad_mut();

  /// Runs reverse mode with `seed` as d(objective)/d(this).
  void backward(const Tensor& seed) const;
  /// Same with seed 1 for scalar (single-element) results.
  void backward() const;

  const void* id() const { return node_.get(); }

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Variable> inputs;
    BackwardFn backward_fn;
  };
  std::shared_ptr<Node> node_;
};

/// Differentiable primitives. Feature maps are [batch, channels, time].
namespace ops {

/// 1D convolution with "same" padding: output length ceil(T / stride).
/// weight [C_out, C_in, K], bias [C_out].
Variable conv1d(const Variable& x, const Variable& weight, const Variable& bias,
                std::size_t stride = 1);
/// Average pooling; a trailing partial window averages the samples it covers,
/// so the output length is ceil((T - size) / stride) + 1.
Variable avg_pool1d(const Variable& x, std::size_t size, std::size_t stride);
/// [B, C, T] -> [B, C]
Variable global_avg_pool(const Variable& x);
Variable global_max_pool(const Variable& x);
/// [B, C, T] -> [B, 1, T]
Variable channel_mean(const Variable& x);
Variable channel_max(const Variable& x);
/// x [B, F], weight [O, F], bias [O] -> [B, O]
Variable linear(const Variable& x, const Variable& weight, const Variable& bias);
Variable relu(const Variable& x);
Variable sigmoid(const Variable& x);
/// Row-wise softmax over the last axis of a [B, K] tensor.
Variable softmax(const Variable& x);
Variable add(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
/// x [B, C, T] times m of shape [B, C, 1], [B, 1, T] or [B, C, T].
Variable broadcast_mul(const Variable& x, const Variable& m);
Variable reshape(const Variable& x, Shape shape);
/// Concatenate two [B, C_i, T] maps along channels.
Variable concat_channels(const Variable& a, const Variable& b);
/// [B, C, T] -> [B, C * T]
Variable flatten(const Variable& x);
/// Inverted dropout; identity when !training or rate == 0.
Variable dropout(const Variable& x, double rate, Rng& rng, bool training);

/// Mean categorical cross-entropy of softmax(logits) against integer labels.
Variable cross_entropy(const Variable& logits, std::span<const int> labels);
/// Sum over rows of logits[b, classes[b]].
Variable class_score_sum(const Variable& logits, std::span<const int> classes);
/// 0.5 * sum of squares.
Variable half_sum_squares(const Variable& x);

}  // namespace ops

/// Plain (non-recording) softmax of a logits row.
void softmax_inplace(std::span<double> row);

}  // namespace deepsca
