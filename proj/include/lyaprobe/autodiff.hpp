#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// The graph is built on the fly: every op that has at least one operand with
// requires_grad records its parents and a backward closure. Each node carries
// a creation index, and backward() visits reachable nodes in exact reverse
// creation order. No broadcasting is performed except between a tensor and a
// rank-0 scalar.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lyaprobe::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; only meaningful for leaves outside a live graph.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient accumulated by backward(); zeros if none has reached this tensor.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values as a fresh leaf, detached from any graph.
  Tensor detach(bool requires_grad = false) const;

  std::uint64_t id() const { return node_->id; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

// Builds an op result. The backward closure is dropped when no parent needs
// gradients.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops (equal shapes, or one operand rank-0).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Elementwise unary ops.
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
// Hinge max(0, x); subgradient 0 at the kink.
Tensor max_with_zero(const Tensor& x);

enum class UnaryOp { Neg, Sigmoid, Tanh, Relu, MaxWithZero };
enum class BinaryOp { Add, Sub, Mul };
Tensor elementwise(UnaryOp op, const Tensor& x);
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);

// Reductions. axis == kAllAxes reduces to a rank-0 scalar.
inline constexpr int kAllAxes = -1;
enum class ReduceOp { Sum, Mean };
Tensor reduce(ReduceOp op, const Tensor& x, int axis = kAllAxes);
Tensor sum(const Tensor& x, int axis = kAllAxes);
Tensor mean(const Tensor& x, int axis = kAllAxes);

// Shape plumbing.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// [1, n] -> [m, n].
Tensor repeat_rows(const Tensor& row, std::size_t m);
// Rows of a rank-2 tensor selected by index (repeats allowed).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Multi-head scaled dot-product attention. q, k, v are [rows, dim] holding
// consecutive sequences of seq_len tokens each (seq_len 0 means one sequence
// spanning all rows). Heads split the columns evenly.
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::size_t heads, std::size_t seq_len = 0);

// Attention probabilities for inspection, laid out [sequence][head][i][j].
std::vector<double> attention_weights(const Tensor& q, const Tensor& k, std::size_t heads,
                                      std::size_t seq_len = 0);

inline constexpr double kLayerNormEps = 1e-5;
// Normalizes each row of a rank-2 tensor, then applies gain and bias
// (both shaped like the last axis).
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets,
// evaluated in the numerically stable logit form.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

// Accumulates d(loss)/d(leaf) into every reachable requires_grad tensor.
// Intermediate gradients are reset per call; leaf gradients accumulate.
void backward(const Tensor& loss);

}  // namespace lyaprobe::ad
