#include "lyaprobe/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "lyaprobe/error.hpp"

namespace lyaprobe::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got shape " + shape_str(x.shape()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Result of a binary op between equal shapes or tensor/rank-0 pairs.
Shape binary_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.rank() == 0) return a.shape();
  if (a.rank() == 0) return b.shape();
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

// Fold a gradient of the broadcast result back onto an operand.
void accumulate_operand(Node& operand, const std::vector<double>& g) {
  auto& og = operand.grad_buffer();
  if (og.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) og[i] += g[i];
  } else {
    double s = 0.0;
    for (double v : g) s += v;
    og[0] += s;
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                         std::to_string(data.size()) + " values");
  }
  return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({}, {value}, requires_grad));
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->data[row * node_->shape.back() + col];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach(bool requires_grad) const {
  return Tensor(new_node(node_->shape, node_->data, requires_grad));
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
  auto node = new_node(std::move(shape), std::move(data), needs);
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// matmul

namespace {

// C[m, n] += A[m, k] * B[k, n], row-major, k unrolled by four.
void accumulate_product(std::size_t m, std::size_t k, std::size_t n, const double* A,
                        const double* B, double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = C + i * n;
    const double* arow = A + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
      if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
      const double* b0 = B + p * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
      }
    }
    for (; p < k; ++p) {
      const double a = arow[p];
      if (a == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += a * b[j];
    }
  }
}

std::vector<double> transposed(const double* X, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = X[r * cols + c];
  }
  return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  accumulate_product(m, k, n, a.data().data(), b.data().data(), out.data());
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const double* G = self.grad.data();
    if (an.requires_grad) {
      // grad_a = G * B^T
      const auto bt = transposed(bn.data.data(), k, n);
      accumulate_product(m, n, k, G, bt.data(), an.grad_buffer().data());
    }
    if (bn.requires_grad) {
      // grad_b = A^T * G
      const auto at = transposed(an.data.data(), m, k);
      accumulate_product(k, m, n, at.data(), G, bn.grad_buffer().data());
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  static constexpr const char* kNames[] = {"add", "sub", "mul"};
  Shape shape = binary_shape(a, b, kNames[static_cast<int>(op)]);
  const std::size_t n = shape_numel(shape);
  const bool a_scalar = a.shape() != shape;
  const bool b_scalar = b.shape() != shape;
  const auto A = a.data();
  const auto B = b.data();
  auto av = [&](std::size_t i) { return a_scalar ? A[0] : A[i]; };
  auto bv = [&](std::size_t i) { return b_scalar ? B[0] : B[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case BinaryOp::Add: out[i] = av(i) + bv(i); break;
      case BinaryOp::Sub: out[i] = av(i) - bv(i); break;
      case BinaryOp::Mul: out[i] = av(i) * bv(i); break;
    }
  }
  return make_result(std::move(shape), std::move(out), {a, b},
                     [op, n, a_scalar, b_scalar](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const auto& g = self.grad;
    if (an.requires_grad) {
      std::vector<double> ga(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double bi = b_scalar ? bn.data[0] : bn.data[i];
        ga[i] = op == BinaryOp::Mul ? g[i] * bi : g[i];
      }
      accumulate_operand(an, ga);
    }
    if (bn.requires_grad) {
      std::vector<double> gb(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double ai = a_scalar ? an.data[0] : an.data[i];
        gb[i] = op == BinaryOp::Mul ? g[i] * ai : (op == BinaryOp::Sub ? -g[i] : g[i]);
      }
      accumulate_operand(bn, gb);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }

Tensor elementwise(UnaryOp op, const Tensor& x) {
  const auto X = x.data();
  const std::size_t n = X.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = X[i];
    switch (op) {
      case UnaryOp::Neg: out[i] = -v; break;
      case UnaryOp::Sigmoid: out[i] = sigmoid_scalar(v); break;
      case UnaryOp::Tanh: out[i] = std::tanh(v); break;
      case UnaryOp::Relu:
      case UnaryOp::MaxWithZero: out[i] = v > 0.0 ? v : 0.0; break;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [op, n](Node& self) {
    Node& xn = *self.parents[0];
    auto& gx = xn.grad_buffer();
    const auto& g = self.grad;
    const auto& y = self.data;
    for (std::size_t i = 0; i < n; ++i) {
      switch (op) {
        case UnaryOp::Neg: gx[i] -= g[i]; break;
        case UnaryOp::Sigmoid: gx[i] += g[i] * y[i] * (1.0 - y[i]); break;
        case UnaryOp::Tanh: gx[i] += g[i] * (1.0 - y[i] * y[i]); break;
        case UnaryOp::Relu:
        case UnaryOp::MaxWithZero:
          if (xn.data[i] > 0.0) gx[i] += g[i];
          break;
      }
    }
  });
}

Tensor neg(const Tensor& x) { return elementwise(UnaryOp::Neg, x); }
Tensor sigmoid(const Tensor& x) { return elementwise(UnaryOp::Sigmoid, x); }
Tensor tanh(const Tensor& x) { return elementwise(UnaryOp::Tanh, x); }
Tensor relu(const Tensor& x) { return elementwise(UnaryOp::Relu, x); }
Tensor max_with_zero(const Tensor& x) { return elementwise(UnaryOp::MaxWithZero, x); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v += value;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor reduce(ReduceOp op, const Tensor& x, int axis) {
  if (axis == kAllAxes) {
    const std::size_t n = x.numel();
    if (n == 0) throw DimensionError("reduce: empty reduction over " + shape_str(x.shape()));
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double factor = op == ReduceOp::Mean ? 1.0 / static_cast<double>(n) : 1.0;
    return make_result({}, {s * factor}, {x}, [factor](Node& self) {
      auto& gx = self.parents[0]->grad_buffer();
      const double g = self.grad[0] * factor;
      for (double& v : gx) v += g;
    });
  }
  if (axis < 0 || static_cast<std::size_t>(axis) >= x.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
  }
  const auto ax = static_cast<std::size_t>(axis);
  const std::size_t len = x.dim(ax);
  if (len == 0) throw DimensionError("reduce: empty reduction along axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != ax) out_shape.push_back(x.dim(i));
  }
  const double factor = op == ReduceOp::Mean ? 1.0 / static_cast<double>(len) : 1.0;
  const auto X = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < len; ++r) {
      const double* src = X.data() + (o * len + r) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  for (double& v : out) v *= factor;
  return make_result(std::move(out_shape), std::move(out), {x},
                     [outer, len, inner, factor](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      const double* g = self.grad.data() + o * inner;
      for (std::size_t r = 0; r < len; ++r) {
        double* dst = gx.data() + (o * len + r) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += factor * g[i];
      }
    }
  });
}

Tensor sum(const Tensor& x, int axis) { return reduce(ReduceOp::Sum, x, axis); }
Tensor mean(const Tensor& x, int axis) { return reduce(ReduceOp::Mean, x, axis); }

// ---------------------------------------------------------------------------
// shape plumbing

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(first));
  }
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * w, w, out.data() + o * total * inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result(std::move(out_shape), std::move(out), std::move(parents),
                     [outer, widths, row = total * inner](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& pn = *self.parents[k];
      if (pn.requires_grad) {
        auto& g = pn.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * row + off;
          double* dst = g.data() + o * widths[k];
          for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
        }
      }
      off += widths[k];
    }
  });
}

Tensor repeat_rows(const Tensor& row, std::size_t m) {
  if (row.rank() != 2 || row.dim(0) != 1) {
    throw DimensionError("repeat_rows: expected [1, n], got " + shape_str(row.shape()));
  }
  const std::size_t n = row.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(row.data().data(), n, out.data() + i * n);
  return make_result({m, n}, std::move(out), {row}, [m, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t n = x.dim(1);
  std::vector<double> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) +
                           " out of range for shape " + shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[r] * n, n, out.data() + r * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), n}, std::move(out), {x}, [idx, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// attention

namespace {

struct AttentionLayout {
  std::size_t rows, dim, heads, head_dim, seq_len, sequences;
};

AttentionLayout attention_layout(const Tensor& q, const Tensor& k, std::size_t heads,
                                 std::size_t seq_len) {
  require_rank(q, 2, "softmax_attention");
  if (k.shape() != q.shape()) {
    throw DimensionError("softmax_attention: q/k shape mismatch " + shape_str(q.shape()) +
                         " vs " + shape_str(k.shape()));
  }
  AttentionLayout L{};
  L.rows = q.dim(0);
  L.dim = q.dim(1);
  if (heads == 0 || L.dim % heads != 0) {
    throw ConfigError("softmax_attention: dim " + std::to_string(L.dim) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  L.heads = heads;
  L.head_dim = L.dim / heads;
  L.seq_len = seq_len == 0 ? L.rows : seq_len;
  if (L.seq_len == 0 || L.rows % L.seq_len != 0) {
    throw DimensionError("softmax_attention: " + std::to_string(L.rows) +
                         " rows do not split into sequences of " + std::to_string(L.seq_len));
  }
  L.sequences = L.rows / L.seq_len;
  return L;
}

// Softmax probabilities, [sequence][head][i][j].
std::vector<double> attention_probs(const AttentionLayout& L, const double* Q, const double* K) {
  const std::size_t T = L.seq_len;
  const double inv = 1.0 / std::sqrt(static_cast<double>(L.head_dim));
  std::vector<double> P(L.sequences * L.heads * T * T);
  std::vector<double> row(T);
  for (std::size_t s = 0; s < L.sequences; ++s) {
    for (std::size_t h = 0; h < L.heads; ++h) {
      double* ps = P.data() + (s * L.heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = Q + (s * T + i) * L.dim + h * L.head_dim;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < T; ++j) {
          const double* kj = K + (s * T + j) * L.dim + h * L.head_dim;
          double dot = 0.0;
          for (std::size_t c = 0; c < L.head_dim; ++c) dot += qi[c] * kj[c];
          row[j] = dot * inv;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < T; ++j) ps[i * T + j] = row[j] / z;
      }
    }
  }
  return P;
}

}  // namespace

std::vector<double> attention_weights(const Tensor& q, const Tensor& k, std::size_t heads,
                                      std::size_t seq_len) {
  const auto L = attention_layout(q, k, heads, seq_len);
  return attention_probs(L, q.data().data(), k.data().data());
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                         std::size_t seq_len) {
  const auto L = attention_layout(q, k, heads, seq_len);
  if (v.shape() != q.shape()) {
    throw DimensionError("softmax_attention: q/v shape mismatch " + shape_str(q.shape()) +
                         " vs " + shape_str(v.shape()));
  }
  auto P = attention_probs(L, q.data().data(), k.data().data());
  const std::size_t T = L.seq_len;
  const double* V = v.data().data();
  std::vector<double> out(L.rows * L.dim, 0.0);
  for (std::size_t s = 0; s < L.sequences; ++s) {
    for (std::size_t h = 0; h < L.heads; ++h) {
      const double* ps = P.data() + (s * L.heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        double* oi = out.data() + (s * T + i) * L.dim + h * L.head_dim;
        for (std::size_t j = 0; j < T; ++j) {
          const double a = ps[i * T + j];
          const double* vj = V + (s * T + j) * L.dim + h * L.head_dim;
          for (std::size_t c = 0; c < L.head_dim; ++c) oi[c] += a * vj[c];
        }
      }
    }
  }
  return make_result({L.rows, L.dim}, std::move(out), {q, k, v},
                     [L, P = std::move(P)](Node& self) {
    Node& qn = *self.parents[0];
    Node& kn = *self.parents[1];
    Node& vn = *self.parents[2];
    const std::size_t T = L.seq_len;
    const double inv = 1.0 / std::sqrt(static_cast<double>(L.head_dim));
    const double* G = self.grad.data();
    std::vector<double> dA(T * T);
    for (std::size_t s = 0; s < L.sequences; ++s) {
      for (std::size_t h = 0; h < L.heads; ++h) {
        const double* ps = P.data() + (s * L.heads + h) * T * T;
        auto at = [&](const std::vector<double>& buf, std::size_t t) {
          return buf.data() + (s * T + t) * L.dim + h * L.head_dim;
        };
        // dA_ij = g_i . v_j ; dV_j += a_ij g_i
        for (std::size_t i = 0; i < T; ++i) {
          const double* gi = G + (s * T + i) * L.dim + h * L.head_dim;
          for (std::size_t j = 0; j < T; ++j) {
            const double* vj = at(vn.data, j);
            double dot = 0.0;
            for (std::size_t c = 0; c < L.head_dim; ++c) dot += gi[c] * vj[c];
            dA[i * T + j] = dot;
          }
        }
        if (vn.requires_grad) {
          auto& gv = vn.grad_buffer();
          for (std::size_t i = 0; i < T; ++i) {
            const double* gi = G + (s * T + i) * L.dim + h * L.head_dim;
            for (std::size_t j = 0; j < T; ++j) {
              double* gvj = gv.data() + (s * T + j) * L.dim + h * L.head_dim;
              const double a = ps[i * T + j];
              for (std::size_t c = 0; c < L.head_dim; ++c) gvj[c] += a * gi[c];
            }
          }
        }
        if (!qn.requires_grad && !kn.requires_grad) continue;
        // Softmax backward: dS_ij = a_ij (dA_ij - sum_j a_ij dA_ij), scaled.
        for (std::size_t i = 0; i < T; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < T; ++j) dot += ps[i * T + j] * dA[i * T + j];
          for (std::size_t j = 0; j < T; ++j) {
            dA[i * T + j] = ps[i * T + j] * (dA[i * T + j] - dot) * inv;
          }
        }
        if (qn.requires_grad) {
          auto& gq = qn.grad_buffer();
          for (std::size_t i = 0; i < T; ++i) {
            double* gqi = gq.data() + (s * T + i) * L.dim + h * L.head_dim;
            for (std::size_t j = 0; j < T; ++j) {
              const double d = dA[i * T + j];
              const double* kj = at(kn.data, j);
              for (std::size_t c = 0; c < L.head_dim; ++c) gqi[c] += d * kj[c];
            }
          }
        }
        if (kn.requires_grad) {
          auto& gk = kn.grad_buffer();
          for (std::size_t i = 0; i < T; ++i) {
            const double* qi = at(qn.data, i);
            for (std::size_t j = 0; j < T; ++j) {
              const double d = dA[i * T + j];
              double* gkj = gk.data() + (s * T + j) * L.dim + h * L.head_dim;
              for (std::size_t c = 0; c < L.head_dim; ++c) gkj[c] += d * qi[c];
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// layernorm

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_rank(x, 2, "layernorm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layernorm: gain/bias shapes " + shape_str(gain.shape()) + ", " +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  const auto X = x.data();
  const auto Gn = gain.data();
  const auto Bs = bias.data();
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * Gn[j] + Bs[j];
    }
  }
  return make_result({m, n}, std::move(out), {x, gain, bias},
                     [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    const double* G = self.grad.data();
    if (gn.requires_grad) {
      auto& gg = gn.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += G[i * n + j] * xhat[i * n + j];
    }
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
    }
    if (xn.requires_grad) {
      auto& gx = xn.grad_buffer();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double d = G[i * n + j] * gn.data[j];
          mean_d += d;
          mean_dx += d * xhat[i * n + j];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        for (std::size_t j = 0; j < n; ++j) {
          const double d = G[i * n + j] * gn.data[j];
          gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// losses

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (logits.numel() != targets.size() || targets.empty()) {
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) +
                         " targets for logits of shape " + shape_str(logits.shape()));
  }
  const auto Z = logits.data();
  const std::size_t n = targets.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = Z[i];
    // softplus(z) - y z, with softplus evaluated without overflow.
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    total += softplus - targets[i] * z;
  }
  std::vector<double> y(targets.begin(), targets.end());
  return make_result({}, {total / static_cast<double>(n)}, {logits},
                     [y = std::move(y)](Node& self) {
    Node& zn = *self.parents[0];
    auto& gz = zn.grad_buffer();
    const double g = self.grad[0] / static_cast<double>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      gz[i] += g * (sigmoid_scalar(zn.data[i]) - y[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  for (Node* n : order) {
    if (n->backward_fn) n->grad.assign(n->data.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace lyaprobe::ad
