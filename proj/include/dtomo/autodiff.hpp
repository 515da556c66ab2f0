#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dtomo/tensor.hpp"

namespace dtomo {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over dense tensors, define-by-run. Values are
// computed eagerly when a node is built; backward() walks the graph in
// reverse topological order and accumulates vector-Jacobian products.
// ---------------------------------------------------------------------------

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  MatMul,
  Sin,
  Cos,
  Relu,
  Abs,
  Sum,
  Mean,
  Square,
  Broadcast,
  Concat,
  Slice,
  Scale,
  Reshape,
  Wrap,    // p -> p - 2*rint(p/2), gradient 1 a.e.
  Custom,  // linear map with a hand-written adjoint
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Relu: return "relu";
    case Op::Abs: return "abs";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Square: return "square";
    case Op::Broadcast: return "broadcast";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Scale: return "scale";
    case Op::Reshape: return "reshape";
    case Op::Wrap: return "wrap";
    case Op::Custom: return "custom";
  }
  return "?";
}

struct ExprNode {
  Op op = Op::Leaf;
  Tensor value;
  Tensor grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<ExprNode>> inputs;

  // op parameters
  double k = 0.0;                 // Scale factor
  int64_t axis = 0;               // Concat / Slice
  int64_t start = 0, stop = 0;    // Slice
  std::function<Tensor(const Tensor&)> fwd;  // Custom forward
  std::function<Tensor(const Tensor&)> vjp;  // Custom adjoint
  const char* tag = nullptr;                 // Custom description
};

/// Lightweight handle to a graph node.
struct Expr {
  std::shared_ptr<ExprNode> node;

  Expr() = default;
  explicit Expr(std::shared_ptr<ExprNode> n) : node(std::move(n)) {}

  const Tensor& value() const { return node->value; }
  const Tensor& grad() const { return node->grad; }
  bool requires_grad() const { return node->requires_grad; }

  /// Rebind a leaf's value (grad_check and optimizer loops). Downstream
  /// values are stale until refresh() is called on the root.
  void set_value(Tensor t) {
    if (node->op != Op::Leaf) throw ValueError("set_value: not a leaf");
    node->value = std::move(t);
  }
};

namespace detail {

using EMap = Eigen::Map<Eigen::ArrayXd>;
using CEMap = Eigen::Map<const Eigen::ArrayXd>;

inline CEMap arr(const Tensor& t) { return CEMap(t.data.data(), t.numel()); }
inline EMap arr(Tensor& t) { return EMap(t.data.data(), t.numel()); }

// Strictly left-to-right summation. Eigen's vectorized reductions peel to an
// aligned boundary first, so their accumulation order — and last bits — depend
// on where the heap placed the buffer; a plain loop does not.
inline double serial_sum(const std::vector<double>& v) {
  double acc = 0.0;
  for (const double x : v) acc += x;
  return acc;
}

// Row-major C (r x c) += A (r x k) * B (k x c) with a fixed per-row
// accumulation order over k, so each output row is bit-identical regardless
// of batch size, row order, or thread count. Eigen's blocked GEMM does not
// guarantee that, and batching consistency is part of the field contract.
inline void matmul_accumulate(const double* a, const double* b, double* c, int64_t r, int64_t k,
                              int64_t cols) {
  parallel_for(r, [&](int64_t i) {
    const double* arow = a + i * k;
    double* crow = c + i * cols;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * cols;
      for (int64_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  });
}

// Row-major C (k x c) += A^T (k x r) * G (r x c), accumulated in fixed row
// order of A; deterministic for the same reason as above. The serial nest
// streams A and G row by row; the threaded variant gives each worker a block
// of output rows, which costs strided reads of A but keeps each output
// element's accumulation order identical to the serial nest.
inline void matmul_transpose_accumulate(const double* a, const double* g, double* c, int64_t r,
                                        int64_t k, int64_t cols) {
  if (max_threads() <= 1 || k < 2) {
    for (int64_t i = 0; i < r; ++i) {
      const double* arow = a + i * k;
      const double* grow = g + i * cols;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        double* crow = c + kk * cols;
        for (int64_t j = 0; j < cols; ++j) crow[j] += av * grow[j];
      }
    }
    return;
  }
  parallel_for(k, [&](int64_t kk) {
    double* crow = c + kk * cols;
    for (int64_t i = 0; i < r; ++i) {
      const double av = a[i * k + kk];
      const double* grow = g + i * cols;
      for (int64_t j = 0; j < cols; ++j) crow[j] += av * grow[j];
    }
  });
}

inline std::shared_ptr<ExprNode> make_node(Op op, std::vector<std::shared_ptr<ExprNode>> inputs) {
  auto n = std::make_shared<ExprNode>();
  n->op = op;
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs) n->requires_grad |= in->requires_grad;
  return n;
}

inline void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Forward value computation for every op kind; used both at construction and
// by refresh().
inline Tensor compute_value(const ExprNode& n) {
  auto& in = n.inputs;
  switch (n.op) {
    case Op::Leaf:
      return n.value;
    case Op::Add: {
      Tensor out = in[0]->value;
      arr(out) += arr(in[1]->value);
      return out;
    }
    case Op::Sub: {
      Tensor out = in[0]->value;
      arr(out) -= arr(in[1]->value);
      return out;
    }
    case Op::Mul: {
      Tensor out = in[0]->value;
      arr(out) *= arr(in[1]->value);
      return out;
    }
    case Op::MatMul: {
      const Tensor& a = in[0]->value;
      const Tensor& b = in[1]->value;
      Tensor out = Tensor::zeros({a.shape[0], b.shape[1]});
      matmul_accumulate(a.data.data(), b.data.data(), out.data.data(), a.shape[0], a.shape[1],
                        b.shape[1]);
      return out;
    }
    case Op::Sin: {
      Tensor out = in[0]->value;
      for (double& x : out.data) x = std::sin(x);
      return out;
    }
    case Op::Cos: {
      Tensor out = in[0]->value;
      for (double& x : out.data) x = std::cos(x);
      return out;
    }
    case Op::Relu: {
      Tensor out = in[0]->value;
      arr(out) = arr(out).max(0.0);
      return out;
    }
    case Op::Abs: {
      Tensor out = in[0]->value;
      arr(out) = arr(out).abs();
      return out;
    }
    case Op::Sum: {
      return Tensor::scalar(serial_sum(in[0]->value.data));
    }
    case Op::Mean: {
      return Tensor::scalar(serial_sum(in[0]->value.data) /
                            static_cast<double>(in[0]->value.numel()));
    }
    case Op::Square: {
      Tensor out = in[0]->value;
      arr(out) = arr(out).square();
      return out;
    }
    case Op::Broadcast: {
      const Tensor& a = in[0]->value;
      Tensor out = Tensor::zeros(n.value.shape);  // target shape fixed at build
      if (a.numel() == 1) {
        arr(out) = a.data[0];
      } else {
        // row vector tiled over the leading dimension
        const int64_t rows = out.shape[0];
        const int64_t cols = a.numel();
        for (int64_t r = 0; r < rows; ++r)
          std::copy(a.data.begin(), a.data.end(), out.data.begin() + r * cols);
      }
      return out;
    }
    case Op::Concat: {
      std::vector<int64_t> shape = in[0]->value.shape;
      const size_t ax = static_cast<size_t>(n.axis);
      int64_t total = 0;
      for (const auto& p : in) total += p->value.shape[ax];
      shape[ax] = total;
      Tensor out = Tensor::zeros(shape);
      int64_t outer = 1, inner = 1;
      for (size_t d = 0; d < ax; ++d) outer *= shape[d];
      for (size_t d = ax + 1; d < shape.size(); ++d) inner *= shape[d];
      const int64_t out_span = total * inner;
      int64_t offset = 0;
      for (const auto& p : in) {
        const int64_t span = p->value.shape[ax] * inner;
        for (int64_t o = 0; o < outer; ++o)
          std::copy(p->value.data.begin() + o * span,
                    p->value.data.begin() + (o + 1) * span,
                    out.data.begin() + o * out_span + offset);
        offset += span;
      }
      return out;
    }
    case Op::Slice: {
      const Tensor& a = in[0]->value;
      std::vector<int64_t> shape = a.shape;
      const size_t ax = static_cast<size_t>(n.axis);
      shape[ax] = n.stop - n.start;
      Tensor out = Tensor::zeros(shape);
      int64_t outer = 1, inner = 1;
      for (size_t d = 0; d < ax; ++d) outer *= a.shape[d];
      for (size_t d = ax + 1; d < a.shape.size(); ++d) inner *= a.shape[d];
      const int64_t in_span = a.shape[ax] * inner;
      const int64_t out_span = shape[ax] * inner;
      for (int64_t o = 0; o < outer; ++o)
        std::copy(a.data.begin() + o * in_span + n.start * inner,
                  a.data.begin() + o * in_span + n.stop * inner,
                  out.data.begin() + o * out_span);
      return out;
    }
    case Op::Scale: {
      Tensor out = in[0]->value;
      arr(out) *= n.k;
      return out;
    }
    case Op::Reshape: {
      Tensor out = in[0]->value;
      out.shape = n.value.shape;  // target shape fixed at build
      return out;
    }
    case Op::Wrap: {
      Tensor out = in[0]->value;
      for (double& x : out.data) x -= 2.0 * std::nearbyint(x * 0.5);
      return out;
    }
    case Op::Custom: {
      return n.fwd(in[0]->value);
    }
  }
  throw ValueError("compute_value: unknown op");
}

inline std::vector<ExprNode*> topo_order(ExprNode* root) {
  std::vector<ExprNode*> order;
  std::unordered_set<ExprNode*> done;
  std::vector<std::pair<ExprNode*, size_t>> stack;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (idx < node->inputs.size()) {
      ExprNode* child = node->inputs[idx++].get();
      if (!done.count(child)) stack.emplace_back(child, 0);
    } else {
      done.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

inline void accum(Tensor& grad, const Tensor& shape_like, const double* src, int64_t n) {
  if (grad.numel() == 0) grad = Tensor::zeros(shape_like.shape);
  EMap(grad.data.data(), n) += CEMap(src, n);
}

}  // namespace detail

// -------------------------- graph construction ----------------------------

inline Expr leaf(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<ExprNode>();
  n->op = Op::Leaf;
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Expr(n);
}

inline Expr constant(Tensor value) { return leaf(std::move(value), false); }

inline Expr add(const Expr& a, const Expr& b) {
  detail::require_same_shape("add", a.value(), b.value());
  auto n = detail::make_node(Op::Add, {a.node, b.node});
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr sub(const Expr& a, const Expr& b) {
  detail::require_same_shape("sub", a.value(), b.value());
  auto n = detail::make_node(Op::Sub, {a.node, b.node});
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr mul(const Expr& a, const Expr& b) {
  detail::require_same_shape("mul", a.value(), b.value());
  auto n = detail::make_node(Op::Mul, {a.node, b.node});
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr matmul(const Expr& a, const Expr& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[0])
    throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
  auto n = detail::make_node(Op::MatMul, {a.node, b.node});
  n->value = detail::compute_value(*n);
  return Expr(n);
}

namespace detail {
inline Expr unary(Op op, const Expr& a) {
  auto n = make_node(op, {a.node});
  n->value = compute_value(*n);
  return Expr(n);
}
}  // namespace detail

inline Expr sin(const Expr& a) { return detail::unary(Op::Sin, a); }
inline Expr cos(const Expr& a) { return detail::unary(Op::Cos, a); }
inline Expr relu(const Expr& a) { return detail::unary(Op::Relu, a); }
inline Expr abs(const Expr& a) { return detail::unary(Op::Abs, a); }
inline Expr sum(const Expr& a) { return detail::unary(Op::Sum, a); }
inline Expr mean(const Expr& a) { return detail::unary(Op::Mean, a); }
inline Expr square(const Expr& a) { return detail::unary(Op::Square, a); }
inline Expr wrap_periodic(const Expr& a) { return detail::unary(Op::Wrap, a); }

inline Expr scale(const Expr& a, double k) {
  auto n = detail::make_node(Op::Scale, {a.node});
  n->k = k;
  n->value = detail::compute_value(*n);
  return Expr(n);
}

/// Broadcast a scalar or a row vector to `shape`.
inline Expr broadcast(const Expr& a, std::vector<int64_t> shape) {
  const Tensor& av = a.value();
  const int64_t target = Tensor::numel_of(shape);
  const bool scalar_ok = av.numel() == 1;
  const bool row_ok = shape.size() == 2 && av.numel() == shape[1];
  if (!scalar_ok && !row_ok)
    throw ShapeError("broadcast: cannot broadcast " + av.shape_str() + " to target");
  if (scalar_ok && row_ok && target == av.numel()) {
    // degenerate; fall through as scalar fill
  }
  auto n = detail::make_node(Op::Broadcast, {a.node});
  n->value = Tensor::zeros(std::move(shape));
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr concat(const std::vector<Expr>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& ref = parts[0].value().shape;
  std::vector<std::shared_ptr<ExprNode>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) {
    const auto& s = p.value().shape;
    if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d)
      if (static_cast<int64_t>(d) != axis && s[d] != ref[d])
        throw ShapeError("concat: shape mismatch off-axis");
    nodes.push_back(p.node);
  }
  auto n = detail::make_node(Op::Concat, std::move(nodes));
  n->axis = axis;
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr slice(const Expr& a, int64_t axis, int64_t start, int64_t stop) {
  const Tensor& av = a.value();
  if (axis < 0 || axis >= av.ndim() || start < 0 || stop > av.shape[static_cast<size_t>(axis)] || start >= stop)
    throw ShapeError("slice: bad range on " + av.shape_str());
  auto n = detail::make_node(Op::Slice, {a.node});
  n->axis = axis;
  n->start = start;
  n->stop = stop;
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr reshape(const Expr& a, std::vector<int64_t> shape) {
  if (Tensor::numel_of(shape) != a.value().numel())
    throw ShapeError("reshape: element count mismatch");
  auto n = detail::make_node(Op::Reshape, {a.node});
  n->value = a.value();
  n->value.shape = std::move(shape);
  return Expr(n);
}

/// Linear map with a hand-written adjoint; `vjp` must apply the exact
/// transpose of `fwd`. Used for operators whose kernels live outside the
/// graph (filtered backprojection).
inline Expr custom_linear(const Expr& a, std::function<Tensor(const Tensor&)> fwd,
                          std::function<Tensor(const Tensor&)> vjp, const char* tag) {
  auto n = detail::make_node(Op::Custom, {a.node});
  n->fwd = std::move(fwd);
  n->vjp = std::move(vjp);
  n->tag = tag;
  n->value = detail::compute_value(*n);
  return Expr(n);
}

inline Expr operator+(const Expr& a, const Expr& b) { return add(a, b); }
inline Expr operator-(const Expr& a, const Expr& b) { return sub(a, b); }
inline Expr operator*(const Expr& a, const Expr& b) { return mul(a, b); }

// ------------------------------ evaluation --------------------------------

/// Returns the root value after checking every node in the graph for
/// NaN/Inf; the error names the offending op.
inline Tensor evaluate(const Expr& root) {
  for (ExprNode* n : detail::topo_order(root.node.get())) {
    if (!n->value.all_finite())
      throw NonFiniteError(std::string("evaluate: non-finite value produced by op '") +
                           (n->op == Op::Custom && n->tag ? n->tag : op_name(n->op)) + "'");
  }
  return root.value();
}

/// Recomputes every non-leaf value in the graph (after leaf mutation).
inline void refresh(const Expr& root) {
  for (ExprNode* n : detail::topo_order(root.node.get()))
    if (n->op != Op::Leaf) n->value = detail::compute_value(*n);
}

// ------------------------------- backward ---------------------------------

/// Reverse pass from a scalar root. Gradients accumulate into node.grad for
/// every node with requires_grad; previous grads in the graph are discarded.
inline void backward(const Expr& root) {
  if (root.value().numel() != 1)
    throw ShapeError("backward: root must be scalar, got " + root.value().shape_str());
  auto order = detail::topo_order(root.node.get());
  for (ExprNode* n : order) n->grad = Tensor();
  root.node->grad = Tensor::scalar(1.0);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    ExprNode* n = *it;
    if (!n->requires_grad || n->grad.numel() == 0 || n->op == Op::Leaf) continue;
    const Tensor& g = n->grad;
    auto& in = n->inputs;
    auto want = [&](size_t i) { return in[i]->requires_grad; };
    auto acc = [&](size_t i, const Tensor& contribution) {
      detail::accum(in[i]->grad, in[i]->value, contribution.data.data(), contribution.numel());
    };

    switch (n->op) {
      case Op::Add:
        if (want(0)) acc(0, g);
        if (want(1)) acc(1, g);
        break;
      case Op::Sub:
        if (want(0)) acc(0, g);
        if (want(1)) {
          Tensor neg = g;
          detail::arr(neg) *= -1.0;
          acc(1, neg);
        }
        break;
      case Op::Mul:
        if (want(0)) {
          Tensor t = g;
          detail::arr(t) *= detail::arr(in[1]->value);
          acc(0, t);
        }
        if (want(1)) {
          Tensor t = g;
          detail::arr(t) *= detail::arr(in[0]->value);
          acc(1, t);
        }
        break;
      case Op::MatMul: {
        const Tensor& a = in[0]->value;
        const Tensor& b = in[1]->value;
        if (want(0)) {
          // dA = G * B^T, computed as an A*B product against the transposed
          // (contiguous) copy of B so the fast fixed-order kernel applies.
          Tensor bt = Tensor::zeros({b.shape[1], b.shape[0]});
          for (int64_t i = 0; i < b.shape[0]; ++i)
            for (int64_t j = 0; j < b.shape[1]; ++j)
              bt.data[static_cast<size_t>(j * b.shape[0] + i)] =
                  b.data[static_cast<size_t>(i * b.shape[1] + j)];
          Tensor da = Tensor::zeros(a.shape);
          detail::matmul_accumulate(g.data.data(), bt.data.data(), da.data.data(), a.shape[0],
                                    b.shape[1], b.shape[0]);
          acc(0, da);
        }
        if (want(1)) {
          Tensor db = Tensor::zeros(b.shape);
          detail::matmul_transpose_accumulate(a.data.data(), g.data.data(), db.data.data(),
                                              a.shape[0], a.shape[1], b.shape[1]);
          acc(1, db);
        }
        break;
      }
      case Op::Sin: {
        Tensor t = in[0]->value;
        for (double& x : t.data) x = std::cos(x);
        detail::arr(t) *= detail::arr(g);
        acc(0, t);
        break;
      }
      case Op::Cos: {
        Tensor t = in[0]->value;
        for (double& x : t.data) x = -std::sin(x);
        detail::arr(t) *= detail::arr(g);
        acc(0, t);
        break;
      }
      case Op::Relu: {
        Tensor t = g;
        const auto& x = in[0]->value.data;
        for (int64_t i = 0; i < t.numel(); ++i)
          if (x[static_cast<size_t>(i)] <= 0.0) t[i] = 0.0;
        acc(0, t);
        break;
      }
      case Op::Abs: {
        // subgradient: sign(x), sign(0) = 0
        Tensor t = g;
        const auto& x = in[0]->value.data;
        for (int64_t i = 0; i < t.numel(); ++i) {
          const double xi = x[static_cast<size_t>(i)];
          t[i] *= (xi > 0.0) - (xi < 0.0);
        }
        acc(0, t);
        break;
      }
      case Op::Sum: {
        Tensor t = Tensor::full(in[0]->value.shape, g.data[0]);
        acc(0, t);
        break;
      }
      case Op::Mean: {
        Tensor t = Tensor::full(in[0]->value.shape, g.data[0] / static_cast<double>(in[0]->value.numel()));
        acc(0, t);
        break;
      }
      case Op::Square: {
        Tensor t = g;
        detail::arr(t) *= 2.0 * detail::arr(in[0]->value);
        acc(0, t);
        break;
      }
      case Op::Broadcast: {
        const Tensor& a = in[0]->value;
        Tensor t = Tensor::zeros(a.shape);
        if (a.numel() == 1) {
          t.data[0] = detail::serial_sum(g.data);
        } else {
          const int64_t cols = a.numel();
          const int64_t rows = n->value.shape[0];
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
              t[c] += g[r * cols + c];
        }
        acc(0, t);
        break;
      }
      case Op::Concat: {
        const size_t ax = static_cast<size_t>(n->axis);
        int64_t outer = 1, inner = 1;
        for (size_t d = 0; d < ax; ++d) outer *= n->value.shape[d];
        for (size_t d = ax + 1; d < n->value.shape.size(); ++d) inner *= n->value.shape[d];
        const int64_t out_span = n->value.shape[ax] * inner;
        int64_t offset = 0;
        for (size_t i = 0; i < in.size(); ++i) {
          const int64_t span = in[i]->value.shape[ax] * inner;
          if (want(i)) {
            Tensor t = Tensor::zeros(in[i]->value.shape);
            for (int64_t o = 0; o < outer; ++o)
              std::copy(g.data.begin() + o * out_span + offset,
                        g.data.begin() + o * out_span + offset + span,
                        t.data.begin() + o * span);
            acc(i, t);
          }
          offset += span;
        }
        break;
      }
      case Op::Slice: {
        const Tensor& a = in[0]->value;
        const size_t ax = static_cast<size_t>(n->axis);
        int64_t outer = 1, inner = 1;
        for (size_t d = 0; d < ax; ++d) outer *= a.shape[d];
        for (size_t d = ax + 1; d < a.shape.size(); ++d) inner *= a.shape[d];
        const int64_t in_span = a.shape[ax] * inner;
        const int64_t out_span = (n->stop - n->start) * inner;
        Tensor t = Tensor::zeros(a.shape);
        for (int64_t o = 0; o < outer; ++o)
          std::copy(g.data.begin() + o * out_span,
                    g.data.begin() + (o + 1) * out_span,
                    t.data.begin() + o * in_span + n->start * inner);
        acc(0, t);
        break;
      }
      case Op::Scale: {
        Tensor t = g;
        detail::arr(t) *= n->k;
        acc(0, t);
        break;
      }
      case Op::Reshape: {
        Tensor t = g;
        t.shape = in[0]->value.shape;
        acc(0, t);
        break;
      }
      case Op::Wrap: {
        acc(0, g);
        break;
      }
      case Op::Custom: {
        Tensor t = n->vjp(g);
        detail::require_same_shape("custom vjp", t, in[0]->value);
        acc(0, t);
        break;
      }
      case Op::Leaf:
        break;
    }
  }
}

/// Gradients for a chosen set of leaves. Leaves the backward pass never
/// reached get a zero gradient of the leaf's shape.
inline std::unordered_map<ExprNode*, Tensor> backward(const Expr& root, const std::vector<Expr>& wrt) {
  backward(root);
  std::unordered_map<ExprNode*, Tensor> out;
  for (const auto& w : wrt) {
    if (w.node->op != Op::Leaf) throw ValueError("backward: wrt must be leaves");
    out[w.node.get()] = w.node->grad.numel() ? w.node->grad : Tensor::zeros(w.node->value.shape);
  }
  return out;
}

// ------------------------------ grad check --------------------------------

/// Central finite differences against the reverse pass, per coordinate of
/// `wrt`. Returns the worst relative error with denominator
/// max(|analytic|, |numeric|, 1e-12).
inline double grad_check(const Expr& root, const Expr& wrt, double step) {
  if (step <= 0) throw ValueError("grad_check: step must be positive");
  refresh(root);
  backward(root);
  Tensor analytic = wrt.node->grad.numel() ? wrt.node->grad : Tensor::zeros(wrt.value().shape);

  Tensor saved = wrt.value();
  double worst = 0.0;
  for (int64_t i = 0; i < saved.numel(); ++i) {
    Tensor v = saved;
    v[i] = saved[i] + step;
    wrt.node->value = v;
    refresh(root);
    const double fp = root.value().data[0];
    v[i] = saved[i] - step;
    wrt.node->value = v;
    refresh(root);
    const double fm = root.value().data[0];
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  wrt.node->value = saved;
  refresh(root);
  return worst;
}

}  // namespace dtomo
