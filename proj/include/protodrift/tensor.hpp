#pragma once

// Dense row-major tensors (rank 1 or 2) and a reverse-mode autodiff tape.
//
// Every reduction runs sequentially in index order so that replaying a tape
// on identical inputs reproduces every bit of every output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "protodrift/error.hpp"

namespace protodrift {

class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty() || shape_.size() > 2) {
      throw Error("tensor rank must be 1 or 2, got " + std::to_string(shape_.size()));
    }
    std::size_t n = 1;
    for (auto s : shape_) {
      if (s == 0) throw Error("tensor shape entries must be positive: " + shape_string());
      n *= s;
    }
    if (n != data_.size()) {
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match shape " + shape_string());
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(std::vector<std::size_t> shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw Error("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  double item() const {
    if (!is_scalar()) throw Error("item() on non-scalar tensor of shape " + shape_string());
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
  }

  // Bitwise comparison (no NaN ever lives in a tensor).
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

using ParameterMap = std::map<std::string, Tensor>;
using NodeId = std::size_t;

enum class OpKind {
  leaf,
  matmul,
  transpose,
  add_bias,
  relu,
  l2_normalize,
  softmax,
  log,
  scale,
  sum,
  mean,
  concat_rows,
  add,
  masked_log_softmax,
  weighted_sum,
  surrogate,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add_bias: return "add_bias";
    case OpKind::relu: return "relu";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::add: return "add";
    case OpKind::masked_log_softmax: return "masked_log_softmax";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::surrogate: return "surrogate";
  }
  return "?";
}

namespace detail {

inline void softmax_row(std::span<const double> x, std::span<double> y) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double z = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  for (auto& v : y) v /= z;
}

}  // namespace detail

// Append-only computation graph. Node ids are creation indices, so inputs
// always precede outputs and backward() walks ids in reverse.
class ComputeTape {
 public:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor aux;         // per-kind cache: row norms, mask, weights, injected gradient
    double factor = 0;  // scale factor
    std::string name;   // parameter name for leaves
    bool requires_grad = false;
  };

  NodeId parameter(std::string name, Tensor value) {
    Node n;
    n.value = std::move(value);
    n.name = std::move(name);
    n.requires_grad = true;
    return push(std::move(n));
  }

  NodeId constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  // Generic entry point for the attribute-free primitives.
  NodeId apply(OpKind kind, std::span<const NodeId> in) {
    auto need = [&](std::size_t k) {
      if (in.size() != k) {
        throw Error(std::string(op_name(kind)) + " expects " + std::to_string(k) + " inputs, got " +
                    std::to_string(in.size()));
      }
    };
    switch (kind) {
      case OpKind::matmul: need(2); return matmul(in[0], in[1]);
      case OpKind::transpose: need(1); return transpose(in[0]);
      case OpKind::add_bias: need(2); return add_bias(in[0], in[1]);
      case OpKind::relu: need(1); return relu(in[0]);
      case OpKind::l2_normalize: need(1); return l2_normalize(in[0]);
      case OpKind::softmax: need(1); return softmax(in[0]);
      case OpKind::log: need(1); return log(in[0]);
      case OpKind::sum: need(1); return sum(in[0]);
      case OpKind::mean: need(1); return mean(in[0]);
      case OpKind::concat_rows: need(2); return concat_rows(in[0], in[1]);
      case OpKind::add: need(2); return add(in[0], in[1]);
      default:
        throw Error(std::string(op_name(kind)) + " needs attributes; call its named builder");
    }
  }
  NodeId apply(OpKind kind, std::initializer_list<NodeId> in) {
    return apply(kind, std::span<const NodeId>(in.begin(), in.size()));
  }

  // (n x k) . (k x m)
  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols() != B.rows() || B.rank() != 2) {
      throw Error("matmul shape mismatch: " + A.shape_string() + " x " + B.shape_string());
    }
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += A(i, t) * B(t, j);
        out(i, j) = s;
      }
    return push_op(OpKind::matmul, {a, b}, std::move(out));
  }

  NodeId transpose(NodeId a) {
    const Tensor& A = value(a);
    const std::size_t n = A.rows(), m = A.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out(j, i) = A(i, j);
    return push_op(OpKind::transpose, {a}, std::move(out));
  }

  // x (n x m) + b (m) broadcast over rows.
  NodeId add_bias(NodeId x, NodeId b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    if (B.size() != X.cols()) {
      throw Error("add_bias shape mismatch: " + X.shape_string() + " + " + B.shape_string());
    }
    Tensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i)
      for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += B[j];
    return push_op(OpKind::add_bias, {x, b}, std::move(out));
  }

  NodeId relu(NodeId x) {
    Tensor out = value(x);
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push_op(OpKind::relu, {x}, std::move(out));
  }

  // Row-wise unit normalization. A zero row is an error, never a silent zero.
  NodeId l2_normalize(NodeId x) {
    const Tensor& X = value(x);
    Tensor out = X;
    Tensor norms = Tensor::zeros({X.rows()});
    for (std::size_t i = 0; i < X.rows(); ++i) {
      double s = 0.0;
      for (double v : X.row(i)) s += v * v;
      const double nrm = std::sqrt(s);
      if (!(nrm > 0.0)) {
        throw Error("l2_normalize of zero-norm row " + std::to_string(i) + " in " + X.shape_string());
      }
      norms[i] = nrm;
      for (auto& v : out.row(i)) v /= nrm;
    }
    NodeId id = push_op(OpKind::l2_normalize, {x}, std::move(out));
    nodes_[id].aux = std::move(norms);
    return id;
  }

  NodeId softmax(NodeId x) {
    const Tensor& X = value(x);
    Tensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i) detail::softmax_row(X.row(i), out.row(i));
    return push_op(OpKind::softmax, {x}, std::move(out));
  }

  NodeId log(NodeId x) {
    Tensor out = value(x);
    for (auto& v : out.data()) {
      if (!(v > 0.0)) throw Error("log of non-positive entry " + std::to_string(v));
      v = std::log(v);
    }
    return push_op(OpKind::log, {x}, std::move(out));
  }

  NodeId scale(NodeId x, double s) {
    Tensor out = value(x);
    for (auto& v : out.data()) v *= s;
    NodeId id = push_op(OpKind::scale, {x}, std::move(out));
    nodes_[id].factor = s;
    return id;
  }

  NodeId sum(NodeId x) {
    double s = 0.0;
    for (double v : value(x).data()) s += v;
    return push_op(OpKind::sum, {x}, Tensor::scalar(s));
  }

  NodeId mean(NodeId x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (double v : X.data()) s += v;
    return push_op(OpKind::mean, {x}, Tensor::scalar(s / static_cast<double>(X.size())));
  }

  NodeId concat_rows(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols() != B.cols()) {
      throw Error("concat_rows shape mismatch: " + A.shape_string() + " with " + B.shape_string());
    }
    std::vector<double> v(A.values());
    v.insert(v.end(), B.values().begin(), B.values().end());
    return push_op(OpKind::concat_rows, {a, b},
                   Tensor::matrix(A.rows() + B.rows(), A.cols(), std::move(v)));
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape() != B.shape()) {
      throw Error("add shape mismatch: " + A.shape_string() + " + " + B.shape_string());
    }
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return push_op(OpKind::add, {a, b}, std::move(out));
  }

  // Row-wise log-softmax restricted to columns where mask != 0. Masked-out
  // entries are reported as 0 and receive no gradient.
  NodeId masked_log_softmax(NodeId x, Tensor mask) {
    const Tensor& X = value(x);
    if (mask.rows() != X.rows() || mask.cols() != X.cols()) {
      throw Error("masked_log_softmax mask shape " + mask.shape_string() + " vs input " +
                  X.shape_string());
    }
    Tensor out = Tensor::zeros({X.rows(), X.cols()});
    for (std::size_t i = 0; i < X.rows(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < X.cols(); ++j)
        if (mask(i, j) != 0.0) mx = std::max(mx, X(i, j));
      if (!std::isfinite(mx)) throw Error("masked_log_softmax: row " + std::to_string(i) + " fully masked");
      double z = 0.0;
      for (std::size_t j = 0; j < X.cols(); ++j)
        if (mask(i, j) != 0.0) z += std::exp(X(i, j) - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < X.cols(); ++j)
        if (mask(i, j) != 0.0) out(i, j) = X(i, j) - lse;
    }
    NodeId id = push_op(OpKind::masked_log_softmax, {x}, std::move(out));
    nodes_[id].aux = std::move(mask);
    return id;
  }

  // Scalar sum(weights * x) with constant weights.
  NodeId weighted_sum(NodeId x, Tensor weights) {
    const Tensor& X = value(x);
    if (weights.size() != X.size()) {
      throw Error("weighted_sum weights " + weights.shape_string() + " vs input " + X.shape_string());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) s += weights[i] * X[i];
    NodeId id = push_op(OpKind::weighted_sum, {x}, Tensor::scalar(s));
    nodes_[id].aux = std::move(weights);
    return id;
  }

  // Scalar node whose value and gradient w.r.t. x are supplied by the caller.
  // Used where the derivative is known in closed form from an external solver.
  NodeId surrogate(NodeId x, double v, Tensor grad) {
    const Tensor& X = value(x);
    if (grad.size() != X.size()) {
      throw Error("surrogate gradient " + grad.shape_string() + " vs input " + X.shape_string());
    }
    NodeId id = push_op(OpKind::surrogate, {x}, Tensor::scalar(v));
    nodes_[id].aux = std::move(grad);
    return id;
  }

  const Tensor& value(NodeId id) const { return node(id).value; }
  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw Error("unknown node id " + std::to_string(id));
    return nodes_[id];
  }
  std::size_t size() const { return nodes_.size(); }

  void backward(NodeId root) {
    if (!value(root).is_scalar()) {
      throw Error("backward root must be scalar, got shape " + value(root).shape_string());
    }
    grads_.assign(nodes_.size(), Tensor());
    for (std::size_t i = 0; i <= root; ++i) grads_[i] = Tensor::zeros(nodes_[i].value.shape());
    grads_[root][0] = 1.0;
    for (std::size_t id = root + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (n.kind == OpKind::leaf || !n.requires_grad) continue;
      propagate(id);
    }
  }

  // Gradient of the last backward() root w.r.t. node id (zeros if unreachable).
  const Tensor& grad(NodeId id) const {
    if (id >= grads_.size() || grads_[id].empty()) throw Error("no gradient for node " + std::to_string(id));
    return grads_[id];
  }

  ParameterMap parameter_grads() const {
    ParameterMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.kind == OpKind::leaf && n.requires_grad) {
        out[n.name] = i < grads_.size() && !grads_[i].empty() ? grads_[i] : Tensor::zeros(n.value.shape());
      }
    }
    return out;
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push_op(OpKind kind, std::initializer_list<NodeId> in, Tensor out) {
    if (!out.all_finite()) throw Error(std::string("non-finite output from ") + op_name(kind));
    Node n;
    n.kind = kind;
    n.inputs.assign(in.begin(), in.end());
    n.value = std::move(out);
    for (auto i : n.inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    return push(std::move(n));
  }

  void propagate(NodeId id) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
    auto gin = [&](std::size_t k) -> Tensor& { return grads_[n.inputs[k]]; };

    switch (n.kind) {
      case OpKind::leaf: break;
      case OpKind::matmul: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& B = value(n.inputs[1]);
        const std::size_t rows = A.rows(), inner = A.cols(), cols = B.cols();
        if (wants(0)) {
          Tensor& gA = gin(0);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t t = 0; t < inner; ++t) {
              double s = 0.0;
              for (std::size_t j = 0; j < cols; ++j) s += g(i, j) * B(t, j);
              gA(i, t) += s;
            }
        }
        if (wants(1)) {
          Tensor& gB = gin(1);
          for (std::size_t t = 0; t < inner; ++t)
            for (std::size_t j = 0; j < cols; ++j) {
              double s = 0.0;
              for (std::size_t i = 0; i < rows; ++i) s += A(i, t) * g(i, j);
              gB(t, j) += s;
            }
        }
        break;
      }
      case OpKind::transpose: {
        Tensor& gA = gin(0);
        for (std::size_t i = 0; i < gA.rows(); ++i)
          for (std::size_t j = 0; j < gA.cols(); ++j) gA(i, j) += g(j, i);
        break;
      }
      case OpKind::add_bias: {
        if (wants(0)) {
          Tensor& gx = gin(0);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (wants(1)) {
          Tensor& gb = gin(1);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
        }
        break;
      }
      case OpKind::relu: {
        const Tensor& X = value(n.inputs[0]);
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (X[i] > 0.0) gx[i] += g[i];
        break;
      }
      case OpKind::l2_normalize: {
        const Tensor& Y = n.value;
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < Y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < Y.cols(); ++j) dot += Y(i, j) * g(i, j);
          for (std::size_t j = 0; j < Y.cols(); ++j) gx(i, j) += (g(i, j) - Y(i, j) * dot) / n.aux[i];
        }
        break;
      }
      case OpKind::softmax: {
        const Tensor& Y = n.value;
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < Y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < Y.cols(); ++j) dot += Y(i, j) * g(i, j);
          for (std::size_t j = 0; j < Y.cols(); ++j) gx(i, j) += Y(i, j) * (g(i, j) - dot);
        }
        break;
      }
      case OpKind::log: {
        const Tensor& X = value(n.inputs[0]);
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / X[i];
        break;
      }
      case OpKind::scale: {
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += n.factor * g[i];
        break;
      }
      case OpKind::sum: {
        Tensor& gx = gin(0);
        for (auto& v : gx.data()) v += g[0];
        break;
      }
      case OpKind::mean: {
        Tensor& gx = gin(0);
        const double s = g[0] / static_cast<double>(gx.size());
        for (auto& v : gx.data()) v += s;
        break;
      }
      case OpKind::concat_rows: {
        const std::size_t split = value(n.inputs[0]).size();
        if (wants(0)) {
          Tensor& ga = gin(0);
          for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
        }
        if (wants(1)) {
          Tensor& gb = gin(1);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
        }
        break;
      }
      case OpKind::add: {
        for (std::size_t k = 0; k < 2; ++k) {
          if (!wants(k)) continue;
          Tensor& gx = gin(k);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        break;
      }
      case OpKind::masked_log_softmax: {
        const Tensor& Y = n.value;
        const Tensor& mask = n.aux;
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < Y.rows(); ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < Y.cols(); ++j)
            if (mask(i, j) != 0.0) gs += g(i, j);
          for (std::size_t j = 0; j < Y.cols(); ++j)
            if (mask(i, j) != 0.0) gx(i, j) += g(i, j) - std::exp(Y(i, j)) * gs;
        }
        break;
      }
      case OpKind::weighted_sum:
      case OpKind::surrogate: {
        Tensor& gx = gin(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * n.aux[i];
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Mean softmax cross-entropy of logits (N x C) against target column indices.
inline NodeId softmax_cross_entropy(ComputeTape& tape, NodeId logits, std::span<const std::size_t> targets) {
  const Tensor& L = tape.value(logits);
  if (targets.size() != L.rows()) {
    throw Error("cross-entropy: " + std::to_string(targets.size()) + " targets for " + L.shape_string() +
                " logits");
  }
  Tensor weights = Tensor::zeros({L.rows(), L.cols()});
  const double w = -1.0 / static_cast<double>(L.rows());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= L.cols()) throw Error("cross-entropy target index out of range");
    weights(i, targets[i]) = w;
  }
  NodeId lp = tape.masked_log_softmax(logits, Tensor::filled({L.rows(), L.cols()}, 1.0));
  return tape.weighted_sum(lp, std::move(weights));
}

}  // namespace protodrift
