#pragma once

// Dense row-major matrices and a reverse-mode tape.
//
// Every value is a 2-D double matrix (vectors are 1xn rows, scalars 1x1).
// Operations append a node to the Tape that owns their inputs; nodes are
// therefore stored in topological order and Tape::backward is a single
// reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cbln/errors.hpp"

namespace cbln {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw DimensionError("matrix " + std::to_string(r) + "x" + std::to_string(c) + " given " +
                           std::to_string(data.size()) + " values");
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows_list) {
    Matrix m;
    m.rows = rows_list.size();
    m.cols = m.rows ? rows_list.begin()->size() : 0;
    m.data.reserve(m.rows * m.cols);
    for (const auto& r : rows_list) {
      if (r.size() != m.cols) throw DimensionError("ragged matrix literal");
      m.data.insert(m.data.end(), r.begin(), r.end());
    }
    return m;
  }

  static Matrix row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(1, n, std::move(values));
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  [[nodiscard]] std::string shape_str() const {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
  }

  bool operator==(const Matrix&) const = default;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajor> map(Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}
inline Eigen::Map<const RowMajor> map(const Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

inline void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

class Tape;

// Lightweight handle to a node on a Tape. Copying a Tensor does not copy data.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] const Matrix& grad() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] std::size_t rows() const { return value().rows; }
  [[nodiscard]] std::size_t cols() const { return value().cols; }
  [[nodiscard]] double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient and value of the node's output and accumulates into
  // the inputs' gradients.
  using BackwardFn = std::function<void(Tape&, const Matrix&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Tensor variable(Matrix value) { return push(std::move(value), true, nullptr); }

  // Appends an op result. The node requires grad iff any input does; the
  // backward rule is dropped otherwise.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Tensor& t : inputs) {
      check_owner(t);
      needs = needs || nodes_[t.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }
  Tensor record(Matrix value, std::span<const Tensor> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Tensor& t : inputs) {
      check_owner(t);
      needs = needs || nodes_[t.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  [[nodiscard]] const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Empty until backward has run; afterwards every differentiable node holds
  // a gradient (zeros when it did not contribute to the loss).
  [[nodiscard]] const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

  // Zero-initialized gradient accumulator for node `id`; only valid for nodes
  // that require grad.
  Matrix& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols || n.grad.data.size() != n.value.size()) {
      n.grad = Matrix(n.value.rows, n.value.cols, 0.0);
    }
    return n.grad;
  }

  // Accumulates `g` into the gradient of `t` when `t` is differentiable.
  void accumulate(const Tensor& t, const Matrix& g) {
    if (!nodes_[t.id()].requires_grad) return;
    detail::add_into(grad_buffer(t.id()), g);
  }

  void backward(const Tensor& loss) {
    check_owner(loss);
    const Matrix& v = nodes_[loss.id()].value;
    if (v.rows != 1 || v.cols != 1) {
      throw ContractError("backward requires a scalar loss, got " + v.shape_str());
    }
    for (Node& n : nodes_) n.grad = Matrix();
    if (nodes_[loss.id()].requires_grad) grad_buffer(loss.id()).data[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.rows == 0) continue;
      n.backward(*this, n.grad, n.value);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad) grad_buffer(i);
    }
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tensor push(Matrix value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(fn)});
    return Tensor(this, nodes_.size() - 1);
  }

  void check_owner(const Tensor& t) const {
    if (&t.tape() != this) throw ContractError("tensor belongs to a different tape");
  }

  std::deque<Node> nodes_;
};

inline const Matrix& Tensor::value() const { return tape_->value(id_); }
inline const Matrix& Tensor::grad() const { return tape_->grad(id_); }
inline bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }
inline double Tensor::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar " + v.shape_str());
  return v.data[0];
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols != B.rows) {
    throw DimensionError("matmul: " + A.shape_str() + " x " + B.shape_str());
  }
  Matrix out(A.rows, B.cols);
  if (A.cols > 0) detail::map(out).noalias() = detail::map(A) * detail::map(B);
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) {
      Matrix& ga = tape.grad_buffer(a.id());
      detail::map(ga).noalias() += detail::map(g) * detail::map(b.value()).transpose();
    }
    if (b.requires_grad()) {
      Matrix& gb = tape.grad_buffer(b.id());
      detail::map(gb).noalias() += detail::map(a.value()).transpose() * detail::map(g);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  const Matrix& A = a.value();
  Matrix out(A.cols, A.rows);
  detail::map(out) = detail::map(A).transpose();
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Matrix& g, const Matrix&) {
    detail::map(tape.grad_buffer(a.id())) += detail::map(g).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Unary { Sigmoid, Tanh, Relu, Exp, Log };
enum class Binary { Add, Sub, Mul };

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Broadcast extent: equal sizes, or one side is 1.
inline std::size_t broadcast_dim(std::size_t a, std::size_t b, const Matrix& A, const Matrix& B) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw DimensionError("cannot broadcast " + A.shape_str() + " with " + B.shape_str());
}

}  // namespace detail

inline Tensor elementwise(const Tensor& x, Unary kind) {
  const Matrix& X = x.value();
  Matrix out(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double v = X.data[i];
    switch (kind) {
      case Unary::Sigmoid: out.data[i] = detail::sigmoid(v); break;
      case Unary::Tanh: out.data[i] = std::tanh(v); break;
      case Unary::Relu: out.data[i] = v > 0 ? v : 0.0; break;
      case Unary::Exp: out.data[i] = std::exp(v); break;
      case Unary::Log: out.data[i] = std::log(v); break;
    }
  }
  return x.tape().record(std::move(out), {x}, [x, kind](Tape& tape, const Matrix& g, const Matrix& Y) {
    const Matrix& X = x.value();
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Unary::Sigmoid: d = Y.data[i] * (1.0 - Y.data[i]); break;
        case Unary::Tanh: d = 1.0 - Y.data[i] * Y.data[i]; break;
        case Unary::Relu: d = X.data[i] > 0 ? 1.0 : 0.0; break;
        case Unary::Exp: d = Y.data[i]; break;
        case Unary::Log: d = 1.0 / X.data[i]; break;
      }
      gx.data[i] += g.data[i] * d;
    }
  });
}

inline Tensor sigmoid(const Tensor& x) { return elementwise(x, Unary::Sigmoid); }
inline Tensor tanh(const Tensor& x) { return elementwise(x, Unary::Tanh); }
inline Tensor relu(const Tensor& x) { return elementwise(x, Unary::Relu); }
inline Tensor exp(const Tensor& x) { return elementwise(x, Unary::Exp); }
inline Tensor log(const Tensor& x) { return elementwise(x, Unary::Log); }

// Binary op with 2-D broadcasting: each dimension must match or be 1 on one side.
inline Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  const std::size_t rows = detail::broadcast_dim(A.rows, B.rows, A, B);
  const std::size_t cols = detail::broadcast_dim(A.cols, B.cols, A, B);
  const bool same = A.rows == B.rows && A.cols == B.cols;
  Matrix out(rows, cols);
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = A.data[i], y = B.data[i];
      out.data[i] = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double x = A(A.rows == 1 ? 0 : r, A.cols == 1 ? 0 : c);
        const double y = B(B.rows == 1 ? 0 : r, B.cols == 1 ? 0 : c);
        out(r, c) = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
      }
    }
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, kind, same](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& A = a.value();
    const Matrix& B = b.value();
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    Matrix* ga = need_a ? &tape.grad_buffer(a.id()) : nullptr;
    Matrix* gb = need_b ? &tape.grad_buffer(b.id()) : nullptr;
    if (same) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g.data[i];
        switch (kind) {
          case Binary::Add:
            if (ga) ga->data[i] += gi;
            if (gb) gb->data[i] += gi;
            break;
          case Binary::Sub:
            if (ga) ga->data[i] += gi;
            if (gb) gb->data[i] -= gi;
            break;
          case Binary::Mul:
            if (ga) ga->data[i] += gi * B.data[i];
            if (gb) gb->data[i] += gi * A.data[i];
            break;
        }
      }
      return;
    }
    for (std::size_t r = 0; r < g.rows; ++r) {
      for (std::size_t c = 0; c < g.cols; ++c) {
        const std::size_t ar = A.rows == 1 ? 0 : r, ac = A.cols == 1 ? 0 : c;
        const std::size_t br = B.rows == 1 ? 0 : r, bc = B.cols == 1 ? 0 : c;
        const double gi = g(r, c);
        switch (kind) {
          case Binary::Add:
            if (ga) (*ga)(ar, ac) += gi;
            if (gb) (*gb)(br, bc) += gi;
            break;
          case Binary::Sub:
            if (ga) (*ga)(ar, ac) += gi;
            if (gb) (*gb)(br, bc) -= gi;
            break;
          case Binary::Mul:
            if (ga) (*ga)(ar, ac) += gi * B(br, bc);
            if (gb) (*gb)(br, bc) += gi * A(ar, ac);
            break;
        }
      }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::Mul); }
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// y = scale * x + shift
inline Tensor affine(const Tensor& x, double scale, double shift = 0.0) {
  const Matrix& X = x.value();
  Matrix out(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) out.data[i] = scale * X.data[i] + shift;
  return x.tape().record(std::move(out), {x}, [x, scale](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += scale * g.data[i];
  });
}

inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }

// Clamps into [lo, hi]; gradient is zero where the clamp is active.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  const Matrix& X = x.value();
  Matrix out(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) out.data[i] = std::clamp(X.data[i], lo, hi);
  return x.tape().record(std::move(out), {x}, [x, lo, hi](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& X = x.value();
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (X.data[i] >= lo && X.data[i] <= hi) gx.data[i] += g.data[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax and reductions. `axis` follows numpy: 0 runs down each column,
// 1 runs along each row.

inline void check_axis(int axis, const char* op) {
  if (axis != 0 && axis != 1) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for a matrix");
  }
}

inline Tensor softmax(const Tensor& x, int axis = 1) {
  check_axis(axis, "softmax");
  const Matrix& X = x.value();
  const std::size_t len = axis == 1 ? X.cols : X.rows;
  const std::size_t count = axis == 1 ? X.rows : X.cols;
  if (len == 0) throw DimensionError("softmax over an empty axis " + X.shape_str());
  const std::size_t stride = axis == 1 ? 1 : X.cols;
  const std::size_t step = axis == 1 ? X.cols : 1;
  Matrix out(X.rows, X.cols);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t base = k * step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, X.data[base + j * stride]);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(X.data[base + j * stride] - mx);
      out.data[base + j * stride] = e;
      total += e;
    }
    for (std::size_t j = 0; j < len; ++j) out.data[base + j * stride] /= total;
  }
  return x.tape().record(std::move(out), {x}, [x, len, count, stride, step](Tape& tape, const Matrix& g, const Matrix& Y) {
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t base = k * step;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += g.data[base + j * stride] * Y.data[base + j * stride];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t i = base + j * stride;
        gx.data[i] += Y.data[i] * (g.data[i] - dot);
      }
    }
  });
}

enum class Reduce { Max, Mean, Sum };

// Reduces along `axis`: axis 0 yields 1 x cols, axis 1 yields rows x 1.
// Max routes the whole gradient to the lowest-index argmax.
inline Tensor reduce(const Tensor& x, Reduce kind, int axis) {
  check_axis(axis, "reduce");
  const Matrix& X = x.value();
  const std::size_t len = axis == 1 ? X.cols : X.rows;
  const std::size_t count = axis == 1 ? X.rows : X.cols;
  if (len == 0) throw DimensionError("reduce over an empty axis " + X.shape_str());
  const std::size_t stride = axis == 1 ? 1 : X.cols;
  const std::size_t step = axis == 1 ? X.cols : 1;
  Matrix out = axis == 1 ? Matrix(X.rows, 1) : Matrix(1, X.cols);
  std::vector<std::size_t> argmax;
  if (kind == Reduce::Max) argmax.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t base = k * step;
    if (kind == Reduce::Max) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < len; ++j) {
        if (X.data[base + j * stride] > X.data[base + best * stride]) best = j;
      }
      argmax[k] = best;
      out.data[k] = X.data[base + best * stride];
    } else {
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) s += X.data[base + j * stride];
      out.data[k] = kind == Reduce::Mean ? s / static_cast<double>(len) : s;
    }
  }
  return x.tape().record(std::move(out), {x},
                         [x, kind, len, count, stride, step, argmax = std::move(argmax)](Tape& tape, const Matrix& g, const Matrix&) {
                           Matrix& gx = tape.grad_buffer(x.id());
                           for (std::size_t k = 0; k < count; ++k) {
                             const std::size_t base = k * step;
                             if (kind == Reduce::Max) {
                               gx.data[base + argmax[k] * stride] += g.data[k];
                               continue;
                             }
                             const double gk = kind == Reduce::Mean ? g.data[k] / static_cast<double>(len) : g.data[k];
                             for (std::size_t j = 0; j < len; ++j) gx.data[base + j * stride] += gk;
                           }
                         });
}

inline Tensor sum_all(const Tensor& x) { return reduce(reduce(x, Reduce::Sum, 1), Reduce::Sum, 0); }
inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(std::max<std::size_t>(1, x.value().size())));
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor concat(std::span<const Tensor> parts, int axis) {
  check_axis(axis, "concat");
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  std::size_t rows = 0, cols = 0;
  std::vector<const Tensor*> used;
  for (const Tensor& p : parts) {
    const Matrix& P = p.value();
    if (P.size() == 0) continue;  // empty parts are neutral
    if (used.empty()) {
      rows = P.rows;
      cols = P.cols;
    } else if (axis == 0) {
      if (P.cols != cols) throw DimensionError("concat rows: width " + P.shape_str() + " vs " + std::to_string(cols));
      rows += P.rows;
    } else {
      if (P.rows != rows) throw DimensionError("concat cols: height " + P.shape_str() + " vs " + std::to_string(rows));
      cols += P.cols;
    }
    used.push_back(&p);
  }
  if (used.empty()) return parts.front().tape().constant(Matrix());
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const Tensor* p : used) {
    const Matrix& P = p->value();
    if (axis == 0) {
      std::copy(P.data.begin(), P.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += P.rows;
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(P.data.begin() + static_cast<std::ptrdiff_t>(r * P.cols),
                  P.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * P.cols),
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
      }
      offset += P.cols;
    }
  }
  std::vector<Tensor> inputs;
  inputs.reserve(used.size());
  for (const Tensor* p : used) inputs.push_back(*p);
  Tape& tape = inputs.front().tape();
  return tape.record(std::move(out), std::span<const Tensor>(inputs), [inputs, axis](Tape& tp, const Matrix& g, const Matrix&) {
    std::size_t offset = 0;
    for (const Tensor& p : inputs) {
      const Matrix& P = p.value();
      if (p.requires_grad()) {
        Matrix& gp = tp.grad_buffer(p.id());
        for (std::size_t r = 0; r < P.rows; ++r) {
          for (std::size_t c = 0; c < P.cols; ++c) {
            gp(r, c) += axis == 0 ? g(offset + r, c) : g(r, offset + c);
          }
        }
      }
      offset += axis == 0 ? P.rows : P.cols;
    }
  });
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  check_axis(axis, "slice");
  const Matrix& X = x.value();
  const std::size_t extent = axis == 0 ? X.rows : X.cols;
  if (begin > end || end > extent) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                         X.shape_str());
  }
  Matrix out = axis == 0 ? Matrix(end - begin, X.cols) : Matrix(X.rows, end - begin);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      out(r, c) = axis == 0 ? X(begin + r, c) : X(r, begin + c);
    }
  }
  return x.tape().record(std::move(out), {x}, [x, axis, begin](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t r = 0; r < g.rows; ++r) {
      for (std::size_t c = 0; c < g.cols; ++c) {
        if (axis == 0) {
          gx(begin + r, c) += g(r, c);
        } else {
          gx(r, begin + c) += g(r, c);
        }
      }
    }
  });
}

// Row gather; a negative index yields a zero row.
inline Tensor gather_rows(const Tensor& x, std::vector<std::ptrdiff_t> index) {
  const Matrix& X = x.value();
  Matrix out(index.size(), X.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::ptrdiff_t src = index[i];
    if (src < 0) continue;
    if (static_cast<std::size_t>(src) >= X.rows) {
      throw DimensionError("gather_rows: index " + std::to_string(src) + " out of range for " + X.shape_str());
    }
    std::copy_n(X.data.begin() + src * static_cast<std::ptrdiff_t>(X.cols), X.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * X.cols));
  }
  return x.tape().record(std::move(out), {x}, [x, index = std::move(index)](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0) continue;
      const std::size_t src = static_cast<std::size_t>(index[i]);
      for (std::size_t c = 0; c < g.cols; ++c) gx(src, c) += g(i, c);
    }
  });
}

// Row-major reinterpretation to rows x cols.
inline Tensor reshape(const Tensor& x, std::size_t rows, std::size_t cols) {
  const Matrix& X = x.value();
  if (rows * cols != X.size()) {
    throw DimensionError("reshape " + X.shape_str() + " to (" + std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  return x.tape().record(Matrix(rows, cols, X.data), {x}, [x](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
  });
}

// Stacks a 1 x n row `times` times.
inline Tensor repeat_rows(const Tensor& x, std::size_t times) {
  const Matrix& X = x.value();
  if (X.rows != 1) throw DimensionError("repeat_rows expects a row vector, got " + X.shape_str());
  std::vector<std::ptrdiff_t> index(times, 0);
  return gather_rows(x, std::move(index));
}

// ---------------------------------------------------------------------------
// Normalization and regularization

// Row-wise standardization (population variance, eps inside the root), then
// gain * xhat + bias. gain and bias are 1 x D.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const Matrix& X = x.value();
  const Matrix& G = gain.value();
  const Matrix& B = bias.value();
  const std::size_t D = X.cols;
  if (G.rows != 1 || G.cols != D || B.rows != 1 || B.cols != D) {
    throw DimensionError("layer_norm: input " + X.shape_str() + " with gain " + G.shape_str() + " and bias " +
                         B.shape_str());
  }
  if (!(eps >= 0.0)) throw ConfigError("layer_norm: eps must be non-negative");
  Matrix out(X.rows, D);
  Matrix xhat(X.rows, D);
  std::vector<double> inv_std(X.rows);
  for (std::size_t r = 0; r < X.rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < D; ++c) mean += X(r, c);
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t c = 0; c < D; ++c) var += (X(r, c) - mean) * (X(r, c) - mean);
    var /= static_cast<double>(D);
    const double denom = std::sqrt(var + eps);
    // Zero variance maps to zero before the affine part.
    inv_std[r] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      xhat(r, c) = (X(r, c) - mean) * inv_std[r];
      out(r, c) = G.data[c] * xhat(r, c) + B.data[c];
    }
  }
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), D](Tape& tape, const Matrix& g, const Matrix&) {
        const Matrix& G = gain.value();
        if (gain.requires_grad()) {
          Matrix& gg = tape.grad_buffer(gain.id());
          for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t c = 0; c < D; ++c) gg.data[c] += g(r, c) * xhat(r, c);
        }
        if (bias.requires_grad()) {
          Matrix& gb = tape.grad_buffer(bias.id());
          for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t c = 0; c < D; ++c) gb.data[c] += g(r, c);
        }
        if (!x.requires_grad()) return;
        Matrix& gx = tape.grad_buffer(x.id());
        const double inv_d = 1.0 / static_cast<double>(D);
        for (std::size_t r = 0; r < g.rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < D; ++c) {
            const double d = g(r, c) * G.data[c];
            mean_d += d;
            mean_dx += d * xhat(r, c);
          }
          mean_d *= inv_d;
          mean_dx *= inv_d;
          for (std::size_t c = 0; c < D; ++c) {
            const double d = g(r, c) * G.data[c];
            gx(r, c) += inv_std[r] * (d - mean_d - xhat(r, c) * mean_dx);
          }
        }
      });
}

// Inverted dropout. Identity when not training or rate == 0.
inline Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const Matrix& X = x.value();
  std::bernoulli_distribution keep(1.0 - rate);
  const double survivor = 1.0 / (1.0 - rate);
  Matrix mask(X.rows, X.cols);
  for (double& m : mask.data) m = keep(rng) ? survivor : 0.0;
  Matrix out(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) out.data[i] = X.data[i] * mask.data[i];
  return x.tape().record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& gx = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * mask.data[i];
  });
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cbln
