#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fewshot/tensor.hpp"

namespace fewshot {

/// Misuse of the tape: non-scalar root, second backward, foreign variable.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Handle to a tensor recorded on a tape (or a parameter registered with it).
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return *tensor_; }
  Tensor& tensor() const { return *tensor_; }
  const Shape& shape() const { return tensor_->shape(); }
  bool requires_grad() const noexcept { return requires_grad_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tensor_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, Tensor* tensor, bool requires_grad)
      : tape_(tape), tensor_(tensor), requires_grad_(requires_grad) {}

  Tape* tape_ = nullptr;
  Tensor* tensor_ = nullptr;
  bool requires_grad_ = false;
};

/**
 * Linear record of forward operations for reverse-mode differentiation.
 *
 * Nodes are kept in construction order and replayed backwards, so every
 * node runs after all of its consumers. Gradients accumulate additively
 * into each input's grad buffer. Parameters registered with parameter()
 * live outside the tape and must outlive it; their grads are not cleared
 * here (the optimizer owns that).
 */
class Tape {
 public:
  /// Receives the node's output (value and grad); adds into input grads.
  using BackwardFn = std::function<void(const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Tensor& t) { return Var(this, &t, true); }

  Var input(Tensor t, bool requires_grad = false) {
    owned_.push_back(std::move(t));
    return Var(this, &owned_.back(), requires_grad);
  }

  Var constant(Tensor t) { return input(std::move(t), false); }

  /**
   * Records an op output. The backward rule is stored only when some
   * input requires a gradient; otherwise the output is a constant.
   */
  Var record(std::string_view op, Tensor value,
             std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape_ != this) {
        throw TapeError(std::string(op) + ": input belongs to another tape");
      }
      needs = needs || v.requires_grad_;
    }
    owned_.push_back(std::move(value));
    Tensor* out = &owned_.back();
    if (needs) {
      nodes_.push_back(Node{std::string(op), out, std::move(backward)});
    }
    return Var(this, out, needs);
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  void backward(const Var& loss) {
    if (loss.tape_ != this) throw TapeError("backward: loss from another tape");
    if (loss.tensor_->size() != 1) {
      throw TapeError("backward: root must be a scalar, got shape " +
                      to_string(loss.shape()));
    }
    if (backward_done_) {
      throw TapeError("backward: already run on this tape; call reset()");
    }
    backward_done_ = true;
    if (!loss.requires_grad_) return;
    loss.tensor_->ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->has_grad()) it->backward(*it->out);
    }
  }

  /// Drops every recorded node and owned tensor.
  void reset() {
    nodes_.clear();
    owned_.clear();
    backward_done_ = false;
  }

  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Op names in recording order.
  std::vector<std::string> op_trace() const {
    std::vector<std::string> ops;
    ops.reserve(nodes_.size());
    for (const Node& n : nodes_) ops.push_back(n.op);
    return ops;
  }

 private:
  struct Node {
    std::string op;
    Tensor* out;
    BackwardFn backward;
  };

  std::deque<Tensor> owned_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace detail

// Elementary ops. Each captures raw tensor pointers; the tape keeps them alive.

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  Tensor* ta = &a.tensor();
  Tensor* tb = &b.tensor();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape().record("add", std::move(out), {a, b},
                         [=](const Tensor& o) {
                           auto g = o.grad();
                           if (ga) {
                             auto d = ta->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                           }
                           if (gb) {
                             auto d = tb->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                           }
                         });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  Tensor* ta = &a.tensor();
  Tensor* tb = &b.tensor();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape().record("sub", std::move(out), {a, b},
                         [=](const Tensor& o) {
                           auto g = o.grad();
                           if (ga) {
                             auto d = ta->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                           }
                           if (gb) {
                             auto d = tb->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                           }
                         });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  Tensor* ta = &a.tensor();
  Tensor* tb = &b.tensor();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape().record("mul", std::move(out), {a, b},
                         [=](const Tensor& o) {
                           auto g = o.grad();
                           if (ga) {
                             auto d = ta->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*tb)[i];
                           }
                           if (gb) {
                             auto d = tb->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*ta)[i];
                           }
                         });
}

inline Var scale(const Var& a, double k) {
  Tensor out = detail::map_values(a.value(), [k](double v) { return k * v; });
  Tensor* ta = &a.tensor();
  return a.tape().record("scale", std::move(out), {a}, [=](const Tensor& o) {
    auto g = o.grad();
    auto d = ta->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += k * g[i];
  });
}

inline Var exp(const Var& a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return std::exp(v); });
  Tensor* ta = &a.tensor();
  return a.tape().record("exp", std::move(out), {a}, [=](const Tensor& o) {
    auto g = o.grad();
    auto d = ta->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
  });
}

inline Var log(const Var& a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return std::log(v); });
  Tensor* ta = &a.tensor();
  return a.tape().record("log", std::move(out), {a}, [=](const Tensor& o) {
    auto g = o.grad();
    auto d = ta->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / (*ta)[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  Tensor* ta = &a.tensor();
  return a.tape().record("sum", Tensor::scalar(s), {a}, [=](const Tensor& o) {
    double g = o.grad()[0];
    for (double& d : ta->ensure_grad()) d += g;
  });
}

inline Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Weighted sum Σ w_i x_i with constant weights; turns any tensor into a scalar probe.
inline Var dot_const(const Var& a, std::span<const double> weights) {
  if (weights.size() != a.value().size()) {
    throw ShapeError("dot_const: weight count does not match " +
                     to_string(a.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * a.value()[i];
  std::vector<double> w(weights.begin(), weights.end());
  Tensor* ta = &a.tensor();
  return a.tape().record("dot_const", Tensor::scalar(s), {a},
                         [=, w = std::move(w)](const Tensor& o) {
                           double g = o.grad()[0];
                           auto d = ta->ensure_grad();
                           for (std::size_t i = 0; i < w.size(); ++i) d[i] += g * w[i];
                         });
}

/// Rows [begin, end) of a tensor viewed as [rows, rest...].
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() < 1 || begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_rows: bad range for " + to_string(x.shape()));
  }
  std::size_t stride = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> vals(x.data().begin() + begin * stride,
                           x.data().begin() + end * stride);
  Tensor* ta = &a.tensor();
  return a.tape().record("slice_rows", Tensor(shape, std::move(vals)), {a},
                         [=](const Tensor& o) {
                           auto g = o.grad();
                           auto d = ta->ensure_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) d[begin * stride + i] += g[i];
                         });
}

/// Row-wise log Σ_j exp(x_ij) for x of shape [R, C]; returns [R].
inline Var logsumexp_rows(const Var& a) {
  const Tensor& x = a.value();
  require_rank(x, 2, "logsumexp_rows");
  std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * cols;
    std::size_t top = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (row[c] > row[top]) top = c;
    }
    double rest = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (c != top) rest += std::exp(row[c] - row[top]);
    }
    out[r] = row[top] + std::log1p(rest);
  }
  Tensor* ta = &a.tensor();
  return a.tape().record("logsumexp_rows", std::move(out), {a},
                         [=](const Tensor& o) {
                           auto g = o.grad();
                           auto d = ta->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < cols; ++c) {
                               std::size_t i = r * cols + c;
                               d[i] += g[r] * std::exp((*ta)[i] - o[r]);
                             }
                           }
                         });
}

/// Picks x[r, index[r]] for every row of a [R, C] tensor; returns [R].
inline Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  const Tensor& x = a.value();
  require_rank(x, 2, "gather_rows");
  std::size_t rows = x.dim(0), cols = x.dim(1);
  if (index.size() != rows) throw ShapeError("gather_rows: index count != rows");
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) throw ShapeError("gather_rows: index out of range");
    out[r] = x[r * cols + index[r]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor* ta = &a.tensor();
  return a.tape().record("gather_rows", std::move(out), {a},
                         [=, idx = std::move(idx)](const Tensor& o) {
                           auto g = o.grad();
                           auto d = ta->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) d[r * cols + idx[r]] += g[r];
                         });
}

}  // namespace fewshot
