#pragma once

/// Reverse-mode differentiation on a linear tape of rank-2 tensor ops.
///
/// A Tape records every op applied to its Vars; backward() then walks the
/// tape in reverse accumulating adjoints. Vars are cheap handles (tape
/// pointer + node index), so generic code written against the free functions
/// below runs unchanged on Tensor values and on taped Vars.

#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kflow/error.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is wanted.
  Var variable(Tensor value) { return push(std::move(value), true, {}); }
  /// Leaf treated as data.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Records a primitive with no gradient rule. Backpropagating into it
  /// through a differentiable input raises UnsupportedOp.
  Var opaque(const std::string& name, Tensor value, std::initializer_list<Var> inputs) {
    bool rg = false;
    for (Var v : inputs) {
      check(v);
      rg = rg || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), rg,
                [name](Tape&, std::size_t) { throw UnsupportedOp("no gradient rule for primitive '" + name + "'"); });
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }
  Var record(Tensor value, std::span<const Var> inputs, Backward backward) {
    bool rg = false;
    for (Var v : inputs) {
      check(v);
      rg = rg || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& adjoint(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = g;
    else
      add_inplace(n.grad, g);
  }
  void accumulate(std::size_t id, Tensor&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = std::move(g);
    else
      add_inplace(n.grad, g);
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. loss must be a 1x1 Var.
  void backward(Var loss) {
    check(loss);
    require(loss.value().size() == 1, "backward: loss is not scalar, shape " + shape_str(loss.value().shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss.id].grad = Tensor(loss.value().shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// Gradient of the last backward() w.r.t. v (zeros if v did not influence it).
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void check(Var v) const {
    require(v.tape == this && v.id < nodes_.size(), "Var does not belong to this tape");
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(bw), rg});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

inline const Tensor& value_of(const Var& v) { return v.value(); }

namespace detail {
inline Tape& same_tape(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape, "ops on Vars from different tapes");
  return *a.tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Taped primitives.

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.adjoint(self);
    if (tp.requires_grad(a.id)) tp.accumulate(a.id, matmul_nt(g, b.value()));
    if (tp.requires_grad(b.id)) tp.accumulate(b.id, matmul_tn(a.value(), g));
  });
}

inline Var transpose(Var a) {
  return a.tape->record(transpose(a.value()), {a},
                        [a](Tape& tp, std::size_t self) { tp.accumulate(a.id, transpose(tp.adjoint(self))); });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(add(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::size_t self) {
    tp.accumulate(a.id, tp.adjoint(self));
    tp.accumulate(b.id, tp.adjoint(self));
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(sub(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::size_t self) {
    tp.accumulate(a.id, tp.adjoint(self));
    if (tp.requires_grad(b.id)) tp.accumulate(b.id, scale(tp.adjoint(self), -1.0));
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(mul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.adjoint(self);
    if (tp.requires_grad(a.id)) tp.accumulate(a.id, mul(g, b.value()));
    if (tp.requires_grad(b.id)) tp.accumulate(b.id, mul(g, a.value()));
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(scale(a.value(), s), {a},
                        [a, s](Tape& tp, std::size_t self) { tp.accumulate(a.id, scale(tp.adjoint(self), s)); });
}

inline Var add_row(Var a, Var row) {
  Tape& t = detail::same_tape(a, row);
  return t.record(add_row(a.value(), row.value()), {a, row}, [a, row](Tape& tp, std::size_t self) {
    const Tensor& g = tp.adjoint(self);
    tp.accumulate(a.id, g);
    if (tp.requires_grad(row.id)) tp.accumulate(row.id, column_sums(g).reshaped(row.value().shape()));
  });
}

inline Var silu(Var a) {
  return a.tape->record(silu(a.value()), {a}, [a](Tape& tp, std::size_t self) {
    tp.accumulate(a.id, mul(tp.adjoint(self), silu_d(a.value())));
  });
}

inline Var silu_d(Var a) {
  return a.tape->record(silu_d(a.value()), {a}, [a](Tape& tp, std::size_t self) {
    tp.accumulate(a.id, mul(tp.adjoint(self), silu_dd(a.value())));
  });
}

inline Var square(Var a) {
  return a.tape->record(square(a.value()), {a}, [a](Tape& tp, std::size_t self) {
    tp.accumulate(a.id, mul(tp.adjoint(self), scale(a.value(), 2.0)));
  });
}

/// Sum of all entries, as a 1x1 Var.
inline Var sum(Var a) {
  return a.tape->record(Tensor::scalar(sum(a.value())), {a}, [a](Tape& tp, std::size_t self) {
    tp.accumulate(a.id, Tensor(a.value().shape(), tp.adjoint(self).item()));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (Var p : parts) {
    t.check(p);
    vals.push_back(p.value());
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  Tensor out = concat_cols(std::span<const Tensor>(vals));
  auto bw = [ps](Tape& tp, std::size_t self) {
    const Tensor& g = tp.adjoint(self);
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t w = p.value().cols();
      if (tp.requires_grad(p.id)) tp.accumulate(p.id, slice_cols(g, off, off + w));
      off += w;
    }
  };
  return t.record(std::move(out), parts, bw);
}
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  return a.tape->record(slice_cols(a.value(), c0, c1), {a}, [a, c0, c1](Tape& tp, std::size_t self) {
    const Tensor& g = tp.adjoint(self);
    Tensor full(a.value().shape());
    const std::size_t n = full.cols(), w = c1 - c0;
    for (std::size_t i = 0; i < full.rows(); ++i)
      for (std::size_t j = 0; j < w; ++j) full[i * n + c0 + j] = g[i * w + j];
    tp.accumulate(a.id, std::move(full));
  });
}

inline Var stop_gradient(Var a) { return a.tape->constant(a.value()); }

inline Var zeros_like(const Var& a) { return a.tape->constant(Tensor(a.value().shape())); }
inline Var constant_like(const Var& ref, Tensor value) { return ref.tape->constant(std::move(value)); }

// ---------------------------------------------------------------------------

/// Gradient of a scalar loss w.r.t. each parameter tensor.
/// loss_fn(Tape&, std::span<const Var>) -> Var (1x1).
template <class LossFn>
std::vector<Tensor> grad(LossFn&& loss_fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.variable(p));
  Var loss = loss_fn(tape, std::span<const Var>(vars));
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(tape.grad(v).reshaped(v.value().shape()));
  return out;
}

template <class LossFn>
std::pair<double, std::vector<Tensor>> value_and_grad(LossFn&& loss_fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.variable(p));
  Var loss = loss_fn(tape, std::span<const Var>(vars));
  tape.backward(loss);
  std::vector<Tensor> out;
  for (Var v : vars) out.push_back(tape.grad(v).reshaped(v.value().shape()));
  return {loss.value().item(), std::move(out)};
}

}  // namespace kflow
