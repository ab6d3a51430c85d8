#pragma once

/// Forward-mode differentiation: a primal/tangent pair pushed through the
/// same primitive set as Tensor and Var. Dual<Tensor> gives plain Jacobian-
/// vector products; Dual<Var> keeps both halves on a tape so the tangent can
/// itself be differentiated w.r.t. parameters (used by the generator loss).

#include <span>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

template <class T>
struct Dual {
  T primal;
  T tangent;

  static Dual constant(const T& p) { return {p, zeros_like(p)}; }
};

using DualTensor = Dual<Tensor>;

template <class T>
const Tensor& value_of(const Dual<T>& d) {
  return value_of(d.primal);
}

template <class T>
Dual<T> constant_like(const Dual<T>& ref, Tensor value) {
  T p = constant_like(ref.primal, std::move(value));
  return {p, zeros_like(p)};
}

template <class T>
Dual<T> zeros_like(const Dual<T>& a) {
  T z = zeros_like(a.primal);
  return {z, z};
}

/// Dual times a constant (parameter) matrix.
template <class T>
Dual<T> matmul(const Dual<T>& a, const T& w) {
  return {matmul(a.primal, w), matmul(a.tangent, w)};
}

template <class T>
Dual<T> add_row(const Dual<T>& a, const T& row) {
  return {add_row(a.primal, row), a.tangent};
}

template <class T>
Dual<T> add(const Dual<T>& a, const Dual<T>& b) {
  return {add(a.primal, b.primal), add(a.tangent, b.tangent)};
}

template <class T>
Dual<T> sub(const Dual<T>& a, const Dual<T>& b) {
  return {sub(a.primal, b.primal), sub(a.tangent, b.tangent)};
}

template <class T>
Dual<T> mul(const Dual<T>& a, const Dual<T>& b) {
  return {mul(a.primal, b.primal), add(mul(a.tangent, b.primal), mul(a.primal, b.tangent))};
}

template <class T>
Dual<T> scale(const Dual<T>& a, double s) {
  return {scale(a.primal, s), scale(a.tangent, s)};
}

template <class T>
Dual<T> silu(const Dual<T>& a) {
  return {silu(a.primal), mul(silu_d(a.primal), a.tangent)};
}

template <class T>
Dual<T> square(const Dual<T>& a) {
  return {square(a.primal), scale(mul(a.primal, a.tangent), 2.0)};
}

template <class T>
Dual<T> concat_cols(std::span<const Dual<T>> parts) {
  std::vector<T> p, t;
  for (const auto& d : parts) {
    p.push_back(d.primal);
    t.push_back(d.tangent);
  }
  return {concat_cols(std::span<const T>(p)), concat_cols(std::span<const T>(t))};
}

template <class T>
Dual<T> slice_cols(const Dual<T>& a, std::size_t c0, std::size_t c1) {
  return {slice_cols(a.primal, c0, c1), slice_cols(a.tangent, c0, c1)};
}

/// J_f(x) * v by forward propagation. f maps DualTensor -> DualTensor.
template <class F>
Tensor jvp(F&& f, const Tensor& x, const Tensor& v) {
  require(x.shape() == v.shape(), "jvp: direction shape " + shape_str(v.shape()) + " differs from input " +
                                      shape_str(x.shape()));
  DualTensor out = f(DualTensor{x, v});
  return std::move(out.tangent);
}

/// Central-difference directional derivative (f(x+hv) - f(x-hv)) / 2h.
/// Test oracle only; f maps Tensor -> Tensor.
template <class F>
Tensor jvp_fd(F&& f, const Tensor& x, const Tensor& v, double h = 1e-5) {
  require(x.shape() == v.shape(), "jvp_fd: shape mismatch");
  Tensor plus = f(add(x, scale(v, h)));
  Tensor minus = f(sub(x, scale(v, h)));
  return scale(sub(plus, minus), 0.5 / h);
}

}  // namespace kflow
