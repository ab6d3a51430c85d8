#pragma once

/// Fully connected SiLU networks and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/dual.hpp"
#include "kflow/error.hpp"
#include "kflow/random.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

enum class Activation { SiLU };

/// depth = number of hidden layers. Parameters are stored as
/// [W0, b0, W1, b1, ..., W_depth, b_depth] with W_l of shape [fan_in, fan_out]
/// and b_l of shape [1, fan_out]; the last layer is linear.
struct MlpSpec {
  std::size_t input_dim = 3;
  std::size_t hidden_dim = 64;
  std::size_t depth = 3;
  std::size_t output_dim = 2;
  Activation activation = Activation::SiLU;

  void validate() const {
    require(depth >= 1 && input_dim >= 1 && hidden_dim >= 1 && output_dim >= 1,
            "MlpSpec: depth and all dims must be >= 1");
  }
  std::size_t n_layers() const { return depth + 1; }
  std::size_t fan_in(std::size_t layer) const { return layer == 0 ? input_dim : hidden_dim; }
  std::size_t fan_out(std::size_t layer) const { return layer == depth ? output_dim : hidden_dim; }

  std::vector<Shape> param_shapes() const {
    std::vector<Shape> s;
    for (std::size_t l = 0; l < n_layers(); ++l) {
      s.push_back({fan_in(l), fan_out(l)});
      s.push_back({1, fan_out(l)});
    }
    return s;
  }
  std::size_t n_params() const {
    std::size_t n = 0;
    for (const auto& s : param_shapes()) n += shape_size(s);
    return n;
  }

  bool operator==(const MlpSpec&) const = default;
};

using ParamList = std::vector<Tensor>;

inline void check_params(const MlpSpec& spec, std::span<const Tensor> params) {
  const auto shapes = spec.param_shapes();
  require(params.size() == shapes.size(), "mlp: expected " + std::to_string(shapes.size()) + " parameter tensors, got " +
                                              std::to_string(params.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    require(params[i].size() == shape_size(shapes[i]) && params[i].rows() == shapes[i][0],
            "mlp: parameter " + std::to_string(i) + " has shape " + shape_str(params[i].shape()) + ", expected " +
                shape_str(shapes[i]));
}

/// Kaiming-uniform weights in +-sqrt(6/fan_in), zero biases.
inline ParamList init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamList params;
  for (std::size_t l = 0; l < spec.n_layers(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in(l)));
    Tensor w({spec.fan_in(l), spec.fan_out(l)});
    for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
    params.push_back(std::move(w));
    params.emplace_back(Shape{1, spec.fan_out(l)});
  }
  return params;
}

/// Forward pass. X is the activation type (Tensor, Var, Dual<Tensor>,
/// Dual<Var>); P the parameter type (Tensor or Var).
template <class X, class P>
X mlp_forward(const MlpSpec& spec, std::span<const P> params, const X& input) {
  require(params.size() == 2 * spec.n_layers(), "mlp_forward: parameter count does not match spec");
  require(value_of(input).cols() == spec.input_dim,
          "mlp_forward: input has " + std::to_string(value_of(input).cols()) + " columns, spec expects " +
              std::to_string(spec.input_dim));
  X h = input;
  for (std::size_t l = 0; l < spec.depth; ++l) h = silu(add_row(matmul(h, params[2 * l]), params[2 * l + 1]));
  return add_row(matmul(h, params[2 * spec.depth]), params[2 * spec.depth + 1]);
}

inline Tensor mlp_forward(const MlpSpec& spec, const ParamList& params, const Tensor& input) {
  return mlp_forward<Tensor, Tensor>(spec, std::span<const Tensor>(params), input);
}

// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  ParamList m;
  ParamList v;

  static AdamState for_params(std::span<const Tensor> params, double lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }

  void validate() const {
    require(lr > 0 && beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "AdamState: hyperparameters out of range");
  }
};

/// In-place Adam update with bias correction.
inline void adam_update(AdamState& state, std::span<Tensor> params, std::span<const Tensor> grads) {
  state.validate();
  require(params.size() == grads.size() && params.size() == state.m.size(), "adam: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require(grads[i].size() == params[i].size() && state.m[i].size() == params[i].size(),
            "adam: shape mismatch at tensor " + std::to_string(i));
    if (!grads[i].all_finite())
      throw NumericalError("adam: non-finite gradient in tensor " + std::to_string(i) + " at step " +
                           std::to_string(state.step + 1));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    double* p = params[i].data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

struct AdamResult {
  ParamList params;
  AdamState state;
};

/// Pure form of adam_update.
inline AdamResult adam_step(const AdamState& state, const ParamList& params, const ParamList& grads) {
  AdamResult r{params, state};
  adam_update(r.state, std::span<Tensor>(r.params), std::span<const Tensor>(grads));
  return r;
}

}  // namespace kflow
