#pragma once

/// Conditional flow matching: conditional paths, the regression loss,
/// training, fixed-step ODE sampling and trajectory corpus generation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/datasets.hpp"
#include "kflow/error.hpp"
#include "kflow/nn.hpp"
#include "kflow/parallel.hpp"
#include "kflow/random.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

enum class PathKind { Gaussian, OT };

inline std::string to_string(PathKind k) { return k == PathKind::OT ? "ot" : "gauss"; }
inline PathKind path_kind_from_string(const std::string& s) {
  if (s == "ot") return PathKind::OT;
  if (s == "gauss" || s == "gaussian") return PathKind::Gaussian;
  throw ContractViolation("unknown path '" + s + "' (ot, gauss)");
}

struct ConditionalPath {
  PathKind kind = PathKind::OT;
  double sigma = 0.01;

  static ConditionalPath standard(PathKind kind) { return {kind, kind == PathKind::OT ? 0.01 : 0.1}; }
};

/// dx/dt = v(x, t) with x [b,2] and t [b].
using VelocityField = std::function<Tensor(const Tensor& x, const Tensor& t)>;

inline Tensor time_column(std::size_t rows, double t) { return Tensor({rows, 1}, t); }

struct VectorFieldModel {
  MlpSpec spec{3, 64, 3, 2};
  ParamList params;

  static VectorFieldModel initialized(const MlpSpec& spec, std::uint64_t seed) {
    require(spec.input_dim == 3 && spec.output_dim == 2, "VectorFieldModel: spec must map (x1, x2, t) -> R^2");
    return {spec, init_params(spec, seed)};
  }

  Tensor velocity(const Tensor& x, const Tensor& t) const {
    require(x.cols() == 2 && t.size() == x.rows(), "VectorFieldModel: expects x [b,2] and t [b]");
    return mlp_forward(spec, params, concat_cols({x, t.reshaped({t.size(), 1})}));
  }

  VelocityField field() const {
    return [this](const Tensor& x, const Tensor& t) { return velocity(x, t); };
  }
};

// ---------------------------------------------------------------------------

struct PathBatch {
  Tensor xt;  // [b,2]
  Tensor t;   // [b]
  Tensor ut;  // [b,2]
};

/// x_t = t x1 + (1-t) x0 + sigma * eps,  u_t = x1 - x0.
inline PathBatch path_sample(const ConditionalPath& path, const Tensor& x0, const Tensor& x1, const Tensor& t,
                             Rng& rng) {
  require(same_shape(x0, x1) && x0.cols() == 2, "path_sample: x0 and x1 must both be [b,2]");
  require(t.size() == x0.rows(), "path_sample: t must have one entry per sample");
  require(path.sigma >= 0, "path_sample: sigma must be >= 0");
  PathBatch out{Tensor(x0.shape()), t.reshaped({t.size()}), sub(x1, x0)};
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    const double ti = t[i];
    require(ti >= 0.0 && ti <= 1.0, "path_sample: t = " + std::to_string(ti) + " outside [0,1]");
    for (std::size_t c = 0; c < 2; ++c) {
      double v = ti * x1(i, c) + (1.0 - ti) * x0(i, c);
      if (path.sigma > 0) v += path.sigma * rng.normal();
      out.xt(i, c) = v;
    }
  }
  return out;
}

/// Draws a training minibatch: prior/target samples, OT re-pairing for
/// OtPath, uniform t.
inline PathBatch draw_cfm_batch(const ConditionalPath& path, const Distribution2D& prior,
                                const Distribution2D& target, std::size_t batch, Rng& rng) {
  Tensor x0 = sample(prior, batch, rng.next());
  Tensor x1 = sample(target, batch, rng.next());
  if (path.kind == PathKind::OT) {
    const CouplingPlan plan = ot_pair(x0, x1);
    x1 = gather_rows(x1, plan.permutation);
  }
  Tensor t({batch});
  for (auto& v : t.storage()) v = rng.uniform();
  return path_sample(path, x0, x1, t, rng);
}

/// mean_b ||v(x_t, t) - u_t||^2
template <class P>
P cfm_loss_generic(const MlpSpec& spec, std::span<const P> params, const P& input, const P& target) {
  const P out = mlp_forward(spec, params, input);
  return scale(sum(square(sub(out, target))), 1.0 / static_cast<double>(value_of(target).rows()));
}

inline double cfm_loss(const VectorFieldModel& model, const PathBatch& batch) {
  const Tensor v = model.velocity(batch.xt, batch.t);
  return sum(square(sub(v, batch.ut))) / static_cast<double>(batch.ut.rows());
}

inline std::vector<Tensor> cfm_loss_grad(const VectorFieldModel& model, const PathBatch& batch, double* loss = nullptr) {
  const Tensor input = concat_cols({batch.xt, batch.t.reshaped({batch.t.size(), 1})});
  auto [value, grads] = value_and_grad(
      [&](Tape& tape, std::span<const Var> params) {
        return cfm_loss_generic<Var>(model.spec, params, tape.constant(input), tape.constant(batch.ut));
      },
      std::span<const Tensor>(model.params));
  if (loss) *loss = value;
  return grads;
}

struct CfmTrainConfig {
  Distribution2D prior = Distribution2D::standard(DistKind::Gauss);
  Distribution2D target = Distribution2D::standard(DistKind::EightGauss);
  ConditionalPath path = ConditionalPath::standard(PathKind::OT);
  MlpSpec spec{3, 64, 3, 2};
  std::size_t steps = 20000;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct CfmTrainReport {
  std::vector<double> losses;
};

using StepLogger = std::function<void(std::size_t step, double loss)>;

inline VectorFieldModel train_cfm(const CfmTrainConfig& cfg, CfmTrainReport* report = nullptr,
                                  const StepLogger& log = {}) {
  require(cfg.steps >= 1, "train_cfm: steps must be >= 1");
  require(cfg.batch >= 1, "train_cfm: batch must be >= 1");
  VectorFieldModel model = VectorFieldModel::initialized(cfg.spec, Rng::derive(cfg.seed, 1).next());
  AdamState adam = AdamState::for_params(model.params, cfg.lr);
  Rng rng = Rng::derive(cfg.seed, 2);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const PathBatch batch = draw_cfm_batch(cfg.path, cfg.prior, cfg.target, cfg.batch, rng);
    double loss = 0.0;
    const auto grads = cfm_loss_grad(model, batch, &loss);
    if (!std::isfinite(loss)) throw NumericalError("train_cfm: non-finite loss at step " + std::to_string(step));
    adam_update(adam, std::span<Tensor>(model.params), std::span<const Tensor>(grads));
    if (report) report->losses.push_back(loss);
    if (log) log(step, loss);
  }
  return model;
}

// ---------------------------------------------------------------------------

enum class Integrator { Euler, RK4 };

inline std::string to_string(Integrator m) { return m == Integrator::RK4 ? "rk4" : "euler"; }

namespace detail {

/// Integrates one block of rows; writes states [rows, n_steps+1, 2] into
/// `states` at row offset `r0`, and optionally the field at every grid point.
inline void integrate_block(const VelocityField& field, const Tensor& x0, std::size_t n_steps, Integrator method,
                            Tensor& states, Tensor* velocities, std::size_t r0) {
  const std::size_t b = x0.rows();
  const double h = 1.0 / static_cast<double>(n_steps);
  Tensor x = x0;
  auto store = [&](Tensor& dst, const Tensor& src, std::size_t k) {
    for (std::size_t i = 0; i < b; ++i) {
      dst(r0 + i, k, 0) = src(i, 0);
      dst(r0 + i, k, 1) = src(i, 1);
    }
  };
  store(states, x, 0);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double nd = static_cast<double>(n_steps);
    const double t = static_cast<double>(k) / nd;
    const double t_mid = (static_cast<double>(k) + 0.5) / nd;
    const double t_next = static_cast<double>(k + 1) / nd;
    const Tensor k1 = field(x, Tensor({b}, t));
    if (velocities) store(*velocities, k1, k);
    if (method == Integrator::Euler) {
      x = add(x, scale(k1, h));
    } else {
      const Tensor k2 = field(add(x, scale(k1, 0.5 * h)), Tensor({b}, t_mid));
      const Tensor k3 = field(add(x, scale(k2, 0.5 * h)), Tensor({b}, t_mid));
      const Tensor k4 = field(add(x, scale(k3, h)), Tensor({b}, t_next));
      Tensor incr = add(add(k1, scale(k2, 2.0)), add(scale(k3, 2.0), k4));
      x = add(x, scale(incr, h / 6.0));
    }
    if (!x.all_finite()) throw NumericalError("integrate: non-finite state at step " + std::to_string(k + 1));
    store(states, x, k + 1);
  }
  if (velocities) store(*velocities, field(x, Tensor({b}, 1.0)), n_steps);
}

inline constexpr std::size_t kIntegrateChunk = 512;

}  // namespace detail

/// Fixed-step integration of dx/dt = v(x,t) over t in [0,1].
/// Returns states [b, n_steps+1, 2].
inline Tensor integrate(const VelocityField& field, const Tensor& x0, std::size_t n_steps, Integrator method) {
  require(n_steps >= 1, "integrate: n_steps must be >= 1");
  require(x0.cols() == 2, "integrate: x0 must be [b,2]");
  const std::size_t b = x0.rows();
  Tensor states({b, n_steps + 1, 2});
  parallel_chunks(b, detail::kIntegrateChunk, [&](std::size_t r0, std::size_t r1) {
    detail::integrate_block(field, slice_rows(x0, r0, r1), n_steps, method, states, nullptr, r0);
  });
  return states;
}

inline Tensor integrate(const VectorFieldModel& model, const Tensor& x0, std::size_t n_steps, Integrator method) {
  return integrate(model.field(), x0, n_steps, method);
}

/// Final states [b,2] of a states tensor [b, n+1, 2].
inline Tensor endpoints(const Tensor& states) {
  const std::size_t b = states.dim(0), last = states.dim(1) - 1;
  Tensor out({b, 2});
  for (std::size_t i = 0; i < b; ++i) {
    out(i, 0) = states(i, last, 0);
    out(i, 1) = states(i, last, 1);
  }
  return out;
}

/// States at grid index k, [b,2].
inline Tensor states_at(const Tensor& states, std::size_t k) {
  const std::size_t b = states.dim(0);
  Tensor out({b, 2});
  for (std::size_t i = 0; i < b; ++i) {
    out(i, 0) = states(i, k, 0);
    out(i, 1) = states(i, k, 1);
  }
  return out;
}

inline constexpr std::size_t kTrajectorySteps = 100;

struct TrajectorySet {
  Tensor states;      // [n, 101, 2]
  Tensor times;       // [101]
  Tensor velocities;  // [n, 101, 2]
  Tensor terminals;   // [n, 2]
  std::uint64_t seed = 0;

  std::size_t n_traj() const { return states.empty() ? 0 : states.dim(0); }
  std::size_t n_points() const { return times.size(); }
};

/// 100-step RK4 rollouts from prior draws, recording the field at every grid point.
inline TrajectorySet generate_trajectories(const VelocityField& field, const Distribution2D& prior,
                                           std::size_t n_traj, std::uint64_t seed) {
  require(n_traj >= 1, "generate_trajectories: n_traj must be >= 1");
  const std::size_t n = kTrajectorySteps;
  TrajectorySet set;
  set.seed = seed;
  const Tensor x0 = sample(prior, n_traj, seed);
  set.states = Tensor({n_traj, n + 1, 2});
  set.velocities = Tensor({n_traj, n + 1, 2});
  parallel_chunks(n_traj, detail::kIntegrateChunk, [&](std::size_t r0, std::size_t r1) {
    detail::integrate_block(field, slice_rows(x0, r0, r1), n, Integrator::RK4, set.states, &set.velocities, r0);
  });
  set.times = Tensor({n + 1});
  for (std::size_t k = 0; k <= n; ++k) set.times[k] = static_cast<double>(k) / static_cast<double>(n);
  set.terminals = endpoints(set.states);
  return set;
}

inline TrajectorySet generate_trajectories(const VectorFieldModel& model, const Distribution2D& prior,
                                           std::size_t n_traj, std::uint64_t seed) {
  return generate_trajectories(model.field(), prior, n_traj, seed);
}

}  // namespace kflow
