#pragma once

/// Decoder-free Koopman embedding of the time-augmented flow.
///
/// The observable vector is z = [x1, x2, t, 1, g_1(x,t) .. g_p(x,t)]: the raw
/// state and time are kept as the leading coordinates so projecting back to
/// state space is exact, and the constant coordinate lets the linear
/// generator L express dt/dt = 1. Training fits L and the encoder g so that
/// L z matches the time derivative of z along the frozen CFM field.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/cfm.hpp"
#include "kflow/dual.hpp"
#include "kflow/error.hpp"
#include "kflow/linalg.hpp"
#include "kflow/nn.hpp"
#include "kflow/random.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

/// Number of preserved leading coordinates (x1, x2, t, 1).
inline constexpr std::size_t kPreserved = 4;
inline constexpr double kDomainHalfWidth = 8.0;

struct KoopmanModel {
  MlpSpec encoder_spec{3, 64, 3, 28};
  ParamList encoder_params;  // empty when p_learned == 0
  Tensor generator;          // L, [p_total, p_total]

  std::size_t p_learned() const { return encoder_params.empty() ? 0 : encoder_spec.output_dim; }
  std::size_t p_total() const { return kPreserved + p_learned(); }

  static KoopmanModel initialized(const MlpSpec& encoder, std::size_t p_learned, double operator_std,
                                  std::uint64_t seed) {
    KoopmanModel m;
    m.encoder_spec = encoder;
    m.encoder_spec.input_dim = 3;
    m.encoder_spec.output_dim = std::max<std::size_t>(p_learned, 1);
    if (p_learned > 0) m.encoder_params = init_params(m.encoder_spec, Rng::derive(seed, 11).next());
    const std::size_t p = kPreserved + p_learned;
    m.generator = Tensor({p, p});
    Rng rng = Rng::derive(seed, 12);
    for (auto& v : m.generator.storage()) v = rng.normal(0.0, operator_std);
    return m;
  }

  void validate() const {
    const std::size_t p = p_total();
    require(generator.rows() == p && generator.cols() == p,
            "KoopmanModel: generator must be " + std::to_string(p) + "x" + std::to_string(p));
    if (!encoder_params.empty()) check_params(encoder_spec, encoder_params);
  }
};

/// z = [x, t, 1, g(x,t)] for x [b,2] and t as an [b,1] column, generic over
/// the activation type X and parameter type P.
template <class X, class P>
X encode_generic(const MlpSpec& spec, std::span<const P> params, const X& x, const X& t) {
  const std::size_t b = value_of(x).rows();
  std::vector<X> parts{x, t, constant_like(x, Tensor({b, 1}, 1.0))};
  if (!params.empty()) {
    std::vector<X> xt{x, t};
    parts.push_back(mlp_forward(spec, params, concat_cols(std::span<const X>(xt))));
  }
  return concat_cols(std::span<const X>(parts));
}

inline Tensor encode(const KoopmanModel& m, const Tensor& x, const Tensor& t) {
  require(x.cols() == 2 && t.size() == x.rows(), "encode: expects x [b,2] and t [b]");
  return encode_generic<Tensor, Tensor>(m.encoder_spec, std::span<const Tensor>(m.encoder_params), x,
                                        t.reshaped({t.size(), 1}));
}

/// d/ds encode(x + s v, t + s): the observable derivative along the
/// time-augmented direction (v, 1).
inline Tensor encode_jvp(const KoopmanModel& m, const Tensor& x, const Tensor& t, const Tensor& v) {
  require(same_shape(x, v), "encode_jvp: v must match x");
  const std::size_t b = x.rows();
  const Dual<Tensor> dx{x, v};
  const Dual<Tensor> dt{t.reshaped({b, 1}), Tensor({b, 1}, 1.0)};
  return encode_generic<Dual<Tensor>, Tensor>(m.encoder_spec, std::span<const Tensor>(m.encoder_params), dx, dt)
      .tangent;
}

// ---------------------------------------------------------------------------
// Losses. All use the convention mean over batch of squared 2-norm over
// coordinates.

namespace detail {

inline Var batch_mean_sq(Var residual) {
  return scale(sum(square(residual)), 1.0 / static_cast<double>(residual.value().rows()));
}

struct TapedModel {
  std::vector<Var> encoder;
  Var generator;
};

inline TapedModel put_on_tape(Tape& tape, const KoopmanModel& m) {
  TapedModel tm;
  for (const auto& p : m.encoder_params) tm.encoder.push_back(tape.variable(p));
  tm.generator = tape.variable(m.generator);
  return tm;
}

/// Returns (L z, d z / ds) on the tape for a generator/prediction batch.
inline std::pair<Var, Var> taped_generator_terms(Tape& tape, const KoopmanModel& m, const TapedModel& tm,
                                                 const Tensor& x, const Tensor& t, const Tensor& v) {
  const std::size_t b = x.rows();
  const Dual<Var> dx{tape.constant(x), tape.constant(v)};
  const Dual<Var> dt{tape.constant(t.reshaped({b, 1})), tape.constant(Tensor({b, 1}, 1.0))};
  const Dual<Var> z = encode_generic<Dual<Var>, Var>(m.encoder_spec, std::span<const Var>(tm.encoder), dx, dt);
  return {matmul(z.primal, transpose(tm.generator)), z.tangent};
}

inline Var taped_generator_loss(Tape& tape, const KoopmanModel& m, const TapedModel& tm, const Tensor& x,
                                const Tensor& t, const Tensor& v) {
  auto [lz, dz] = taped_generator_terms(tape, m, tm, x, t, v);
  return batch_mean_sq(sub(lz, dz));
}

inline Var taped_prediction_loss(Tape& tape, const KoopmanModel& m, const TapedModel& tm, const Tensor& x,
                                 const Tensor& t, const Tensor& v) {
  const std::size_t b = x.rows();
  const Var tcol = tape.constant(t.reshaped({b, 1}));
  const Var z = encode_generic<Var, Var>(m.encoder_spec, std::span<const Var>(tm.encoder), tape.constant(x), tcol);
  const Var lz = matmul(z, transpose(tm.generator));
  return batch_mean_sq(sub(slice_cols(lz, 0, 2), tape.constant(v)));
}

inline double shared_time(const Tensor& t) {
  require(t.size() >= 1, "target_consistency_loss: empty batch");
  for (std::size_t i = 1; i < t.size(); ++i)
    require(t[i] == t[0], "target_consistency_loss: all samples in a batch must share the same t_i");
  require(t[0] >= 0.0 && t[0] <= 1.0, "target_consistency_loss: t_i outside [0,1]");
  return t[0];
}

inline Var taped_consistency_loss(Tape& tape, const KoopmanModel& m, const TapedModel& tm, const Tensor& xt,
                                  double ti, const Tensor& x1) {
  const std::size_t b = xt.rows();
  const auto enc = std::span<const Var>(tm.encoder);
  const Var zt = encode_generic<Var, Var>(m.encoder_spec, enc, tape.constant(xt), tape.constant(Tensor({b, 1}, ti)));
  const Var z1 = encode_generic<Var, Var>(m.encoder_spec, enc, tape.constant(x1), tape.constant(Tensor({b, 1}, 1.0)));
  const Var prop = expm(scale(tm.generator, 1.0 - ti));
  return batch_mean_sq(sub(matmul(zt, transpose(prop)), z1));
}

}  // namespace detail

/// mean_b || L z(x,t) - J_z(x,t) (v, 1) ||^2
inline double generator_loss(const KoopmanModel& m, const Tensor& x, const Tensor& t, const Tensor& v) {
  require(same_shape(x, v) && t.size() == x.rows(), "generator_loss: expects x, v [b,2] and t [b]");
  const Tensor z = encode(m, x, t);
  const Tensor dz = encode_jvp(m, x, t, v);
  return sum(square(sub(matmul_nt(z, m.generator), dz))) / static_cast<double>(x.rows());
}

/// mean_b || (L z)[0:2] - v ||^2
inline double prediction_loss(const KoopmanModel& m, const Tensor& x, const Tensor& t, const Tensor& v) {
  require(same_shape(x, v) && t.size() == x.rows(), "prediction_loss: expects x, v [b,2] and t [b]");
  const Tensor lz = matmul_nt(encode(m, x, t), m.generator);
  return sum(square(sub(slice_cols(lz, 0, 2), v))) / static_cast<double>(x.rows());
}

/// mean_b || e^{L (1 - t_i)} z(x_t, t_i) - z(x_1, 1) ||^2; every sample must share t_i.
inline double target_consistency_loss(const KoopmanModel& m, const Tensor& xt, const Tensor& t, const Tensor& x1) {
  require(same_shape(xt, x1) && t.size() == xt.rows(), "target_consistency_loss: expects x_t, x_1 [b,2] and t [b]");
  const double ti = detail::shared_time(t);
  const std::size_t b = xt.rows();
  const Tensor zt = encode(m, xt, t);
  const Tensor z1 = encode(m, x1, Tensor({b}, 1.0));
  const Tensor prop = expm(scale(m.generator, 1.0 - ti));
  return sum(square(sub(matmul_nt(zt, prop), z1))) / static_cast<double>(b);
}

struct KoopmanGrads {
  ParamList encoder;
  Tensor generator;
  double loss = 0.0;
};

namespace detail {
inline KoopmanGrads collect(Tape& tape, const TapedModel& tm, Var loss) {
  tape.backward(loss);
  KoopmanGrads g;
  for (Var v : tm.encoder) g.encoder.push_back(tape.grad(v).reshaped(v.value().shape()));
  g.generator = tape.grad(tm.generator).reshaped(tm.generator.value().shape());
  g.loss = loss.value().item();
  return g;
}
}  // namespace detail

inline KoopmanGrads generator_loss_grad(const KoopmanModel& m, const Tensor& x, const Tensor& t, const Tensor& v) {
  Tape tape;
  const auto tm = detail::put_on_tape(tape, m);
  return detail::collect(tape, tm, detail::taped_generator_loss(tape, m, tm, x, t, v));
}

inline KoopmanGrads prediction_loss_grad(const KoopmanModel& m, const Tensor& x, const Tensor& t, const Tensor& v) {
  Tape tape;
  const auto tm = detail::put_on_tape(tape, m);
  return detail::collect(tape, tm, detail::taped_prediction_loss(tape, m, tm, x, t, v));
}

inline KoopmanGrads target_consistency_loss_grad(const KoopmanModel& m, const Tensor& xt, const Tensor& t,
                                                 const Tensor& x1) {
  const double ti = detail::shared_time(t);
  Tape tape;
  const auto tm = detail::put_on_tape(tape, m);
  return detail::collect(tape, tm, detail::taped_consistency_loss(tape, m, tm, xt, ti, x1));
}

// ---------------------------------------------------------------------------
// Curriculum

enum class ScheduleMode { ReverseLinear, ForwardLinear, Random };

inline std::string to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::ReverseLinear: return "reverse";
    case ScheduleMode::ForwardLinear: return "forward";
    case ScheduleMode::Random: return "random";
  }
  return "?";
}

inline ScheduleMode schedule_mode_from_string(const std::string& s) {
  if (s == "reverse") return ScheduleMode::ReverseLinear;
  if (s == "forward") return ScheduleMode::ForwardLinear;
  if (s == "random") return ScheduleMode::Random;
  throw ContractViolation("unknown schedule '" + s + "' (reverse, forward, random)");
}

/// Start time t_i of the consistency loss over training. The linear modes
/// move from one end to the other during the first `ramp` fraction of the
/// run and hold the final value afterwards. Emitted times are snapped to the
/// trajectory grid of `grid` steps.
struct CurriculumSchedule {
  double t_start = 1.0;
  double t_end = 0.0;
  std::size_t epochs = 1;
  ScheduleMode mode = ScheduleMode::ReverseLinear;
  double ramp = 0.5;
  std::size_t grid = kTrajectorySteps;

  /// Grid index of t_i at a given step.
  std::size_t index_at(std::size_t step, Rng& rng) const {
    require(epochs >= 1, "CurriculumSchedule: epochs must be >= 1");
    const double span_steps = std::max(1.0, ramp * static_cast<double>(epochs));
    const double frac = std::min(1.0, static_cast<double>(step) / span_steps);
    double t = 0.0;
    switch (mode) {
      case ScheduleMode::ReverseLinear: t = t_start + (t_end - t_start) * frac; break;
      case ScheduleMode::ForwardLinear: t = t_end + (t_start - t_end) * frac; break;
      case ScheduleMode::Random: return rng.index(grid + 1);
    }
    const double g = static_cast<double>(grid);
    return static_cast<std::size_t>(std::clamp(std::floor(t * g + 1e-9), 0.0, g));
  }

  double t_at(std::size_t step, Rng& rng) const {
    return static_cast<double>(index_at(step, rng)) / static_cast<double>(grid);
  }
};

// ---------------------------------------------------------------------------
// Training

enum class DataSource { Uniform, Trajectories };

inline std::string to_string(DataSource s) { return s == DataSource::Uniform ? "uniform" : "trajectories"; }
inline DataSource data_source_from_string(const std::string& s) {
  if (s == "uniform") return DataSource::Uniform;
  if (s == "trajectories" || s == "traj") return DataSource::Trajectories;
  throw ContractViolation("unknown data source '" + s + "' (uniform, trajectories)");
}

struct LossWeights {
  double generator = 1.0;
  double consistency = 1.0;
  double prediction = 0.0;
};

struct KoopmanTrainConfig {
  Distribution2D prior = Distribution2D::standard(DistKind::Gauss);
  std::size_t p_learned = 28;
  MlpSpec encoder{3, 64, 3, 28};
  LossWeights weights;
  CurriculumSchedule schedule;
  std::size_t steps = 10000;
  std::size_t batch = 256;
  std::size_t consistency_batch = 256;
  double lr_encoder = 1e-3;
  double lr_operator = 1e-4;
  double operator_init_std = 1e-3;
  DataSource source = DataSource::Uniform;
  std::size_t n_uniform = 200000;
  std::size_t n_trajectories = 4096;
  double val_fraction = 0.2;
  std::size_t val_max = 4096;
  std::size_t log_every = 1000;
  std::uint64_t seed = 1;
};

struct LossComponents {
  double generator = 0.0;
  double consistency = 0.0;
  double prediction = 0.0;
  double total = 0.0;
};

struct KoopmanTrainReport {
  double initial_val_generator = 0.0;
  double final_val_generator = 0.0;
  std::vector<std::size_t> consistency_indices;  // t_i grid index per step
  std::vector<LossComponents> history;           // one entry per log interval (window means)
};

using KoopmanLogger = std::function<void(std::size_t step, const LossComponents&)>;

/// Flattened (x, t, v) samples of the frozen field.
struct FieldSamples {
  Tensor x;  // [n,2]
  Tensor t;  // [n]
  Tensor v;  // [n,2]

  std::size_t size() const { return t.size(); }

  FieldSamples subset(std::span<const std::size_t> idx) const {
    FieldSamples s{gather_rows(x, idx), Tensor({idx.size()}), gather_rows(v, idx)};
    for (std::size_t i = 0; i < idx.size(); ++i) s.t[i] = t[idx[i]];
    return s;
  }
};

/// Points uniform on [-8,8]^2 with t on the trajectory grid, paired with v(x,t).
inline FieldSamples uniform_field_samples(const VelocityField& vf, std::size_t n, std::uint64_t seed,
                                          std::size_t grid = kTrajectorySteps) {
  Rng rng(seed);
  FieldSamples s{Tensor({n, 2}), Tensor({n}), Tensor()};
  for (std::size_t i = 0; i < n; ++i) {
    s.x(i, 0) = rng.uniform(-kDomainHalfWidth, kDomainHalfWidth);
    s.x(i, 1) = rng.uniform(-kDomainHalfWidth, kDomainHalfWidth);
    s.t[i] = static_cast<double>(rng.index(grid + 1)) / static_cast<double>(grid);
  }
  s.v = Tensor({n, 2});
  parallel_chunks(n, 4096, [&](std::size_t r0, std::size_t r1) {
    std::vector<std::size_t> idx(r1 - r0);
    std::iota(idx.begin(), idx.end(), r0);
    const Tensor xb = gather_rows(s.x, idx);
    Tensor tb({idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) tb[i] = s.t[r0 + i];
    const Tensor vb = vf(xb, tb);
    std::copy_n(vb.data(), vb.size(), s.v.data() + 2 * r0);
  });
  return s;
}

inline FieldSamples trajectory_field_samples(const TrajectorySet& traj) {
  const std::size_t n = traj.n_traj(), k = traj.n_points();
  FieldSamples s{Tensor({n * k, 2}), Tensor({n * k}), Tensor({n * k, 2})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t r = i * k + j;
      s.x(r, 0) = traj.states(i, j, 0);
      s.x(r, 1) = traj.states(i, j, 1);
      s.t[r] = traj.times[j];
      s.v(r, 0) = traj.velocities(i, j, 0);
      s.v(r, 1) = traj.velocities(i, j, 1);
    }
  return s;
}

inline double mean_generator_loss(const KoopmanModel& m, const FieldSamples& s, std::size_t chunk = 4096) {
  double acc = 0.0;
  for (std::size_t r0 = 0; r0 < s.size(); r0 += chunk) {
    const std::size_t r1 = std::min(s.size(), r0 + chunk);
    std::vector<std::size_t> idx(r1 - r0);
    std::iota(idx.begin(), idx.end(), r0);
    const FieldSamples b = s.subset(idx);
    acc += generator_loss(m, b.x, b.t, b.v) * static_cast<double>(idx.size());
  }
  return acc / static_cast<double>(s.size());
}

/// Joint Adam training of encoder and generator against a frozen field.
/// `trajectories` supplies (x_{t_i}, x_1) pairs for the consistency loss and,
/// for DataSource::Trajectories, the generator samples; it is generated from
/// cfg.prior when not given.
inline KoopmanModel train_koopman(const VelocityField& vf, const KoopmanTrainConfig& cfg,
                                  const TrajectorySet* trajectories = nullptr, KoopmanTrainReport* report = nullptr,
                                  const KoopmanLogger& log = {}) {
  require(cfg.steps >= 1 && cfg.batch >= 1, "train_koopman: steps and batch must be >= 1");
  require(cfg.val_fraction > 0 && cfg.val_fraction < 1, "train_koopman: val_fraction must be in (0,1)");
  const bool use_consistency = cfg.weights.consistency != 0.0;
  const bool need_traj = use_consistency || cfg.source == DataSource::Trajectories;

  std::optional<TrajectorySet> own_traj;
  if (need_traj && trajectories == nullptr) {
    own_traj = generate_trajectories(vf, cfg.prior, cfg.n_trajectories, Rng::derive(cfg.seed, 21).next());
    trajectories = &*own_traj;
  }

  FieldSamples all = cfg.source == DataSource::Uniform
                         ? uniform_field_samples(vf, cfg.n_uniform, Rng::derive(cfg.seed, 22).next())
                         : trajectory_field_samples(*trajectories);
  require(all.size() >= 2, "train_koopman: need at least two field samples");

  Rng rng = Rng::derive(cfg.seed, 23);
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::size_t n_val =
      std::clamp<std::size_t>(static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(all.size())), 1,
                              all.size() - 1);
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + std::min(n_val, cfg.val_max));
  const FieldSamples train = all.subset(std::span<const std::size_t>(order).subspan(n_val));
  const FieldSamples val = all.subset(val_idx);

  KoopmanModel model =
      KoopmanModel::initialized(cfg.encoder, cfg.p_learned, cfg.operator_init_std, Rng::derive(cfg.seed, 24).next());
  AdamState adam_enc = AdamState::for_params(model.encoder_params, cfg.lr_encoder);
  std::vector<Tensor> gen_param{model.generator};
  AdamState adam_op = AdamState::for_params(gen_param, cfg.lr_operator);

  if (report) report->initial_val_generator = mean_generator_loss(model, val);

  CurriculumSchedule schedule = cfg.schedule;
  schedule.epochs = cfg.steps;
  if (trajectories) schedule.grid = trajectories->n_points() - 1;

  std::vector<std::size_t> perm(train.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();
  const std::size_t batch = std::min(cfg.batch, train.size());

  LossComponents window;
  std::size_t window_n = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor + batch > perm.size()) {
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      cursor = 0;
    }
    const FieldSamples b = train.subset(std::span<const std::size_t>(perm).subspan(cursor, batch));
    cursor += batch;

    Tape tape;
    const auto tm = detail::put_on_tape(tape, model);
    LossComponents parts;
    Var total = tape.constant(Tensor::scalar(0.0));
    if (cfg.weights.generator != 0.0) {
      const Var g = detail::taped_generator_loss(tape, model, tm, b.x, b.t, b.v);
      parts.generator = g.value().item();
      total = add(total, scale(g, cfg.weights.generator));
    }
    if (cfg.weights.prediction != 0.0) {
      const Var p = detail::taped_prediction_loss(tape, model, tm, b.x, b.t, b.v);
      parts.prediction = p.value().item();
      total = add(total, scale(p, cfg.weights.prediction));
    }
    if (use_consistency) {
      const std::size_t k = schedule.index_at(step, rng);
      if (report) report->consistency_indices.push_back(k);
      const std::size_t nb = std::min(cfg.consistency_batch, trajectories->n_traj());
      Tensor xt({nb, 2}), x1({nb, 2});
      for (std::size_t i = 0; i < nb; ++i) {
        const std::size_t r = rng.index(trajectories->n_traj());
        xt(i, 0) = trajectories->states(r, k, 0);
        xt(i, 1) = trajectories->states(r, k, 1);
        x1(i, 0) = trajectories->terminals(r, 0);
        x1(i, 1) = trajectories->terminals(r, 1);
      }
      const Var c = detail::taped_consistency_loss(tape, model, tm, xt, trajectories->times[k], x1);
      parts.consistency = c.value().item();
      total = add(total, scale(c, cfg.weights.consistency));
    }
    parts.total = total.value().item();
    if (!std::isfinite(parts.total))
      throw NumericalError("train_koopman: non-finite loss at step " + std::to_string(step) +
                           " (generator=" + std::to_string(parts.generator) +
                           ", consistency=" + std::to_string(parts.consistency) +
                           ", prediction=" + std::to_string(parts.prediction) + ")");
    const KoopmanGrads g = detail::collect(tape, tm, total);
    if (!model.encoder_params.empty())
      adam_update(adam_enc, std::span<Tensor>(model.encoder_params), std::span<const Tensor>(g.encoder));
    gen_param[0] = std::move(model.generator);
    adam_update(adam_op, std::span<Tensor>(gen_param), std::span<const Tensor>(&g.generator, 1));
    model.generator = gen_param[0];

    window.generator += parts.generator;
    window.consistency += parts.consistency;
    window.prediction += parts.prediction;
    window.total += parts.total;
    ++window_n;
    if (window_n == cfg.log_every || step + 1 == cfg.steps) {
      const double inv = 1.0 / static_cast<double>(window_n);
      LossComponents mean{window.generator * inv, window.consistency * inv, window.prediction * inv,
                          window.total * inv};
      if (report) report->history.push_back(mean);
      if (log) log(step + 1, mean);
      window = {};
      window_n = 0;
    }
  }

  if (report) report->final_val_generator = mean_generator_loss(model, val);
  return model;
}

inline KoopmanModel train_koopman(const VectorFieldModel& vf, const KoopmanTrainConfig& cfg,
                                  const TrajectorySet* trajectories = nullptr, KoopmanTrainReport* report = nullptr,
                                  const KoopmanLogger& log = {}) {
  return train_koopman(vf.field(), cfg, trajectories, report, log);
}

}  // namespace kflow
