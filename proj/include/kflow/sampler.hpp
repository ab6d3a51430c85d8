#pragma once

/// One-step and intermediate-time sampling with a trained Koopman model:
/// encode the prior draw at t=0, apply e^{tL}, read back the state block.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "kflow/datasets.hpp"
#include "kflow/error.hpp"
#include "kflow/koopman.hpp"
#include "kflow/linalg.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

struct StageTimings {
  std::int64_t encode_ns = 0;
  std::int64_t expm_ns = 0;
  std::int64_t matmul_ns = 0;
  std::int64_t project_ns = 0;

  std::int64_t total_ns() const { return encode_ns + expm_ns + matmul_ns + project_ns; }
};

struct SampleRun {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::vector<double> t_query;
  Tensor prior;   // [n,2] draws at t = 0
  Tensor states;  // [n, |t_query|, 2]
  StageTimings timings;

  Tensor at(std::size_t q) const {
    Tensor out({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      out(i, 0) = states(i, q, 0);
      out(i, 1) = states(i, q, 1);
    }
    return out;
  }
};

/// State block (first two coordinates) of row-stacked observables.
inline Tensor project_state(const Tensor& z) { return slice_cols(z, 0, 2); }

inline void check_query_times(const std::vector<double>& t_query) {
  require(!t_query.empty(), "koopman_sample: t_query is empty");
  for (std::size_t i = 0; i < t_query.size(); ++i) {
    require(t_query[i] >= 0.0 && t_query[i] <= 1.0, "koopman_sample: t_query values must lie in [0,1]");
    require(i == 0 || t_query[i] >= t_query[i - 1], "koopman_sample: t_query must be sorted ascending");
  }
}

/// Evolves given prior points to each query time; one exponential per time,
/// shared across the batch.
inline SampleRun koopman_sample_from(const KoopmanModel& model, const Tensor& x0, std::vector<double> t_query) {
  using clock = std::chrono::steady_clock;
  auto ns = [](clock::duration d) { return std::chrono::duration_cast<std::chrono::nanoseconds>(d).count(); };
  check_query_times(t_query);
  model.validate();
  SampleRun run;
  run.n = x0.rows();
  run.t_query = std::move(t_query);
  run.prior = x0;
  run.states = Tensor({run.n, run.t_query.size(), 2});

  auto t0 = clock::now();
  const Tensor z0 = encode(model, x0, Tensor({run.n}, 0.0));
  run.timings.encode_ns = ns(clock::now() - t0);

  for (std::size_t q = 0; q < run.t_query.size(); ++q) {
    auto a = clock::now();
    const Tensor prop = expm(scale(model.generator, run.t_query[q]));
    auto b = clock::now();
    const Tensor zt = matmul_nt(z0, prop);
    auto c = clock::now();
    for (std::size_t i = 0; i < run.n; ++i) {
      run.states(i, q, 0) = zt(i, 0);
      run.states(i, q, 1) = zt(i, 1);
    }
    auto d = clock::now();
    run.timings.expm_ns += ns(b - a);
    run.timings.matmul_ns += ns(c - b);
    run.timings.project_ns += ns(d - c);
  }
  run.states.check_finite("koopman_sample states");
  return run;
}

inline SampleRun koopman_sample(const KoopmanModel& model, const Distribution2D& prior, std::size_t n,
                                std::vector<double> t_query, std::uint64_t seed) {
  SampleRun run = koopman_sample_from(model, sample(prior, n, seed), std::move(t_query));
  run.seed = seed;
  return run;
}

/// Koopman-implied velocity (L z(x,t))[0:2] on each grid point.
inline Tensor koopman_vector_field(const KoopmanModel& model, const Tensor& grid, double t) {
  require(grid.cols() == 2, "koopman_vector_field: grid must be [g,2]");
  const Tensor z = encode(model, grid, Tensor({grid.rows()}, t));
  return project_state(matmul_nt(z, model.generator));
}

/// Regular n x n grid over [lo, hi]^2, row-major in y then x.
inline Tensor square_grid(std::size_t n, double lo, double hi) {
  require(n >= 2, "square_grid: need n >= 2");
  Tensor g({n * n, 2});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      g(i * n + j, 0) = lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(n - 1);
      g(i * n + j, 1) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
  return g;
}

}  // namespace kflow
