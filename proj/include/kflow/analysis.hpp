#pragma once

/// Evaluation: kernel MMD, Koopman-vs-ODE endpoint error, spectral
/// decomposition of the generator and sampling throughput.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kflow/cfm.hpp"
#include "kflow/datasets.hpp"
#include "kflow/error.hpp"
#include "kflow/koopman.hpp"
#include "kflow/linalg.hpp"
#include "kflow/parallel.hpp"
#include "kflow/sampler.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

// ---------------------------------------------------------------------------
// MMD

struct MmdResult {
  double value = 0.0;  // biased (V-statistic) MMD^2
  double kernel_bandwidth = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  std::string estimator = "biased";
  bool degenerate = false;
};

/// Median Euclidean distance over all unordered pairs of the pooled sample.
inline double median_pairwise_distance(const Tensor& a, const Tensor& b) {
  const Tensor pooled = concat_cols(std::vector<Tensor>{transpose(a), transpose(b)});  // [d, n+m]
  const std::size_t n = pooled.cols(), d = pooled.rows();
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = pooled(c, i) - pooled(c, j);
        s += diff * diff;
      }
      dist.push_back(std::sqrt(s));
    }
  if (dist.empty()) return 0.0;
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  if (dist.size() % 2 == 1) return dist[mid];
  const double upper = dist[mid];
  const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

namespace detail {

/// sum_{i,j} exp(-||a_i - b_j||^2 / (2 h^2)), accumulated per row then in row order.
inline double kernel_sum(const Tensor& a, const Tensor& b, double h) {
  const double inv = 1.0 / (2.0 * h * h);
  std::vector<double> rows(a.rows(), 0.0);
  parallel_chunks(a.rows(), 256, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < b.rows(); ++j) s += std::exp(-squared_distance(a, i, b, j) * inv);
      rows[i] = s;
    }
  });
  double total = 0.0;
  for (double r : rows) total += r;
  return total;
}

}  // namespace detail

/// Biased MMD^2 with RBF kernel exp(-||x-y||^2 / (2 h^2)). Without an explicit
/// bandwidth, h is the median pairwise distance of the pooled sample.
inline MmdResult mmd(const Tensor& a, const Tensor& b, std::optional<double> bandwidth = std::nullopt) {
  require(a.rows() >= 2 && b.rows() >= 2, "mmd: need at least two points per sample");
  require(a.cols() == b.cols(), "mmd: point dimensions differ");
  MmdResult r;
  r.n_a = a.rows();
  r.n_b = b.rows();
  if (bandwidth) {
    require(*bandwidth > 0, "mmd: bandwidth must be positive");
    r.kernel_bandwidth = *bandwidth;
  } else {
    r.kernel_bandwidth = median_pairwise_distance(a, b);
    if (r.kernel_bandwidth == 0.0) {
      r.degenerate = true;
      return r;
    }
  }
  const double h = r.kernel_bandwidth;
  const double na = static_cast<double>(r.n_a), nb = static_cast<double>(r.n_b);
  const double kaa = detail::kernel_sum(a, a, h) / (na * na);
  const double kbb = detail::kernel_sum(b, b, h) / (nb * nb);
  const double kab = detail::kernel_sum(a, b, h) / (na * nb);
  r.value = std::max(0.0, kaa + kbb - 2.0 * kab);
  return r;
}

// ---------------------------------------------------------------------------
// Trajectory fidelity

inline constexpr std::size_t kReferenceSteps = 100;

/// Mean ||x1_koopman - x1_rk4||_2 over n shared prior draws.
inline double endpoint_error(const KoopmanModel& koop, const VelocityField& vf, const Distribution2D& prior,
                             std::size_t n, std::uint64_t seed) {
  require(n >= 1, "endpoint_error: n must be >= 1");
  const Tensor x0 = sample(prior, n, seed);
  const Tensor kx = koopman_sample_from(koop, x0, {1.0}).at(0);
  const Tensor cx = endpoints(integrate(vf, x0, kReferenceSteps, Integrator::RK4));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::sqrt(squared_distance(kx, i, cx, i));
  return acc / static_cast<double>(n);
}

inline double endpoint_error(const KoopmanModel& koop, const VectorFieldModel& vf, const Distribution2D& prior,
                             std::size_t n, std::uint64_t seed) {
  return endpoint_error(koop, vf.field(), prior, n, seed);
}

// ---------------------------------------------------------------------------
// Spectral analysis

inline constexpr double kMaxEigenvectorCondition = 1e12;

struct SpectralDecomposition {
  EigenPairs pairs;             // sorted by descending real part
  std::vector<Complex> alphas;  // z0 = sum_i alphas[i] * v_i
  double condition = 0.0;       // ||V||_1 ||V^-1||_1
};

inline std::vector<Complex> as_complex_vector(const Tensor& z) {
  return std::vector<Complex>(z.storage().begin(), z.storage().end());
}

/// Eigendecomposition of L and coordinates of z0 in its eigenbasis.
inline SpectralDecomposition spectral_decompose(const Tensor& generator, const Tensor& z0) {
  require(z0.size() == generator.rows(), "spectral_decompose: z0 has " + std::to_string(z0.size()) +
                                             " entries for a " + std::to_string(generator.rows()) + "-dim generator");
  SpectralDecomposition d;
  d.pairs = eig(generator, true);
  const CMatrix& v = d.pairs.vectors;
  const std::size_t p = v.rows;
  CMatrix inv;
  try {
    inv = cinverse(v);
  } catch (const NumericalError&) {
    throw NumericalError("spectral_decompose: eigenvector matrix is singular (generator not diagonalizable)");
  }
  d.condition = cnorm1(v) * cnorm1(inv);
  if (!(d.condition <= kMaxEigenvectorCondition))
    throw NumericalError("spectral_decompose: eigenvector condition estimate " + std::to_string(d.condition) +
                         " exceeds 1e12");
  CMatrix rhs(p, 1);
  for (std::size_t i = 0; i < p; ++i) rhs(i, 0) = z0[i];
  const CMatrix alpha = cmatmul(inv, rhs);
  d.alphas.resize(p);
  for (std::size_t i = 0; i < p; ++i) d.alphas[i] = alpha(i, 0);
  return d;
}

/// sum over the first k modes of alpha_i e^{lambda_i t} v_i (complex).
inline std::vector<Complex> modal_sum(const SpectralDecomposition& d, std::size_t k, double t) {
  const std::size_t p = d.pairs.vectors.rows;
  std::vector<Complex> out(p);
  for (std::size_t i = 0; i < k; ++i) {
    const Complex c = d.alphas[i] * std::exp(d.pairs.values[i] * t);
    for (std::size_t r = 0; r < p; ++r) out[r] += c * d.pairs.vectors(r, i);
  }
  return out;
}

struct ModalReconstruction {
  Tensor values;  // real part, [p]
  double max_imag = 0.0;
  std::size_t modes_used = 0;
  bool extended = false;  // k was increased to keep a conjugate pair together
};

inline ModalReconstruction to_reconstruction(const std::vector<Complex>& c, std::size_t k, bool extended) {
  ModalReconstruction r{Tensor({c.size()}), 0.0, k, extended};
  for (std::size_t i = 0; i < c.size(); ++i) {
    r.values[i] = c[i].real();
    r.max_imag = std::max(r.max_imag, std::abs(c[i].imag()));
  }
  return r;
}

/// Full modal evolution, equal to e^{tL} z0 for diagonalizable L.
inline ModalReconstruction spectral_reconstruct(const SpectralDecomposition& d, double t) {
  const std::size_t p = d.alphas.size();
  return to_reconstruction(modal_sum(d, p, t), p, false);
}

/// Partial modal sum over the top-k modes by real part.
inline ModalReconstruction progressive_reconstruction(const SpectralDecomposition& d, std::size_t k, double t) {
  const std::size_t p = d.alphas.size();
  require(k >= 1 && k <= p, "progressive_reconstruction: k must be in [1, " + std::to_string(p) + "]");
  bool extended = false;
  // Sorted order keeps (a+bi, a-bi) adjacent with the positive imaginary part first.
  const Complex last = d.pairs.values[k - 1];
  if (k < p && last.imag() > 0 && d.pairs.values[k] == std::conj(last)) {
    ++k;
    extended = true;
  }
  return to_reconstruction(modal_sum(d, k, t), k, extended);
}

// ---------------------------------------------------------------------------
// Throughput benchmark

struct BenchRow {
  std::string method;
  std::size_t steps = 0;
  std::int64_t wall_ns = 0;
  double samples_per_sec = 0.0;
  double mmd = 0.0;
  std::vector<std::int64_t> repetitions_ns;
};

struct BenchConfig {
  Distribution2D prior = Distribution2D::standard(DistKind::Gauss);
  Distribution2D target = Distribution2D::standard(DistKind::EightGauss);
  std::size_t n = 2048;
  std::vector<std::size_t> step_grid{1, 5, 10, 20, 50, 100};
  std::size_t repetitions = 3;
  bool include_rk4 = true;
  std::uint64_t seed = 7;
};

namespace detail {
template <class F>
std::vector<std::int64_t> time_repetitions(std::size_t reps, F&& f) {
  f();  // warm-up
  std::vector<std::int64_t> out;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto a = std::chrono::steady_clock::now();
    f();
    const auto b = std::chrono::steady_clock::now();
    out.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(b - a).count());
  }
  return out;
}

inline std::int64_t median_ns(std::vector<std::int64_t> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}
}  // namespace detail

/// Koopman one-step sampling vs Euler/RK4 at each step count on the same
/// prior draws. Koopman timing covers encode + expm + matmul + projection;
/// ODE timing covers every field evaluation.
inline std::vector<BenchRow> bench_sampling(const KoopmanModel& koop, const VelocityField& vf, const BenchConfig& cfg) {
  require(cfg.repetitions >= 3, "bench_sampling: at least 3 repetitions");
  const Tensor x0 = sample(cfg.prior, cfg.n, cfg.seed);
  const Tensor target = sample(cfg.target, cfg.n, cfg.seed + 1);
  std::vector<BenchRow> rows;
  auto finish = [&](BenchRow row, const Tensor& out) {
    row.wall_ns = detail::median_ns(row.repetitions_ns);
    row.samples_per_sec = static_cast<double>(cfg.n) / (static_cast<double>(std::max<std::int64_t>(row.wall_ns, 1)) * 1e-9);
    row.mmd = mmd(out, target).value;
    rows.push_back(std::move(row));
  };

  {
    Tensor out;
    BenchRow row;
    row.method = "koopman";
    row.steps = 1;
    row.repetitions_ns = detail::time_repetitions(cfg.repetitions, [&] { out = koopman_sample_from(koop, x0, {1.0}).at(0); });
    finish(std::move(row), out);
  }
  std::vector<Integrator> methods{Integrator::Euler};
  if (cfg.include_rk4) methods.push_back(Integrator::RK4);
  for (Integrator m : methods)
    for (std::size_t steps : cfg.step_grid) {
      Tensor out;
      BenchRow row;
      row.method = to_string(m);
      row.steps = steps;
      row.repetitions_ns =
          detail::time_repetitions(cfg.repetitions, [&] { out = endpoints(integrate(vf, x0, steps, m)); });
      finish(std::move(row), out);
    }
  return rows;
}

}  // namespace kflow
