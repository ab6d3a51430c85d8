#pragma once

/// 2D priors/targets and exact minibatch optimal-transport pairing.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "kflow/error.hpp"
#include "kflow/random.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

enum class DistKind { Gauss, EightGauss, TwoMoons, SwissRoll };

inline std::string to_string(DistKind k) {
  switch (k) {
    case DistKind::Gauss: return "gauss";
    case DistKind::EightGauss: return "8g";
    case DistKind::TwoMoons: return "moons";
    case DistKind::SwissRoll: return "swissroll";
  }
  return "?";
}

inline DistKind dist_kind_from_string(const std::string& s) {
  if (s == "gauss" || s == "g") return DistKind::Gauss;
  if (s == "8g" || s == "eightgauss" || s == "8gaussians") return DistKind::EightGauss;
  if (s == "moons" || s == "2m" || s == "twomoons") return DistKind::TwoMoons;
  if (s == "swissroll" || s == "sr") return DistKind::SwissRoll;
  throw ContractViolation("unknown distribution '" + s + "' (gauss, 8g, moons, swissroll)");
}

/// Parameters per kind:
///   EightGauss: modes on a circle of `radius`, component std `noise`.
///   TwoMoons:   unit half-circles with Gaussian `noise`, centred, times `scale`.
///   SwissRoll:  (x, z) projection of the 3D roll with `noise`, times `scale`.
struct Distribution2D {
  DistKind kind = DistKind::Gauss;
  double radius = 5.0;
  double noise = 0.0;
  double scale = 1.0;

  static Distribution2D standard(DistKind kind) {
    switch (kind) {
      case DistKind::Gauss: return {kind, 0.0, 1.0, 1.0};
      case DistKind::EightGauss: return {kind, 5.0, 0.4, 1.0};
      case DistKind::TwoMoons: return {kind, 0.0, 0.05, 3.0};
      case DistKind::SwissRoll: return {kind, 0.0, 0.5, 0.15};
    }
    return {};
  }

  bool operator==(const Distribution2D&) const = default;
};

/// Centre of the noiseless unit two-moons point cloud.
inline constexpr double kMoonsCenterX = 0.5;
inline constexpr double kMoonsCenterY = 0.25;

inline Tensor sample(const Distribution2D& dist, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "sample: n must be >= 1");
  Rng rng(seed);
  Tensor out({n, 2});
  constexpr double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, y = 0;
    switch (dist.kind) {
      case DistKind::Gauss:
        x = rng.normal(0.0, dist.noise);
        y = rng.normal(0.0, dist.noise);
        break;
      case DistKind::EightGauss: {
        const double angle = static_cast<double>(rng.index(8)) * pi / 4.0;
        x = dist.radius * std::cos(angle) + rng.normal(0.0, dist.noise);
        y = dist.radius * std::sin(angle) + rng.normal(0.0, dist.noise);
        break;
      }
      case DistKind::TwoMoons: {
        const bool upper = rng.index(2) == 0;
        const double theta = rng.uniform(0.0, pi);
        if (upper) {
          x = std::cos(theta);
          y = std::sin(theta);
        } else {
          x = 1.0 - std::cos(theta);
          y = 0.5 - std::sin(theta);
        }
        if (dist.noise > 0) {
          x += rng.normal(0.0, dist.noise);
          y += rng.normal(0.0, dist.noise);
        }
        x = dist.scale * (x - kMoonsCenterX);
        y = dist.scale * (y - kMoonsCenterY);
        break;
      }
      case DistKind::SwissRoll: {
        const double t = 1.5 * pi * (1.0 + 2.0 * rng.uniform());
        x = t * std::cos(t);
        y = t * std::sin(t);
        if (dist.noise > 0) {
          x += rng.normal(0.0, dist.noise);
          y += rng.normal(0.0, dist.noise);
        }
        x *= dist.scale;
        y *= dist.scale;
        break;
      }
    }
    out(i, 0) = x;
    out(i, 1) = y;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct CouplingPlan {
  /// Source row i is paired with target row permutation[i].
  std::vector<std::size_t> permutation;
  double cost = 0.0;
};

inline double squared_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return s;
}

inline double pairing_cost(const Tensor& x0, const Tensor& x1, const std::vector<std::size_t>& perm) {
  double c = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) c += squared_distance(x0, i, x1, perm[i]);
  return c;
}

inline constexpr std::size_t kMaxOtBatch = 4096;

/// Exact linear assignment minimising sum ||x0_i - x1_perm(i)||^2
/// (shortest augmenting paths with row/column potentials, O(b^3)).
inline CouplingPlan ot_pair(const Tensor& x0, const Tensor& x1) {
  require(x0.rows() == x1.rows(), "ot_pair: batch sizes differ (" + std::to_string(x0.rows()) + " vs " +
                                      std::to_string(x1.rows()) + ")");
  require(x0.cols() == x1.cols(), "ot_pair: point dimensions differ");
  const std::size_t n = x0.rows();
  require(n >= 1 && n <= kMaxOtBatch, "ot_pair: batch size must be in [1, 4096]");

  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = squared_distance(x0, i, x1, j);

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based indexing; column 0 is a virtual start column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      const double* row = cost.data() + (i0 - 1) * n;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  CouplingPlan plan;
  plan.permutation.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) plan.permutation[owner[j] - 1] = j - 1;
  plan.cost = pairing_cost(x0, x1, plan.permutation);
  return plan;
}

}  // namespace kflow
