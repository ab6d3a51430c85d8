#pragma once

/// Dense matrix exponential, real nonsymmetric eigendecomposition and the
/// small complex linear-algebra helpers used by spectral analysis.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <string>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/error.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

using Complex = std::complex<double>;

// ---------------------------------------------------------------------------
// Matrix exponential

/// Inputs with ||A||_1 above this are rejected: e^{||A||_1} bounds ||e^A|| and
/// would no longer be representable.
inline constexpr double kExpmNormGuard = 700.0;
inline constexpr int kExpmTaylorOrder = 12;

struct ExpmPlan {
  int squarings = 0;
  int order = kExpmTaylorOrder;
};

/// s = max(0, ceil(log2 ||A||_1) + 4), so the Taylor core sees ||A/2^s||_1 <= 1/16.
inline ExpmPlan expm_plan(const Tensor& a) {
  require(a.rows() == a.cols(), "expm: matrix must be square, got " + shape_str(a.shape()));
  a.check_finite("expm input");
  const double n1 = norm1(a);
  if (n1 > kExpmNormGuard)
    throw NumericalError("expm: ||A||_1 = " + std::to_string(n1) + " exceeds overflow guard " +
                         std::to_string(kExpmNormGuard));
  ExpmPlan plan;
  if (n1 > 0) plan.squarings = std::max(0, static_cast<int>(std::ceil(std::log2(n1))) + 4);
  return plan;
}

/// Scaling-and-squaring with a Horner-evaluated Taylor core. Works on Tensor
/// and on taped Var (the gradient then flows through every product).
template <class M>
M expm_with_plan(const M& a, const ExpmPlan& plan) {
  const std::size_t p = value_of(a).rows();
  const M eye = constant_like(a, Tensor::identity(p));
  const M b = scale(a, std::ldexp(1.0, -plan.squarings));
  M e = add(eye, scale(b, 1.0 / plan.order));
  for (int k = plan.order - 1; k >= 1; --k) e = add(eye, scale(matmul(b, e), 1.0 / k));
  for (int s = 0; s < plan.squarings; ++s) e = matmul(e, e);
  return e;
}

inline Tensor expm(const Tensor& a) {
  Tensor e = expm_with_plan(a, expm_plan(a));
  e.check_finite("expm result");
  return e;
}

inline Var expm(Var a) { return expm_with_plan(a, expm_plan(a.value())); }

/// Batched evolution z_t = e^{tL} z0 for row-stacked z0 [b, p].
inline Tensor evolve(const Tensor& generator, const Tensor& z0, double t) {
  require(generator.rows() == generator.cols(), "evolve: generator must be square");
  require(z0.cols() == generator.rows(), "evolve: state width " + std::to_string(z0.cols()) +
                                             " does not match generator size " + std::to_string(generator.rows()));
  return matmul_nt(z0, expm(scale(generator, t)));
}

/// Determinant by LU with partial pivoting.
inline double determinant(Tensor a) {
  require(a.rows() == a.cols(), "determinant: matrix must be square");
  const std::size_t n = a.rows();
  double det = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
    if (a(piv, k) == 0.0) return 0.0;
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
      det = -det;
    }
    det *= a(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a(i, k) / a(k, k);
      for (std::size_t j = k; j < n; ++j) a(i, j) -= f * a(k, j);
    }
  }
  return det;
}

// ---------------------------------------------------------------------------
// Complex dense matrices (row-major), just enough for eigenvector algebra.

struct CMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Complex> data;

  CMatrix() = default;
  CMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c) {}

  Complex& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const Complex& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static CMatrix from_real(const Tensor& a) {
    CMatrix m(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) m.data[i] = a[i];
    return m;
  }
};

inline CMatrix cmatmul(const CMatrix& a, const CMatrix& b) {
  require(a.cols == b.rows, "cmatmul: shape mismatch");
  CMatrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const Complex aik = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

/// Solves A X = B by Gaussian elimination with partial pivoting.
inline CMatrix csolve(CMatrix a, CMatrix b) {
  require(a.rows == a.cols && b.rows == a.rows, "csolve: shape mismatch");
  const std::size_t n = a.rows;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
    if (std::abs(a(piv, k)) == 0.0) throw NumericalError("csolve: singular matrix");
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
      for (std::size_t j = 0; j < b.cols; ++j) std::swap(b(k, j), b(piv, j));
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const Complex f = a(i, k) / a(k, k);
      if (f == Complex{}) continue;
      for (std::size_t j = k; j < n; ++j) a(i, j) -= f * a(k, j);
      for (std::size_t j = 0; j < b.cols; ++j) b(i, j) -= f * b(k, j);
    }
  }
  for (std::size_t k = n; k-- > 0;) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      Complex s = b(k, j);
      for (std::size_t i = k + 1; i < n; ++i) s -= a(k, i) * b(i, j);
      b(k, j) = s / a(k, k);
    }
  }
  return b;
}

inline CMatrix cinverse(const CMatrix& a) {
  CMatrix eye(a.rows, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) eye(i, i) = 1.0;
  return csolve(a, eye);
}

inline double cnorm1(const CMatrix& a) {
  double best = 0.0;
  for (std::size_t j = 0; j < a.cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Eigendecomposition

struct EigenPairs {
  std::vector<Complex> values;
  CMatrix vectors;  // column i pairs with values[i], unit 2-norm
  bool sorted = false;

  std::size_t size() const { return values.size(); }
  std::vector<Complex> vector(std::size_t i) const {
    std::vector<Complex> v(vectors.rows);
    for (std::size_t r = 0; r < vectors.rows; ++r) v[r] = vectors(r, i);
    return v;
  }
};

namespace detail {

inline void cdiv(double xr, double xi, double yr, double yi, double& cr, double& ci) {
  double r, d;
  if (std::abs(yr) > std::abs(yi)) {
    r = yi / yr;
    d = yr + r * yi;
    cr = (xr + r * xi) / d;
    ci = (xi - r * xr) / d;
  } else {
    r = yr / yi;
    d = yi + r * yr;
    cr = (r * xr + xi) / d;
    ci = (r * xi - xr) / d;
  }
}

/// Householder reduction to upper Hessenberg form; v accumulates the
/// orthogonal similarity.
inline void hessenberg(Tensor& h, Tensor& v) {
  const int n = static_cast<int>(h.rows());
  const int low = 0, high = n - 1;
  std::vector<double> ort(n, 0.0);
  for (int m = low + 1; m <= high - 1; ++m) {
    double scl = 0.0;
    for (int i = m; i <= high; ++i) scl += std::abs(h(i, m - 1));
    if (scl == 0.0) continue;
    double hh = 0.0;
    for (int i = high; i >= m; --i) {
      ort[i] = h(i, m - 1) / scl;
      hh += ort[i] * ort[i];
    }
    double g = std::sqrt(hh);
    if (ort[m] > 0) g = -g;
    hh -= ort[m] * g;
    ort[m] -= g;
    for (int j = m; j < n; ++j) {
      double f = 0.0;
      for (int i = high; i >= m; --i) f += ort[i] * h(i, j);
      f /= hh;
      for (int i = m; i <= high; ++i) h(i, j) -= f * ort[i];
    }
    for (int i = 0; i <= high; ++i) {
      double f = 0.0;
      for (int j = high; j >= m; --j) f += ort[j] * h(i, j);
      f /= hh;
      for (int j = m; j <= high; ++j) h(i, j) -= f * ort[j];
    }
    ort[m] *= scl;
    h(m, m - 1) = scl * g;
  }

  v = Tensor::identity(n);
  for (int m = high - 1; m >= low + 1; --m) {
    if (h(m, m - 1) == 0.0) continue;
    for (int i = m + 1; i <= high; ++i) ort[i] = h(i, m - 1);
    for (int j = m; j <= high; ++j) {
      double g = 0.0;
      for (int i = m; i <= high; ++i) g += ort[i] * v(i, j);
      g = (g / ort[m]) / h(m, m - 1);
      for (int i = m; i <= high; ++i) v(i, j) += g * ort[i];
    }
  }
}

/// Francis double-shift QR on the Hessenberg matrix h down to real Schur
/// form, then back-substitution for the eigenvectors. On return (d, e) hold
/// real/imaginary parts of the eigenvalues and v the eigenvectors, with a
/// complex pair (e[j] > 0) stored as columns j (real) and j+1 (imaginary).
inline void schur_eigen(Tensor& h, Tensor& v, std::vector<double>& d, std::vector<double>& e, int max_sweeps) {
  const int nn = static_cast<int>(h.rows());
  d.assign(nn, 0.0);
  e.assign(nn, 0.0);
  int n = nn - 1;
  const int low = 0, high = nn - 1;
  const double eps = std::ldexp(1.0, -52);
  double exshift = 0.0;
  double p = 0, q = 0, r = 0, s = 0, z = 0, t, w, x, y;

  double norm = 0.0;
  for (int i = 0; i < nn; ++i)
    for (int j = std::max(i - 1, 0); j < nn; ++j) norm += std::abs(h(i, j));

  int iter = 0;
  int sweeps = 0;
  while (n >= low) {
    int l = n;
    while (l > low) {
      s = std::abs(h(l - 1, l - 1)) + std::abs(h(l, l));
      if (s == 0.0) s = norm;
      if (std::abs(h(l, l - 1)) < eps * s) break;
      --l;
    }

    if (l == n) {
      h(n, n) += exshift;
      d[n] = h(n, n);
      e[n] = 0.0;
      --n;
      iter = 0;
    } else if (l == n - 1) {
      w = h(n, n - 1) * h(n - 1, n);
      p = (h(n - 1, n - 1) - h(n, n)) / 2.0;
      q = p * p + w;
      z = std::sqrt(std::abs(q));
      h(n, n) += exshift;
      h(n - 1, n - 1) += exshift;
      x = h(n, n);
      if (q >= 0) {
        z = p >= 0 ? p + z : p - z;
        d[n - 1] = x + z;
        d[n] = d[n - 1];
        if (z != 0.0) d[n] = x - w / z;
        e[n - 1] = 0.0;
        e[n] = 0.0;
        x = h(n, n - 1);
        s = std::abs(x) + std::abs(z);
        p = x / s;
        q = z / s;
        r = std::sqrt(p * p + q * q);
        p /= r;
        q /= r;
        for (int j = n - 1; j < nn; ++j) {
          z = h(n - 1, j);
          h(n - 1, j) = q * z + p * h(n, j);
          h(n, j) = q * h(n, j) - p * z;
        }
        for (int i = 0; i <= n; ++i) {
          z = h(i, n - 1);
          h(i, n - 1) = q * z + p * h(i, n);
          h(i, n) = q * h(i, n) - p * z;
        }
        for (int i = low; i <= high; ++i) {
          z = v(i, n - 1);
          v(i, n - 1) = q * z + p * v(i, n);
          v(i, n) = q * v(i, n) - p * z;
        }
      } else {
        d[n - 1] = x + p;
        d[n] = x + p;
        e[n - 1] = z;
        e[n] = -z;
      }
      n -= 2;
      iter = 0;
    } else {
      if (++sweeps > max_sweeps)
        throw NumericalError("eig: QR iteration did not converge within " + std::to_string(max_sweeps) + " sweeps");
      x = h(n, n);
      y = 0.0;
      w = 0.0;
      if (l < n) {
        y = h(n - 1, n - 1);
        w = h(n, n - 1) * h(n - 1, n);
      }
      // Exceptional shifts break cycles.
      if (iter == 10) {
        exshift += x;
        for (int i = low; i <= n; ++i) h(i, i) -= x;
        s = std::abs(h(n, n - 1)) + std::abs(h(n - 1, n - 2));
        x = y = 0.75 * s;
        w = -0.4375 * s * s;
      }
      if (iter == 30) {
        s = (y - x) / 2.0;
        s = s * s + w;
        if (s > 0) {
          s = std::sqrt(s);
          if (y < x) s = -s;
          s = x - w / ((y - x) / 2.0 + s);
          for (int i = low; i <= n; ++i) h(i, i) -= s;
          exshift += s;
          x = y = w = 0.964;
        }
      }
      ++iter;

      int m = n - 2;
      while (m >= l) {
        z = h(m, m);
        r = x - z;
        s = y - z;
        p = (r * s - w) / h(m + 1, m) + h(m, m + 1);
        q = h(m + 1, m + 1) - z - r - s;
        r = h(m + 2, m + 1);
        s = std::abs(p) + std::abs(q) + std::abs(r);
        p /= s;
        q /= s;
        r /= s;
        if (m == l) break;
        if (std::abs(h(m, m - 1)) * (std::abs(q) + std::abs(r)) <
            eps * (std::abs(p) * (std::abs(h(m - 1, m - 1)) + std::abs(z) + std::abs(h(m + 1, m + 1)))))
          break;
        --m;
      }
      for (int i = m + 2; i <= n; ++i) {
        h(i, i - 2) = 0.0;
        if (i > m + 2) h(i, i - 3) = 0.0;
      }

      for (int k = m; k <= n - 1; ++k) {
        const bool notlast = k != n - 1;
        if (k != m) {
          p = h(k, k - 1);
          q = h(k + 1, k - 1);
          r = notlast ? h(k + 2, k - 1) : 0.0;
          x = std::abs(p) + std::abs(q) + std::abs(r);
          if (x == 0.0) continue;
          p /= x;
          q /= x;
          r /= x;
        }
        s = std::sqrt(p * p + q * q + r * r);
        if (p < 0) s = -s;
        if (s == 0.0) continue;
        if (k != m)
          h(k, k - 1) = -s * x;
        else if (l != m)
          h(k, k - 1) = -h(k, k - 1);
        p += s;
        x = p / s;
        y = q / s;
        z = r / s;
        q /= p;
        r /= p;
        for (int j = k; j < nn; ++j) {
          p = h(k, j) + q * h(k + 1, j);
          if (notlast) {
            p += r * h(k + 2, j);
            h(k + 2, j) -= p * z;
          }
          h(k, j) -= p * x;
          h(k + 1, j) -= p * y;
        }
        for (int i = 0; i <= std::min(n, k + 3); ++i) {
          p = x * h(i, k) + y * h(i, k + 1);
          if (notlast) {
            p += z * h(i, k + 2);
            h(i, k + 2) -= p * r;
          }
          h(i, k) -= p;
          h(i, k + 1) -= p * q;
        }
        for (int i = low; i <= high; ++i) {
          p = x * v(i, k) + y * v(i, k + 1);
          if (notlast) {
            p += z * v(i, k + 2);
            v(i, k + 2) -= p * r;
          }
          v(i, k) -= p;
          v(i, k + 1) -= p * q;
        }
      }
    }
  }

  if (norm == 0.0) return;

  // Back-substitution on the quasi-triangular Schur form.
  for (n = nn - 1; n >= 0; --n) {
    p = d[n];
    q = e[n];
    if (q == 0) {
      int l = n;
      h(n, n) = 1.0;
      for (int i = n - 1; i >= 0; --i) {
        w = h(i, i) - p;
        r = 0.0;
        for (int j = l; j <= n; ++j) r += h(i, j) * h(j, n);
        if (e[i] < 0.0) {
          z = w;
          s = r;
        } else {
          l = i;
          if (e[i] == 0.0) {
            h(i, n) = w != 0.0 ? -r / w : -r / (eps * norm);
          } else {
            x = h(i, i + 1);
            y = h(i + 1, i);
            q = (d[i] - p) * (d[i] - p) + e[i] * e[i];
            t = (x * s - z * r) / q;
            h(i, n) = t;
            h(i + 1, n) = std::abs(x) > std::abs(z) ? (-r - w * t) / x : (-s - y * t) / z;
          }
          t = std::abs(h(i, n));
          if ((eps * t) * t > 1)
            for (int j = i; j <= n; ++j) h(j, n) /= t;
        }
      }
    } else if (q < 0) {
      int l = n - 1;
      double cr, ci;
      if (std::abs(h(n, n - 1)) > std::abs(h(n - 1, n))) {
        h(n - 1, n - 1) = q / h(n, n - 1);
        h(n - 1, n) = -(h(n, n) - p) / h(n, n - 1);
      } else {
        cdiv(0.0, -h(n - 1, n), h(n - 1, n - 1) - p, q, cr, ci);
        h(n - 1, n - 1) = cr;
        h(n - 1, n) = ci;
      }
      h(n, n - 1) = 0.0;
      h(n, n) = 1.0;
      for (int i = n - 2; i >= 0; --i) {
        double ra = 0.0, sa = 0.0;
        for (int j = l; j <= n; ++j) {
          ra += h(i, j) * h(j, n - 1);
          sa += h(i, j) * h(j, n);
        }
        w = h(i, i) - p;
        if (e[i] < 0.0) {
          z = w;
          r = ra;
          s = sa;
        } else {
          l = i;
          if (e[i] == 0) {
            cdiv(-ra, -sa, w, q, cr, ci);
            h(i, n - 1) = cr;
            h(i, n) = ci;
          } else {
            x = h(i, i + 1);
            y = h(i + 1, i);
            double vr = (d[i] - p) * (d[i] - p) + e[i] * e[i] - q * q;
            const double vi = (d[i] - p) * 2.0 * q;
            if (vr == 0.0 && vi == 0.0)
              vr = eps * norm * (std::abs(w) + std::abs(q) + std::abs(x) + std::abs(y) + std::abs(z));
            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi, cr, ci);
            h(i, n - 1) = cr;
            h(i, n) = ci;
            if (std::abs(x) > std::abs(z) + std::abs(q)) {
              h(i + 1, n - 1) = (-ra - w * h(i, n - 1) + q * h(i, n)) / x;
              h(i + 1, n) = (-sa - w * h(i, n) - q * h(i, n - 1)) / x;
            } else {
              cdiv(-r - y * h(i, n - 1), -s - y * h(i, n), z, q, cr, ci);
              h(i + 1, n - 1) = cr;
              h(i + 1, n) = ci;
            }
          }
          t = std::max(std::abs(h(i, n - 1)), std::abs(h(i, n)));
          if ((eps * t) * t > 1)
            for (int j = i; j <= n; ++j) {
              h(j, n - 1) /= t;
              h(j, n) /= t;
            }
        }
      }
    }
  }

  for (int j = nn - 1; j >= low; --j)
    for (int i = low; i <= high; ++i) {
      z = 0.0;
      for (int k = low; k <= std::min(j, high); ++k) z += v(i, k) * h(k, j);
      v(i, j) = z;
    }
}

}  // namespace detail

/// Descending by real part, ties by descending imaginary part, then index.
inline std::vector<std::size_t> spectral_order(const std::vector<Complex>& values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (values[a].real() != values[b].real()) return values[a].real() > values[b].real();
    if (values[a].imag() != values[b].imag()) return values[a].imag() > values[b].imag();
    return a < b;
  });
  return idx;
}

inline EigenPairs sort_by_real_part(const EigenPairs& in) {
  const auto order = spectral_order(in.values);
  EigenPairs out;
  out.values.resize(in.size());
  out.vectors = CMatrix(in.vectors.rows, in.vectors.cols);
  for (std::size_t k = 0; k < order.size(); ++k) {
    out.values[k] = in.values[order[k]];
    for (std::size_t r = 0; r < in.vectors.rows; ++r) out.vectors(r, k) = in.vectors(r, order[k]);
  }
  out.sorted = true;
  return out;
}

/// All eigenpairs of a real square matrix, eigenvectors normalised to unit
/// 2-norm. Complex pairs come out as exact conjugates.
inline EigenPairs eig(const Tensor& a, bool sort = true) {
  require(a.rows() == a.cols(), "eig: matrix must be square, got " + shape_str(a.shape()));
  a.check_finite("eig input");
  const std::size_t p = a.rows();
  EigenPairs out;
  out.values.resize(p);
  out.vectors = CMatrix(p, p);
  if (p == 0) return out;

  Tensor h({p, p}, a.storage());
  Tensor v;
  detail::hessenberg(h, v);
  std::vector<double> d, e;
  detail::schur_eigen(h, v, d, e, static_cast<int>(100 * p));

  for (std::size_t j = 0; j < p; ++j) {
    out.values[j] = Complex(d[j], e[j]);
    if (e[j] == 0.0) {
      for (std::size_t r = 0; r < p; ++r) out.vectors(r, j) = v(r, j);
    } else if (e[j] > 0.0) {
      for (std::size_t r = 0; r < p; ++r) {
        out.vectors(r, j) = Complex(v(r, j), v(r, j + 1));
        out.vectors(r, j + 1) = Complex(v(r, j), -v(r, j + 1));
      }
    }
  }
  for (std::size_t j = 0; j < p; ++j) {
    double nrm = 0.0;
    for (std::size_t r = 0; r < p; ++r) nrm += std::norm(out.vectors(r, j));
    nrm = std::sqrt(nrm);
    if (nrm > 0)
      for (std::size_t r = 0; r < p; ++r) out.vectors(r, j) /= nrm;
  }
  return sort ? sort_by_real_part(out) : out;
}

/// max_i ||A v_i - lambda_i v_i||_2
inline double eig_residual(const Tensor& a, const EigenPairs& ep) {
  const std::size_t p = a.rows();
  double worst = 0.0;
  for (std::size_t i = 0; i < ep.size(); ++i) {
    double r2 = 0.0;
    for (std::size_t row = 0; row < p; ++row) {
      Complex acc = 0.0;
      for (std::size_t k = 0; k < p; ++k) acc += a(row, k) * ep.vectors(k, i);
      acc -= ep.values[i] * ep.vectors(row, i);
      r2 += std::norm(acc);
    }
    worst = std::max(worst, std::sqrt(r2));
  }
  return worst;
}

}  // namespace kflow
