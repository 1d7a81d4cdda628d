/*=========================================================================
 *
 *  Copyright ssmkit Contributors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/
#pragma once

// Test-only reference implementations, deliberately independent of the
// library's computation paths: a Jacobi eigensolver, Gaussian elimination,
// direct-summation 3D convolution, adaptive Simpson quadrature, and an
// inverse-CDF normal sampler.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace oracle {

// --- Jacobi rotation eigendecomposition for symmetric matrices ----------------

struct EigenDecomposition {
  Eigen::VectorXd eigenvalues;   // descending
  Eigen::MatrixXd eigenvectors;  // columns
};

inline EigenDecomposition jacobi_eigen(Eigen::MatrixXd a) {
  const int n = static_cast<int>(a.rows());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (off < 1e-26) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(n, n);
        rot(p, p) = c;
        rot(q, q) = c;
        rot(p, q) = s;
        rot(q, p) = -s;
        a = rot.transpose() * a * rot;
        v = v * rot;
      }
    }
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) > a(y, y); });
  EigenDecomposition out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (int i = 0; i < n; ++i) {
    out.eigenvalues[i] = a(order[i], order[i]);
    out.eigenvectors.col(i) = v.col(order[i]);
  }
  return out;
}

// --- dense linear solve by Gaussian elimination with partial pivoting ---------

inline Eigen::MatrixXd gauss_solve(Eigen::MatrixXd a, Eigen::MatrixXd b) {
  const int n = static_cast<int>(a.rows());
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (std::abs(a(pivot, col)) < 1e-300) throw std::runtime_error("gauss_solve: singular");
    if (pivot != col) {
      a.row(pivot).swap(a.row(col));
      b.row(pivot).swap(b.row(col));
    }
    for (int r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      a.row(r).segment(col, n - col) -= f * a.row(col).segment(col, n - col);
      b.row(r) -= f * b.row(col);
    }
  }
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, b.cols());
  for (int r = n - 1; r >= 0; --r) {
    Eigen::RowVectorXd acc = b.row(r);
    for (int c = r + 1; c < n; ++c) acc -= a(r, c) * x.row(c);
    x.row(r) = acc / a(r, r);
  }
  return x;
}

// --- direct-summation 3D convolution (kernel 3^3, stride 1, zero pad 1) -------

inline std::vector<double> naive_conv3d(const double* weights, const double* bias,
                                        const double* in, int in_ch, int out_ch,
                                        int D, int H, int W) {
  std::vector<double> out(static_cast<std::size_t>(out_ch) * D * H * W, 0.0);
  for (int o = 0; o < out_ch; ++o) {
    for (int z = 0; z < D; ++z) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          double acc = bias[o];
          for (int i = 0; i < in_ch; ++i) {
            for (int dz = -1; dz <= 1; ++dz) {
              for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                  const int sz = z + dz, sy = y + dy, sx = x + dx;
                  if (sz < 0 || sz >= D || sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                  const double wv =
                      weights[((static_cast<std::size_t>(o) * in_ch + i) * 27) +
                              static_cast<std::size_t>(((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1))];
                  acc += wv * in[((static_cast<std::size_t>(i) * D + sz) * H + sy) * W + sx];
                }
              }
            }
          }
          out[((static_cast<std::size_t>(o) * D + z) * H + y) * W + x] = acc;
        }
      }
    }
  }
  return out;
}

// --- adaptive Simpson quadrature ----------------------------------------------

namespace detail {

inline double simpson(const std::function<double(double)>& f, double a, double fa, double b,
                      double fb, double m, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adaptive_step(const std::function<double(double)>& f, double a, double fa, double b,
                            double fb, double m, double fm, double whole, double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(f, a, fa, m, fm, lm, flm);
  const double right = simpson(f, m, fm, b, fb, rm, frm);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * tol) {
    return left + right + (left + right - whole) / 15.0;
  }
  return adaptive_step(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
         adaptive_step(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}

}  // namespace detail

inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol = 1e-12, int max_depth = 60) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fb = f(b), fm = f(m);
  const double whole = detail::simpson(f, a, fa, b, fb, m, fm);
  return detail::adaptive_step(f, a, fa, b, fb, m, fm, whole, tol, max_depth);
}

// --- distribution densities and integral CDFs -----------------------------------

inline double t_density(double x, double nu) {
  const double lognorm = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                         0.5 * std::log(nu * std::acos(-1.0));
  return std::exp(lognorm - 0.5 * (nu + 1.0) * std::log1p(x * x / nu));
}

// Integrates the density from 0 to |x| and uses symmetry.
inline double t_cdf_by_integration(double x, double nu, double tol = 1e-12) {
  if (x == 0.0) return 0.5;
  const double half =
      adaptive_simpson([nu](double u) { return t_density(u, nu); }, 0.0, std::abs(x), tol);
  return x > 0.0 ? 0.5 + half : 0.5 - half;
}

inline double f_density(double x, double d1, double d2) {
  if (x <= 0.0) return 0.0;
  const double lognorm = std::lgamma(0.5 * (d1 + d2)) - std::lgamma(0.5 * d1) -
                         std::lgamma(0.5 * d2) + 0.5 * d1 * std::log(d1 / d2);
  return std::exp(lognorm + (0.5 * d1 - 1.0) * std::log(x) -
                  0.5 * (d1 + d2) * std::log1p(d1 * x / d2));
}

// Substitutes x = u^2 so the d1 = 1 integrable singularity at zero
// disappears; g(u) = f(u^2) * 2u is smooth.
inline double f_cdf_by_integration(double x, double d1, double d2, double tol = 1e-12) {
  if (x <= 0.0) return 0.0;
  return adaptive_simpson([d1, d2](double u) { return f_density(u * u, d1, d2) * 2.0 * u; }, 0.0,
                          std::sqrt(x), tol);
}

// --- inverse-CDF standard normal (Acklam's rational approximation) -------------

inline double normal_icdf(double p) {
  if (p <= 0.0 || p >= 1.0) throw std::runtime_error("normal_icdf: p out of range");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double q, r, x;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    q = p - 0.5;
    r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // One Halley refinement against erfc for extra accuracy.
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * std::acos(-1.0)) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

// Simple 64-bit LCG, distinct from the library's mt19937_64 stream.
class LcgUniform {
 public:
  explicit LcgUniform(std::uint64_t seed) : state_(seed * 2862933555777941757ULL + 3037000493ULL) {}
  double operator()() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    return (static_cast<double>(state_ >> 11) + 0.5) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

}  // namespace oracle
