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

// Statistical validation machinery: Student-t and F distribution functions
// through the regularized incomplete beta (continued-fraction evaluation),
// the paired Hotelling T^2 test, TOST equivalence, and per-point error
// summaries with Tukey-hinge quartiles.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/shape_space.hpp"

namespace ssm {

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 400;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw ConfigError("incomplete beta: a, b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// Student-t CDF with nu degrees of freedom.
inline double t_cdf(double x, double nu) {
  if (nu <= 0.0) throw ConfigError("t_cdf: dof must be positive");
  if (x == 0.0) return 0.5;
  const double tail = 0.5 * regularized_incomplete_beta(0.5 * nu, 0.5, nu / (nu + x * x));
  return x > 0.0 ? 1.0 - tail : tail;
}

// F distribution CDF with (d1, d2) degrees of freedom.
inline double f_cdf(double x, double d1, double d2) {
  if (d1 <= 0.0 || d2 <= 0.0) throw ConfigError("f_cdf: dof must be positive");
  if (x <= 0.0) return 0.0;
  return regularized_incomplete_beta(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2));
}

// --- Hotelling T^2 ------------------------------------------------------------

struct HotellingResult {
  double t_squared = 0.0;
  double f_statistic = 0.0;
  int dof1 = 0;  // p
  int dof2 = 0;  // n - p (paired)
  double p_value = 1.0;
  int n = 0;
  int p = 0;
};

namespace detail {

// Solves S w = v with a positive-definiteness/conditioning check.
inline Eigen::VectorXd solve_spd_checked(const Eigen::MatrixXd& S, const Eigen::VectorXd& v,
                                         const char* context) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  if (es.info() != Eigen::Success) throw NumericError(std::string(context) + ": eigensolve failed");
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo <= 0.0 || hi / lo > 1e12) {
    throw NumericError(std::string(context) + ": singular covariance (condition number " +
                       std::to_string(lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity()) +
                       ")");
  }
  return es.eigenvectors() *
         (es.eigenvectors().transpose() * v).cwiseQuotient(es.eigenvalues());
}

}  // namespace detail

// Paired test: D = X - Y, T^2 = n dbar^T S^{-1} dbar with S the sample
// covariance of D; F = T^2 (n-p) / (p (n-1)) ~ F(p, n-p) under H0.
inline HotellingResult hotelling_paired(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows() || X.cols() != Y.cols()) {
    throw DataError("hotelling_paired: shape mismatch");
  }
  const int n = static_cast<int>(X.rows());
  const int p = static_cast<int>(X.cols());
  if (p < 1) throw DataError("hotelling_paired: p must be >= 1");
  if (n <= p) throw DataError("hotelling_paired: insufficient samples for dimension");

  const Eigen::MatrixXd D = X - Y;
  const Eigen::VectorXd dbar = D.colwise().mean();
  HotellingResult r;
  r.n = n;
  r.p = p;
  r.dof1 = p;
  r.dof2 = n - p;
  if (dbar.isZero(0.0)) {
    r.t_squared = 0.0;
    r.f_statistic = 0.0;
    r.p_value = 1.0;
    return r;
  }
  const Eigen::MatrixXd centered = D.rowwise() - dbar.transpose();
  const Eigen::MatrixXd S = centered.transpose() * centered / double(n - 1);
  const Eigen::VectorXd w = detail::solve_spd_checked(S, dbar, "hotelling_paired");
  r.t_squared = n * dbar.dot(w);
  r.f_statistic = r.t_squared * double(n - p) / (double(p) * double(n - 1));
  r.p_value = 1.0 - f_cdf(r.f_statistic, p, n - p);
  return r;
}

// Two-sample variant with pooled covariance; F ~ F(p, n1+n2-p-1).
inline HotellingResult hotelling_two_sample(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.cols() != Y.cols()) throw DataError("hotelling_two_sample: dimension mismatch");
  const int n1 = static_cast<int>(X.rows());
  const int n2 = static_cast<int>(Y.rows());
  const int p = static_cast<int>(X.cols());
  if (p < 1 || n1 < 2 || n2 < 2) throw DataError("hotelling_two_sample: too few samples");
  if (n1 + n2 - p - 1 <= 0) {
    throw DataError("hotelling_two_sample: insufficient samples for dimension");
  }
  const Eigen::VectorXd mx = X.colwise().mean();
  const Eigen::VectorXd my = Y.colwise().mean();
  const Eigen::MatrixXd cx = X.rowwise() - mx.transpose();
  const Eigen::MatrixXd cy = Y.rowwise() - my.transpose();
  const Eigen::MatrixXd pooled =
      (cx.transpose() * cx + cy.transpose() * cy) / double(n1 + n2 - 2);
  const Eigen::VectorXd d = mx - my;
  HotellingResult r;
  r.n = n1 + n2;
  r.p = p;
  r.dof1 = p;
  r.dof2 = n1 + n2 - p - 1;
  if (d.isZero(0.0)) {
    r.p_value = 1.0;
    return r;
  }
  const Eigen::VectorXd w = detail::solve_spd_checked(pooled, d, "hotelling_two_sample");
  r.t_squared = double(n1) * double(n2) / double(n1 + n2) * d.dot(w);
  r.f_statistic = r.t_squared * double(n1 + n2 - p - 1) / (double(p) * double(n1 + n2 - 2));
  r.p_value = 1.0 - f_cdf(r.f_statistic, r.dof1, r.dof2);
  return r;
}

// --- TOST equivalence -----------------------------------------------------------

struct EquivalenceResult {
  double mean_diff = 0.0;
  double lower = 0.0, upper = 0.0;
  double t_lower = 0.0, t_upper = 0.0;
  double p_lower = 1.0, p_upper = 1.0;
  double alpha = 0.05;
  bool equivalent = false;
  int n = 0;
};

// Two one-sided tests: equivalence holds when both one-sided
// nulls (mean <= lower, mean >= upper) are rejected at level alpha. A
// zero-variance sample is equivalent iff the mean lies strictly inside the
// bounds (p-values 0, or 1 on the violated side).
inline EquivalenceResult tost(const std::vector<double>& diffs, double lower, double upper,
                              double alpha) {
  if (diffs.size() < 2) throw DataError("tost: need at least two differences");
  if (!(lower < upper)) throw ConfigError("tost: bounds must satisfy lower < upper");
  if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("tost: alpha must be in (0, 1)");
  const int n = static_cast<int>(diffs.size());
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= n;
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1));

  EquivalenceResult r;
  r.mean_diff = mean;
  r.lower = lower;
  r.upper = upper;
  r.alpha = alpha;
  r.n = n;
  if (sd == 0.0) {
    r.p_lower = mean > lower ? 0.0 : 1.0;
    r.p_upper = mean < upper ? 0.0 : 1.0;
    r.t_lower = mean > lower ? std::numeric_limits<double>::infinity()
                             : -std::numeric_limits<double>::infinity();
    r.t_upper = mean < upper ? -std::numeric_limits<double>::infinity()
                             : std::numeric_limits<double>::infinity();
  } else {
    const double se = sd / std::sqrt(double(n));
    r.t_lower = (mean - lower) / se;
    r.t_upper = (mean - upper) / se;
    r.p_lower = 1.0 - t_cdf(r.t_lower, n - 1);
    r.p_upper = t_cdf(r.t_upper, n - 1);
  }
  r.equivalent = std::max(r.p_lower, r.p_upper) < alpha;
  return r;
}

// --- per-point error summaries ----------------------------------------------------

struct BoxStats {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0, mean = 0.0;
};

// Median-of-halves quartiles (Tukey hinges): for odd counts the median
// element belongs to both halves.
inline BoxStats box_stats(std::vector<double> values) {
  if (values.empty()) throw DataError("box_stats: empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  auto median_of = [](const std::vector<double>& v, std::size_t b, std::size_t e) {
    const std::size_t m = e - b;
    return m % 2 == 1 ? v[b + m / 2] : 0.5 * (v[b + m / 2 - 1] + v[b + m / 2]);
  };
  BoxStats s;
  s.min = values.front();
  s.max = values.back();
  s.median = median_of(values, 0, n);
  const std::size_t half = n / 2;
  s.q1 = median_of(values, 0, n % 2 == 1 ? half + 1 : half);
  s.q3 = median_of(values, half, n);
  s.mean = 0.0;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(n);
  return s;
}

struct ErrorSummary {
  Eigen::MatrixXd errors;             // S x M, millimeters
  BoxStats stats;                     // over all S*M entries
  std::vector<double> per_shape_mean; // length S
  double below_threshold_fraction = 0.0;  // shapes with mean error < threshold
  double threshold_mm = 0.0;
};

// Per-point per-shape Euclidean errors between two correspondence sets,
// plus the fraction of shapes whose mean error is below threshold_mm.
inline ErrorSummary point_errors(const CorrespondenceSet& pred, const CorrespondenceSet& truth,
                                 double threshold_mm) {
  pred.validate();
  truth.validate();
  if (pred.shape_count() != truth.shape_count() ||
      pred.points_per_shape != truth.points_per_shape) {
    throw DataError("point_errors: shape/point count mismatch");
  }
  const int S = pred.shape_count();
  const int M = pred.points_per_shape;
  ErrorSummary summary;
  summary.threshold_mm = threshold_mm;
  summary.errors.resize(S, M);
  summary.per_shape_mean.resize(S);
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(S) * M);
  int below = 0;
  for (int i = 0; i < S; ++i) {
    double shape_sum = 0.0;
    for (int j = 0; j < M; ++j) {
      const double e = (pred.point(i, j) - truth.point(i, j)).norm();
      summary.errors(i, j) = e;
      shape_sum += e;
      all.push_back(e);
    }
    summary.per_shape_mean[i] = shape_sum / M;
    if (summary.per_shape_mean[i] < threshold_mm) ++below;
  }
  summary.stats = box_stats(std::move(all));
  summary.below_threshold_fraction = static_cast<double>(below) / S;
  return summary;
}

}  // namespace ssm
