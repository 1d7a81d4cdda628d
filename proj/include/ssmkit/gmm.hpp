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

// Multi-component Gaussian model over the PCA loading subspace: EM fitting
// with k-means++ seeding, BIC model selection across component counts, and
// seeded sampling.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/rng.hpp"

#include <nlohmann/json.hpp>

namespace ssm {

struct GmmModel {
  Eigen::VectorXd weights;                    // k, positive, sums to 1
  Eigen::MatrixXd means;                      // k x K
  std::vector<Eigen::MatrixXd> covariances;   // k matrices, K x K, SPD
  double fitted_log_likelihood = -std::numeric_limits<double>::infinity();

  int component_count() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
};

struct GmmFitOptions {
  int max_iter = 200;
  double tol = 1e-7;        // stop when the log-likelihood gain drops below
  double reg_scale = 1e-6;  // adds reg_scale * (trace/K) * I each M-step
};

struct GmmFitResult {
  GmmModel model;
  std::vector<double> log_likelihood_trace;  // one entry per EM iteration
};

namespace detail {

// log N(x; mu, Sigma) evaluated through a precomputed LLT factor.
inline double log_gaussian(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                           const Eigen::LLT<Eigen::MatrixXd>& llt, double log_det) {
  const Eigen::VectorXd diff = x - mu;
  const Eigen::VectorXd solved = llt.matrixL().solve(diff);
  const double quad = solved.squaredNorm();
  const double K = static_cast<double>(x.size());
  return -0.5 * (K * std::log(2.0 * std::numbers::pi) + log_det + quad);
}

// k-means++ seeding: first center uniform, the rest proportional to the
// squared distance to the nearest chosen center. Candidates are visited in
// lexicographic row order so the seeding (and hence BIC selection) is
// invariant to permutations of the input rows.
inline std::vector<Eigen::Index> kmeanspp_seed(const Eigen::MatrixXd& data, int k, Rng& rng) {
  const Eigen::Index N = data.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < data.cols(); ++c) {
      if (data(a, c) != data(b, c)) return data(a, c) < data(b, c);
    }
    return false;
  });

  std::vector<Eigen::Index> centers;
  centers.push_back(order[rng.below(static_cast<std::uint64_t>(N))]);
  Eigen::VectorXd best_sq =
      (data.rowwise() - data.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) total += best_sq[order[i]];
    Eigen::Index chosen = order[0];
    if (total > 0.0) {
      double target = rng.uniform01() * total;
      for (Eigen::Index i = 0; i < N; ++i) {
        target -= best_sq[order[i]];
        chosen = order[i];
        if (target <= 0.0) break;
      }
    } else {
      chosen = order[rng.below(static_cast<std::uint64_t>(N))];
    }
    centers.push_back(chosen);
    best_sq = best_sq.cwiseMin(
        (data.rowwise() - data.row(chosen)).rowwise().squaredNorm());
  }
  return centers;
}

struct ComponentFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double log_det = 0.0;
};

inline ComponentFactor factor_covariance(const Eigen::MatrixXd& cov) {
  ComponentFactor f;
  f.llt.compute(cov);
  if (f.llt.info() != Eigen::Success) {
    throw NumericError("gmm: covariance is not positive definite (insufficient spread)");
  }
  f.log_det = 0.0;
  const Eigen::MatrixXd& packed = f.llt.matrixLLT();
  for (Eigen::Index i = 0; i < cov.rows(); ++i) {
    f.log_det += 2.0 * std::log(packed(i, i));
  }
  return f;
}

}  // namespace detail

// Expectation-maximization for a k-component full-covariance Gaussian
// mixture. Each M-step covariance is regularized by reg_scale*(trace/K)*I.
// The returned trace holds the log-likelihood at each iteration and is
// non-decreasing up to the regularization perturbation.
inline GmmFitResult fit_gmm_em(const Eigen::MatrixXd& data, int k, std::uint64_t seed,
                               const GmmFitOptions& opts = {}) {
  const Eigen::Index N = data.rows();
  const Eigen::Index K = data.cols();
  if (k < 1) throw ConfigError("fit_gmm_em: k must be >= 1");
  if (N < k) throw DataError("fit_gmm_em: k exceeds sample count");
  if (K < 1) throw DataError("fit_gmm_em: data must have at least one column");
  if (!data.allFinite()) throw DataError("fit_gmm_em: non-finite data");

  const Eigen::VectorXd grand_mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - grand_mean.transpose();
  const Eigen::MatrixXd grand_cov = centered.transpose() * centered / double(N);
  const double grand_trace = grand_cov.trace();
  if (grand_trace <= 0.0) {
    throw NumericError("fit_gmm_em: insufficient spread in data");
  }

  GmmModel model;
  model.weights = Eigen::VectorXd::Constant(k, 1.0 / k);
  model.means.resize(k, K);
  Rng rng(seed);
  const auto seeds = detail::kmeanspp_seed(data, k, rng);
  for (int c = 0; c < k; ++c) model.means.row(c) = data.row(seeds[c]);
  const Eigen::MatrixXd init_cov =
      grand_cov + opts.reg_scale * (grand_trace / double(K)) * Eigen::MatrixXd::Identity(K, K);
  model.covariances.assign(k, init_cov);

  std::vector<double> trace;
  trace.reserve(opts.max_iter);
  Eigen::MatrixXd resp(N, k);  // responsibilities
  double prev_ll = -std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    // E-step with log-sum-exp.
    std::vector<detail::ComponentFactor> factors(k);
    for (int c = 0; c < k; ++c) factors[c] = detail::factor_covariance(model.covariances[c]);
    double log_likelihood = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      Eigen::VectorXd logp(k);
      for (int c = 0; c < k; ++c) {
        logp[c] = std::log(model.weights[c]) +
                  detail::log_gaussian(data.row(i).transpose(), model.means.row(c).transpose(),
                                       factors[c].llt, factors[c].log_det);
      }
      const double mx = logp.maxCoeff();
      const double lse = mx + std::log((logp.array() - mx).exp().sum());
      log_likelihood += lse;
      resp.row(i) = (logp.array() - lse).exp();
    }
    trace.push_back(log_likelihood);
    model.fitted_log_likelihood = log_likelihood;
    // Converged: return the parameters the likelihood was just evaluated at.
    if (iter > 0 && log_likelihood - prev_ll < opts.tol) break;
    prev_ll = log_likelihood;

    // M-step.
    for (int c = 0; c < k; ++c) {
      const double mass = resp.col(c).sum();
      if (mass < 1e-12 * double(N)) continue;  // starved component: freeze it
      const Eigen::VectorXd mu = (resp.col(c).transpose() * data).transpose() / mass;
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(K, K);
      for (Eigen::Index i = 0; i < N; ++i) {
        const Eigen::VectorXd d = data.row(i).transpose() - mu;
        cov.noalias() += resp(i, c) * d * d.transpose();
      }
      cov /= mass;
      const double tr = cov.trace();
      cov += opts.reg_scale * (tr / double(K)) * Eigen::MatrixXd::Identity(K, K);
      model.weights[c] = mass / double(N);
      model.means.row(c) = mu.transpose();
      model.covariances[c] = cov;
    }
    const double weight_sum = model.weights.sum();
    model.weights /= weight_sum;
  }
  return {std::move(model), std::move(trace)};
}

struct BicEntry {
  int k = 0;
  double bic = 0.0;
  double log_likelihood = 0.0;
};

struct BicSelection {
  GmmModel model;
  std::vector<BicEntry> table;
  int selected_k = 0;
};

// Parameter count for a full-covariance mixture: (k-1) weights + k*K means
// + k*K*(K+1)/2 covariance entries.
inline int gmm_parameter_count(int k, int K) {
  return (k - 1) + k * K + k * K * (K + 1) / 2;
}

// Fits each k in [k_min, k_max] with `restarts` seeded restarts (best final
// likelihood kept) and returns the model minimizing BIC = p ln N - 2 ln L.
// Ties break toward smaller k.
inline BicSelection select_gmm_bic(const Eigen::MatrixXd& data, int k_min, int k_max,
                                   std::uint64_t seed, int restarts = 5,
                                   const GmmFitOptions& opts = {}) {
  if (k_min < 1 || k_max < k_min) throw ConfigError("select_gmm_bic: invalid k range");
  if (k_max > data.rows()) throw DataError("select_gmm_bic: k range exceeds sample count");
  if (restarts < 1) throw ConfigError("select_gmm_bic: restarts must be >= 1");
  const double N = static_cast<double>(data.rows());
  const int K = static_cast<int>(data.cols());

  BicSelection selection;
  double best_bic = std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max; ++k) {
    GmmFitResult best_fit;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
      const std::uint64_t restart_seed =
          splitmix64(seed ^ (static_cast<std::uint64_t>(k) << 32) ^ static_cast<std::uint64_t>(r));
      GmmFitResult fit = fit_gmm_em(data, k, restart_seed, opts);
      if (fit.model.fitted_log_likelihood > best_ll) {
        best_ll = fit.model.fitted_log_likelihood;
        best_fit = std::move(fit);
      }
    }
    const double bic = gmm_parameter_count(k, K) * std::log(N) - 2.0 * best_ll;
    selection.table.push_back({k, bic, best_ll});
    if (bic < best_bic) {  // strict: ties keep the smaller k
      best_bic = bic;
      selection.model = std::move(best_fit.model);
      selection.selected_k = k;
    }
  }
  return selection;
}

struct LoadingSamples {
  Eigen::MatrixXd samples;      // n x K
  std::vector<int> components;  // chosen component per sample
};

namespace detail {

// Square-root factor for sampling; falls back to an eigenvalue square root
// for positive semi-definite covariances (e.g. exactly zero).
inline Eigen::MatrixXd sampling_factor(const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("gmm: cannot factor covariance");
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace detail

// Draws n loading vectors: component by weight-categorical draw, then
// mean + L z with z standard normal. Deterministic for a fixed seed.
inline LoadingSamples sample_loadings(const GmmModel& model, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("sample_loadings: n must be >= 1");
  const int k = model.component_count();
  const int K = model.dim();
  if (k < 1 || K < 1) throw DataError("sample_loadings: invalid model");
  std::vector<Eigen::MatrixXd> factors(k);
  for (int c = 0; c < k; ++c) factors[c] = detail::sampling_factor(model.covariances[c]);

  LoadingSamples out;
  out.samples.resize(n, K);
  out.components.resize(n);
  Rng rng(seed);
  Eigen::VectorXd z(K);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    int c = 0;
    double cum = 0.0;
    for (; c < k - 1; ++c) {
      cum += model.weights[c];
      if (u < cum) break;
    }
    for (int d = 0; d < K; ++d) z[d] = rng.normal();
    out.samples.row(i) = (model.means.row(c).transpose() + factors[c] * z).transpose();
    out.components[i] = c;
  }
  return out;
}

// Index of the closest original loading row (Euclidean); ties break toward
// the smallest index.
inline int nearest_original(const Eigen::VectorXd& sample, const Eigen::MatrixXd& originals) {
  if (originals.rows() == 0) throw DataError("nearest_original: empty originals");
  if (originals.cols() != sample.size()) throw DataError("nearest_original: dimension mismatch");
  int best = 0;
  double best_sq = (originals.row(0).transpose() - sample).squaredNorm();
  for (Eigen::Index i = 1; i < originals.rows(); ++i) {
    const double sq = (originals.row(i).transpose() - sample).squaredNorm();
    if (sq < best_sq) {
      best_sq = sq;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// --- persistence -------------------------------------------------------------

inline void save_gmm(const GmmModel& model, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["k"] = model.component_count();
  j["weights"] =
      std::vector<double>(model.weights.data(), model.weights.data() + model.weights.size());
  std::vector<std::vector<double>> means;
  for (Eigen::Index c = 0; c < model.means.rows(); ++c) {
    means.emplace_back(model.means.row(c).begin(), model.means.row(c).end());
  }
  j["means"] = means;
  std::vector<std::vector<std::vector<double>>> covs;
  for (const auto& cov : model.covariances) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index r = 0; r < cov.rows(); ++r) {
      rows.emplace_back(cov.row(r).begin(), cov.row(r).end());
    }
    covs.push_back(std::move(rows));
  }
  j["covariances"] = covs;
  j["fitted_log_likelihood"] = model.fitted_log_likelihood;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write gmm: " + path.string());
  out << j.dump(2) << "\n";
}

inline GmmModel load_gmm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open gmm: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("gmm parse error: " + std::string(e.what()));
  }
  if (j.value("format_version", 0) != 1) throw DataError("gmm: unsupported format_version");
  GmmModel model;
  const auto weights = j.at("weights").get<std::vector<double>>();
  const int k = j.at("k").get<int>();
  if (static_cast<int>(weights.size()) != k) throw DataError("gmm: weight count mismatch");
  model.weights = Eigen::Map<const Eigen::VectorXd>(weights.data(), k);
  const auto means = j.at("means").get<std::vector<std::vector<double>>>();
  if (static_cast<int>(means.size()) != k) throw DataError("gmm: mean count mismatch");
  const int K = means.empty() ? 0 : static_cast<int>(means[0].size());
  model.means.resize(k, K);
  for (int c = 0; c < k; ++c) {
    if (static_cast<int>(means[c].size()) != K) throw DataError("gmm: ragged means");
    model.means.row(c) = Eigen::Map<const Eigen::VectorXd>(means[c].data(), K).transpose();
  }
  const auto covs = j.at("covariances").get<std::vector<std::vector<std::vector<double>>>>();
  if (static_cast<int>(covs.size()) != k) throw DataError("gmm: covariance count mismatch");
  for (int c = 0; c < k; ++c) {
    Eigen::MatrixXd cov(K, K);
    if (static_cast<int>(covs[c].size()) != K) throw DataError("gmm: covariance shape mismatch");
    for (int r = 0; r < K; ++r) {
      if (static_cast<int>(covs[c][r].size()) != K) throw DataError("gmm: covariance shape mismatch");
      for (int s = 0; s < K; ++s) cov(r, s) = covs[c][r][s];
    }
    model.covariances.push_back(std::move(cov));
  }
  model.fitted_log_likelihood = j.value("fitted_log_likelihood", 0.0);
  return model;
}

}  // namespace ssm
