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

// Adagrad training for the volume regressor (L2 loss on per-mode whitened
// loadings) and the recurrence MLP (binary cross-entropy), plus central
// finite-difference gradient verification.
//
// Training is deterministic: seeded initialization, seeded epoch shuffles,
// and minibatch gradients accumulated in sample-index order regardless of
// worker count.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/nn.hpp"
#include "ssmkit/parallel.hpp"
#include "ssmkit/rng.hpp"
#include "ssmkit/shape_space.hpp"
#include "ssmkit/volume.hpp"

namespace ssm {

struct TrainConfig {
  double learning_rate = 0.01;
  int epochs = 240;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double adagrad_epsilon = 1e-8;
  bool whiten_targets = true;
  double input_scale = 0.01;  // fixed intensity prescale stored in the model
  int threads = 1;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be positive");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (adagrad_epsilon <= 0) throw ConfigError("train: adagrad_epsilon must be positive");
  }
};

// Mean squared error over the K modes and its gradient wrt pred.
struct L2Loss {
  double value = 0.0;
  Eigen::VectorXd grad;
};

inline L2Loss l2_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target) {
  if (pred.size() != target.size()) throw DataError("l2_loss: length mismatch");
  if (pred.size() == 0) throw DataError("l2_loss: empty vectors");
  L2Loss out;
  const Eigen::VectorXd diff = pred - target;
  const double K = static_cast<double>(pred.size());
  out.value = diff.squaredNorm() / K;
  out.grad = (2.0 / K) * diff;
  return out;
}

// One Adagrad update: G += g^2; theta -= lr * g / (sqrt(G) + eps).
inline void adagrad_step(nn::AlignedVector& params, const nn::AlignedVector& grads,
                         nn::AlignedVector& accumulator, double lr, double eps) {
  if (params.size() != grads.size() || params.size() != accumulator.size()) {
    throw DataError("adagrad_step: shape mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    accumulator[i] += g * g;
    params[i] -= lr * g / (std::sqrt(accumulator[i]) + eps);
  }
}

// Per-parameter-group squared-gradient accumulators, all starting at zero.
struct AdagradState {
  std::vector<nn::AlignedVector> accumulators;

  static AdagradState zeros_like(const std::vector<nn::AlignedVector*>& groups) {
    AdagradState s;
    for (const auto* g : groups) s.accumulators.emplace_back(g->size(), 0.0);
    return s;
  }
};

// --- regressor training --------------------------------------------------------

struct RegressionSample {
  const Volume* volume = nullptr;
  Eigen::VectorXd loadings;
};

struct TrainResult {
  RegressorModel model;
  std::vector<double> epoch_loss;  // mean per-sample training loss
};

// Trains the regressor on (volume, loadings) pairs. With whiten_targets,
// targets are divided per mode by sqrt(eigenvalue) (modes with eigenvalue
// below 1e-12 are left unwhitened) and the inverse scale is stored in the
// model, so inference reports loadings in their original units.
inline TrainResult train_regressor(const std::vector<RegressionSample>& dataset,
                                   const TrainConfig& cfg, const ShapeSpace& space) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train_regressor: empty dataset");
  const int K = space.mode_count();
  if (K < 1) throw DataError("train_regressor: shape space has no modes");
  const std::array<int, 3> dims = dataset.front().volume->dims;
  for (const auto& s : dataset) {
    if (s.volume == nullptr || s.volume->dims != dims) {
      throw DataError("train_regressor: inconsistent volume dims");
    }
    if (s.loadings.size() != K) throw DataError("train_regressor: loading length mismatch");
  }

  TrainResult result;
  result.model = make_regressor(dims, K, cfg.seed);
  result.model.input_scale = cfg.input_scale;

  Eigen::VectorXd scale = Eigen::VectorXd::Ones(K);
  if (cfg.whiten_targets) {
    for (int m = 0; m < K; ++m) {
      if (space.eigenvalues[m] >= 1e-12) scale[m] = std::sqrt(space.eigenvalues[m]);
    }
  }
  result.model.output_scale = scale;
  const Eigen::VectorXd inv_scale = scale.cwiseInverse();

  Eigen::MatrixXd targets(dataset.size(), K);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    targets.row(static_cast<Eigen::Index>(i)) =
        dataset[i].loadings.cwiseProduct(inv_scale).transpose();
  }

  auto groups = nn::param_groups(result.model);
  std::vector<nn::AlignedVector*> group_values;
  for (auto& g : groups) group_values.push_back(g.values);
  AdagradState adagrad = AdagradState::zeros_like(group_values);

  const int N = static_cast<int>(dataset.size());
  const int workers = std::max(1, std::min(cfg.threads, cfg.batch_size));
  std::vector<RegressorWorkspace> workspaces(workers);
  std::vector<RegressorGrads> sample_grads(std::min(cfg.batch_size, N));
  RegressorGrads batch_grads;
  batch_grads.resize_for(result.model);

  std::vector<int> order(dataset.size());
  for (int i = 0; i < N; ++i) order[i] = i;
  std::vector<double> sample_loss(std::min(cfg.batch_size, N));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed ^ (0x45504f43ULL + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss_sum = 0.0;

    for (int start = 0; start < N; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, N - start);
      const int chunk = (count + workers - 1) / workers;
      parallel_for(static_cast<std::size_t>(workers), workers, [&](std::size_t w) {
        RegressorWorkspace& ws = workspaces[w];
        const int b_end = std::min(count, static_cast<int>(w + 1) * chunk);
        for (int b = static_cast<int>(w) * chunk; b < b_end; ++b) {
          const int sample_index = order[start + b];
          const auto& raw = regressor_forward(result.model, *dataset[sample_index].volume, ws);
          const L2Loss loss = l2_loss(raw, targets.row(sample_index).transpose());
          sample_loss[b] = loss.value;
          regressor_backward(result.model, ws, loss.grad, sample_grads[b]);
        }
      });

      // Fixed index-ordered reduction: results are identical for any
      // worker count.
      for (auto* g : batch_grads.groups()) std::fill(g->begin(), g->end(), 0.0);
      for (int b = 0; b < count; ++b) {
        auto src = sample_grads[b].groups();
        auto dst = batch_grads.groups();
        for (std::size_t gi = 0; gi < dst.size(); ++gi) {
          const auto& s = *src[gi];
          auto& d = *dst[gi];
          for (std::size_t p = 0; p < d.size(); ++p) d[p] += s[p];
        }
        epoch_loss_sum += sample_loss[b];
      }
      const double inv_count = 1.0 / count;
      auto batch_groups = batch_grads.groups();
      for (std::size_t gi = 0; gi < batch_groups.size(); ++gi) {
        auto& g = *batch_groups[gi];
        for (double& v : g) v *= inv_count;
        adagrad_step(*group_values[gi], g, adagrad.accumulators[gi], cfg.learning_rate,
                     cfg.adagrad_epsilon);
      }
    }

    const double epoch_loss = epoch_loss_sum / N;
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("train_regressor: non-finite loss at epoch " + std::to_string(epoch));
    }
    result.epoch_loss.push_back(epoch_loss);
  }
  return result;
}

// --- recurrence training --------------------------------------------------------

// Binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7].
// Returns the loss and d(loss)/d(logit).
struct BceLoss {
  double value = 0.0;
  double logit_grad = 0.0;
};

inline BceLoss bce_loss_from_logit(double logit, int label) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double pc = std::clamp(p, 1e-7, 1.0 - 1e-7);
  BceLoss out;
  out.value = -(label * std::log(pc) + (1 - label) * std::log(1.0 - pc));
  // Inside the clamp d/dlogit simplifies to p - y; outside it the clamp
  // stops the gradient (matching finite differences of the clamped loss).
  out.logit_grad = (p > 1e-7 && p < 1.0 - 1e-7) ? (p - label) : 0.0;
  return out;
}

// Trains the recurrence MLP on loadings (rows) and binary labels with
// minibatch Adagrad on mean binary cross-entropy.
inline RecurrenceModel train_recurrence(const Eigen::MatrixXd& loadings,
                                        const std::vector<int>& labels, const TrainConfig& cfg,
                                        int hidden = 16) {
  cfg.validate();
  const int N = static_cast<int>(loadings.rows());
  if (N < 2) throw DataError("train_recurrence: need at least two samples");
  if (static_cast<int>(labels.size()) != N) throw DataError("train_recurrence: label count");
  bool has_pos = false, has_neg = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("train_recurrence: labels must be 0/1");
    (y == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw DataError("train_recurrence: degenerate labels");

  RecurrenceModel model = make_recurrence(static_cast<int>(loadings.cols()), hidden, cfg.seed);
  auto groups = nn::param_groups(model);
  std::vector<nn::AlignedVector*> group_values;
  for (auto& g : groups) group_values.push_back(g.values);
  AdagradState adagrad = AdagradState::zeros_like(group_values);

  RecurrenceWorkspace ws;
  RecurrenceGrads sample_grads, batch_grads;
  batch_grads.resize_for(model);
  std::vector<int> order(N);
  for (int i = 0; i < N; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed ^ (0x524e4e45ULL + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss_sum = 0.0;
    for (int start = 0; start < N; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, N - start);
      for (auto* g : batch_grads.groups()) std::fill(g->begin(), g->end(), 0.0);
      for (int b = 0; b < count; ++b) {
        const int i = order[start + b];
        const Eigen::VectorXd x = loadings.row(i).transpose();
        recurrence_forward(model, x, ws);
        const BceLoss loss = bce_loss_from_logit(ws.logit, labels[i]);
        epoch_loss_sum += loss.value;
        recurrence_backward(model, x, ws, loss.logit_grad, sample_grads);
        auto src = sample_grads.groups();
        auto dst = batch_grads.groups();
        for (std::size_t gi = 0; gi < dst.size(); ++gi) {
          for (std::size_t p = 0; p < dst[gi]->size(); ++p) (*dst[gi])[p] += (*src[gi])[p];
        }
      }
      const double inv_count = 1.0 / count;
      auto batch_groups = batch_grads.groups();
      for (std::size_t gi = 0; gi < batch_groups.size(); ++gi) {
        for (double& v : *batch_groups[gi]) v *= inv_count;
        adagrad_step(*group_values[gi], *batch_groups[gi], adagrad.accumulators[gi],
                     cfg.learning_rate, cfg.adagrad_epsilon);
      }
    }
    if (!std::isfinite(epoch_loss_sum)) {
      throw NumericError("train_recurrence: non-finite loss at epoch " + std::to_string(epoch));
    }
  }
  return model;
}

// --- gradient checking ----------------------------------------------------------

struct GradientCheckOptions {
  double step = 1e-5;
  double threshold = 1e-4;
  int max_params_per_group = 1500;  // seeded subsample above this
  std::uint64_t seed = 0;
  std::string negate_group;  // fault injection: flip this group's analytic sign
};

struct GradientCheckReport {
  bool pass = false;
  double max_rel_error = 0.0;
  std::string worst_group;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

namespace detail {

inline double rel_error(double a, double n) {
  const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
  return std::abs(a - n) / denom;
}

template <typename LossFn>
void check_groups(const std::vector<nn::ParamGroup>& groups,
                  const std::vector<nn::AlignedVector*>& analytic, const LossFn& loss_fn,
                  const GradientCheckOptions& opts, GradientCheckReport& report) {
  Rng rng(opts.seed ^ 0x47434845ULL);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    nn::AlignedVector& params = *groups[gi].values;
    const nn::AlignedVector& grad = *analytic[gi];
    std::vector<std::size_t> indices(params.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (static_cast<int>(indices.size()) > opts.max_params_per_group) {
      rng.shuffle(indices);
      indices.resize(static_cast<std::size_t>(opts.max_params_per_group));
      std::sort(indices.begin(), indices.end());
    }
    const double sign = groups[gi].name == opts.negate_group ? -1.0 : 1.0;
    for (std::size_t idx : indices) {
      const double saved = params[idx];
      params[idx] = saved + opts.step;
      const double up = loss_fn();
      params[idx] = saved - opts.step;
      const double down = loss_fn();
      params[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double err = rel_error(sign * grad[idx], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_group = groups[gi].name;
        report.worst_index = idx;
      }
    }
  }
  report.pass = report.max_rel_error < opts.threshold;
}

}  // namespace detail

// Central-difference verification of every regressor parameter group
// against the analytic backward pass, under the L2 loss on the full
// forward (output_scale included).
inline GradientCheckReport gradient_check_regressor(RegressorModel& model, const Volume& sample,
                                                    const Eigen::VectorXd& target,
                                                    const GradientCheckOptions& opts = {}) {
  if (opts.step <= 0.0) throw ConfigError("gradient_check: invalid step");
  if (target.size() != model.fc2.out_n) throw DataError("gradient_check: target length mismatch");

  RegressorWorkspace ws;
  const Eigen::VectorXd& raw = regressor_forward(model, sample, ws);
  const L2Loss loss = l2_loss(raw.cwiseProduct(model.output_scale), target);
  RegressorGrads grads;
  regressor_backward(model, ws, loss.grad.cwiseProduct(model.output_scale), grads);

  auto groups = nn::param_groups(model);
  auto analytic = grads.groups();
  GradientCheckReport report;
  RegressorWorkspace probe_ws;
  auto loss_fn = [&]() {
    const Eigen::VectorXd& r = regressor_forward(model, sample, probe_ws);
    return l2_loss(r.cwiseProduct(model.output_scale), target).value;
  };
  detail::check_groups(groups, analytic, loss_fn, opts, report);
  return report;
}

// Same verification for the recurrence MLP under binary cross-entropy.
inline GradientCheckReport gradient_check_recurrence(RecurrenceModel& model,
                                                     const Eigen::VectorXd& loadings, int label,
                                                     const GradientCheckOptions& opts = {}) {
  if (opts.step <= 0.0) throw ConfigError("gradient_check: invalid step");
  RecurrenceWorkspace ws;
  recurrence_forward(model, loadings, ws);
  const BceLoss loss = bce_loss_from_logit(ws.logit, label);
  RecurrenceGrads grads;
  recurrence_backward(model, loadings, ws, loss.logit_grad, grads);

  auto groups = nn::param_groups(model);
  auto analytic = grads.groups();
  GradientCheckReport report;
  RecurrenceWorkspace probe_ws;
  auto loss_fn = [&]() {
    recurrence_forward(model, loadings, probe_ws);
    return bce_loss_from_logit(probe_ws.logit, label).value;
  };
  detail::check_groups(groups, analytic, loss_fn, opts, report);
  return report;
}

}  // namespace ssm
