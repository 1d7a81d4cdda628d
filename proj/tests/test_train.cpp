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
#include <catch2/catch_amalgamated.hpp>

#include "ssmkit/rng.hpp"
#include "ssmkit/train.hpp"
#include "support/tmpdir.hpp"

using Catch::Approx;
using namespace ssm;

namespace {

Volume random_volume(std::array<int, 3> dims, std::uint64_t seed) {
  Volume v = Volume::zeros(dims, {1, 1, 1}, {0, 0, 0});
  Rng rng(seed);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.0, 100.0));
  return v;
}

ShapeSpace dummy_space(int K, const Eigen::VectorXd& eigenvalues) {
  ShapeSpace space;
  space.mean = Eigen::VectorXd::Zero(3);
  space.basis = Eigen::MatrixXd::Zero(3, K);
  space.eigenvalues = eigenvalues;
  space.points_per_shape = 1;
  return space;
}

}  // namespace

TEST_CASE("l2 loss value and gradient", "[train]") {
  const Eigen::Vector2d p(1.0, -2.0);
  REQUIRE(l2_loss(p, p).value == 0.0);
  REQUIRE(l2_loss(p, p).grad.cwiseAbs().maxCoeff() == 0.0);

  Eigen::VectorXd pred(1), target(1);
  pred << 3.0;
  target << 1.0;
  const L2Loss loss = l2_loss(pred, target);
  REQUIRE(loss.value == Approx(4.0));
  REQUIRE(loss.grad[0] == Approx(4.0));

  REQUIRE_THROWS_AS(l2_loss(pred, Eigen::Vector2d(0, 0)), DataError);

  // gradient matches central differences
  Rng rng(3);
  Eigen::VectorXd a(6), b(6);
  for (int i = 0; i < 6; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  const L2Loss base = l2_loss(a, b);
  const double h = 1e-6;
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd up = a, down = a;
    up[i] += h;
    down[i] -= h;
    const double numeric = (l2_loss(up, b).value - l2_loss(down, b).value) / (2 * h);
    REQUIRE(base.grad[i] == Approx(numeric).epsilon(1e-8).margin(1e-10));
  }
}

TEST_CASE("adagrad steps follow the closed form", "[train]") {
  nn::AlignedVector theta = {0.0};
  nn::AlignedVector g = {1.0};
  nn::AlignedVector G = {0.0};
  adagrad_step(theta, g, G, 0.1, 1e-8);
  REQUIRE(G[0] == 1.0);
  REQUIRE(theta[0] == Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));

  adagrad_step(theta, g, G, 0.1, 1e-8);
  REQUIRE(G[0] == 2.0);
  const double expected = -0.1 * (1.0 / (1.0 + 1e-8) + 1.0 / (std::sqrt(2.0) + 1e-8));
  REQUIRE(theta[0] == Approx(expected).epsilon(1e-15));

  // zero gradient leaves parameters and accumulators unchanged
  nn::AlignedVector zero = {0.0};
  const double before_theta = theta[0], before_G = G[0];
  adagrad_step(theta, zero, G, 0.1, 1e-8);
  REQUIRE(theta[0] == before_theta);
  REQUIRE(G[0] == before_G);

  nn::AlignedVector bad = {1.0, 2.0};
  REQUIRE_THROWS_AS(adagrad_step(theta, bad, G, 0.1, 1e-8), DataError);
}

TEST_CASE("adagrad accumulators never decrease", "[train]") {
  Rng rng(89);
  nn::AlignedVector theta(5, 0.0), G(5, 0.0), g(5);
  for (int step = 0; step < 100; ++step) {
    const nn::AlignedVector before = G;
    for (auto& x : g) x = rng.normal();
    adagrad_step(theta, g, G, 0.01, 1e-8);
    for (int i = 0; i < 5; ++i) REQUIRE(G[i] >= before[i]);
  }
}

TEST_CASE("gradient check passes on the tiny regressor", "[train]") {
  RegressorModel model = make_regressor({8, 8, 8}, 4, 5);
  model.input_scale = 0.01;
  const Volume v = random_volume({8, 8, 8}, 7);
  Eigen::VectorXd target(4);
  target << 0.3, -0.7, 1.1, 0.0;
  GradientCheckOptions opts;
  opts.max_params_per_group = 300;
  opts.seed = 11;
  const GradientCheckReport report = gradient_check_regressor(model, v, target, opts);
  INFO("worst " << report.worst_group << "[" << report.worst_index << "] rel "
                << report.max_rel_error);
  REQUIRE(report.checked > 1000);
  REQUIRE(report.max_rel_error < 1e-4);
  REQUIRE(report.pass);
}

TEST_CASE("a corrupted conv backward is caught and named", "[train]") {
  RegressorModel model = make_regressor({8, 8, 8}, 3, 13);
  model.input_scale = 0.01;
  const Volume v = random_volume({8, 8, 8}, 17);
  GradientCheckOptions opts;
  opts.max_params_per_group = 100;
  opts.negate_group = "conv2.weights";  // fault injection
  const GradientCheckReport report =
      gradient_check_regressor(model, v, Eigen::Vector3d(0.1, 0.2, 0.3), opts);
  REQUIRE_FALSE(report.pass);
  REQUIRE(report.worst_group == "conv2.weights");
}

TEST_CASE("gradient check rejects a zero step", "[train]") {
  RegressorModel model = make_regressor({8, 8, 8}, 2, 19);
  const Volume v = random_volume({8, 8, 8}, 23);
  GradientCheckOptions opts;
  opts.step = 0.0;
  REQUIRE_THROWS_WITH(gradient_check_regressor(model, v, Eigen::Vector2d(0, 0), opts),
                      Catch::Matchers::ContainsSubstring("invalid step"));
}

TEST_CASE("gradient check passes on the recurrence model", "[train]") {
  RecurrenceModel model = make_recurrence(5, 16, 29);
  Rng rng(31);
  Eigen::VectorXd x(5);
  for (int i = 0; i < 5; ++i) x[i] = rng.normal();
  for (int label = 0; label <= 1; ++label) {
    const GradientCheckReport report = gradient_check_recurrence(model, x, label);
    INFO("label " << label << " worst " << report.worst_group << " rel " << report.max_rel_error);
    REQUIRE(report.pass);
  }
}

TEST_CASE("one sample can be overfit", "[train]") {
  const Volume v = random_volume({8, 8, 8}, 37);
  Eigen::VectorXd loadings(3);
  loadings << 1.0, -0.5, 0.25;
  std::vector<RegressionSample> dataset = {{&v, loadings}};
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 1;
  cfg.seed = 41;
  cfg.whiten_targets = false;
  const ShapeSpace space = dummy_space(3, Eigen::Vector3d(1, 1, 1));
  const TrainResult result = train_regressor(dataset, cfg, space);
  REQUIRE(result.epoch_loss.front() > 0.0);
  REQUIRE(result.epoch_loss.back() < 0.01 * result.epoch_loss.front());
}

TEST_CASE("training is deterministic for a fixed seed and any thread count", "[train]") {
  std::vector<Volume> volumes;
  for (int i = 0; i < 6; ++i) volumes.push_back(random_volume({8, 8, 8}, 100 + i));
  Rng rng(43);
  std::vector<RegressionSample> dataset;
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd l(2);
    l << rng.normal(), rng.normal();
    dataset.push_back({&volumes[i], l});
  }
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 47;
  const ShapeSpace space = dummy_space(2, Eigen::Vector2d(1, 1));
  const TrainResult a = train_regressor(dataset, cfg, space);
  cfg.threads = 3;
  const TrainResult b = train_regressor(dataset, cfg, space);
  REQUIRE(a.model.conv1.weights == b.model.conv1.weights);
  REQUIRE(a.model.fc2.weights == b.model.fc2.weights);
  REQUIRE(a.model.fc2.bias == b.model.fc2.bias);
  REQUIRE(a.epoch_loss == b.epoch_loss);
}

TEST_CASE("whitening guards zero-eigenvalue modes", "[train]") {
  const Volume v = random_volume({8, 8, 8}, 53);
  Eigen::VectorXd loadings(2);
  loadings << 2.0, 0.0;
  std::vector<RegressionSample> dataset = {{&v, loadings}};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 59;
  const ShapeSpace space = dummy_space(2, Eigen::Vector2d(4.0, 1e-14));
  const TrainResult result = train_regressor(dataset, cfg, space);
  REQUIRE(result.model.output_scale[0] == Approx(2.0));  // sqrt(4)
  REQUIRE(result.model.output_scale[1] == 1.0);          // guarded
}

TEST_CASE("diverging training reports a non-finite loss", "[train]") {
  const Volume v = random_volume({8, 8, 8}, 61);
  Eigen::VectorXd loadings(2);
  loadings << 1.0, 1.0;
  std::vector<RegressionSample> dataset = {{&v, loadings}};
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.learning_rate = 1e160;
  cfg.seed = 67;
  const ShapeSpace space = dummy_space(2, Eigen::Vector2d(1, 1));
  REQUIRE_THROWS_AS(train_regressor(dataset, cfg, space), NumericError);
}

TEST_CASE("the recurrence MLP separates separable data", "[train]") {
  Eigen::MatrixXd loadings(20, 1);
  std::vector<int> labels(20);
  for (int i = 0; i < 10; ++i) {
    loadings(i, 0) = -1.0 - 0.01 * i;
    labels[i] = 0;
    loadings(10 + i, 0) = 1.0 + 0.01 * i;
    labels[10 + i] = 1;
  }
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 20;
  cfg.seed = 71;
  const RecurrenceModel model = train_recurrence(loadings, labels, cfg);
  for (int i = 0; i < 20; ++i) {
    const double p = predict_recurrence(model, loadings.row(i).transpose());
    REQUIRE((p > 0.5) == (labels[i] == 1));
  }
}

TEST_CASE("uninformative features drive predictions to the class prior", "[train]") {
  Eigen::MatrixXd loadings = Eigen::MatrixXd::Zero(40, 3);
  std::vector<int> labels(40, 0);
  for (int i = 0; i < 12; ++i) labels[i] = 1;  // prior 0.3
  TrainConfig cfg;
  cfg.epochs = 2000;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 40;
  cfg.seed = 73;
  const RecurrenceModel model = train_recurrence(loadings, labels, cfg);
  const double p = predict_recurrence(model, Eigen::Vector3d(0, 0, 0));
  REQUIRE(p == Approx(0.3).margin(0.05));
}

TEST_CASE("single-class labels are rejected", "[train]") {
  Eigen::MatrixXd loadings = Eigen::MatrixXd::Random(10, 2);
  std::vector<int> labels(10, 1);
  TrainConfig cfg;
  REQUIRE_THROWS_WITH(train_recurrence(loadings, labels, cfg),
                      Catch::Matchers::ContainsSubstring("degenerate labels"));
}

TEST_CASE("predict_recurrence basics", "[train]") {
  RecurrenceModel zero = make_recurrence(2, 4, 79);
  for (auto& g : nn::param_groups(zero)) std::fill(g.values->begin(), g.values->end(), 0.0);
  REQUIRE(predict_recurrence(zero, Eigen::Vector2d(3.0, -1.0)) == Approx(0.5));

  // single-positive-weight path is monotone in the feeding loading
  RecurrenceModel mono = make_recurrence(1, 3, 83);
  for (auto& g : nn::param_groups(mono)) {
    for (double& w : *g.values) w = std::abs(w);
  }
  double last = 0.0;
  for (int i = 0; i < 50; ++i) {
    Eigen::VectorXd x(1);
    x << -5.0 + 0.2 * i;
    const double p = predict_recurrence(mono, x);
    if (i > 0) REQUIRE(p >= last);
    last = p;
  }

  // pinned hand-evaluated model: relu(2x + 0.5) * 1.5 - 0.25 through sigmoid
  RecurrenceModel pinned = make_recurrence(1, 1, 87);
  pinned.fc1.weights = {2.0};
  pinned.fc1.bias = {0.5};
  pinned.fc2.weights = {1.5};
  pinned.fc2.bias = {-0.25};
  Eigen::VectorXd x(1);
  x << 0.8;
  const double logit = 1.5 * std::max(0.0, 2.0 * 0.8 + 0.5) - 0.25;
  REQUIRE(predict_recurrence(pinned, x) == Approx(1.0 / (1.0 + std::exp(-logit))));

  REQUIRE_THROWS_AS(predict_recurrence(pinned, Eigen::Vector2d(0, 0)), DataError);

  // saturating logits stay strictly inside (0, 1)
  Eigen::VectorXd huge(1);
  huge << 1e9;
  const double hi = predict_recurrence(mono, huge);
  REQUIRE(hi < 1.0);
  REQUIRE(hi > 0.0);
  huge << -1e9;
  const double lo = predict_recurrence(mono, huge);
  REQUIRE(lo > 0.0);
  REQUIRE(lo < 1.0);
}
