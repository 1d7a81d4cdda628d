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

#include <Eigen/Dense>

#include "ssmkit/rng.hpp"
#include "ssmkit/tps.hpp"
#include "support/oracles.hpp"

using Catch::Approx;
using namespace ssm;

namespace {

Eigen::MatrixXd random_landmarks(int m, std::uint64_t seed, double scale = 10.0) {
  Rng rng(seed);
  Eigen::MatrixXd pts(m, 3);
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < 3; ++c) pts(i, c) = rng.uniform(-scale, scale);
  }
  return pts;
}

Eigen::MatrixXd cube_corners() {
  Eigen::MatrixXd pts(8, 3);
  int row = 0;
  for (int z = 0; z <= 1; ++z) {
    for (int y = 0; y <= 1; ++y) {
      for (int x = 0; x <= 1; ++x) pts.row(row++) << 10.0 * x, 10.0 * y, 10.0 * z;
    }
  }
  return pts;
}

}  // namespace

TEST_CASE("identity targets give the identity transform", "[tps]") {
  const Eigen::MatrixXd source = cube_corners();
  const TpsTransform t = fit_tps(source, source, 0.0);
  REQUIRE(t.weights.cwiseAbs().maxCoeff() < 1e-12);
  Eigen::Matrix<double, 3, 4> identity;
  identity << 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1;
  REQUIRE((t.affine - identity).cwiseAbs().maxCoeff() < 1e-12);
  const auto mapped = apply_tps(t, {1.0, 2.0, 3.0});
  REQUIRE(mapped[0] == Approx(1.0).margin(1e-12));
  REQUIRE(mapped[1] == Approx(2.0).margin(1e-12));
  REQUIRE(mapped[2] == Approx(3.0).margin(1e-12));
}

TEST_CASE("pure translation is reproduced everywhere", "[tps]") {
  const Eigen::MatrixXd source = random_landmarks(12, 5);
  Eigen::MatrixXd target = source;
  target.col(0).array() += 5.0;
  const TpsTransform t = fit_tps(source, target, 0.0);
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::array<double, 3> p{rng.uniform(-20, 20), rng.uniform(-20, 20),
                                  rng.uniform(-20, 20)};
    const auto mapped = apply_tps(t, p);
    REQUIRE(mapped[0] == Approx(p[0] + 5.0).margin(1e-9));
    REQUIRE(mapped[1] == Approx(p[1]).margin(1e-9));
    REQUIRE(mapped[2] == Approx(p[2]).margin(1e-9));
  }
  const auto origin = apply_tps(t, {0.0, 0.0, 0.0});
  REQUIRE(origin[0] == Approx(5.0).margin(1e-9));
}

TEST_CASE("general affine maps are reproduced exactly", "[tps]") {
  const Eigen::MatrixXd source = random_landmarks(16, 7);
  Eigen::Matrix3d A;
  A << 1.2, 0.3, -0.1, 0.0, 0.8, 0.25, -0.2, 0.1, 1.1;
  const Eigen::Vector3d b(4.0, -7.0, 2.5);
  const Eigen::MatrixXd target =
      (source * A.transpose()).rowwise() + b.transpose();
  const TpsTransform t = fit_tps(source, target, 0.0);
  REQUIRE(t.weights.cwiseAbs().maxCoeff() < 1e-9);
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Vector3d p(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-30, 30));
    const Eigen::Vector3d expected = A * p + b;
    const auto mapped = apply_tps(t, {p.x(), p.y(), p.z()});
    for (int c = 0; c < 3; ++c) REQUIRE(mapped[c] == Approx(expected[c]).margin(1e-9));
  }
}

TEST_CASE("a displaced cube corner matches an independent dense solve", "[tps]") {
  const Eigen::MatrixXd source = cube_corners();
  Eigen::MatrixXd target = source;
  target.row(0) += Eigen::RowVector3d(1.5, -0.5, 2.0);

  const TpsTransform t = fit_tps(source, target, 0.0);
  // landmark interpolation
  for (int i = 0; i < source.rows(); ++i) {
    const auto mapped = apply_tps(t, {source(i, 0), source(i, 1), source(i, 2)});
    for (int c = 0; c < 3; ++c) REQUIRE(mapped[c] == Approx(target(i, c)).margin(1e-9));
  }

  // oracle: same (M+4) system through Gaussian elimination
  const int M = static_cast<int>(source.rows());
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(M + 4, M + 4);
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < M; ++j) system(i, j) = (source.row(i) - source.row(j)).norm();
    system(i, M) = 1.0;
    system.block<1, 3>(i, M + 1) = source.row(i);
    system(M, i) = 1.0;
    system.block<3, 1>(M + 1, i) = source.row(i).transpose();
  }
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(M + 4, 3);
  rhs.topRows(M) = target;
  const Eigen::MatrixXd solution = oracle::gauss_solve(system, rhs);
  REQUIRE((t.weights - solution.topRows(M)).cwiseAbs().maxCoeff() < 1e-9);
  REQUIRE((t.affine - solution.bottomRows(4).transpose()).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("weights satisfy the orthogonality side conditions", "[tps]") {
  const Eigen::MatrixXd source = random_landmarks(20, 9);
  const Eigen::MatrixXd target = random_landmarks(20, 10);
  const TpsTransform t = fit_tps(source, target, 0.0);
  for (int c = 0; c < 3; ++c) {
    REQUIRE(std::abs(t.weights.col(c).sum()) < 1e-8);
    const Eigen::Vector3d moment = t.source.transpose() * t.weights.col(c);
    REQUIRE(moment.cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("lambda = 0 interpolates random landmark configurations", "[tps]") {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 8 + static_cast<int>(rng.below(57));
    const Eigen::MatrixXd source = random_landmarks(m, 200 + trial);
    const Eigen::MatrixXd target = random_landmarks(m, 300 + trial);
    const double diag = (source.colwise().maxCoeff() - source.colwise().minCoeff()).norm();
    const TpsTransform t = fit_tps(source, target, 0.0);
    for (int i = 0; i < m; ++i) {
      const auto mapped = apply_tps(t, {source(i, 0), source(i, 1), source(i, 2)});
      const Eigen::Vector3d err(mapped[0] - target(i, 0), mapped[1] - target(i, 1),
                                mapped[2] - target(i, 2));
      REQUIRE(err.norm() < 1e-9 * diag);
    }
  }
}

TEST_CASE("degenerate landmark configurations are rejected", "[tps]") {
  // coplanar: all z = 0
  Eigen::MatrixXd flat = random_landmarks(10, 13);
  flat.col(2).setZero();
  REQUIRE_THROWS_AS(fit_tps(flat, random_landmarks(10, 14), 0.0), NumericError);

  Eigen::MatrixXd three = random_landmarks(3, 15);
  REQUIRE_THROWS_AS(fit_tps(three, three, 0.0), DataError);

  Eigen::MatrixXd duplicated = cube_corners();
  duplicated.row(1) = duplicated.row(0);
  duplicated.row(2) = duplicated.row(0);
  duplicated.row(3) = duplicated.row(0);
  duplicated.row(4) = duplicated.row(0);
  duplicated.row(5) = duplicated.row(0);
  duplicated.row(6) = duplicated.row(0);
  duplicated.row(7) = duplicated.row(0);
  REQUIRE_THROWS_AS(fit_tps(duplicated, duplicated, 0.0), NumericError);
}

TEST_CASE("warp_volume with the identity is the identity", "[tps]") {
  Volume v = Volume::zeros({8, 8, 8}, {1, 1, 1}, {0, 0, 0});
  Rng rng(21);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(0, 100));
  const Eigen::MatrixXd corners = cube_corners();
  const TpsTransform identity = fit_tps(corners, corners, 0.0);
  const Volume out = warp_volume(v, identity, GridSpec::like(v));
  REQUIRE(out.data == v.data);
}

TEST_CASE("warp_volume shifts by whole voxels with zero fill", "[tps]") {
  Volume v = Volume::zeros({6, 4, 4}, {2, 2, 2}, {0, 0, 0});
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < 4; ++j) {
      for (int i = 0; i < 6; ++i) v.at(i, j, k) = static_cast<float>(1 + i + 10 * j + 100 * k);
    }
  }
  // output voxel x maps to original x + 2mm (one voxel): content shifts -x
  Eigen::MatrixXd source = cube_corners();
  Eigen::MatrixXd target = source;
  target.col(0).array() += 2.0;
  const TpsTransform t = fit_tps(source, target, 0.0);
  const Volume out = warp_volume(v, t, GridSpec::like(v));
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < 4; ++j) {
      for (int i = 0; i < 6; ++i) {
        if (i + 1 < 6) {
          REQUIRE(out.at(i, j, k) == Approx(v.at(i + 1, j, k)).margin(1e-5));
        } else {
          REQUIRE(out.at(i, j, k) == 0.0f);  // outside -> constant 0
        }
      }
    }
  }
}

TEST_CASE("warp_volume matches the analytic field under a smooth warp", "[tps]") {
  // f(x, y, z) = x: after warping, voxel value = (mapped point).x
  Volume v = Volume::zeros({16, 16, 16}, {1, 1, 1}, {0, 0, 0});
  for (int k = 0; k < 16; ++k) {
    for (int j = 0; j < 16; ++j) {
      for (int i = 0; i < 16; ++i) v.at(i, j, k) = static_cast<float>(i);
    }
  }
  Eigen::MatrixXd source = random_landmarks(10, 31, 6.0);
  source.array() += 7.5;  // center landmarks in the volume
  Eigen::MatrixXd target = source;
  Rng rng(32);
  for (int i = 0; i < target.rows(); ++i) {
    for (int c = 0; c < 3; ++c) target(i, c) += rng.uniform(-0.6, 0.6);
  }
  const TpsTransform t = fit_tps(source, target, 0.0);
  const Volume out = warp_volume(v, t, GridSpec::like(v));
  int checked = 0;
  for (int k = 4; k < 12; ++k) {
    for (int j = 4; j < 12; ++j) {
      for (int i = 4; i < 12; ++i) {
        const auto mapped = apply_tps(t, {double(i), double(j), double(k)});
        if (mapped[0] < 1.0 || mapped[0] > 14.0 || mapped[1] < 1.0 || mapped[1] > 14.0 ||
            mapped[2] < 1.0 || mapped[2] > 14.0) {
          continue;  // stay clear of the boundary
        }
        REQUIRE(out.at(i, j, k) == Approx(mapped[0]).margin(1e-5));
        ++checked;
      }
    }
  }
  REQUIRE(checked > 200);
}
