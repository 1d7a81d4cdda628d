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
#include <fstream>

#include "ssmkit/rng.hpp"
#include "ssmkit/shape_space.hpp"
#include "support/oracles.hpp"
#include "support/tmpdir.hpp"

using Catch::Approx;
using namespace ssm;

namespace {

CorrespondenceSet random_set(int S, int M, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  CorrespondenceSet set;
  set.points_per_shape = M;
  set.points.resize(S, 3 * M);
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < 3 * M; ++j) set.points(i, j) = scale * rng.normal();
  }
  return set;
}

}  // namespace

TEST_CASE("particle files parse coordinates", "[shape]") {
  testutil::TempDir dir("particles");
  const auto file = dir.path() / "a.particles";
  {
    std::ofstream out(file);
    out << "1.0 2.0 3.0\n";
  }
  const CorrespondenceSet set = load_particles({file});
  REQUIRE(set.shape_count() == 1);
  REQUIRE(set.points_per_shape == 1);
  REQUIRE(set.point(0, 0) == Eigen::Vector3d(1.0, 2.0, 3.0));
}

TEST_CASE("particle roundtrip is bit-exact", "[shape]") {
  testutil::TempDir dir("roundtrip");
  Rng rng(7);
  Eigen::VectorXd shape(3 * 17);
  for (Eigen::Index i = 0; i < shape.size(); ++i) shape[i] = 100.0 * rng.normal() / 3.0;
  const auto file = dir.path() / "s.particles";
  write_particle_file(shape, file);
  const Eigen::VectorXd back = read_particle_file(file);
  REQUIRE(back.size() == shape.size());
  for (Eigen::Index i = 0; i < shape.size(); ++i) REQUIRE(back[i] == shape[i]);
}

TEST_CASE("particle loading rejects malformed input", "[shape]") {
  testutil::TempDir dir("badparticles");
  const auto a = dir.path() / "a.particles";
  const auto b = dir.path() / "b.particles";
  {
    std::ofstream fa(a);
    fa << "0 0 0\n1 1 1\n2 2 2\n";
    std::ofstream fb(b);
    fb << "0 0 0\n1 1 1\n2 2 2\n3 3 3\n";
  }
  REQUIRE_THROWS_WITH(load_particles({a, b}), Catch::Matchers::ContainsSubstring("point count mismatch"));

  const auto c = dir.path() / "c.particles";
  {
    std::ofstream fc(c);
    fc << "0 zero 0\n";
  }
  REQUIRE_THROWS_AS(load_particles({c}), DataError);

  const auto d = dir.path() / "d.particles";
  { std::ofstream fd(d); }
  REQUIRE_THROWS_AS(load_particles({d}), DataError);
}

TEST_CASE("two one-point shapes give the hand-computed space", "[shape]") {
  CorrespondenceSet set;
  set.points_per_shape = 1;
  set.points.resize(2, 3);
  set.points.row(0) << 0.0, 0.0, 0.0;
  set.points.row(1) << 2.0, 0.0, 0.0;
  const ShapeSpace space = fit_shape_space(set, 0.95);
  REQUIRE(space.mode_count() == 1);
  REQUIRE(space.mean[0] == Approx(1.0));
  REQUIRE(space.mean[1] == 0.0);
  REQUIRE(space.eigenvalues[0] == Approx(2.0));  // 1/(S-1) convention
  // sign convention: largest-magnitude entry positive
  REQUIRE(space.basis(0, 0) == Approx(1.0));
  REQUIRE(space.basis(1, 0) == Approx(0.0).margin(1e-14));
}

TEST_CASE("identical shapes yield a zero-mode space", "[shape]") {
  CorrespondenceSet set = random_set(1, 5, 3);
  set.points = set.points.row(0).replicate(4, 1);
  const ShapeSpace space = fit_shape_space(set, 0.95);
  REQUIRE(space.mode_count() == 0);
  REQUIRE(space.mean.isApprox(set.points.row(0).transpose()));
  REQUIRE(space.captured_fraction == 1.0);
}

TEST_CASE("fit matches a Jacobi eigensolver on the explicit covariance", "[shape]") {
  const CorrespondenceSet set = random_set(5, 4, 11);
  const ShapeSpace space = fit_shape_space(set, 1.0);

  const Eigen::VectorXd mean = set.points.colwise().mean();
  const Eigen::MatrixXd centered = set.points.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / 4.0;  // 12 x 12
  const auto reference = oracle::jacobi_eigen(cov);

  REQUIRE(space.mode_count() <= 4);  // K <= S - 1
  for (int m = 0; m < space.mode_count(); ++m) {
    REQUIRE(space.eigenvalues[m] == Approx(reference.eigenvalues[m]).margin(1e-9));
    // eigenvectors agree up to sign
    const double dot = std::abs(space.basis.col(m).dot(reference.eigenvectors.col(m)));
    REQUIRE(dot == Approx(1.0).margin(1e-8));
  }
  // orthonormality within 1e-10
  const Eigen::MatrixXd gram = space.basis.transpose() * space.basis;
  REQUIRE((gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() <
          1e-10);
}

TEST_CASE("project and reconstruct are inverse on loading space", "[shape]") {
  const CorrespondenceSet set = random_set(9, 6, 23);
  const ShapeSpace space = fit_shape_space(set, 1.0);
  const int K = space.mode_count();

  // project(mean) = 0
  REQUIRE(project(space, space.mean).cwiseAbs().maxCoeff() < 1e-12);
  // reconstruct(0) = mean
  REQUIRE(reconstruct(space, Eigen::VectorXd::Zero(K)).isApprox(space.mean));

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd v(K);
    for (int m = 0; m < K; ++m) v[m] = 3.0 * rng.normal();
    const Eigen::VectorXd roundtrip = project(space, reconstruct(space, v));
    REQUIRE((roundtrip - v).cwiseAbs().maxCoeff() < 1e-10);
  }

  REQUIRE_THROWS_AS(project(space, Eigen::VectorXd::Zero(5)), DataError);
  REQUIRE_THROWS_AS(reconstruct(space, Eigen::VectorXd::Zero(K + 1)), DataError);
}

TEST_CASE("training loadings are centered with eigenvalue variances", "[shape]") {
  const CorrespondenceSet set = random_set(12, 5, 31, 2.0);
  const ShapeSpace space = fit_shape_space(set, 0.99);
  const Eigen::MatrixXd loadings = project_all(space, set);

  for (int m = 0; m < space.mode_count(); ++m) {
    const double sd = std::sqrt(space.eigenvalues[m]);
    REQUIRE(std::abs(loadings.col(m).mean()) < 1e-8 * std::max(sd, 1.0));
    const double var =
        (loadings.col(m).array() - loadings.col(m).mean()).square().sum() / (set.shape_count() - 1);
    REQUIRE(var == Approx(space.eigenvalues[m]).epsilon(1e-8));
  }

  // loading matrix row equals per-shape projection
  for (int i = 0; i < set.shape_count(); ++i) {
    const Eigen::VectorXd row = project(space, set.points.row(i).transpose());
    REQUIRE((row - loadings.row(i).transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("translation covariance", "[shape]") {
  const CorrespondenceSet set = random_set(7, 4, 41);
  const ShapeSpace space = fit_shape_space(set, 0.9);

  CorrespondenceSet moved = set;
  const Eigen::Vector3d t(4.0, -2.5, 7.0);
  for (int i = 0; i < moved.shape_count(); ++i) {
    for (int j = 0; j < moved.points_per_shape; ++j) {
      moved.points.block<1, 3>(i, 3 * j) += t.transpose();
    }
  }
  const ShapeSpace moved_space = fit_shape_space(moved, 0.9);
  REQUIRE(moved_space.mode_count() == space.mode_count());
  for (int m = 0; m < space.mode_count(); ++m) {
    REQUIRE(moved_space.eigenvalues[m] == Approx(space.eigenvalues[m]).margin(1e-9));
  }
  for (int j = 0; j < set.points_per_shape; ++j) {
    REQUIRE((moved_space.mean.segment<3>(3 * j) - space.mean.segment<3>(3 * j) - t).norm() < 1e-9);
  }
  const Eigen::MatrixXd l0 = project_all(space, set);
  const Eigen::MatrixXd l1 = project_all(moved_space, moved);
  REQUIRE((l0 - l1).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("reconstruction residual is bounded by discarded variance", "[shape]") {
  const CorrespondenceSet set = random_set(20, 8, 57);
  const ShapeSpace space = fit_shape_space(set, 0.8);
  // full-rank reference gives the total variance
  const ShapeSpace full = fit_shape_space(set, 1.0);
  const double total_variance = full.eigenvalues.sum();
  const double bound = (1.0 - space.captured_fraction) * total_variance * (set.shape_count() - 1);

  double worst = 0.0;
  for (int i = 0; i < set.shape_count(); ++i) {
    const Eigen::VectorXd shape = set.points.row(i).transpose();
    const Eigen::VectorXd rec = reconstruct(space, project(space, shape));
    worst = std::max(worst, (rec - shape).squaredNorm());
  }
  REQUIRE(worst <= bound * (1.0 + 1e-9));
}

TEST_CASE("fit_shape_space rejects bad input", "[shape]") {
  REQUIRE_THROWS_AS(fit_shape_space(random_set(1, 3, 2), 0.95), DataError);
  CorrespondenceSet bad = random_set(3, 3, 2);
  bad.points(1, 2) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(fit_shape_space(bad, 0.95), DataError);
  REQUIRE_THROWS_AS(fit_shape_space(random_set(3, 3, 2), 0.0), ConfigError);
  REQUIRE_THROWS_AS(fit_shape_space(random_set(3, 3, 2), 1.5), ConfigError);
}

TEST_CASE("shape space JSON persistence roundtrips", "[shape]") {
  testutil::TempDir dir("space");
  const CorrespondenceSet set = random_set(6, 4, 77);
  const ShapeSpace space = fit_shape_space(set, 0.95);
  const auto path = dir.path() / "space.json";
  save_shape_space(space, path);
  const ShapeSpace back = load_shape_space(path);
  REQUIRE(back.points_per_shape == space.points_per_shape);
  REQUIRE(back.captured_fraction == space.captured_fraction);
  REQUIRE(back.mean.isApprox(space.mean));
  REQUIRE(back.basis.isApprox(space.basis));
  REQUIRE(back.eigenvalues.isApprox(space.eigenvalues));
}
