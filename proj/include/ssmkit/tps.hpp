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

// Landmark-driven thin-plate-spline map of 3D space. Uses the 3D biharmonic
// kernel U(r) = r (the 2D r^2 log r kernel does not apply in 3D). With
// lambda = 0 the map interpolates the landmarks exactly; the affine part
// reproduces affine source->target maps with zero warp weights.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>

#include "ssmkit/errors.hpp"
#include "ssmkit/parallel.hpp"
#include "ssmkit/volume.hpp"

namespace ssm {

struct TpsTransform {
  Eigen::MatrixXd source;           // M x 3 landmarks (mm)
  Eigen::Matrix<double, 3, 4> affine;  // row c: coefficients of (1, x, y, z)
  Eigen::MatrixXd weights;          // M x 3, kernel weights per output coordinate

  int landmark_count() const { return static_cast<int>(source.rows()); }
};

// Solves [[K + lambda I, P], [P^T, 0]] [w; a] = [target; 0] per output
// coordinate, with K_ij = |s_i - s_j| and P rows (1, x, y, z).
inline TpsTransform fit_tps(const Eigen::MatrixXd& source, const Eigen::MatrixXd& target,
                            double lambda = 0.0) {
  const Eigen::Index M = source.rows();
  if (source.cols() != 3 || target.cols() != 3) throw DataError("fit_tps: landmarks must be M x 3");
  if (target.rows() != M) throw DataError("fit_tps: source/target landmark counts differ");
  if (M < 4) throw DataError("fit_tps: at least 4 landmarks required");
  if (!source.allFinite() || !target.allFinite()) throw DataError("fit_tps: non-finite landmarks");
  if (lambda < 0.0) throw ConfigError("fit_tps: lambda must be >= 0");

  const Eigen::Index n = M + 4;
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < M; ++i) {
    for (Eigen::Index j = i + 1; j < M; ++j) {
      const double r = (source.row(i) - source.row(j)).norm();
      system(i, j) = r;
      system(j, i) = r;
    }
    system(i, i) = lambda;
    system(i, M) = 1.0;
    system(i, M + 1) = source(i, 0);
    system(i, M + 2) = source(i, 1);
    system(i, M + 3) = source(i, 2);
    system(M, i) = 1.0;
    system(M + 1, i) = source(i, 0);
    system(M + 2, i) = source(i, 1);
    system(M + 3, i) = source(i, 2);
  }

  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 3);
  rhs.topRows(M) = target;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  const double max_pivot = std::abs(lu.matrixLU()(0, 0));
  const double min_pivot = std::abs(lu.matrixLU()(n - 1, n - 1));
  const double rcond = max_pivot > 0.0 ? min_pivot / max_pivot : 0.0;
  if (!lu.isInvertible() || rcond < 1e-14) {
    throw NumericError(
        "fit_tps: singular system (coplanar or duplicate landmarks); "
        "reciprocal condition estimate " +
        std::to_string(rcond));
  }
  const Eigen::MatrixXd solution = lu.solve(rhs);

  TpsTransform t;
  t.source = source;
  t.weights = solution.topRows(M);
  t.affine = solution.bottomRows(4).transpose();
  return t;
}

inline std::array<double, 3> apply_tps(const TpsTransform& t, const std::array<double, 3>& p) {
  const Eigen::Index M = t.source.rows();
  Eigen::Vector3d out = t.affine.col(0) + t.affine.col(1) * p[0] + t.affine.col(2) * p[1] +
                        t.affine.col(3) * p[2];
  for (Eigen::Index i = 0; i < M; ++i) {
    const double dx = p[0] - t.source(i, 0);
    const double dy = p[1] - t.source(i, 1);
    const double dz = p[2] - t.source(i, 2);
    const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
    out[0] += t.weights(i, 0) * r;
    out[1] += t.weights(i, 1) * r;
    out[2] += t.weights(i, 2) * r;
  }
  return {out[0], out[1], out[2]};
}

// Applies the transform to each row of an N x 3 point matrix.
inline Eigen::MatrixXd apply_tps_points(const TpsTransform& t, const Eigen::MatrixXd& points) {
  if (points.cols() != 3) throw DataError("apply_tps_points: points must be N x 3");
  Eigen::MatrixXd out(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const auto mapped = apply_tps(t, {points(i, 0), points(i, 1), points(i, 2)});
    out(i, 0) = mapped[0];
    out(i, 1) = mapped[1];
    out(i, 2) = mapped[2];
  }
  return out;
}

struct GridSpec {
  std::array<int, 3> dims;
  std::array<double, 3> spacing;
  std::array<double, 3> origin;

  static GridSpec like(const Volume& v) { return {v.dims, v.spacing, v.origin}; }
};

// Pull-warp: each output voxel center x is mapped through t (which must be
// the new->original map) and the original volume is sampled there.
inline Volume warp_volume(const Volume& original, const TpsTransform& t_new_to_orig,
                          const GridSpec& out_grid,
                          const OutsidePolicy& outside = OutsidePolicy::constant(0.0),
                          int threads = 1) {
  Volume out = Volume::zeros(out_grid.dims, out_grid.spacing, out_grid.origin);
  const int nx = out.dims[0], ny = out.dims[1], nz = out.dims[2];
  parallel_for(static_cast<std::size_t>(nz), threads, [&](std::size_t k) {
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const auto center = out.index_to_physical(i, j, static_cast<double>(k));
        const auto mapped = apply_tps(t_new_to_orig, center);
        out.at(i, j, static_cast<int>(k)) =
            static_cast<float>(sample_trilinear(original, mapped, outside));
      }
    }
  });
  return out;
}

}  // namespace ssm
