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

// Correspondence populations (point distribution models) and the PCA shape
// space over them: fitting, projection to loadings, and reconstruction.
//
// Inputs are assumed to be registered already; no alignment is performed
// here. Shapes are flattened in xyzxyz... order, so point j of a shape
// vector occupies entries (3j, 3j+1, 3j+2).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"

#include <nlohmann/json.hpp>

namespace ssm {

struct CorrespondenceSet {
  Eigen::MatrixXd points;   // S x 3M, row i = flattened shape i
  int points_per_shape = 0;

  int shape_count() const { return static_cast<int>(points.rows()); }

  Eigen::Vector3d point(int shape, int index) const {
    return points.row(shape).segment<3>(3 * index);
  }

  void validate() const {
    if (points.rows() < 1 || points_per_shape < 1) {
      throw DataError("correspondence set must have at least one shape and one point");
    }
    if (points.cols() != 3 * points_per_shape) {
      throw DataError("correspondence set width does not match points_per_shape");
    }
    if (!points.allFinite()) throw DataError("correspondence set has non-finite coordinates");
  }
};

struct ShapeSpace {
  Eigen::VectorXd mean;         // 3M
  Eigen::MatrixXd basis;        // 3M x K, orthonormal columns
  Eigen::VectorXd eigenvalues;  // K, descending, mm^2
  double captured_fraction = 1.0;
  int points_per_shape = 0;

  int mode_count() const { return static_cast<int>(basis.cols()); }
};

// --- particle file I/O -----------------------------------------------------
//
// Particle files are whitespace-separated text, one "x y z" triple per line.
// Written with 17 significant digits so text roundtrips are bit-exact.

inline Eigen::VectorXd read_particle_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open particle file: " + path.string());
  std::vector<double> values;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n\v\f") == std::string::npos) continue;
    std::istringstream row(line);
    double x, y, z;
    if (!(row >> x >> y >> z)) {
      throw DataError("particle file " + path.string() + " line " + std::to_string(line_no) +
                      ": expected three numeric tokens");
    }
    std::string extra;
    if (row >> extra) {
      throw DataError("particle file " + path.string() + " line " + std::to_string(line_no) +
                      ": too many tokens");
    }
    values.push_back(x);
    values.push_back(y);
    values.push_back(z);
  }
  if (values.empty()) throw DataError("particle file is empty: " + path.string());
  Eigen::VectorXd shape(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) shape[static_cast<Eigen::Index>(i)] = values[i];
  if (!shape.allFinite()) throw DataError("particle file has non-finite values: " + path.string());
  return shape;
}

inline CorrespondenceSet load_particles(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw DataError("no particle files given");
  CorrespondenceSet set;
  for (std::size_t s = 0; s < paths.size(); ++s) {
    const Eigen::VectorXd shape = read_particle_file(paths[s]);
    if (s == 0) {
      set.points_per_shape = static_cast<int>(shape.size() / 3);
      set.points.resize(static_cast<Eigen::Index>(paths.size()), shape.size());
    } else if (shape.size() != set.points.cols()) {
      throw DataError("point count mismatch: " + paths[s].string() + " has " +
                      std::to_string(shape.size() / 3) + " points, expected " +
                      std::to_string(set.points_per_shape));
    }
    set.points.row(static_cast<Eigen::Index>(s)) = shape;
  }
  set.validate();
  return set;
}

inline void write_particle_file(const Eigen::VectorXd& shape, const std::filesystem::path& path) {
  if (shape.size() % 3 != 0) throw DataError("shape vector length must be a multiple of 3");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write particle file: " + path.string());
  char buf[128];
  for (Eigen::Index j = 0; j < shape.size(); j += 3) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", shape[j], shape[j + 1], shape[j + 2]);
    out << buf;
  }
  if (!out) throw DataError("particle file write failed: " + path.string());
}

// --- PCA -------------------------------------------------------------------

namespace detail {

// Flips each basis column so its largest-magnitude entry is positive,
// making fitted bases deterministic across runs and eigensolvers.
inline void canonicalize_basis_signs(Eigen::MatrixXd& basis) {
  for (Eigen::Index c = 0; c < basis.cols(); ++c) {
    Eigen::Index argmax = 0;
    basis.col(c).cwiseAbs().maxCoeff(&argmax);
    if (basis(argmax, c) < 0) basis.col(c) = -basis.col(c);
  }
}

}  // namespace detail

// Fits the PCA shape space keeping the smallest K whose cumulative
// eigenvalue fraction reaches variance_threshold. Eigenvalues follow the
// 1/(S-1) sample-covariance convention; the S x S Gram matrix is used when
// S < 3M. A zero-variance population yields K = 0.
inline ShapeSpace fit_shape_space(const CorrespondenceSet& set, double variance_threshold) {
  set.validate();
  if (variance_threshold <= 0.0 || variance_threshold > 1.0) {
    throw ConfigError("variance_threshold must be in (0, 1]");
  }
  const int S = set.shape_count();
  if (S < 2) throw DataError("fit_shape_space needs at least two shapes");
  const Eigen::Index dim = set.points.cols();

  ShapeSpace space;
  space.points_per_shape = set.points_per_shape;
  space.mean = set.points.colwise().mean();
  Eigen::MatrixXd centered = set.points.rowwise() - space.mean.transpose();

  Eigen::VectorXd eigenvalues;  // descending
  Eigen::MatrixXd basis;        // 3M x rank
  if (static_cast<Eigen::Index>(S) <= dim) {
    // Gram trick: eigenvectors of C C^T / (S-1) lift to covariance modes.
    const Eigen::MatrixXd gram = centered * centered.transpose() / double(S - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    const int rank_cap = S - 1;
    eigenvalues.resize(rank_cap);
    basis.resize(dim, rank_cap);
    for (int m = 0; m < rank_cap; ++m) {
      // Solver returns ascending order; take from the top.
      const Eigen::Index src = static_cast<Eigen::Index>(S) - 1 - m;
      const double lambda = std::max(0.0, solver.eigenvalues()[src]);
      eigenvalues[m] = lambda;
      if (lambda > 0.0) {
        basis.col(m) = centered.transpose() * solver.eigenvectors().col(src) /
                       std::sqrt(lambda * double(S - 1));
      } else {
        basis.col(m).setZero();
      }
    }
  } else {
    const Eigen::MatrixXd cov = centered.transpose() * centered / double(S - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    eigenvalues.resize(dim);
    basis.resize(dim, dim);
    for (Eigen::Index m = 0; m < dim; ++m) {
      const Eigen::Index src = dim - 1 - m;
      eigenvalues[m] = std::max(0.0, solver.eigenvalues()[src]);
      basis.col(m) = solver.eigenvectors().col(src);
    }
  }

  const double total = eigenvalues.sum();
  // Centering identical rows leaves O(eps) residuals; variance far below
  // the squared coordinate scale is numerical zero.
  const double coordinate_scale = set.points.squaredNorm() / S;
  const double zero_cutoff = 1e-24 * std::max(1.0, coordinate_scale);
  int K = 0;
  if (total > zero_cutoff) {
    double cum = 0.0;
    for (Eigen::Index m = 0; m < eigenvalues.size(); ++m) {
      if (eigenvalues[m] <= 0.0) break;  // zero modes cannot raise the fraction
      cum += eigenvalues[m];
      ++K;
      if (cum / total >= variance_threshold) break;
    }
    space.captured_fraction = std::min(1.0, cum / total);
  } else {
    space.captured_fraction = 1.0;
  }
  space.eigenvalues = eigenvalues.head(K);
  space.basis = basis.leftCols(K);
  detail::canonicalize_basis_signs(space.basis);
  return space;
}

inline Eigen::VectorXd project(const ShapeSpace& space, const Eigen::VectorXd& shape) {
  if (shape.size() != space.mean.size()) {
    throw DataError("project: shape length " + std::to_string(shape.size()) + " does not match " +
                    std::to_string(space.mean.size()));
  }
  return space.basis.transpose() * (shape - space.mean);
}

inline Eigen::VectorXd reconstruct(const ShapeSpace& space, const Eigen::VectorXd& loadings) {
  if (loadings.size() != space.basis.cols()) {
    throw DataError("reconstruct: loading length " + std::to_string(loadings.size()) +
                    " does not match mode count " + std::to_string(space.basis.cols()));
  }
  return space.mean + space.basis * loadings;
}

// Loadings of every shape in the set; row i projects shape i.
inline Eigen::MatrixXd project_all(const ShapeSpace& space, const CorrespondenceSet& set) {
  if (set.points.cols() != space.mean.size()) {
    throw DataError("project_all: correspondence width does not match shape space");
  }
  return (set.points.rowwise() - space.mean.transpose()) * space.basis;
}

// Flattened shape vector (xyzxyz...) as an M x 3 landmark matrix.
inline Eigen::MatrixXd to_landmark_matrix(const Eigen::VectorXd& shape) {
  if (shape.size() % 3 != 0) throw DataError("shape vector length must be a multiple of 3");
  const Eigen::Index m = shape.size() / 3;
  Eigen::MatrixXd out(m, 3);
  for (Eigen::Index j = 0; j < m; ++j) out.row(j) = shape.segment<3>(3 * j).transpose();
  return out;
}

inline Eigen::VectorXd to_shape_vector(const Eigen::MatrixXd& landmarks) {
  if (landmarks.cols() != 3) throw DataError("landmark matrix must be M x 3");
  Eigen::VectorXd out(3 * landmarks.rows());
  for (Eigen::Index j = 0; j < landmarks.rows(); ++j) {
    out.segment<3>(3 * j) = landmarks.row(j).transpose();
  }
  return out;
}

// Reconstructed shape vector reinterpreted as a correspondence set row.
inline CorrespondenceSet to_correspondences(const Eigen::MatrixXd& rows, int points_per_shape) {
  CorrespondenceSet set;
  set.points = rows;
  set.points_per_shape = points_per_shape;
  set.validate();
  return set;
}

// --- persistence -------------------------------------------------------------

inline void save_shape_space(const ShapeSpace& space, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["points_per_shape"] = space.points_per_shape;
  j["captured_fraction"] = space.captured_fraction;
  j["mean"] = std::vector<double>(space.mean.data(), space.mean.data() + space.mean.size());
  std::vector<std::vector<double>> basis_cols;
  for (Eigen::Index c = 0; c < space.basis.cols(); ++c) {
    basis_cols.emplace_back(space.basis.col(c).data(),
                            space.basis.col(c).data() + space.basis.rows());
  }
  j["basis"] = basis_cols;
  j["eigenvalues"] =
      std::vector<double>(space.eigenvalues.data(), space.eigenvalues.data() + space.eigenvalues.size());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write shape space: " + path.string());
  out << j.dump(2) << "\n";
}

inline ShapeSpace load_shape_space(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open shape space: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("shape space parse error: " + std::string(e.what()));
  }
  if (j.value("format_version", 0) != 1) throw DataError("shape space: unsupported format_version");
  ShapeSpace space;
  space.points_per_shape = j.at("points_per_shape").get<int>();
  space.captured_fraction = j.at("captured_fraction").get<double>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  space.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  const auto eigs = j.at("eigenvalues").get<std::vector<double>>();
  space.eigenvalues =
      Eigen::Map<const Eigen::VectorXd>(eigs.data(), static_cast<Eigen::Index>(eigs.size()));
  const auto basis_cols = j.at("basis").get<std::vector<std::vector<double>>>();
  space.basis.resize(space.mean.size(), static_cast<Eigen::Index>(basis_cols.size()));
  for (std::size_t c = 0; c < basis_cols.size(); ++c) {
    if (basis_cols[c].size() != static_cast<std::size_t>(space.mean.size())) {
      throw DataError("shape space: basis column length mismatch");
    }
    space.basis.col(static_cast<Eigen::Index>(c)) = Eigen::Map<const Eigen::VectorXd>(
        basis_cols[c].data(), static_cast<Eigen::Index>(basis_cols[c].size()));
  }
  if (space.eigenvalues.size() != space.basis.cols()) {
    throw DataError("shape space: eigenvalue count does not match basis");
  }
  return space;
}

}  // namespace ssm
