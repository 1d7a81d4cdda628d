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

// Deterministic synthetic shape population for desk-scale verification:
// star-shaped closed surfaces whose radii along fixed directions are smooth
// functions of a low-dimensional latent vector, rendered into volumes with
// a blurred (sigmoid) boundary, plus binary outcome labels tied to the
// first latent factor.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/mesh.hpp"
#include "ssmkit/parallel.hpp"
#include "ssmkit/rng.hpp"
#include "ssmkit/shape_space.hpp"
#include "ssmkit/volume.hpp"

namespace ssm {

struct SyntheticPopulationSpec {
  int count = 200;
  int latent_dim = 4;
  std::array<int, 3> grid_dims{32, 32, 32};
  std::array<double, 3> spacing{2.0, 2.0, 2.0};  // mm
  int landmark_count = 128;
  double intensity_noise = 2.0;  // additive Gaussian sigma on a 0..100 scale
  double label_noise = 0.5;      // sigma of the logit perturbation
  std::uint64_t seed = 0;

  // Radius model: r(u, z) = base + size*z0 + axis*(z1 ux + z2 uy + z3 uz)
  //               + quad*(z0^2 - 1)*ux*uy   (terms present up to latent_dim)
  double base_radius_mm = 16.0;
  double size_amp_mm = 3.0;
  double axis_amp_mm = 2.2;
  double quad_amp_mm = 1.0;

  void validate() const {
    if (count < 2) throw ConfigError("synthetic population: count must be >= 2");
    if (latent_dim < 1) throw ConfigError("synthetic population: latent_dim must be >= 1");
    if (landmark_count < 4) throw ConfigError("synthetic population: landmark_count must be >= 4");
    for (int a = 0; a < 3; ++a) {
      if (grid_dims[a] < 2) throw ConfigError("synthetic population: grid dims must be >= 2");
      if (spacing[a] <= 0) throw ConfigError("synthetic population: spacing must be positive");
    }
  }
};

struct SyntheticPopulation {
  CorrespondenceSet correspondences;
  std::vector<Volume> volumes;
  std::vector<int> labels;   // binary recurrence outcome per shape
  Eigen::MatrixXd latents;   // count x latent_dim
};

namespace detail {

// Deterministic, nearly-uniform unit directions (Fibonacci sphere).
inline std::vector<Eigen::Vector3d> fibonacci_directions(int m) {
  std::vector<Eigen::Vector3d> dirs;
  dirs.reserve(m);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < m; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / m;
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * i;
    dirs.emplace_back(r * std::cos(phi), y, r * std::sin(phi));
  }
  return dirs;
}

inline double synth_radius(const SyntheticPopulationSpec& spec, const Eigen::VectorXd& z,
                           const Eigen::Vector3d& u) {
  double r = spec.base_radius_mm;
  const int L = static_cast<int>(z.size());
  if (L > 0) r += spec.size_amp_mm * z[0];
  if (L > 1) r += spec.axis_amp_mm * z[1] * u.x();
  if (L > 2) r += spec.axis_amp_mm * z[2] * u.y();
  if (L > 3) r += spec.axis_amp_mm * z[3] * u.z();
  if (L > 0) r += spec.quad_amp_mm * (z[0] * z[0] - 1.0) * u.x() * u.y();
  // extra latent factors modulate higher harmonics
  for (int l = 4; l < L; ++l) {
    const double h = (l % 2 == 0) ? u.y() * u.z() : (3.0 * u.z() * u.z() - 1.0) * 0.5;
    r += 0.5 * spec.axis_amp_mm * z[l] * h;
  }
  return std::max(r, 1.0);  // keep the surface away from the centroid
}

// Radial signed distance to the star-shaped surface (positive outside).
inline double synth_signed_distance(const SyntheticPopulationSpec& spec, const Eigen::VectorXd& z,
                                    const Eigen::Vector3d& center, const Eigen::Vector3d& x) {
  const Eigen::Vector3d d = x - center;
  const double rho = d.norm();
  if (rho < 1e-9) return -spec.base_radius_mm;
  return rho - synth_radius(spec, z, d / rho);
}

inline Eigen::Vector3d volume_center(const SyntheticPopulationSpec& spec) {
  return {0.5 * (spec.grid_dims[0] - 1) * spec.spacing[0],
          0.5 * (spec.grid_dims[1] - 1) * spec.spacing[1],
          0.5 * (spec.grid_dims[2] - 1) * spec.spacing[2]};
}

}  // namespace detail

// Generates the population. Latents are drawn from one stream seeded by
// spec.seed; per-shape noise uses streams derived from (seed, shape index),
// so shapes may be rendered in parallel with identical results.
inline SyntheticPopulation synth_population(const SyntheticPopulationSpec& spec, int threads = 1) {
  spec.validate();
  const auto dirs = detail::fibonacci_directions(spec.landmark_count);
  const Eigen::Vector3d center = detail::volume_center(spec);
  const double edge_width = *std::min_element(spec.spacing.begin(), spec.spacing.end());

  SyntheticPopulation pop;
  pop.latents.resize(spec.count, spec.latent_dim);
  {
    Rng rng(spec.seed);
    for (int i = 0; i < spec.count; ++i) {
      for (int l = 0; l < spec.latent_dim; ++l) pop.latents(i, l) = rng.normal();
    }
  }

  pop.correspondences.points_per_shape = spec.landmark_count;
  pop.correspondences.points.resize(spec.count, 3 * spec.landmark_count);
  pop.volumes.assign(spec.count, Volume{});
  pop.labels.assign(spec.count, 0);

  parallel_for(static_cast<std::size_t>(spec.count), threads, [&](std::size_t i) {
    const Eigen::VectorXd z = pop.latents.row(static_cast<Eigen::Index>(i)).transpose();
    Rng rng(spec.seed ^ (0x53594e5448ULL + static_cast<std::uint64_t>(i)));

    for (int j = 0; j < spec.landmark_count; ++j) {
      const Eigen::Vector3d p = center + detail::synth_radius(spec, z, dirs[j]) * dirs[j];
      pop.correspondences.points(static_cast<Eigen::Index>(i), 3 * j + 0) = p.x();
      pop.correspondences.points(static_cast<Eigen::Index>(i), 3 * j + 1) = p.y();
      pop.correspondences.points(static_cast<Eigen::Index>(i), 3 * j + 2) = p.z();
    }

    Volume v = Volume::zeros(spec.grid_dims, spec.spacing, {0.0, 0.0, 0.0});
    std::size_t idx = 0;
    for (int k = 0; k < spec.grid_dims[2]; ++k) {
      for (int jj = 0; jj < spec.grid_dims[1]; ++jj) {
        for (int ii = 0; ii < spec.grid_dims[0]; ++ii, ++idx) {
          const Eigen::Vector3d x(ii * spec.spacing[0], jj * spec.spacing[1], k * spec.spacing[2]);
          const double d = detail::synth_signed_distance(spec, z, center, x);
          const double intensity = 100.0 / (1.0 + std::exp(d / edge_width));
          v.data[idx] = static_cast<float>(intensity + spec.intensity_noise * rng.normal());
        }
      }
    }
    pop.volumes[i] = std::move(v);

    const double logit = 2.0 * z[0] + spec.label_noise * rng.normal();
    const double p_label = 1.0 / (1.0 + std::exp(-logit));
    pop.labels[i] = rng.uniform01() < p_label ? 1 : 0;
  });
  return pop;
}

// Correspondences (flattened xyzxyz) of the shape with latent z, along the
// same fixed direction set the population generator uses.
inline Eigen::VectorXd synth_correspondences(const SyntheticPopulationSpec& spec,
                                             const Eigen::VectorXd& z) {
  spec.validate();
  if (z.size() != spec.latent_dim) throw DataError("synth_correspondences: latent dim mismatch");
  const auto dirs = detail::fibonacci_directions(spec.landmark_count);
  const Eigen::Vector3d center = detail::volume_center(spec);
  Eigen::VectorXd out(3 * spec.landmark_count);
  for (int j = 0; j < spec.landmark_count; ++j) {
    const Eigen::Vector3d p = center + detail::synth_radius(spec, z, dirs[j]) * dirs[j];
    out.segment<3>(3 * j) = p;
  }
  return out;
}

// Lat-long surface mesh of the shape with latent z; the z = 0 mesh serves
// as the population template.
inline TriangleMesh synth_mesh(const SyntheticPopulationSpec& spec, const Eigen::VectorXd& z,
                               int lat_segments = 32, int lon_segments = 64) {
  spec.validate();
  if (z.size() != spec.latent_dim) throw DataError("synth_mesh: latent dimension mismatch");
  const Eigen::Vector3d center = detail::volume_center(spec);
  TriangleMesh mesh;
  // poles + interior rings
  auto vertex_at = [&](double theta, double phi) {
    const Eigen::Vector3d u(std::sin(theta) * std::cos(phi), std::cos(theta),
                            std::sin(theta) * std::sin(phi));
    const Eigen::Vector3d p = center + detail::synth_radius(spec, z, u) * u;
    return std::array<double, 3>{p.x(), p.y(), p.z()};
  };
  mesh.vertices.push_back(vertex_at(0.0, 0.0));  // north pole
  for (int a = 1; a < lat_segments; ++a) {
    const double theta = std::numbers::pi * a / lat_segments;
    for (int b = 0; b < lon_segments; ++b) {
      mesh.vertices.push_back(vertex_at(theta, 2.0 * std::numbers::pi * b / lon_segments));
    }
  }
  mesh.vertices.push_back(vertex_at(std::numbers::pi, 0.0));  // south pole
  const int south = static_cast<int>(mesh.vertices.size()) - 1;
  auto ring_vertex = [&](int ring, int b) { return 1 + ring * lon_segments + (b % lon_segments); };
  for (int b = 0; b < lon_segments; ++b) {
    mesh.triangles.push_back({0, ring_vertex(0, b + 1), ring_vertex(0, b)});
  }
  for (int a = 0; a + 1 < lat_segments - 1; ++a) {
    for (int b = 0; b < lon_segments; ++b) {
      const int v00 = ring_vertex(a, b), v01 = ring_vertex(a, b + 1);
      const int v10 = ring_vertex(a + 1, b), v11 = ring_vertex(a + 1, b + 1);
      mesh.triangles.push_back({v00, v01, v11});
      mesh.triangles.push_back({v00, v11, v10});
    }
  }
  for (int b = 0; b < lon_segments; ++b) {
    mesh.triangles.push_back({south, ring_vertex(lat_segments - 2, b),
                              ring_vertex(lat_segments - 2, b + 1)});
  }
  flag_degenerate_triangles(mesh);
  return mesh;
}

}  // namespace ssm
