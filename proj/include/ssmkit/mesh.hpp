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

// Triangle meshes: OBJ subset I/O, template warping through a thin-plate
// spline, and exact vertex-to-surface distance with a uniform-grid index.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/parallel.hpp"
#include "ssmkit/stats.hpp"
#include "ssmkit/tps.hpp"

namespace ssm {

struct TriangleMesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<int> degenerate_triangles;  // area < 1e-12 mm^2, flagged on load

  int vertex_count() const { return static_cast<int>(vertices.size()); }
  int triangle_count() const { return static_cast<int>(triangles.size()); }
};

namespace detail {

inline double triangle_area(const std::array<double, 3>& a, const std::array<double, 3>& b,
                            const std::array<double, 3>& c) {
  const Eigen::Vector3d ab(b[0] - a[0], b[1] - a[1], b[2] - a[2]);
  const Eigen::Vector3d ac(c[0] - a[0], c[1] - a[1], c[2] - a[2]);
  return 0.5 * ab.cross(ac).norm();
}

}  // namespace detail

inline void flag_degenerate_triangles(TriangleMesh& mesh) {
  mesh.degenerate_triangles.clear();
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    if (detail::triangle_area(mesh.vertices[tri[0]], mesh.vertices[tri[1]],
                              mesh.vertices[tri[2]]) < 1e-12) {
      mesh.degenerate_triangles.push_back(static_cast<int>(t));
    }
  }
}

// Reads the OBJ subset: `v x y z` and `f i j k ...` records (1-based
// indices, optional /texture/normal suffixes). Polygonal faces are
// triangulated fan-wise. Other record types are skipped.
inline TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open obj: " + path.string());
  TriangleMesh mesh;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream row(line);
    std::string tag;
    if (!(row >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      std::array<double, 3> p{};
      if (!(row >> p[0] >> p[1] >> p[2])) {
        throw DataError("obj " + path.string() + " line " + std::to_string(line_no) +
                        ": malformed vertex record");
      }
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> face;
      std::string token;
      while (row >> token) {
        // accept "i", "i/t", "i/t/n", "i//n"
        const std::size_t slash = token.find('/');
        const std::string head = slash == std::string::npos ? token : token.substr(0, slash);
        int idx = 0;
        try {
          idx = std::stoi(head);
        } catch (...) {
          throw DataError("obj " + path.string() + " line " + std::to_string(line_no) +
                          ": malformed face record");
        }
        if (idx < 1 || idx > static_cast<int>(mesh.vertices.size())) {
          throw DataError("obj " + path.string() + " line " + std::to_string(line_no) +
                          ": vertex index " + std::to_string(idx) + " out of range");
        }
        face.push_back(idx - 1);
      }
      if (face.size() < 3) {
        throw DataError("obj " + path.string() + " line " + std::to_string(line_no) +
                        ": face with fewer than 3 vertices");
      }
      for (std::size_t v = 1; v + 1 < face.size(); ++v) {
        mesh.triangles.push_back({face[0], face[v], face[v + 1]});
      }
    }
    // other tags ignored
  }
  flag_degenerate_triangles(mesh);
  return mesh;
}

inline void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write obj: " + path.string());
  char buf[160];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v[0], v[1], v[2]);
    out << buf;
  }
  for (const auto& t : mesh.triangles) {
    out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  }
  if (!out) throw DataError("obj write failed: " + path.string());
}

// Warps a template mesh by the TPS fitted from template correspondences to
// subject correspondences; connectivity is preserved.
inline TriangleMesh warp_mesh_tps(const TriangleMesh& tmpl, const Eigen::MatrixXd& template_corr,
                                  const Eigen::MatrixXd& subject_corr, double lambda = 0.0) {
  const TpsTransform t = fit_tps(template_corr, subject_corr, lambda);
  TriangleMesh out = tmpl;
  for (auto& v : out.vertices) v = apply_tps(t, v);
  return out;
}

// Exact Euclidean distance from p to the closed triangle (a, b, c).
// Degenerate triangles fall back to segment/point distance.
inline double point_to_triangle(const std::array<double, 3>& p0, const std::array<double, 3>& a0,
                                const std::array<double, 3>& b0, const std::array<double, 3>& c0) {
  const Eigen::Vector3d p(p0[0], p0[1], p0[2]);
  const Eigen::Vector3d a(a0[0], a0[1], a0[2]);
  const Eigen::Vector3d b(b0[0], b0[1], b0[2]);
  const Eigen::Vector3d c(c0[0], c0[1], c0[2]);

  // Closest point on triangle (Voronoi region walk).
  const Eigen::Vector3d ab = b - a;
  const Eigen::Vector3d ac = c - a;
  const Eigen::Vector3d ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return (p - a).norm();  // vertex a

  const Eigen::Vector3d bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return (p - b).norm();  // vertex b

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double denom = d1 - d3;
    const double v = denom > 0.0 ? d1 / denom : 0.0;
    return (p - (a + v * ab)).norm();  // edge ab
  }

  const Eigen::Vector3d cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return (p - c).norm();  // vertex c

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double denom = d2 - d6;
    const double w = denom > 0.0 ? d2 / denom : 0.0;
    return (p - (a + w * ac)).norm();  // edge ac
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double denom = (d4 - d3) + (d5 - d6);
    const double w = denom > 0.0 ? (d4 - d3) / denom : 0.0;
    return (p - (b + w * (c - b))).norm();  // edge bc
  }

  const double denom = va + vb + vc;
  if (denom <= 0.0 || !std::isfinite(denom)) {
    // Degenerate triangle: nearest point over the three edges.
    auto seg = [&](const Eigen::Vector3d& s, const Eigen::Vector3d& e) {
      const Eigen::Vector3d d = e - s;
      const double len_sq = d.squaredNorm();
      const double t = len_sq > 0.0 ? std::clamp((p - s).dot(d) / len_sq, 0.0, 1.0) : 0.0;
      return (p - (s + t * d)).norm();
    };
    return std::min({seg(a, b), seg(a, c), seg(b, c)});
  }
  const double v = vb / denom;
  const double w = vc / denom;
  return (p - (a + ab * v + ac * w)).norm();  // interior projection
}

namespace detail {

// Uniform grid over a mesh's triangles for exact nearest-triangle queries
// with an expanding search window.
class TriangleGrid {
 public:
  explicit TriangleGrid(const TriangleMesh& mesh, int target_cells_per_axis = 24) : mesh_(mesh) {
    if (mesh.triangles.empty()) throw DataError("surface distance: empty mesh");
    lo_ = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
           std::numeric_limits<double>::infinity()};
    hi_ = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
           -std::numeric_limits<double>::infinity()};
    for (const auto& v : mesh.vertices) {
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], v[a]);
        hi_[a] = std::max(hi_[a], v[a]);
      }
    }
    for (int a = 0; a < 3; ++a) {
      const double span = std::max(hi_[a] - lo_[a], 1e-9);
      n_[a] = std::max(1, std::min(target_cells_per_axis, static_cast<int>(mesh.triangles.size())));
      cell_[a] = span / n_[a];
    }
    cells_.assign(static_cast<std::size_t>(n_[0]) * n_[1] * n_[2], {});
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
      const auto& tri = mesh.triangles[t];
      std::array<double, 3> tlo = mesh.vertices[tri[0]], thi = mesh.vertices[tri[0]];
      for (int corner = 1; corner < 3; ++corner) {
        for (int a = 0; a < 3; ++a) {
          tlo[a] = std::min(tlo[a], mesh.vertices[tri[corner]][a]);
          thi[a] = std::max(thi[a], mesh.vertices[tri[corner]][a]);
        }
      }
      std::array<int, 3> clo, chi;
      for (int a = 0; a < 3; ++a) {
        clo[a] = cell_index(tlo[a], a);
        chi[a] = cell_index(thi[a], a);
      }
      for (int z = clo[2]; z <= chi[2]; ++z) {
        for (int y = clo[1]; y <= chi[1]; ++y) {
          for (int x = clo[0]; x <= chi[0]; ++x) {
            cells_[flat(x, y, z)].push_back(static_cast<int>(t));
          }
        }
      }
    }
    visited_.assign(mesh.triangles.size(), -1);
  }

  // Exact min distance from p to any triangle of the mesh.
  double query(const std::array<double, 3>& p) {
    ++query_id_;
    double best = std::numeric_limits<double>::infinity();
    const std::array<int, 3> home = {cell_index(p[0], 0), cell_index(p[1], 1),
                                     cell_index(p[2], 2)};
    const int max_ring = std::max({n_[0], n_[1], n_[2]});
    for (int ring = 0; ring <= max_ring; ++ring) {
      if (best < ring_lower_bound(p, home, ring)) break;
      scan_ring(p, home, ring, best);
    }
    return best;
  }

 private:
  const TriangleMesh& mesh_;
  std::array<double, 3> lo_{}, hi_{};
  std::array<int, 3> n_{};
  std::array<double, 3> cell_{};
  std::vector<std::vector<int>> cells_;
  std::vector<int> visited_;
  int query_id_ = 0;

  std::size_t flat(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(n_[0]) * (static_cast<std::size_t>(y) +
                                              static_cast<std::size_t>(n_[1]) * z);
  }

  int cell_index(double value, int axis) const {
    const int idx = static_cast<int>(std::floor((value - lo_[axis]) / cell_[axis]));
    return std::clamp(idx, 0, n_[axis] - 1);
  }

  // Lower bound on the distance from p to any cell not yet scanned after
  // completing rings 0..ring-1: distance from p to the boundary of the
  // scanned axis-aligned box.
  double ring_lower_bound(const std::array<double, 3>& p, const std::array<int, 3>& home,
                          int ring) const {
    if (ring == 0) return 0.0;
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double box_lo = lo_[a] + (home[a] - ring + 1) * cell_[a];
      const double box_hi = lo_[a] + (home[a] + ring) * cell_[a];
      bound = std::min(bound, p[a] - box_lo);
      bound = std::min(bound, box_hi - p[a]);
    }
    return std::max(bound, 0.0);
  }

  void scan_ring(const std::array<double, 3>& p, const std::array<int, 3>& home, int ring,
                 double& best) {
    const int x0 = home[0] - ring, x1 = home[0] + ring;
    const int y0 = home[1] - ring, y1 = home[1] + ring;
    const int z0 = home[2] - ring, z1 = home[2] + ring;
    for (int z = z0; z <= z1; ++z) {
      if (z < 0 || z >= n_[2]) continue;
      for (int y = y0; y <= y1; ++y) {
        if (y < 0 || y >= n_[1]) continue;
        for (int x = x0; x <= x1; ++x) {
          if (x < 0 || x >= n_[0]) continue;
          const bool shell = (x == x0 || x == x1 || y == y0 || y == y1 || z == z0 || z == z1);
          if (!shell) continue;
          for (int t : cells_[flat(x, y, z)]) {
            if (visited_[t] == query_id_) continue;
            visited_[t] = query_id_;
            const auto& tri = mesh_.triangles[t];
            best = std::min(best, point_to_triangle(p, mesh_.vertices[tri[0]],
                                                    mesh_.vertices[tri[1]],
                                                    mesh_.vertices[tri[2]]));
          }
        }
      }
    }
  }
};

}  // namespace detail

struct SurfaceDistanceResult {
  std::vector<double> forward;   // per vertex of A: min distance to surface B
  std::vector<double> reverse;   // per vertex of B (symmetric mode only)
  BoxStats forward_stats;
  BoxStats reverse_stats;        // symmetric mode only
  double max_of_means = 0.0;
};

// Vertex-to-surface distances from A to B (and B to A in symmetric mode).
// The grid index preserves exactness: results equal the brute-force
// minimum over all triangles.
inline SurfaceDistanceResult surface_distance(const TriangleMesh& a, const TriangleMesh& b,
                                              bool symmetric = false, int threads = 1) {
  if (a.vertices.empty() || b.vertices.empty()) throw DataError("surface distance: empty mesh");
  SurfaceDistanceResult result;
  auto one_sided = [&](const TriangleMesh& from, const TriangleMesh& to) {
    std::vector<double> out(from.vertices.size());
    const int workers = effective_threads(threads);
    if (workers == 1) {
      detail::TriangleGrid grid(to);
      for (std::size_t i = 0; i < from.vertices.size(); ++i) out[i] = grid.query(from.vertices[i]);
    } else {
      // One grid per worker: queries mutate the visit stamps.
      parallel_for(static_cast<std::size_t>(workers), workers, [&](std::size_t w) {
        detail::TriangleGrid grid(to);
        for (std::size_t i = w; i < from.vertices.size(); i += static_cast<std::size_t>(workers)) {
          out[i] = grid.query(from.vertices[i]);
        }
      });
    }
    return out;
  };
  result.forward = one_sided(a, b);
  result.forward_stats = box_stats(result.forward);
  result.max_of_means = result.forward_stats.mean;
  if (symmetric) {
    result.reverse = one_sided(b, a);
    result.reverse_stats = box_stats(result.reverse);
    result.max_of_means = std::max(result.forward_stats.mean, result.reverse_stats.mean);
  }
  return result;
}

}  // namespace ssm
