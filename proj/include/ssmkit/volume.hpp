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

// Axis-aligned 3D scalar image with physical spacing and origin, trilinear
// sampling in physical space, and a MetaImage (.mhd + .raw) subset reader
// and writer with a float32 little-endian payload.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"

namespace ssm {

struct Volume {
  std::array<int, 3> dims{0, 0, 0};          // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm, center of voxel (0,0,0)
  std::vector<float> data;                   // x-fastest layout

  static Volume zeros(std::array<int, 3> dims, std::array<double, 3> spacing,
                      std::array<double, 3> origin) {
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    v.origin = origin;
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw ConfigError("volume dims must be positive");
    v.data.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], 0.0f);
    return v;
  }

  std::size_t voxel_count() const { return data.size(); }

  std::size_t index_of(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) +
                                                static_cast<std::size_t>(dims[1]) * k);
  }

  float at(int i, int j, int k) const { return data[index_of(i, j, k)]; }
  float& at(int i, int j, int k) { return data[index_of(i, j, k)]; }

  std::array<double, 3> index_to_physical(double i, double j, double k) const {
    return {origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + k * spacing[2]};
  }

  std::array<double, 3> physical_to_index(const std::array<double, 3>& p) const {
    return {(p[0] - origin[0]) / spacing[0], (p[1] - origin[1]) / spacing[1],
            (p[2] - origin[2]) / spacing[2]};
  }
};

struct OutsidePolicy {
  enum class Mode { constant, clamp };
  Mode mode = Mode::constant;
  double value = 0.0;

  static OutsidePolicy constant(double v) { return {Mode::constant, v}; }
  static OutsidePolicy clamp() { return {Mode::clamp, 0.0}; }
};

// Trilinear interpolation at a physical point. The policy applies when the
// continuous index leaves [0, n-1]^3; sampling is exact at voxel centers.
// A hair of slack (1e-9 voxels) keeps points that land exactly on the
// boundary through rounded transforms inside.
inline double sample_trilinear(const Volume& v, const std::array<double, 3>& p_mm,
                               const OutsidePolicy& outside = OutsidePolicy::constant(0.0)) {
  constexpr double kBoundarySlack = 1e-9;
  std::array<double, 3> u = v.physical_to_index(p_mm);
  for (int a = 0; a < 3; ++a) {
    const double hi = static_cast<double>(v.dims[a] - 1);
    if (u[a] < -kBoundarySlack || u[a] > hi + kBoundarySlack) {
      if (outside.mode == OutsidePolicy::Mode::constant) return outside.value;
    }
    u[a] = std::clamp(u[a], 0.0, hi);
  }
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const int hi = v.dims[a] - 1;
    int cell = static_cast<int>(std::floor(u[a]));
    cell = std::clamp(cell, 0, hi > 0 ? hi - 1 : 0);
    i0[a] = cell;
    f[a] = hi > 0 ? u[a] - cell : 0.0;
  }
  const int dx = v.dims[0] > 1 ? 1 : 0;
  const int dy = v.dims[1] > 1 ? 1 : 0;
  const int dz = v.dims[2] > 1 ? 1 : 0;
  const double c000 = v.at(i0[0], i0[1], i0[2]);
  const double c100 = v.at(i0[0] + dx, i0[1], i0[2]);
  const double c010 = v.at(i0[0], i0[1] + dy, i0[2]);
  const double c110 = v.at(i0[0] + dx, i0[1] + dy, i0[2]);
  const double c001 = v.at(i0[0], i0[1], i0[2] + dz);
  const double c101 = v.at(i0[0] + dx, i0[1], i0[2] + dz);
  const double c011 = v.at(i0[0], i0[1] + dy, i0[2] + dz);
  const double c111 = v.at(i0[0] + dx, i0[1] + dy, i0[2] + dz);
  const double x0 = 1.0 - f[0], y0 = 1.0 - f[1], z0 = 1.0 - f[2];
  return z0 * (y0 * (x0 * c000 + f[0] * c100) + f[1] * (x0 * c010 + f[0] * c110)) +
         f[2] * (y0 * (x0 * c001 + f[0] * c101) + f[1] * (x0 * c011 + f[0] * c111));
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

template <typename T, std::size_t N>
std::array<T, N> parse_triple(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!(in >> out[i])) throw DataError("metaimage: cannot parse " + key + ": " + text);
  }
  T extra;
  if (in >> extra) throw DataError("metaimage: too many values for " + key + ": " + text);
  return out;
}

}  // namespace detail

// Reads the MetaImage subset: 3D MET_FLOAT, little-endian raw payload.
inline Volume read_metaimage(const std::filesystem::path& header_path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::ifstream in(header_path);
  if (!in) throw DataError("metaimage: cannot open header: " + header_path.string());
  std::map<std::string, std::string> fields;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("metaimage: malformed header line: " + line);
    fields[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  auto require = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw DataError("metaimage: missing header key: " + key);
    return it->second;
  };
  if (require("ObjectType") != "Image") throw DataError("metaimage: ObjectType must be Image");
  if (require("NDims") != "3") throw DataError("metaimage: NDims must be 3");
  if (require("ElementType") != "MET_FLOAT") {
    throw DataError("metaimage: unsupported element type: " + fields["ElementType"]);
  }
  if (require("ElementByteOrderMSB") != "False") {
    throw DataError("metaimage: big-endian payloads are not supported");
  }
  Volume v;
  v.dims = detail::parse_triple<int, 3>(require("DimSize"), "DimSize");
  v.spacing = detail::parse_triple<double, 3>(require("ElementSpacing"), "ElementSpacing");
  v.origin = detail::parse_triple<double, 3>(require("Offset"), "Offset");
  if (v.dims[0] <= 0 || v.dims[1] <= 0 || v.dims[2] <= 0) {
    throw DataError("metaimage: DimSize entries must be positive");
  }
  if (v.spacing[0] <= 0 || v.spacing[1] <= 0 || v.spacing[2] <= 0) {
    throw DataError("metaimage: ElementSpacing entries must be positive");
  }
  const std::filesystem::path raw_path = header_path.parent_path() / require("ElementDataFile");
  std::ifstream raw(raw_path, std::ios::binary | std::ios::ate);
  if (!raw) throw DataError("metaimage: missing raw file: " + raw_path.string());
  const std::size_t expected =
      static_cast<std::size_t>(v.dims[0]) * v.dims[1] * v.dims[2] * sizeof(float);
  const auto actual = static_cast<std::size_t>(raw.tellg());
  if (actual != expected) {
    throw DataError("metaimage: payload size mismatch: expected " + std::to_string(expected) +
                    " bytes, raw file has " + std::to_string(actual));
  }
  raw.seekg(0);
  v.data.resize(expected / sizeof(float));
  raw.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(expected));
  if (!raw) throw DataError("metaimage: short read on raw file: " + raw_path.string());
  return v;
}

inline void write_metaimage(const Volume& v, const std::filesystem::path& header_path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  const std::size_t expected = static_cast<std::size_t>(v.dims[0]) * v.dims[1] * v.dims[2];
  if (v.data.size() != expected) throw DataError("metaimage: intensity count does not match dims");
  std::filesystem::path raw_path = header_path;
  raw_path.replace_extension(".raw");
  std::ofstream header(header_path, std::ios::trunc);
  if (!header) throw DataError("metaimage: cannot write header: " + header_path.string());
  char buf[256];
  header << "ObjectType = Image\n"
         << "NDims = 3\n";
  std::snprintf(buf, sizeof(buf), "DimSize = %d %d %d\n", v.dims[0], v.dims[1], v.dims[2]);
  header << buf;
  std::snprintf(buf, sizeof(buf), "ElementSpacing = %.17g %.17g %.17g\n", v.spacing[0],
                v.spacing[1], v.spacing[2]);
  header << buf;
  std::snprintf(buf, sizeof(buf), "Offset = %.17g %.17g %.17g\n", v.origin[0], v.origin[1],
                v.origin[2]);
  header << buf;
  header << "ElementType = MET_FLOAT\n"
         << "ElementByteOrderMSB = False\n"
         << "ElementDataFile = " << raw_path.filename().string() << "\n";
  if (!header) throw DataError("metaimage: write failed: " + header_path.string());
  header.close();
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  if (!raw) throw DataError("metaimage: cannot write raw file: " + raw_path.string());
  raw.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (!raw) throw DataError("metaimage: raw write failed: " + raw_path.string());
}

}  // namespace ssm
