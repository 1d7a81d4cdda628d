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

// Shape-space data augmentation: sample statistically feasible loadings
// from the mixture model, reconstruct their correspondences, and pull the
// nearest original's volume through a thin-plate-spline warp to obtain a
// paired image for each generated shape.

#include <Eigen/Dense>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/gmm.hpp"
#include "ssmkit/parallel.hpp"
#include "ssmkit/rng.hpp"
#include "ssmkit/shape_space.hpp"
#include "ssmkit/tps.hpp"
#include "ssmkit/volume.hpp"

#include <nlohmann/json.hpp>

namespace ssm {

struct AugmentedSample {
  Eigen::VectorXd loadings;
  int nearest_index = 0;  // original shape supplying the warped volume
  int component = 0;      // mixture component the loadings were drawn from
  std::filesystem::path volume_path;
};

struct AugmentOptions {
  int count = 5000;
  std::uint64_t seed = 0;
  double tps_lambda = 0.0;
  int threads = 1;
  int max_attempts = 16;  // resample budget per sample on singular warps
};

// Generates `count` augmented samples into out_dir/sample_#####.mhd.
// Per-sample seeds derive from seed ^ sample-index, so processing order
// and thread count do not affect the output. Samples whose TPS system is
// singular are skipped and resampled from the same stream; warn(message)
// is invoked for each skip.
inline std::vector<AugmentedSample> generate_augmented(
    const ShapeSpace& space, const GmmModel& gmm, const CorrespondenceSet& originals,
    const Eigen::MatrixXd& original_loadings, const std::vector<Volume>& original_volumes,
    const AugmentOptions& opts, const std::filesystem::path& out_dir,
    const std::function<void(const std::string&)>& warn = {}) {
  if (opts.count < 1) throw ConfigError("generate_augmented: count must be >= 1");
  originals.validate();
  if (original_loadings.rows() != originals.shape_count()) {
    throw DataError("generate_augmented: loading matrix rows do not match originals");
  }
  if (static_cast<int>(original_volumes.size()) != originals.shape_count()) {
    throw DataError("generate_augmented: volume count does not match originals");
  }
  if (original_loadings.cols() != space.mode_count() || gmm.dim() != space.mode_count()) {
    throw DataError("generate_augmented: loading dimension mismatch");
  }
  std::filesystem::create_directories(out_dir);

  const int k = gmm.component_count();
  std::vector<Eigen::MatrixXd> factors(k);
  for (int c = 0; c < k; ++c) factors[c] = detail::sampling_factor(gmm.covariances[c]);

  std::vector<AugmentedSample> samples(static_cast<std::size_t>(opts.count));
  std::mutex warn_mutex;
  parallel_for(static_cast<std::size_t>(opts.count), opts.threads, [&](std::size_t index) {
    Rng rng(opts.seed ^ static_cast<std::uint64_t>(index));
    const int K = space.mode_count();
    Eigen::VectorXd z(K);
    for (int attempt = 0;; ++attempt) {
      if (attempt >= opts.max_attempts) {
        throw NumericError("generate_augmented: sample " + std::to_string(index) +
                           " kept hitting singular warps");
      }
      const double u = rng.uniform01();
      int c = 0;
      double cum = 0.0;
      for (; c < k - 1; ++c) {
        cum += gmm.weights[c];
        if (u < cum) break;
      }
      for (int d = 0; d < K; ++d) z[d] = rng.normal();
      const Eigen::VectorXd loadings = gmm.means.row(c).transpose() + factors[c] * z;

      const Eigen::VectorXd generated_shape = reconstruct(space, loadings);
      const int nearest = nearest_original(loadings, original_loadings);
      const Eigen::MatrixXd generated_landmarks = to_landmark_matrix(generated_shape);
      const Eigen::MatrixXd original_landmarks =
          to_landmark_matrix(originals.points.row(nearest).transpose());

      TpsTransform warp;
      try {
        // new -> original map: pull intensities from the original image
        warp = fit_tps(generated_landmarks, original_landmarks, opts.tps_lambda);
      } catch (const NumericError& e) {
        if (warn) {
          std::lock_guard<std::mutex> lock(warn_mutex);
          warn("sample " + std::to_string(index) + " attempt " + std::to_string(attempt) +
               ": " + e.what() + "; resampling");
        }
        continue;
      }
      const Volume& source = original_volumes[static_cast<std::size_t>(nearest)];
      const Volume warped =
          warp_volume(source, warp, GridSpec::like(source), OutsidePolicy::constant(0.0), 1);

      char name[64];
      std::snprintf(name, sizeof(name), "sample_%05zu.mhd", index);
      const std::filesystem::path volume_path = out_dir / name;
      write_metaimage(warped, volume_path);

      AugmentedSample& sample = samples[index];
      sample.loadings = loadings;
      sample.nearest_index = nearest;
      sample.component = c;
      sample.volume_path = volume_path;
      break;
    }
  });
  return samples;
}

// JSON-lines manifest, one record per sample; volume paths are stored
// relative to the manifest's directory.
inline void write_augment_manifest(const std::vector<AugmentedSample>& samples,
                                   const std::filesystem::path& manifest_path) {
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw DataError("cannot write augment manifest: " + manifest_path.string());
  const std::filesystem::path base = manifest_path.parent_path();
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["loadings"] = std::vector<double>(s.loadings.data(), s.loadings.data() + s.loadings.size());
    j["nearest"] = s.nearest_index;
    j["volume"] = std::filesystem::relative(s.volume_path, base).generic_string();
    j["component"] = s.component;
    out << j.dump() << "\n";
  }
  if (!out) throw DataError("augment manifest write failed: " + manifest_path.string());
}

inline std::vector<AugmentedSample> read_augment_manifest(
    const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open augment manifest: " + manifest_path.string());
  const std::filesystem::path base = manifest_path.parent_path();
  std::vector<AugmentedSample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("augment manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    AugmentedSample s;
    const auto loadings = j.at("loadings").get<std::vector<double>>();
    s.loadings = Eigen::Map<const Eigen::VectorXd>(loadings.data(),
                                                   static_cast<Eigen::Index>(loadings.size()));
    s.nearest_index = j.at("nearest").get<int>();
    s.component = j.value("component", 0);
    s.volume_path = base / j.at("volume").get<std::string>();
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace ssm
