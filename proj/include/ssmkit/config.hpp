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

// Single-file JSON pipeline configuration. Every numeric default is
// overridable; out_dir and threads are execution environment and are kept
// out of the reproducibility snapshot recorded in run manifests.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "ssmkit/errors.hpp"
#include "ssmkit/synthetic.hpp"

#include <nlohmann/json.hpp>

namespace ssm {

struct PipelineConfig {
  // execution environment (excluded from the manifest snapshot)
  std::filesystem::path out_dir = "out";
  int threads = 1;

  std::uint64_t seed = 42;

  struct Inputs {
    // Either synth.enabled below, or these three point at an ingested
    // population of particle files, volumes, and labels.
    std::string particles_dir;
    std::string volumes_dir;
    std::string labels_csv;
    std::string template_mesh;       // optional template OBJ override
    std::string template_particles;  // optional template landmarks override
  } inputs;

  struct Synth {
    bool enabled = true;
    SyntheticPopulationSpec spec;
  } synth;

  double variance_threshold = 0.95;

  struct Gmm {
    int k_min = 1;
    int k_max = 6;
    int restarts = 5;
    double reg_scale = 1e-6;
    int max_iter = 200;
    double tol = 1e-7;
  } gmm;

  struct Augment {
    int count = 5000;
    double tps_lambda = 0.0;
  } augment;

  struct Train {
    int epochs = 240;
    double learning_rate = 0.01;
    int batch_size = 16;
    double adagrad_epsilon = 1e-8;
    bool whiten_targets = true;
    double input_scale = 0.01;
  } train;

  struct Recurrence {
    int epochs = 500;
    double learning_rate = 0.05;
    int batch_size = 16;
    int hidden = 16;
  } recurrence;

  int train_count = 175;  // first train_count shapes train; the rest are held out

  struct Evaluate {
    double tost_lower = -0.06;
    double tost_upper = 0.06;
    double alpha = 0.05;
    double voxel_spacing_mm = 2.0;
  } evaluate;

  void validate() const {
    if (variance_threshold <= 0.0 || variance_threshold > 1.0) {
      throw ConfigError("config: shape_space.variance_threshold must be in (0, 1]");
    }
    if (train_count < 2) throw ConfigError("config: split.train_count must be >= 2");
    if (gmm.k_min < 1 || gmm.k_max < gmm.k_min) throw ConfigError("config: bad gmm k range");
    if (augment.count < 1) throw ConfigError("config: augment.count must be >= 1");
    if (train.epochs < 1 || recurrence.epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (train.batch_size < 1 || recurrence.batch_size < 1) {
      throw ConfigError("config: batch_size must be >= 1");
    }
    if (!(evaluate.tost_lower < evaluate.tost_upper)) {
      throw ConfigError("config: evaluate.tost bounds must satisfy lower < upper");
    }
    if (evaluate.alpha <= 0.0 || evaluate.alpha >= 1.0) {
      throw ConfigError("config: evaluate.alpha must be in (0, 1)");
    }
    if (synth.enabled) {
      synth.spec.validate();
      if (train_count >= synth.spec.count) {
        throw ConfigError("config: split.train_count must leave a nonempty holdout");
      }
    } else if (inputs.particles_dir.empty() || inputs.volumes_dir.empty()) {
      throw ConfigError("config: either synth.enabled or inputs.{particles_dir,volumes_dir}");
    }
  }
};

namespace detail {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Serializes the config. With include_execution = false the out_dir and
// threads fields are omitted — that form is the manifest snapshot, so two
// runs of the same experiment in different directories compare equal.
inline nlohmann::ordered_json config_to_json(const PipelineConfig& c,
                                             bool include_execution = true) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  if (include_execution) {
    j["out_dir"] = c.out_dir.generic_string();
    j["threads"] = c.threads;
  }
  j["seed"] = c.seed;
  j["inputs"] = {{"particles_dir", c.inputs.particles_dir},
                 {"volumes_dir", c.inputs.volumes_dir},
                 {"labels_csv", c.inputs.labels_csv},
                 {"template_mesh", c.inputs.template_mesh},
                 {"template_particles", c.inputs.template_particles}};
  j["synth"] = {{"enabled", c.synth.enabled},
                {"count", c.synth.spec.count},
                {"latent_dim", c.synth.spec.latent_dim},
                {"grid_dims", c.synth.spec.grid_dims},
                {"spacing", c.synth.spec.spacing},
                {"landmark_count", c.synth.spec.landmark_count},
                {"intensity_noise", c.synth.spec.intensity_noise},
                {"label_noise", c.synth.spec.label_noise},
                {"base_radius_mm", c.synth.spec.base_radius_mm},
                {"size_amp_mm", c.synth.spec.size_amp_mm},
                {"axis_amp_mm", c.synth.spec.axis_amp_mm},
                {"quad_amp_mm", c.synth.spec.quad_amp_mm}};
  j["shape_space"] = {{"variance_threshold", c.variance_threshold}};
  j["gmm"] = {{"k_min", c.gmm.k_min},       {"k_max", c.gmm.k_max},
              {"restarts", c.gmm.restarts}, {"reg_scale", c.gmm.reg_scale},
              {"max_iter", c.gmm.max_iter}, {"tol", c.gmm.tol}};
  j["augment"] = {{"count", c.augment.count}, {"tps_lambda", c.augment.tps_lambda}};
  j["train"] = {{"epochs", c.train.epochs},
                {"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"adagrad_epsilon", c.train.adagrad_epsilon},
                {"whiten_targets", c.train.whiten_targets},
                {"input_scale", c.train.input_scale}};
  j["recurrence"] = {{"epochs", c.recurrence.epochs},
                     {"learning_rate", c.recurrence.learning_rate},
                     {"batch_size", c.recurrence.batch_size},
                     {"hidden", c.recurrence.hidden}};
  j["split"] = {{"train_count", c.train_count}};
  j["evaluate"] = {{"tost_lower", c.evaluate.tost_lower},
                   {"tost_upper", c.evaluate.tost_upper},
                   {"alpha", c.evaluate.alpha},
                   {"voxel_spacing_mm", c.evaluate.voxel_spacing_mm}};
  return j;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1) throw ConfigError("config: unsupported format_version");
  PipelineConfig c;
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  detail::maybe(j, "threads", c.threads);
  detail::maybe(j, "seed", c.seed);
  if (j.contains("inputs")) {
    const auto& i = j.at("inputs");
    detail::maybe(i, "particles_dir", c.inputs.particles_dir);
    detail::maybe(i, "volumes_dir", c.inputs.volumes_dir);
    detail::maybe(i, "labels_csv", c.inputs.labels_csv);
    detail::maybe(i, "template_mesh", c.inputs.template_mesh);
    detail::maybe(i, "template_particles", c.inputs.template_particles);
  }
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    detail::maybe(s, "enabled", c.synth.enabled);
    detail::maybe(s, "count", c.synth.spec.count);
    detail::maybe(s, "latent_dim", c.synth.spec.latent_dim);
    detail::maybe(s, "grid_dims", c.synth.spec.grid_dims);
    detail::maybe(s, "spacing", c.synth.spec.spacing);
    detail::maybe(s, "landmark_count", c.synth.spec.landmark_count);
    detail::maybe(s, "intensity_noise", c.synth.spec.intensity_noise);
    detail::maybe(s, "label_noise", c.synth.spec.label_noise);
    detail::maybe(s, "base_radius_mm", c.synth.spec.base_radius_mm);
    detail::maybe(s, "size_amp_mm", c.synth.spec.size_amp_mm);
    detail::maybe(s, "axis_amp_mm", c.synth.spec.axis_amp_mm);
    detail::maybe(s, "quad_amp_mm", c.synth.spec.quad_amp_mm);
  }
  if (j.contains("shape_space")) {
    detail::maybe(j.at("shape_space"), "variance_threshold", c.variance_threshold);
  }
  if (j.contains("gmm")) {
    const auto& g = j.at("gmm");
    detail::maybe(g, "k_min", c.gmm.k_min);
    detail::maybe(g, "k_max", c.gmm.k_max);
    detail::maybe(g, "restarts", c.gmm.restarts);
    detail::maybe(g, "reg_scale", c.gmm.reg_scale);
    detail::maybe(g, "max_iter", c.gmm.max_iter);
    detail::maybe(g, "tol", c.gmm.tol);
  }
  if (j.contains("augment")) {
    detail::maybe(j.at("augment"), "count", c.augment.count);
    detail::maybe(j.at("augment"), "tps_lambda", c.augment.tps_lambda);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::maybe(t, "epochs", c.train.epochs);
    detail::maybe(t, "learning_rate", c.train.learning_rate);
    detail::maybe(t, "batch_size", c.train.batch_size);
    detail::maybe(t, "adagrad_epsilon", c.train.adagrad_epsilon);
    detail::maybe(t, "whiten_targets", c.train.whiten_targets);
    detail::maybe(t, "input_scale", c.train.input_scale);
  }
  if (j.contains("recurrence")) {
    const auto& r = j.at("recurrence");
    detail::maybe(r, "epochs", c.recurrence.epochs);
    detail::maybe(r, "learning_rate", c.recurrence.learning_rate);
    detail::maybe(r, "batch_size", c.recurrence.batch_size);
    detail::maybe(r, "hidden", c.recurrence.hidden);
  }
  if (j.contains("split")) detail::maybe(j.at("split"), "train_count", c.train_count);
  if (j.contains("evaluate")) {
    const auto& e = j.at("evaluate");
    detail::maybe(e, "tost_lower", c.evaluate.tost_lower);
    detail::maybe(e, "tost_upper", c.evaluate.tost_upper);
    detail::maybe(e, "alpha", c.evaluate.alpha);
    detail::maybe(e, "voxel_spacing_mm", c.evaluate.voxel_spacing_mm);
  }
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }
  return config_from_json(j);
}

}  // namespace ssm
