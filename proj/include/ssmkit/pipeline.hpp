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

// Pipeline orchestration: the standard-path analog (correspondences ->
// shape space -> statistics) and the trained-network path (volume ->
// loadings -> correspondences -> mesh), staged with a digest-based run
// manifest so completed stages are skipped on re-runs.

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ssmkit/augment.hpp"
#include "ssmkit/config.hpp"
#include "ssmkit/digest.hpp"
#include "ssmkit/errors.hpp"
#include "ssmkit/gmm.hpp"
#include "ssmkit/mesh.hpp"
#include "ssmkit/nn.hpp"
#include "ssmkit/parallel.hpp"
#include "ssmkit/shape_space.hpp"
#include "ssmkit/stats.hpp"
#include "ssmkit/synthetic.hpp"
#include "ssmkit/tps.hpp"
#include "ssmkit/train.hpp"
#include "ssmkit/volume.hpp"

#include <nlohmann/json.hpp>

namespace ssm {

namespace detail {

inline void write_matrix_csv(const Eigen::MatrixXd& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write csv: " + path.string());
  char buf[64];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      out << buf << (j + 1 < m.cols() ? "," : "");
    }
    out << "\n";
  }
  if (!out) throw DataError("csv write failed: " + path.string());
}

inline Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open csv: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t comma = line.find(',', pos);
      const std::string token =
          line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      try {
        row.push_back(std::stod(token));
      } catch (...) {
        throw DataError("csv parse error in " + path.string() + ": '" + token + "'");
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError("csv has ragged rows: " + path.string());
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("csv is empty: " + path.string());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

inline void write_labels_csv(const std::vector<int>& labels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write labels: " + path.string());
  out << "index,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) out << i << "," << labels[i] << "\n";
}

inline std::vector<int> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open labels: " + path.string());
  std::vector<int> labels;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {  // header
      first = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("labels csv: malformed line: " + line);
    labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  return labels;
}

inline nlohmann::ordered_json box_stats_to_json(const BoxStats& s) {
  return {{"min", s.min}, {"q1", s.q1},   {"median", s.median},
          {"q3", s.q3},   {"max", s.max}, {"mean", s.mean}};
}

inline void append_boxplot_row(std::ofstream& out, const std::string& group, const BoxStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", group.c_str(), s.min,
                s.q1, s.median, s.q3, s.max, s.mean);
  out << buf;
}

inline nlohmann::ordered_json hotelling_to_json(const HotellingResult& r, double alpha) {
  return {{"t_squared", r.t_squared},
          {"f_statistic", r.f_statistic},
          {"dof", {r.dof1, r.dof2}},
          {"p_value", r.p_value},
          {"confidence", 1.0 - r.p_value},
          {"n", r.n},
          {"p", r.p},
          {"significant", r.p_value < alpha},
          {"verdict", r.p_value < alpha ? "significant" : "not significant"}};
}

inline nlohmann::ordered_json tost_to_json(const EquivalenceResult& r) {
  return {{"mean_diff", r.mean_diff},
          {"bounds", {r.lower, r.upper}},
          {"t_lower", r.t_lower},
          {"t_upper", r.t_upper},
          {"p_lower", r.p_lower},
          {"p_upper", r.p_upper},
          {"alpha", r.alpha},
          {"n", r.n},
          {"equivalent", r.equivalent}};
}

}  // namespace detail

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg, std::ostream* log = &std::cout)
      : cfg_(std::move(cfg)), out_(cfg_.out_dir), log_(log) {
    cfg_.validate();
    std::filesystem::create_directories(out_);
    load_manifest();
  }

  static const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {
        "population",      "shape_space",     "gmm",
        "augment",         "train_regressor", "predict",
        "recurrence",      "evaluate_loadings", "evaluate_points",
        "evaluate_surface", "evaluate_recurrence"};
    return names;
  }

  void run_all() {
    for (const auto& name : stage_names()) run_stage(name);
  }

  void run_stage(const std::string& name) {
    if (stage_current(name)) {
      log("stage " + name + ": up to date, skipping");
      return;
    }
    log("stage " + name + ": running");
    std::vector<std::filesystem::path> outputs;
    if (name == "population") outputs = stage_population();
    else if (name == "shape_space") outputs = stage_shape_space();
    else if (name == "gmm") outputs = stage_gmm();
    else if (name == "augment") outputs = stage_augment();
    else if (name == "train_regressor") outputs = stage_train_regressor();
    else if (name == "predict") outputs = stage_predict();
    else if (name == "recurrence") outputs = stage_recurrence();
    else if (name == "evaluate_loadings") outputs = stage_evaluate_loadings();
    else if (name == "evaluate_points") outputs = stage_evaluate_points();
    else if (name == "evaluate_surface") outputs = stage_evaluate_surface();
    else if (name == "evaluate_recurrence") outputs = stage_evaluate_recurrence();
    else throw ConfigError("unknown stage: " + name);
    record_stage(name, outputs);
    log("stage " + name + ": done (" + std::to_string(outputs.size()) + " artifacts)");
  }

  const PipelineConfig& config() const { return cfg_; }
  std::filesystem::path manifest_path() const { return out_ / "manifest.json"; }

 private:
  PipelineConfig cfg_;
  std::filesystem::path out_;
  nlohmann::ordered_json manifest_;
  std::ostream* log_ = nullptr;

  void log(const std::string& message) const {
    if (log_ != nullptr) (*log_) << "ssmkit: " << message << std::endl;
  }

  void load_manifest() {
    manifest_ = nlohmann::ordered_json::object();
    manifest_["format_version"] = 1;
    manifest_["config"] = config_to_json(cfg_, /*include_execution=*/false);
    manifest_["stages"] = nlohmann::ordered_json::object();
    const auto path = manifest_path();
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    nlohmann::json existing;
    try {
      in >> existing;
    } catch (const nlohmann::json::exception&) {
      log("manifest unreadable; starting fresh");
      return;
    }
    if (existing.value("format_version", 0) != 1) return;
    const nlohmann::json previous_config = existing.value("config", nlohmann::json::object());
    const nlohmann::json current_config = manifest_["config"];
    if (previous_config != current_config) {
      log("config changed; previous stage records invalidated");
      return;
    }
    if (existing.contains("stages")) manifest_["stages"] = existing["stages"];
  }

  void save_manifest() {
    // Canonical stage order keeps re-run manifests byte-identical.
    nlohmann::ordered_json ordered = nlohmann::ordered_json::object();
    for (const auto& name : stage_names()) {
      if (manifest_["stages"].contains(name)) ordered[name] = manifest_["stages"][name];
    }
    manifest_["stages"] = ordered;
    const auto tmp = manifest_path().string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw DataError("cannot write manifest: " + tmp);
      out << manifest_.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, manifest_path());
  }

  bool stage_current(const std::string& name) const {
    if (!manifest_["stages"].contains(name)) return false;
    const auto& record = manifest_["stages"][name];
    if (!record.contains("outputs")) return false;
    for (const auto& entry : record["outputs"]) {
      const std::filesystem::path rel = entry.at("path").get<std::string>();
      const auto full = out_ / rel;
      if (!std::filesystem::exists(full)) return false;
      if (sha256_file(full) != entry.at("sha256").get<std::string>()) return false;
    }
    return true;
  }

  void record_stage(const std::string& name, const std::vector<std::filesystem::path>& outputs) {
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto& rel : outputs) {
      list.push_back({{"path", rel.generic_string()}, {"sha256", sha256_file(out_ / rel)}});
    }
    manifest_["stages"][name] = {{"outputs", list}};
    save_manifest();
  }

  // --- artifact paths (relative to out_) ---------------------------------

  static std::string shape_name(const char* stem, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04d%s", stem, i, ext);
    return buf;
  }

  std::filesystem::path particles_rel(int i) const {
    return std::filesystem::path("population/particles") / shape_name("shape", i, ".particles");
  }
  std::filesystem::path volume_rel(int i) const {
    return std::filesystem::path("population/volumes") / shape_name("shape", i, ".mhd");
  }
  std::filesystem::path gt_mesh_rel(int i) const {
    return std::filesystem::path("population/gt_meshes") / shape_name("shape", i, ".obj");
  }
  std::filesystem::path pred_particles_rel(int i) const {
    return std::filesystem::path("predictions/particles") / shape_name("shape", i, ".particles");
  }
  std::filesystem::path pred_mesh_rel(int i) const {
    return std::filesystem::path("predictions/meshes") / shape_name("shape", i, ".obj");
  }

  void require(const std::filesystem::path& rel, const std::string& producer) const {
    if (!std::filesystem::exists(out_ / rel)) {
      throw DataError("missing artifact " + rel.generic_string() + "; run the " + producer +
                      " stage first");
    }
  }

  int population_count() const {
    const auto path = out_ / "population/index.json";
    require("population/index.json", "population");
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    return j.at("count").get<int>();
  }

  CorrespondenceSet load_population_correspondences(int first, int count) const {
    std::vector<std::filesystem::path> paths;
    for (int i = first; i < first + count; ++i) {
      require(particles_rel(i), "population");
      paths.push_back(out_ / particles_rel(i));
    }
    return load_particles(paths);
  }

  std::vector<Volume> load_population_volumes(int first, int count) const {
    std::vector<Volume> volumes(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) require(volume_rel(first + i), "population");
    parallel_for(static_cast<std::size_t>(count), cfg_.threads, [&](std::size_t i) {
      volumes[i] = read_metaimage(out_ / volume_rel(first + static_cast<int>(i)));
    });
    return volumes;
  }

  // --- stages -------------------------------------------------------------

  std::vector<std::filesystem::path> stage_population() {
    std::vector<std::filesystem::path> outputs;
    std::filesystem::create_directories(out_ / "population/particles");
    std::filesystem::create_directories(out_ / "population/volumes");
    std::filesystem::create_directories(out_ / "population/gt_meshes");

    int count = 0;
    int points_per_shape = 0;
    if (cfg_.synth.enabled) {
      const auto& spec = cfg_.synth.spec;
      const SyntheticPopulation pop = synth_population(spec, cfg_.threads);
      count = spec.count;
      points_per_shape = spec.landmark_count;
      for (int i = 0; i < count; ++i) {
        write_particle_file(pop.correspondences.points.row(i).transpose(), out_ / particles_rel(i));
        outputs.push_back(particles_rel(i));
        write_metaimage(pop.volumes[i], out_ / volume_rel(i));
        outputs.push_back(volume_rel(i));
        outputs.push_back(volume_rel(i).replace_extension(".raw"));
      }
      detail::write_labels_csv(pop.labels, out_ / "population/labels.csv");
      outputs.emplace_back("population/labels.csv");
      detail::write_matrix_csv(pop.latents, out_ / "population/latents.csv");
      outputs.emplace_back("population/latents.csv");

      const Eigen::VectorXd z0 = Eigen::VectorXd::Zero(spec.latent_dim);
      write_obj(synth_mesh(spec, z0), out_ / "population/template.obj");
      outputs.emplace_back("population/template.obj");
      write_particle_file(synth_correspondences(spec, z0), out_ / "population/template.particles");
      outputs.emplace_back("population/template.particles");

      for (int i = cfg_.train_count; i < count; ++i) {
        write_obj(synth_mesh(spec, pop.latents.row(i).transpose()), out_ / gt_mesh_rel(i));
        outputs.push_back(gt_mesh_rel(i));
      }
    } else {
      // Ingest an existing population under canonical names.
      const std::filesystem::path pdir = cfg_.inputs.particles_dir;
      const std::filesystem::path vdir = cfg_.inputs.volumes_dir;
      if (!std::filesystem::is_directory(pdir)) {
        throw DataError("missing particles directory: " + pdir.string());
      }
      if (!std::filesystem::is_directory(vdir)) {
        throw DataError("missing volumes directory: " + vdir.string());
      }
      std::vector<std::filesystem::path> particle_files, volume_files;
      for (const auto& e : std::filesystem::directory_iterator(pdir)) {
        if (e.is_regular_file()) particle_files.push_back(e.path());
      }
      for (const auto& e : std::filesystem::directory_iterator(vdir)) {
        if (e.is_regular_file() && e.path().extension() == ".mhd") volume_files.push_back(e.path());
      }
      std::sort(particle_files.begin(), particle_files.end());
      std::sort(volume_files.begin(), volume_files.end());
      if (particle_files.empty()) throw DataError("no particle files in " + pdir.string());
      if (particle_files.size() != volume_files.size()) {
        throw DataError("particle/volume count mismatch between " + pdir.string() + " and " +
                        vdir.string());
      }
      count = static_cast<int>(particle_files.size());
      const CorrespondenceSet set = load_particles(particle_files);
      points_per_shape = set.points_per_shape;
      for (int i = 0; i < count; ++i) {
        write_particle_file(set.points.row(i).transpose(), out_ / particles_rel(i));
        outputs.push_back(particles_rel(i));
        const Volume v = read_metaimage(volume_files[i]);
        write_metaimage(v, out_ / volume_rel(i));
        outputs.push_back(volume_rel(i));
        outputs.push_back(volume_rel(i).replace_extension(".raw"));
      }
      if (!cfg_.inputs.labels_csv.empty()) {
        const auto labels = detail::read_labels_csv(cfg_.inputs.labels_csv);
        if (static_cast<int>(labels.size()) != count) {
          throw DataError("label count does not match population");
        }
        detail::write_labels_csv(labels, out_ / "population/labels.csv");
        outputs.emplace_back("population/labels.csv");
      }
      if (!cfg_.inputs.template_mesh.empty()) {
        write_obj(read_obj(cfg_.inputs.template_mesh), out_ / "population/template.obj");
        outputs.emplace_back("population/template.obj");
      }
      if (!cfg_.inputs.template_particles.empty()) {
        write_particle_file(read_particle_file(cfg_.inputs.template_particles),
                            out_ / "population/template.particles");
        outputs.emplace_back("population/template.particles");
      }
    }
    if (cfg_.train_count >= count) {
      throw ConfigError("split.train_count " + std::to_string(cfg_.train_count) +
                        " leaves no holdout of " + std::to_string(count) + " shapes");
    }
    nlohmann::ordered_json index;
    index["count"] = count;
    index["points_per_shape"] = points_per_shape;
    index["train_count"] = cfg_.train_count;
    std::ofstream idx(out_ / "population/index.json", std::ios::trunc);
    idx << index.dump(2) << "\n";
    outputs.emplace_back("population/index.json");
    return outputs;
  }

  std::vector<std::filesystem::path> stage_shape_space() {
    const int count = population_count();
    const CorrespondenceSet all = load_population_correspondences(0, count);
    CorrespondenceSet train;
    train.points = all.points.topRows(cfg_.train_count);
    train.points_per_shape = all.points_per_shape;
    const ShapeSpace space = fit_shape_space(train, cfg_.variance_threshold);
    save_shape_space(space, out_ / "shape_space.json");
    const Eigen::MatrixXd loadings = project_all(space, all);
    detail::write_matrix_csv(loadings, out_ / "loadings_gt.csv");
    return {"shape_space.json", "loadings_gt.csv"};
  }

  std::vector<std::filesystem::path> stage_gmm() {
    require("loadings_gt.csv", "shape_space");
    const Eigen::MatrixXd loadings =
        detail::read_matrix_csv(out_ / "loadings_gt.csv").topRows(cfg_.train_count);
    GmmFitOptions opts;
    opts.max_iter = cfg_.gmm.max_iter;
    opts.tol = cfg_.gmm.tol;
    opts.reg_scale = cfg_.gmm.reg_scale;
    const BicSelection selection = select_gmm_bic(loadings, cfg_.gmm.k_min, cfg_.gmm.k_max,
                                                  cfg_.seed ^ 0x474d4dULL, cfg_.gmm.restarts, opts);
    save_gmm(selection.model, out_ / "gmm.json");
    std::ofstream bic(out_ / "gmm_bic.csv", std::ios::trunc);
    bic << "k,bic,log_likelihood\n";
    char buf[128];
    for (const auto& entry : selection.table) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", entry.k, entry.bic,
                    entry.log_likelihood);
      bic << buf;
    }
    log("gmm: selected k = " + std::to_string(selection.selected_k));
    return {"gmm.json", "gmm_bic.csv"};
  }

  std::vector<std::filesystem::path> stage_augment() {
    require("shape_space.json", "shape_space");
    require("gmm.json", "gmm");
    const ShapeSpace space = load_shape_space(out_ / "shape_space.json");
    const GmmModel gmm = load_gmm(out_ / "gmm.json");
    const CorrespondenceSet train = load_population_correspondences(0, cfg_.train_count);
    const Eigen::MatrixXd train_loadings =
        detail::read_matrix_csv(out_ / "loadings_gt.csv").topRows(cfg_.train_count);
    const std::vector<Volume> train_volumes = load_population_volumes(0, cfg_.train_count);

    AugmentOptions opts;
    opts.count = cfg_.augment.count;
    opts.seed = cfg_.seed ^ 0x415547ULL;
    opts.tps_lambda = cfg_.augment.tps_lambda;
    opts.threads = cfg_.threads;
    const auto samples =
        generate_augmented(space, gmm, train, train_loadings, train_volumes, opts,
                           out_ / "aug/volumes", [this](const std::string& m) { log("augment: " + m); });
    write_augment_manifest(samples, out_ / "aug/manifest.jsonl");

    std::vector<std::filesystem::path> outputs = {"aug/manifest.jsonl"};
    for (const auto& s : samples) {
      auto rel = std::filesystem::relative(s.volume_path, out_);
      outputs.push_back(rel);
      outputs.push_back(rel.replace_extension(".raw"));
    }
    return outputs;
  }

  std::vector<std::filesystem::path> stage_train_regressor() {
    require("aug/manifest.jsonl", "augment");
    require("shape_space.json", "shape_space");
    const ShapeSpace space = load_shape_space(out_ / "shape_space.json");
    const auto samples = read_augment_manifest(out_ / "aug/manifest.jsonl");
    if (samples.empty()) throw DataError("augment manifest is empty");
    std::vector<Volume> volumes(samples.size());
    parallel_for(samples.size(), cfg_.threads,
                 [&](std::size_t i) { volumes[i] = read_metaimage(samples[i].volume_path); });
    std::vector<RegressionSample> dataset(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      dataset[i].volume = &volumes[i];
      dataset[i].loadings = samples[i].loadings;
    }
    TrainConfig tc;
    tc.learning_rate = cfg_.train.learning_rate;
    tc.epochs = cfg_.train.epochs;
    tc.batch_size = cfg_.train.batch_size;
    tc.seed = cfg_.seed ^ 0x545247ULL;
    tc.adagrad_epsilon = cfg_.train.adagrad_epsilon;
    tc.whiten_targets = cfg_.train.whiten_targets;
    tc.input_scale = cfg_.train.input_scale;
    tc.threads = cfg_.threads;
    const TrainResult result = train_regressor(dataset, tc, space);
    save_regressor(result.model, out_ / "regressor.json");
    std::ofstream loss(out_ / "train_loss.csv", std::ios::trunc);
    loss << "epoch,loss\n";
    char buf[64];
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", e, result.epoch_loss[e]);
      loss << buf;
    }
    log("train_regressor: final loss " + std::to_string(result.epoch_loss.back()));
    return {"regressor.json", "train_loss.csv"};
  }

  std::vector<std::filesystem::path> stage_predict() {
    require("regressor.json", "train_regressor");
    require("shape_space.json", "shape_space");
    const RegressorModel model = load_regressor(out_ / "regressor.json");
    const ShapeSpace space = load_shape_space(out_ / "shape_space.json");
    const int count = population_count();
    std::filesystem::create_directories(out_ / "predictions/particles");
    std::filesystem::create_directories(out_ / "predictions/meshes");

    Eigen::MatrixXd predicted(count, space.mode_count());
    parallel_for(static_cast<std::size_t>(count), cfg_.threads, [&](std::size_t i) {
      const Volume v = read_metaimage(out_ / volume_rel(static_cast<int>(i)));
      predicted.row(static_cast<Eigen::Index>(i)) = forward_regressor(model, v).transpose();
    });
    detail::write_matrix_csv(predicted, out_ / "predictions/loadings_pred.csv");

    std::vector<std::filesystem::path> outputs = {"predictions/loadings_pred.csv"};
    const bool have_template = std::filesystem::exists(out_ / "population/template.obj") &&
                               std::filesystem::exists(out_ / "population/template.particles");
    TriangleMesh template_mesh;
    Eigen::MatrixXd template_corr;
    if (have_template) {
      template_mesh = read_obj(out_ / "population/template.obj");
      template_corr =
          to_landmark_matrix(read_particle_file(out_ / "population/template.particles"));
    }
    for (int i = 0; i < count; ++i) {
      const Eigen::VectorXd shape = reconstruct(space, predicted.row(i).transpose());
      write_particle_file(shape, out_ / pred_particles_rel(i));
      outputs.push_back(pred_particles_rel(i));
      if (have_template && i >= cfg_.train_count) {
        const TriangleMesh mesh =
            warp_mesh_tps(template_mesh, template_corr, to_landmark_matrix(shape));
        write_obj(mesh, out_ / pred_mesh_rel(i));
        outputs.push_back(pred_mesh_rel(i));
      }
    }
    return outputs;
  }

  std::vector<std::filesystem::path> stage_recurrence() {
    require("loadings_gt.csv", "shape_space");
    require("population/labels.csv", "population");
    const Eigen::MatrixXd loadings =
        detail::read_matrix_csv(out_ / "loadings_gt.csv").topRows(cfg_.train_count);
    auto labels = detail::read_labels_csv(out_ / "population/labels.csv");
    labels.resize(static_cast<std::size_t>(cfg_.train_count));
    TrainConfig tc;
    tc.learning_rate = cfg_.recurrence.learning_rate;
    tc.epochs = cfg_.recurrence.epochs;
    tc.batch_size = cfg_.recurrence.batch_size;
    tc.seed = cfg_.seed ^ 0x524543ULL;
    const RecurrenceModel model = train_recurrence(loadings, labels, tc, cfg_.recurrence.hidden);
    save_recurrence(model, out_ / "recurrence.json");
    return {"recurrence.json"};
  }

  struct GroupSplit {
    std::string name;
    int first;
    int count;
  };

  std::vector<GroupSplit> groups(int count) const {
    return {{"train", 0, cfg_.train_count},
            {"holdout", cfg_.train_count, count - cfg_.train_count},
            {"all", 0, count}};
  }

  std::vector<std::filesystem::path> stage_evaluate_loadings() {
    require("loadings_gt.csv", "shape_space");
    require("predictions/loadings_pred.csv", "predict");
    const Eigen::MatrixXd gt = detail::read_matrix_csv(out_ / "loadings_gt.csv");
    const Eigen::MatrixXd pred = detail::read_matrix_csv(out_ / "predictions/loadings_pred.csv");
    if (gt.rows() != pred.rows() || gt.cols() != pred.cols()) {
      throw DataError("evaluate loadings: prediction/ground-truth shape mismatch");
    }
    std::filesystem::create_directories(out_ / "reports");
    nlohmann::ordered_json report;
    report["format_version"] = 1;
    report["alpha"] = cfg_.evaluate.alpha;
    report["test"] = "hotelling_paired";
    for (const auto& g : groups(static_cast<int>(gt.rows()))) {
      const HotellingResult r = hotelling_paired(pred.middleRows(g.first, g.count),
                                                 gt.middleRows(g.first, g.count));
      report["groups"][g.name] = detail::hotelling_to_json(r, cfg_.evaluate.alpha);
    }
    std::ofstream out(out_ / "reports/loadings_hotelling.json", std::ios::trunc);
    out << report.dump(2) << "\n";
    return {"reports/loadings_hotelling.json"};
  }

  std::vector<std::filesystem::path> stage_evaluate_points() {
    require("predictions/loadings_pred.csv", "predict");
    require("shape_space.json", "shape_space");
    const ShapeSpace space = load_shape_space(out_ / "shape_space.json");
    const int count = population_count();
    const CorrespondenceSet truth = load_population_correspondences(0, count);
    const Eigen::MatrixXd pred_loadings =
        detail::read_matrix_csv(out_ / "predictions/loadings_pred.csv");
    Eigen::MatrixXd pred_points(count, truth.points.cols());
    for (int i = 0; i < count; ++i) {
      pred_points.row(i) = reconstruct(space, pred_loadings.row(i).transpose()).transpose();
    }
    std::filesystem::create_directories(out_ / "reports");
    nlohmann::ordered_json report;
    report["format_version"] = 1;
    report["threshold_mm"] = cfg_.evaluate.voxel_spacing_mm;
    std::ofstream boxplot(out_ / "reports/point_error_boxplot.csv", std::ios::trunc);
    boxplot << "group,min,q1,median,q3,max,mean\n";
    for (const auto& g : groups(count)) {
      CorrespondenceSet p = to_correspondences(pred_points.middleRows(g.first, g.count),
                                               truth.points_per_shape);
      CorrespondenceSet t = to_correspondences(truth.points.middleRows(g.first, g.count),
                                               truth.points_per_shape);
      const ErrorSummary summary = point_errors(p, t, cfg_.evaluate.voxel_spacing_mm);
      report["groups"][g.name] = {
          {"stats_mm", detail::box_stats_to_json(summary.stats)},
          {"subvoxel_fraction", summary.below_threshold_fraction},
          {"shapes", g.count}};
      detail::append_boxplot_row(boxplot, g.name, summary.stats);
    }
    std::ofstream out(out_ / "reports/point_error.json", std::ios::trunc);
    out << report.dump(2) << "\n";
    return {"reports/point_error.json", "reports/point_error_boxplot.csv"};
  }

  std::vector<std::filesystem::path> stage_evaluate_surface() {
    const int count = population_count();
    std::filesystem::create_directories(out_ / "reports/surface");
    std::vector<std::filesystem::path> outputs;
    nlohmann::ordered_json report;
    report["format_version"] = 1;
    std::vector<double> per_shape_mean;
    std::vector<double> all_vertex;
    nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
    for (int i = cfg_.train_count; i < count; ++i) {
      require(pred_mesh_rel(i), "predict");
      require(gt_mesh_rel(i), "population");
      const TriangleMesh pred = read_obj(out_ / pred_mesh_rel(i));
      const TriangleMesh gt = read_obj(out_ / gt_mesh_rel(i));
      const SurfaceDistanceResult r = surface_distance(pred, gt, /*symmetric=*/true, cfg_.threads);
      per_shape_mean.push_back(r.forward_stats.mean);
      all_vertex.insert(all_vertex.end(), r.forward.begin(), r.forward.end());

      const auto csv_rel =
          std::filesystem::path("reports/surface") / shape_name("shape", i, ".csv");
      std::ofstream csv(out_ / csv_rel, std::ios::trunc);
      csv << "vertex_index,distance_mm\n";
      char buf[64];
      for (std::size_t v = 0; v < r.forward.size(); ++v) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", v, r.forward[v]);
        csv << buf;
      }
      outputs.push_back(csv_rel);
      shapes.push_back({{"shape", i},
                        {"mean_mm", r.forward_stats.mean},
                        {"median_mm", r.forward_stats.median},
                        {"max_mm", r.forward_stats.max},
                        {"reverse_mean_mm", r.reverse_stats.mean},
                        {"max_of_means_mm", r.max_of_means}});
    }
    if (per_shape_mean.empty()) throw DataError("evaluate surface: no holdout meshes");
    report["shapes"] = shapes;
    report["holdout_mean_mm"] = box_stats(per_shape_mean).mean;
    report["per_vertex"] = detail::box_stats_to_json(box_stats(all_vertex));
    std::ofstream boxplot(out_ / "reports/surface_boxplot.csv", std::ios::trunc);
    boxplot << "group,min,q1,median,q3,max,mean\n";
    detail::append_boxplot_row(boxplot, "holdout_shape_means", box_stats(per_shape_mean));
    outputs.emplace_back("reports/surface_boxplot.csv");
    std::ofstream out(out_ / "reports/surface.json", std::ios::trunc);
    out << report.dump(2) << "\n";
    outputs.emplace_back("reports/surface.json");
    return outputs;
  }

  std::vector<std::filesystem::path> stage_evaluate_recurrence() {
    require("recurrence.json", "recurrence");
    require("loadings_gt.csv", "shape_space");
    require("predictions/loadings_pred.csv", "predict");
    const RecurrenceModel model = load_recurrence(out_ / "recurrence.json");
    const Eigen::MatrixXd gt = detail::read_matrix_csv(out_ / "loadings_gt.csv");
    const Eigen::MatrixXd pred = detail::read_matrix_csv(out_ / "predictions/loadings_pred.csv");
    const int count = static_cast<int>(gt.rows());

    std::filesystem::create_directories(out_ / "reports");
    nlohmann::ordered_json report;
    report["format_version"] = 1;
    std::ofstream boxplot(out_ / "reports/recurrence_diff_boxplot.csv", std::ios::trunc);
    boxplot << "group,min,q1,median,q3,max,mean\n";
    std::vector<double> holdout_diffs;
    for (const auto& g : groups(count)) {
      std::vector<double> diffs;
      diffs.reserve(static_cast<std::size_t>(g.count));
      for (int i = g.first; i < g.first + g.count; ++i) {
        const double p_gt = predict_recurrence(model, gt.row(i).transpose());
        const double p_net = predict_recurrence(model, pred.row(i).transpose());
        diffs.push_back(p_gt - p_net);
      }
      if (g.name == "holdout") holdout_diffs = diffs;
      report["groups"][g.name] = {{"diff_stats", detail::box_stats_to_json(box_stats(diffs))}};
      detail::append_boxplot_row(boxplot, g.name, box_stats(diffs));
    }
    const EquivalenceResult tost_result =
        tost(holdout_diffs, cfg_.evaluate.tost_lower, cfg_.evaluate.tost_upper,
             cfg_.evaluate.alpha);
    report["tost_holdout"] = detail::tost_to_json(tost_result);
    std::ofstream out(out_ / "reports/recurrence_tost.json", std::ios::trunc);
    out << report.dump(2) << "\n";
    return {"reports/recurrence_tost.json", "reports/recurrence_diff_boxplot.csv"};
  }
};

// Single-volume trained-network path: volume -> loadings -> correspondence
// particle file -> warped template mesh (when a template is available).
// Writes <prefix>.loadings.csv, <prefix>.particles, <prefix>.obj.
inline std::vector<std::filesystem::path> predict_single(const PipelineConfig& cfg,
                                                         const std::filesystem::path& volume_path,
                                                         const std::filesystem::path& out_prefix) {
  const std::filesystem::path out = cfg.out_dir;
  if (!std::filesystem::exists(out / "regressor.json")) {
    throw DataError("missing artifact regressor.json; run the train_regressor stage first");
  }
  const RegressorModel model = load_regressor(out / "regressor.json");
  const ShapeSpace space = load_shape_space(out / "shape_space.json");
  const Volume v = read_metaimage(volume_path);
  const Eigen::VectorXd loadings = forward_regressor(model, v);
  const Eigen::VectorXd shape = reconstruct(space, loadings);

  std::vector<std::filesystem::path> written;
  Eigen::MatrixXd row(1, loadings.size());
  row.row(0) = loadings.transpose();
  auto loadings_path = out_prefix;
  loadings_path += ".loadings.csv";
  detail::write_matrix_csv(row, loadings_path);
  written.push_back(loadings_path);
  auto particles_path = out_prefix;
  particles_path += ".particles";
  write_particle_file(shape, particles_path);
  written.push_back(particles_path);

  const auto template_mesh_path = out / "population/template.obj";
  const auto template_corr_path = out / "population/template.particles";
  if (std::filesystem::exists(template_mesh_path) &&
      std::filesystem::exists(template_corr_path)) {
    const TriangleMesh tmpl = read_obj(template_mesh_path);
    const Eigen::MatrixXd tmpl_corr = to_landmark_matrix(read_particle_file(template_corr_path));
    const TriangleMesh mesh = warp_mesh_tps(tmpl, tmpl_corr, to_landmark_matrix(shape));
    auto mesh_path = out_prefix;
    mesh_path += ".obj";
    write_obj(mesh, mesh_path);
    written.push_back(mesh_path);
  }
  return written;
}

}  // namespace ssm
