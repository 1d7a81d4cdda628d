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

// ssmkit command-line interface.
//
// Workflow commands mirror the pipeline stages (synth, fit-shape-space,
// fit-gmm, augment, train-regressor, predict, train-recurrence, evaluate
// ...), and `pipeline` runs everything with a digest-based resume manifest.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
// failure. Errors print one machine-parsable line on stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ssmkit/config.hpp"
#include "ssmkit/errors.hpp"
#include "ssmkit/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Pipeline configuration JSON")->required();
  cmd->add_option("--threads", args.threads, "Worker thread cap (overrides config)");
  cmd->add_option("--seed", args.seed, "Random seed (overrides config)");
  cmd->add_option("--out", args.out_dir, "Output directory (overrides config)");
}

ssm::PipelineConfig load_effective_config(const CommonArgs& args) {
  ssm::PipelineConfig cfg = ssm::load_config(args.config_path);
  if (args.threads) cfg.threads = *args.threads;
  if (args.seed) cfg.seed = *args.seed;
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  return cfg;
}

void print_error(const char* kind, const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped.push_back('\\');
    escaped.push_back(c == '\n' ? ' ' : c);
  }
  std::fprintf(stderr, "ssmkit: error kind=%s msg=\"%s\"\n", kind, escaped.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shape-descriptor regression pipeline: statistical shape spaces, shape-space "
               "data augmentation, volumetric CNN training, and validation statistics"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string stage_for_command;

  auto add_stage_command = [&](const std::string& name, const std::string& stage,
                               const std::string& help) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, args);
    cmd->callback([&, stage]() { stage_for_command = stage; });
    return cmd;
  };

  add_stage_command("synth", "population",
                    "Generate (or ingest) the population: particles, volumes, labels, template");
  add_stage_command("fit-shape-space", "shape_space",
                    "Fit the PCA shape space on the training split and project all loadings");
  add_stage_command("fit-gmm", "gmm", "Fit the loading-space Gaussian mixture with BIC selection");
  add_stage_command("augment", "augment",
                    "Sample feasible shapes and synthesize paired volumes by TPS warping");
  add_stage_command("train-regressor", "train_regressor",
                    "Train the volumetric CNN that predicts loadings from volumes");
  add_stage_command("train-recurrence", "recurrence",
                    "Train the recurrence MLP on ground-truth loadings and labels");

  // predict: batch stage by default, single-volume mode with --volume.
  std::string predict_volume, predict_prefix = "prediction";
  CLI::App* predict_cmd = app.add_subcommand(
      "predict", "Map volumes to loadings, correspondences, and meshes via the trained network");
  add_common(predict_cmd, args);
  predict_cmd->add_option("--volume", predict_volume,
                          "Predict one MetaImage volume instead of the population batch");
  predict_cmd->add_option("--out-prefix", predict_prefix,
                          "Output prefix for single-volume prediction files");
  predict_cmd->callback([&]() { stage_for_command = "predict"; });

  std::string recurrence_loadings;
  CLI::App* predict_rec_cmd = app.add_subcommand(
      "predict-recurrence", "Predict recurrence probabilities from a CSV of loadings");
  add_common(predict_rec_cmd, args);
  predict_rec_cmd->add_option("--loadings", recurrence_loadings, "CSV of loading rows")
      ->required();
  predict_rec_cmd->callback([&]() { stage_for_command = "predict_recurrence"; });

  CLI::App* evaluate = app.add_subcommand("evaluate", "Statistical validation reports");
  evaluate->require_subcommand(1);
  auto add_eval = [&](const std::string& name, const std::string& stage, const std::string& help) {
    CLI::App* cmd = evaluate->add_subcommand(name, help);
    add_common(cmd, args);
    cmd->callback([&, stage]() { stage_for_command = stage; });
  };
  add_eval("loadings", "evaluate_loadings",
           "Hotelling T^2 significance test between predicted and ground-truth loadings");
  add_eval("points", "evaluate_points",
           "Per-point per-shape reconstruction error boxplots and sub-voxel fractions");
  add_eval("surface", "evaluate_surface",
           "Surface-to-surface distance between predicted and ground-truth meshes");
  add_eval("recurrence", "evaluate_recurrence",
           "TOST equivalence of recurrence probabilities from both loading sources");

  CLI::App* pipeline_cmd =
      app.add_subcommand("pipeline", "Run every stage in order with resume via the manifest");
  add_common(pipeline_cmd, args);
  pipeline_cmd->callback([&]() { stage_for_command = "__all__"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const ssm::PipelineConfig cfg = load_effective_config(args);
    if (stage_for_command == "__all__") {
      ssm::Pipeline pipeline(cfg);
      pipeline.run_all();
    } else if (stage_for_command == "predict" && !predict_volume.empty()) {
      const auto written = ssm::predict_single(cfg, predict_volume, predict_prefix);
      for (const auto& p : written) std::cout << p.generic_string() << "\n";
    } else if (stage_for_command == "predict_recurrence") {
      const auto out = cfg.out_dir;
      if (!std::filesystem::exists(out / "recurrence.json")) {
        throw ssm::DataError("missing artifact recurrence.json; run the recurrence stage first");
      }
      const ssm::RecurrenceModel model = ssm::load_recurrence(out / "recurrence.json");
      const Eigen::MatrixXd loadings = ssm::detail::read_matrix_csv(recurrence_loadings);
      for (Eigen::Index i = 0; i < loadings.rows(); ++i) {
        std::printf("%.17g\n", ssm::predict_recurrence(model, loadings.row(i).transpose()));
      }
    } else {
      ssm::Pipeline pipeline(cfg);
      pipeline.run_stage(stage_for_command);
    }
  } catch (const ssm::ConfigError& e) {
    print_error("config", e.what());
    return 1;
  } catch (const ssm::DataError& e) {
    print_error("data", e.what());
    return 2;
  } catch (const ssm::NumericError& e) {
    print_error("numeric", e.what());
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    print_error("data", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("numeric", e.what());
    return 3;
  }
  return 0;
}
