// mue: dataset generation, training, inference, benchmarking and profiling.
//
//   mue <subcommand> --config run.cfg [--set key=value]...

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mue/mue.hpp"

namespace {

using namespace mue;

std::vector<SyntheticExample> load_examples(const RunConfig& cfg) {
  cfg.require("data.path");
  auto data = read_dataset(cfg.data.path);
  if (data.empty()) throw IoError("dataset '" + cfg.data.path + "' is empty");
  if (cfg.data.limit > 0 && data.size() > cfg.data.limit) data.resize(cfg.data.limit);
  return data;
}

ModelParams load_model(const RunConfig& cfg) {
  cfg.require("output.checkpoint");
  return load_checkpoint(cfg.output.checkpoint, cfg.model);
}

void make_parent_dirs(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::ofstream open_output(const std::string& path) {
  make_parent_dirs(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

void run_gen_data(const RunConfig& cfg) {
  cfg.require("data.path");
  const auto data = generate_dataset(cfg.data.seed, cfg.data.count, cfg.data.task, cfg.model.grid_side);
  make_parent_dirs(cfg.data.path);
  write_dataset(cfg.data.path, data);
  std::cout << "wrote " << data.size() << ' ' << task_name(cfg.data.task) << " examples to " << cfg.data.path << '\n';
}

void run_train(const RunConfig& cfg) {
  cfg.require("output.checkpoint");
  cfg.require("output.loss_csv");
  const auto data = load_examples(cfg);
  std::ofstream loss = open_output(cfg.output.loss_csv);
  loss << "step,total";
  const std::size_t layers = cfg.train.layerwise_loss ? cfg.model.n_dec_layers : 1;
  for (std::size_t l = 1; l <= layers; ++l) loss << ",layer_" << (cfg.train.layerwise_loss ? l : cfg.model.n_dec_layers);
  loss << '\n';
  const TrainResult result =
      train(data, init_params(cfg.model, cfg.init_seed), cfg.train, [&loss](std::size_t step, const LossReport& r) {
        loss << step << ',' << format_real(r.total);
        for (double v : r.per_layer) loss << ',' << format_real(v);
        loss << '\n';
      });
  if (!loss) throw IoError("write failed for '" + cfg.output.loss_csv + "'");
  make_parent_dirs(cfg.output.checkpoint);
  save_checkpoint(result.params, cfg.output.checkpoint);
  const double eval = batch_loss(data, result.params, cfg.train.layerwise_loss);
  nlohmann::json summary{{"steps", cfg.train.steps},
                         {"final_eval_loss", eval},
                         {"checkpoint", cfg.output.checkpoint},
                         {"loss_csv", cfg.output.loss_csv}};
  std::cout << summary.dump() << '\n';
}

void run_infer(const RunConfig& cfg) {
  const ModelParams params = load_model(cfg);
  const auto data = load_examples(cfg);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const GenerationOutput g = generate(data[i], params, cfg.exit);
    nlohmann::json line{{"index", i},
                        {"output", detokenize(g.tokens)},
                        {"reference", detokenize(data[i].target)},
                        {"image_exit_layer", g.trace.image_exit_layer},
                        {"text_exit_layer", g.trace.text_exit_layer},
                        {"decoder_exits", g.trace.decoder_exits},
                        {"time_reduction", expected_time_reduction(g.trace, params.config, cfg.output.depth_mode)}};
    std::cout << line.dump() << '\n';
  }
}

void run_bench(const RunConfig& cfg) {
  cfg.require("output.bench_csv");
  const ModelParams params = load_model(cfg);
  const auto data = load_examples(cfg);
  EvalOptions opt;
  opt.depth_mode = cfg.output.depth_mode;
  opt.timing = cfg.output.timing;
  const auto rows = threshold_sweep(params, data, cfg.output.theta_grid, cfg.exit, opt);
  std::ofstream out = open_output(cfg.output.bench_csv);
  write_bench_csv(out, rows);
  if (!out) throw IoError("write failed for '" + cfg.output.bench_csv + "'");
  std::cout << "wrote " << rows.size() << " rows to " << cfg.output.bench_csv << '\n';
}

void run_profile(const RunConfig& cfg) {
  cfg.require("output.profile_csv");
  const ModelParams params = load_model(cfg);
  const auto data = load_examples(cfg);
  const SaturationProfile prof = saturation_profile(params, data, cfg.output.profile_samples);
  std::ofstream out = open_output(cfg.output.profile_csv);
  write_saturation_csv(out, prof);
  if (!out) throw IoError("write failed for '" + cfg.output.profile_csv + "'");
  std::cout << "wrote saturation profile to " << cfg.output.profile_csv << '\n';
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // no heap trimming between training steps
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Early-exit encoder-decoder toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;

  struct Command {
    const char* name;
    const char* help;
    void (*run)(const RunConfig&);
  };
  const std::vector<Command> commands = {
      {"gen-data", "Generate a synthetic dataset", run_gen_data},
      {"train", "Train a model and write a checkpoint and loss curve", run_train},
      {"infer", "Generate outputs and exit traces, one JSON line per example", run_infer},
      {"bench", "Sweep exit thresholds and write a CSV of time reduction and quality", run_bench},
      {"profile", "Write the mean layer-similarity profile of each stack", run_profile},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override a configuration value (key=value)");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  RunConfig cfg;
  try {
    cfg = load_run_config(read_file_bytes(config_path), overrides);
  } catch (const std::exception& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      commands[i].run(cfg);
      return 0;
    } catch (const ConfigError& e) {
      std::cerr << "usage error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
