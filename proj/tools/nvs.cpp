// nvs: dataset generation, training, sampling, evaluation and warp inspection.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nvs/config.hpp"
#include "nvs/error.hpp"
#include "nvs/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// --config, --set key=value and one --<key> flag per config field.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "config file of key = value lines")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override as key=value (repeatable)");
    for (const auto& [key, doc] : nvs::config_keys()) cmd->add_option("--" + key, values[key], doc);
  }

  /// Precedence: flag > file > default. Explicit --<key> flags win over --set.
  nvs::RunConfig resolve(CLI::App* cmd) const {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw nvs::ConfigError("--set expects key=value, got '" + s + "'");
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [key, doc] : nvs::config_keys())
      if (cmd->count("--" + key) > 0) overrides.emplace_back(key, values.at(key));
    return nvs::resolve_config(file, overrides);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view novel view synthesis toolkit"};
  app.require_subcommand(1);

  ConfigFlags scenegen_flags, train_flags, sample_flags, eval_flags, warp_flags;
  CLI::App* scenegen = app.add_subcommand("scenegen", "render a synthetic dataset into paths.data");
  scenegen_flags.attach(scenegen);

  CLI::App* train = app.add_subcommand("train", "train on paths.data into paths.run (resumes a checkpoint)");
  train_flags.attach(train);

  std::string sequence_dir, edit_mask;
  CLI::App* sample = app.add_subcommand("sample", "generate the views of a sequence into paths.run");
  sample_flags.attach(sample);
  sample->add_option("--sequence", sequence_dir, "sequence directory with frame 0, depth 0 and trajectory.json")
      ->required();
  sample->add_option("--edit-mask", edit_mask, "PNG mask of reference pixels to remove");

  std::string generated_dir, truth_dir;
  CLI::App* eval = app.add_subcommand("eval", "write metrics for a generated sequence into paths.run");
  eval_flags.attach(eval);
  eval->add_option("--generated", generated_dir, "generated sequence directory")->required();
  eval->add_option("--truth", truth_dir, "ground-truth sequence directory");

  std::string warp_sequence;
  int warp_target = 1;
  CLI::App* warp = app.add_subcommand("warp", "dump the image and noise warps of one target view into paths.run");
  warp_flags.attach(warp);
  warp->add_option("--sequence", warp_sequence, "sequence directory")->required();
  warp->add_option("--target", warp_target, "target view index, 1..N");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*scenegen) {
      nvs::cmd_scenegen(scenegen_flags.resolve(scenegen));
    } else if (*train) {
      nvs::cmd_train(train_flags.resolve(train));
    } else if (*sample) {
      nvs::cmd_sample(sample_flags.resolve(sample), sequence_dir, edit_mask);
    } else if (*eval) {
      nvs::cmd_eval(eval_flags.resolve(eval), generated_dir, truth_dir);
    } else if (*warp) {
      nvs::cmd_warp(warp_flags.resolve(warp), warp_sequence, warp_target);
    }
  } catch (const nvs::Error& e) {
    switch (e.category()) {
      case nvs::Error::Category::config:
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
      case nvs::Error::Category::numeric:
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
      case nvs::Error::Category::data:
        break;
    }
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
