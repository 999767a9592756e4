#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nvs/denoiser.hpp"
#include "nvs/diffusion.hpp"
#include "nvs/metrics.hpp"
#include "nvs/scenegen.hpp"

namespace nvs {

/// Every experiment knob. Text form is one `key = value` per line with flat
/// dotted keys; `#` starts a comment.
struct RunConfig {
  std::uint64_t seed = 0;

  // Dataset.
  int resolution = 32;
  /// Target views per sequence (N); each sequence also has a reference frame.
  int views = 8;
  int sequences = 200;
  /// Comma-separated trajectory kinds, assigned round-robin.
  std::string trajectories = "dolly,orbit,scan,u_turn";

  // Diffusion.
  ScheduleKind schedule = ScheduleKind::linear_beta;
  int timesteps = kDefaultTimesteps;
  int sampler_steps = kDefaultSamplerSteps;
  bool structured_noise = true;
  /// Negative disables the refinement pass.
  double refine_threshold = kDefaultRefineThreshold;

  // Ablations.
  bool no_warp = false;
  bool no_pose = false;
  bool no_prior = false;
  bool no_vid = false;

  // Model.
  int channels = 32;
  int time_features = 64;
  int pose_frequencies = 4;

  // Training.
  int train_steps = 2000;
  double lr = 1e-3;
  int warmup = 100;
  double grad_clip = 1.0;
  int checkpoint_every = 500;
  bool train_depth_noise = true;
  int pretext_steps = 300;
  double pretext_lr = 1e-3;
  int pretext_clips = 32;

  // Reference depth corruption at sampling time.
  double depth_sigma = 0.0;
  double depth_scale = 1.0;
  double depth_offset = 0.0;

  // Evaluation; 0 picks N/4 and N.
  int short_index = 0;
  int long_index = 0;
  int pair_stride = 1;
  SedAggregate sed_aggregate = SedAggregate::median;

  // Paths.
  std::string data_dir = "data";
  std::string run_dir = "run";
  std::string checkpoint = "";

  /// Throws ConfigError on an out-of-range field.
  void validate() const;

  DenoiserConfig model() const;
  InitMode init_mode() const;
  DepthNoiseModel depth_noise() const;
  std::vector<TrajectoryKind> trajectory_kinds() const;
  SamplingOptions sampling() const;
  TrainOptions train_options() const;
  PretextOptions pretext() const;
  DiffusionSchedule diffusion_schedule() const;
};

/// Known keys with their one-line descriptions, in file order.
const std::vector<std::pair<std::string, std::string>>& config_keys();

/// Throws ConfigError for an unknown key or an unparsable value.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// Parses `key = value` lines on top of cfg.
void apply_config_text(RunConfig& cfg, const std::string& text);
void apply_config_file(RunConfig& cfg, const std::string& path);

/// Defaults, then the file (if any), then the overrides in order.
RunConfig resolve_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& overrides);

/// Every key in config_keys() order.
std::string config_to_text(const RunConfig& cfg);

}  // namespace nvs
