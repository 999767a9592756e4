#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nvs/diffusion.hpp"
#include "nvs/scenegen.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

/// Two-level U-Net over N views. Level 0 runs at full resolution with C
/// channels, level 1 at half resolution with 2C.
struct DenoiserConfig {
  int channels = 32;
  int time_features = 64;
  /// Octaves of the sinusoidal pose lift.
  int pose_frequencies = 4;
  /// false drops the pose token from the semantic condition (no_pose).
  bool use_pose = true;

  int width() const { return 2 * channels; }
  int pose_features() const { return 12 * (1 + 2 * pose_frequencies); }
  void validate() const;
};

enum class InitMode { video_prior_sim, no_vid, scratch };

std::string to_string(InitMode mode);
InitMode init_mode_from_string(const std::string& name);

/// Random initialisation. Fusion (zero) convs are exactly zero and the
/// control branch starts as a copy of the encoder.
ParamSet<float> init_params(const DenoiserConfig& cfg, std::uint64_t seed);

/// Names of the zero-initialised fusion convolutions.
bool is_fusion_param(const std::string& name);
bool is_control_param(const std::string& name);
bool is_attention_param(const std::string& name);

/// Copies each encoder layer into its control-branch twin.
void copy_encoder_to_control(ParamSet<float>& params);

/// [N, 12 (1 + 2F)]: the 12 pose values, then sin and cos of 2^k times each
/// value for k < F. The identity pose gives 1 at R00, R11, R22, zeros
/// elsewhere, and sin(2^k v), cos(2^k v) of those values.
template <typename T>
Tensor<T> pose_features(const Tensor<T>& poses, int frequencies);

/// [1, F] sinusoidal timestep features.
template <typename T>
Tensor<T> time_features(int t, int features);

/// Conditioning tensors in the working precision.
template <typename T>
struct CondTensors {
  Tensor<T> reference;  // [3,H,W]
  Tensor<T> poses;      // [N,12]
  Tensor<T> target;     // [N,4,H,W]
};

template <typename T>
CondTensors<T> cond_tensors(const Conditioning& cond) {
  return {cond.reference.cast<T>(), cond.poses.cast<T>(), cond.target.cast<T>()};
}

/// Parameters recorded on a tape, looked up by name.
template <typename T>
class BoundParams {
 public:
  /// trainable = false records constants (inference, no gradients).
  BoundParams(Tape<T>& tape, const ParamSet<T>& params, bool trainable);
  Var<T> operator[](const std::string& name) const;
  /// In ParamSet order.
  const std::vector<Var<T>>& vars() const { return vars_; }

 private:
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Assumed variance of images in [-1, 1].
inline constexpr double kDataVariance = 0.25;
/// Output gain of the zero-initialised warp-prior gate.
inline constexpr double kGateGain = 10.0;
/// Assumed error std of the warped reference, in [-1,1] units.
inline constexpr double kWarpErrorStd = 0.1;

/// sqrt(1 - ab) / (ab * kDataVariance + 1 - ab): the least-squares linear
/// estimate of the noise from z_t for data of that variance. The network
/// adds its output to this multiple of z_t.
double eps_skip(double alpha_bar);
/// Scale of the network branch: the unit-variance residual of the linear
/// estimate, mapped to eps units.
double eps_out(double alpha_bar);

/// eps_theta for z_t [N,3,H,W] at timestep t with alpha_bar = ab_t. Spatial layers act per view; correspondence
/// attention runs across the N views at every pixel of both levels; the
/// reference embedding, pose embedding and a constant frame token form the
/// cross-attention context at level 1; control features from y_tgt enter
/// through the fusion convs after every spatial layer.
template <typename T>
Var<T> denoiser_forward(Tape<T>& tape, const BoundParams<T>& p, const DenoiserConfig& cfg, Var<T> z_t,
                        const CondTensors<T>& cond, int t, double alpha_bar);

/// Float model with a no-gradient predict.
struct Denoiser {
  DenoiserConfig config;
  ParamSet<float> params;
  DiffusionSchedule schedule = make_schedule();

  Tensor<float> predict(const Tensor<float>& z_t, const Conditioning& cond, int t) const;
  EpsPredictor predictor() const;
};

// ---------------------------------------------------------------------------
// Training.

struct TrainOptions {
  int steps = 2000;
  double lr = 1e-3;
  int warmup = 100;
  /// Global gradient-norm clip; <= 0 disables.
  double grad_clip = 1.0;
  bool structured_noise = true;
  ConditioningOptions conditioning;
  /// Per-step depth corruption of the reference, as a stand-in for a
  /// monocular estimate.
  bool depth_noise = true;
  std::uint64_t seed = 0;
  /// Checkpoint every this many steps (0: only at the end) to checkpoint_path.
  int checkpoint_every = 0;
  std::string checkpoint_path;
  /// Recorded in the checkpoint header.
  InitMode init = InitMode::video_prior_sim;
  std::string checkpoint_extra = "{}";
  /// Step, loss, wallclock rows; empty disables.
  std::string loss_log_path;
};

struct TrainState {
  std::int64_t step = 0;
  AdamState<float> adam;
  std::vector<double> losses;
};

/// One random example from a posed sequence: reference frame 0 plus all
/// targets, depth corrupted per opts, t uniform in [1, T].
struct TrainingExample {
  ReferenceInput input;
  Tensor<float> targets;  // [N,3,H,W] in [-1,1]
};
TrainingExample make_example(const Sequence& seq, bool depth_noise, std::uint64_t seed);

/// Runs opts.steps more optimizer steps (so a resumed state continues its
/// counter). Throws DataError for an empty dataset and NumericError on a
/// non-finite loss, leaving the last written checkpoint intact.
void train(Denoiser& model, TrainState& state, const std::vector<Sequence>& dataset, const DiffusionSchedule& sched,
           const TrainOptions& opts, const std::function<void(std::int64_t, double)>& on_step = {});

struct PretextOptions {
  int steps = 300;
  double lr = 1e-3;
  std::uint64_t seed = 7;
  int clips = 32;
  int views = 8;
};

/// Pretext pretraining behind the init modes. video_prior_sim trains all
/// non-control layers to denoise rendered multi-frame clips jointly with no
/// semantic or warp condition. no_vid trains on single frames and leaves the
/// attention layers untouched. scratch returns init_params unchanged. The
/// control branch is re-copied from the encoder afterwards; fusion convs stay
/// zero.
ParamSet<float> initialize(const DenoiserConfig& cfg, InitMode mode, std::uint64_t seed, const DiffusionSchedule& sched,
                           const PretextOptions& pretext = {});

// ---------------------------------------------------------------------------
// Checkpoints: u64 little-endian header length, JSON header, then VFT1
// tensors: parameters in ParamSet order, then Adam first and second moments.

struct Checkpoint {
  DenoiserConfig config;
  ScheduleKind schedule = ScheduleKind::linear_beta;
  int timesteps = kDefaultTimesteps;
  InitMode init = InitMode::video_prior_sim;
  ParamSet<float> params;
  TrainState state;
  /// Free-form run fields copied into the header.
  std::string extra_json = "{}";
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace nvs
