#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"
#include "nvs/tensor.hpp"
#include "nvs/warp.hpp"

namespace nvs {

enum class ScheduleKind { linear_beta, cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 2e-2;
inline constexpr int kDefaultTimesteps = 1000;
inline constexpr int kDefaultSamplerSteps = 35;
inline constexpr double kDefaultRefineThreshold = 0.20;

/// alpha_bar[0] = 1, then strictly decreasing down to alpha_bar[T] > 0.
struct DiffusionSchedule {
  ScheduleKind kind = ScheduleKind::linear_beta;
  int T = 0;
  std::vector<double> alpha_bar;

  double at(int t) const;
};

/// linear_beta: beta linear from kBetaStart to kBetaEnd over T steps.
/// cosine: the squared-cosine alpha_bar with offset 0.008, betas capped at 0.999.
DiffusionSchedule make_schedule(int T = kDefaultTimesteps, ScheduleKind kind = ScheduleKind::linear_beta);

/// sqrt(ab_t) z + sqrt(1 - ab_t) xi. Throws ConfigError unless 1 <= t <= T.
template <typename T>
Tensor<T> perturb(const Tensor<T>& z, const Tensor<T>& xi, int t, const DiffusionSchedule& sched);
/// (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t).
template <typename T>
Tensor<T> recover(const Tensor<T>& z_t, const Tensor<T>& eps, int t, const DiffusionSchedule& sched);

/// num_steps timesteps evenly spaced from T down to 1 (both included),
/// strictly decreasing. Throws ConfigError if num_steps is outside [1, T].
std::vector<int> ddim_timesteps(int T, int num_steps);

/// Per-target-view noise. xi is [N,3,H,W]; masks[n] marks pixels copied
/// from eps0, the reference-view noise, by warp_noise.
struct NoiseBundle {
  Tensor<float> xi;
  std::vector<Mask> masks;
  Image eps0;
};

/// Everything the denoiser sees besides the noisy views. Images are in
/// [-1, 1]. target (y_tgt) is [N,4,H,W]: the reference warped into each view
/// followed by the binary validity mask; holes are 0.
struct Conditioning {
  Tensor<float> reference;  // [3,H,W]
  Tensor<float> poses;      // [N,12], row-major R then t, reference from view
  Tensor<float> target;     // [N,4,H,W]
  std::optional<Mask> edit;

  std::size_t views() const { return poses.empty() ? 0 : poses.dim(0); }
  int resolution() const { return reference.empty() ? 0 : static_cast<int>(reference.dim(2)); }
  /// Throws ShapeError on inconsistent shapes, DataError on a non-binary mask.
  void validate() const;
};

/// Reference frame, its depth (clean or corrupted) and a trajectory of N+1
/// cameras relative to the reference.
struct ReferenceInput {
  Image image;
  DepthMap depth;
  Trajectory trajectory;
  std::optional<Mask> edit;
};

struct ConditioningOptions {
  /// Ablation: y_tgt is all zeros (no warped image, no mask).
  bool no_warp = false;
};

/// Per-view reference warps, also needed by the refinement rule.
struct ReferenceWarps {
  std::vector<WarpResult> warps;
  std::vector<double> overlap;
};

ReferenceWarps warp_reference(const ReferenceInput& in);
Conditioning build_conditioning(const ReferenceInput& in, const ReferenceWarps& warps,
                                const ConditioningOptions& opts = {});
Conditioning build_conditioning(const ReferenceInput& in, const ConditioningOptions& opts = {});

/// [3,H,W] in [-1,1] from an image in [0,1].
Tensor<float> image_to_tensor(const Image& image);
/// View `view` of an [N,3,H,W] (or [3,H,W]) tensor mapped back to [0,1], clamped.
Image tensor_to_image(const Tensor<float>& t, std::size_t view = 0);
/// [12]: row-major rotation then translation of the reference-from-view pose.
Tensor<float> pose_vector(const Camera& relative);

/// xi^n = M^n * warp(eps0) + (1 - M^n) * eps^n, with eps0 the reference
/// noise, warp_noise as the warp and eps^n fresh per view. With
/// structured = false every view is independent noise. Deterministic in seed.
NoiseBundle sample_structured_noise(const ReferenceInput& in, std::uint64_t seed, bool structured = true);

/// loss = mean((eps_theta(z (+)_t xi) - xi)^2) over all views and pixels.
/// model is called as model(Var<T> z_t, int t) -> Var<T>.
template <typename T, typename Model>
Var<T> training_loss(Tape<T>& tape, Model&& model, const Tensor<T>& z, const Tensor<T>& xi, int t,
                     const DiffusionSchedule& sched) {
  Var<T> z_t = tape.constant(perturb(z, xi, t, sched));
  Var<T> pred = model(z_t, t);
  if (pred.shape() != xi.shape())
    throw ShapeError("training_loss: model output " + shape_str(pred.shape()) + " vs noise " + shape_str(xi.shape()));
  return ops::mse(pred, tape.constant(xi));
}

/// Deterministic DDIM from z_T along ddim_timesteps(T, num_steps):
/// z_prev = sqrt(ab_prev) (z_t (-)_t eps) + sqrt(1 - ab_prev) eps, with
/// ab_0 = 1 after the last step. eps_model(z_t, t) -> Tensor<T>.
template <typename T, typename EpsModel>
Tensor<T> ddim_sample(EpsModel&& eps_model, Tensor<T> z, const DiffusionSchedule& sched, int num_steps) {
  const std::vector<int> steps = ddim_timesteps(sched.T, num_steps);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const int prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    const Tensor<T> eps = eps_model(z, t);
    if (eps.shape() != z.shape()) throw ShapeError("ddim_sample: model output shape differs from the latent");
    Tensor<T> x0 = recover(z, eps, t, sched);
    if (prev == 0) return x0;
    const T a = static_cast<T>(std::sqrt(sched.at(prev))), b = static_cast<T>(std::sqrt(1.0 - sched.at(prev)));
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = a * x0[k] + b * eps[k];
  }
  return z;
}

/// eps_theta(z_t [N,3,H,W], cond, t) -> [N,3,H,W].
using EpsPredictor = std::function<Tensor<float>(const Tensor<float>&, const Conditioning&, int)>;

struct SamplingOptions {
  int steps = kDefaultSamplerSteps;
  bool structured_noise = true;
  ConditioningOptions conditioning;
  /// Negative disables the refinement pass.
  double refine_threshold = kDefaultRefineThreshold;
};

struct RefinementRecord {
  /// Per target view: warp overlap with the reference.
  std::vector<double> overlap;
  /// Per target view: 0 for the reference, m >= 1 for generated view m.
  std::vector<int> source;
  std::vector<double> source_overlap;
  std::vector<bool> refined;
  int passes = 1;
};

struct SampleResult {
  Tensor<float> views;  // [N,3,H,W] in [-1,1]
  Conditioning cond;
  RefinementRecord record;
};

/// First pass: z_T ~ N(y) from seed, then DDIM.
SampleResult sample_views(const EpsPredictor& model, const ReferenceInput& in, const DiffusionSchedule& sched,
                          const SamplingOptions& opts, std::uint64_t seed);

/// Views whose reference overlap is below threshold get y_tgt rebuilt from
/// the generated view (other than themselves) whose warp covers them most,
/// ties to the smaller index. view_depths[k] is the depth used to warp
/// generated view k + 1 (trajectory index). All views are then sampled again jointly with fresh
/// noise from seed + pass. With no view below threshold the input is
/// returned unchanged.
SampleResult refine_pass(const EpsPredictor& model, const SampleResult& first, const ReferenceInput& in,
                         const std::vector<DepthMap>& view_depths, const DiffusionSchedule& sched,
                         const SamplingOptions& opts, std::uint64_t seed, int pass = 1);

/// Reference-warp depth buffers (0 where empty), the depth proxy for
/// generated views when no renderer depth exists.
std::vector<DepthMap> warp_depth_proxies(const ReferenceWarps& warps);

}  // namespace nvs
