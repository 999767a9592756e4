#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nvs/config.hpp"
#include "nvs/denoiser.hpp"
#include "nvs/diffusion.hpp"
#include "nvs/metrics.hpp"
#include "nvs/scenegen.hpp"

namespace nvs {

/// Resolved config written into every run directory.
inline constexpr const char* kConfigSnapshot = "config.txt";

/// Seeds of one dataset sequence; a pure function of the config and index.
struct DatasetEntry {
  std::string name;
  std::uint64_t scene_seed = 0;
  std::uint64_t trajectory_seed = 0;
  TrajectoryKind kind = TrajectoryKind::dolly;
};

std::vector<DatasetEntry> dataset_plan(const RunConfig& cfg);
Sequence make_dataset_sequence(const RunConfig& cfg, const DatasetEntry& entry);

/// Writes <paths.data>/<name>/ for every entry, manifest.json and the config.
void cmd_scenegen(const RunConfig& cfg);
/// Sequences listed in <dir>/manifest.json, in manifest order.
std::vector<Sequence> load_dataset(const std::string& dir);

/// Initialisation for the configured ablation, then training. Writes the
/// checkpoint (if checkpoint_path is set) and the loss log.
Denoiser train_model(const RunConfig& cfg, const std::vector<Sequence>& dataset, const std::string& checkpoint_path,
                     const std::string& loss_log_path);
/// Trains on <paths.data> into <paths.run>; resumes when the checkpoint exists.
void cmd_train(const RunConfig& cfg);

std::string checkpoint_path(const RunConfig& cfg);

/// Checks that a checkpoint fits the config and returns the model. Throws
/// ConfigError on an architecture or schedule mismatch.
Denoiser load_model(const RunConfig& cfg, const std::string& path);

/// Reference frame 0 of a sequence with its depth corrupted per the config.
ReferenceInput reference_input(const RunConfig& cfg, const Sequence& seq, const std::optional<Mask>& edit = std::nullopt);

/// Full sampling: first pass, then the refinement pass. view_depths (one per
/// target) are the depth proxies for generated views; empty uses the
/// reference-warp depth buffers.
SampleResult generate(const RunConfig& cfg, const EpsPredictor& model, const ReferenceInput& in,
                      const std::vector<DepthMap>& view_depths = {});

/// Samples from the sequence in <dir> (reference frame 0, trajectory and,
/// when present, target depths) into <paths.run>: frame PNGs in the
/// sequence layout, contact_sheet.png, cond/ dumps and metadata.json.
void cmd_sample(const RunConfig& cfg, const std::string& sequence_dir, const std::string& edit_mask_path = "");

struct EvalReport {
  int short_index = 0;
  int long_index = 0;
  /// Absent without ground truth; +inf for identical frames.
  std::optional<double> psnr_short, psnr_long, masked_psnr;
  std::vector<double> psnr_per_view;
  TsedReport tsed;
};

/// Frames are the reference plus N views with relative cameras. PSNR needs
/// ground truth; masked PSNR is over the reference-warp validity region.
EvalReport evaluate(const RunConfig& cfg, const std::vector<Image>& frames, const Trajectory& trajectory,
                    const Sequence* truth = nullptr);
std::string eval_to_json(const EvalReport& r);
std::string eval_to_csv(const EvalReport& r);
/// Writes report.json and report.csv into <paths.run>.
void cmd_eval(const RunConfig& cfg, const std::string& generated_dir, const std::string& truth_dir = "");

/// Writes the forward warp, its mask and the warped noise from frame 0 of
/// the sequence into target view `target` under <paths.run>.
void cmd_warp(const RunConfig& cfg, const std::string& sequence_dir, int target);

/// config.txt in dir.
void write_config_snapshot(const RunConfig& cfg, const std::string& dir);

}  // namespace nvs
