#include "nvs/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"
#include "nvs/warp.hpp"

namespace nvs {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0xd1b54a32d192ed03ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string indexed(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", stem, i, ext);
  return buf;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Image plane_image(const Plane& p) {
  Image out(1, p.height(), p.width());
  out.data() = p.data();
  return out;
}

DepthMap load_depth(const fs::path& path) {
  const Tensor<float> t = load_vft(path.string());
  if (t.rank() != 2) throw DataError(path.string() + ": depth must be rank 2");
  DepthMap d(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)));
  std::copy(t.data(), t.data() + t.size(), d.data().begin());
  d.validate();
  return d;
}

void save_depth(const fs::path& path, const DepthMap& d) {
  save_vft(path.string(),
           Tensor<float>({static_cast<std::size_t>(d.height()), static_cast<std::size_t>(d.width())}, d.data()));
}

/// Reference frame, trajectory and whatever target depths exist.
struct SequenceFiles {
  Trajectory trajectory;
  Image reference;
  DepthMap reference_depth;
  std::vector<DepthMap> target_depths;  // empty unless every target has one
};

SequenceFiles read_sequence_files(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw DataError("not a sequence directory: " + dir);
  SequenceFiles f;
  f.trajectory = load_trajectory((root / "trajectory.json").string());
  f.reference = read_png((root / indexed("frame", 0, "png")).string());
  f.reference_depth = load_depth(root / indexed("depth", 0, "vft"));
  if (!f.reference_depth.same_size(f.reference)) throw DataError("reference frame and depth differ in size");
  std::vector<DepthMap> depths;
  for (std::size_t i = 1; i < f.trajectory.size(); ++i) {
    const fs::path p = root / indexed("depth", i, "vft");
    if (!fs::exists(p)) return f;
    depths.push_back(load_depth(p));
  }
  f.target_depths = std::move(depths);
  return f;
}

Mask read_mask(const std::string& path, int height, int width) {
  const Image img = read_png(path);
  if (img.height() != height || img.width() != width) throw DataError("edit mask size differs from the reference");
  Mask m(height, width);
  for (std::size_t p = 0; p < m.size(); ++p) m[p] = img.data()[p] > 0.5f ? 1.0f : 0.0f;
  return m;
}

json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream ss;
  ss.precision(10);
  ss << v;
  return ss.str();
}

}  // namespace

void write_config_snapshot(const RunConfig& cfg, const std::string& dir) {
  make_dir(dir);
  write_text(fs::path(dir) / kConfigSnapshot, config_to_text(cfg));
}

// ---------------------------------------------------------------------------
// Dataset.

std::vector<DatasetEntry> dataset_plan(const RunConfig& cfg) {
  const std::vector<TrajectoryKind> kinds = cfg.trajectory_kinds();
  std::vector<DatasetEntry> plan;
  for (int i = 0; i < cfg.sequences; ++i) {
    const auto k = static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04d", i);
    plan.push_back({name, mix(cfg.seed, 2 * k), mix(cfg.seed, 2 * k + 1), kinds[k % kinds.size()]});
  }
  return plan;
}

Sequence make_dataset_sequence(const RunConfig& cfg, const DatasetEntry& entry) {
  TrajectoryOptions opts;
  opts.resolution = cfg.resolution;
  return make_sequence(entry.scene_seed, entry.kind, cfg.views, entry.trajectory_seed, opts);
}

void cmd_scenegen(const RunConfig& cfg) {
  const fs::path root(cfg.data_dir);
  make_dir(root);
  json manifest;
  manifest["resolution"] = cfg.resolution;
  manifest["views"] = cfg.views;
  manifest["seed"] = cfg.seed;
  json list = json::array();
  for (const DatasetEntry& e : dataset_plan(cfg)) {
    write_sequence((root / e.name).string(), make_dataset_sequence(cfg, e));
    list.push_back({{"name", e.name},
                    {"scene_seed", e.scene_seed},
                    {"trajectory_seed", e.trajectory_seed},
                    {"kind", to_string(e.kind)}});
  }
  manifest["count"] = list.size();
  manifest["sequences"] = std::move(list);
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  write_config_snapshot(cfg, cfg.data_dir);
}

std::vector<Sequence> load_dataset(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(fs::path(dir) / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  std::vector<Sequence> out;
  try {
    for (const auto& s : manifest.at("sequences")) out.push_back(read_sequence((fs::path(dir) / s.at("name").get<std::string>()).string()));
  } catch (const json::exception& e) {
    throw DataError("dataset manifest malformed: " + std::string(e.what()));
  }
  if (out.empty()) throw DataError("dataset " + dir + " lists no sequences");
  return out;
}

// ---------------------------------------------------------------------------
// Training.

std::string checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? (fs::path(cfg.run_dir) / "checkpoint.bin").string() : cfg.checkpoint;
}

Denoiser train_model(const RunConfig& cfg, const std::vector<Sequence>& dataset, const std::string& ck_path,
                     const std::string& loss_log_path) {
  cfg.validate();
  const DiffusionSchedule sched = cfg.diffusion_schedule();
  Denoiser model{cfg.model(), initialize(cfg.model(), cfg.init_mode(), cfg.seed, sched, cfg.pretext()), sched};
  TrainState state;
  TrainOptions opts = cfg.train_options();
  opts.checkpoint_path = ck_path;
  opts.loss_log_path = loss_log_path;
  opts.checkpoint_extra = json{{"config", config_to_text(cfg)}}.dump();
  train(model, state, dataset, sched, opts);
  return model;
}

Denoiser load_model(const RunConfig& cfg, const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  const DenoiserConfig want = cfg.model();
  if (ck.config.channels != want.channels || ck.config.time_features != want.time_features ||
      ck.config.pose_frequencies != want.pose_frequencies || ck.config.use_pose != want.use_pose)
    throw ConfigError("checkpoint " + path + " was trained with a different model configuration");
  if (ck.schedule != cfg.schedule || ck.timesteps != cfg.timesteps)
    throw ConfigError("checkpoint " + path + " was trained with a different diffusion schedule");
  return {ck.config, ck.params, make_schedule(ck.timesteps, ck.schedule)};
}

void cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const std::vector<Sequence> dataset = load_dataset(cfg.data_dir);
  make_dir(cfg.run_dir);
  write_config_snapshot(cfg, cfg.run_dir);
  const std::string ck = checkpoint_path(cfg);
  const std::string log = (fs::path(cfg.run_dir) / "loss.csv").string();
  if (!fs::exists(ck)) {
    train_model(cfg, dataset, ck, log);
    return;
  }
  // Resume: same architecture, remaining steps only.
  Checkpoint saved = load_checkpoint(ck);
  Denoiser model = load_model(cfg, ck);
  TrainOptions opts = cfg.train_options();
  opts.steps = static_cast<int>(std::max<std::int64_t>(0, cfg.train_steps - saved.state.step));
  opts.checkpoint_path = ck;
  opts.loss_log_path = log;
  opts.init = saved.init;
  opts.checkpoint_extra = saved.extra_json;
  train(model, saved.state, dataset, cfg.diffusion_schedule(), opts);
}

// ---------------------------------------------------------------------------
// Sampling.

ReferenceInput reference_input(const RunConfig& cfg, const Sequence& seq, const std::optional<Mask>& edit) {
  const DepthNoiseModel noise = cfg.depth_noise();
  const bool clean = noise.sigma == 0 && noise.scale == 1 && noise.offset == 0;
  DepthMap depth = clean ? seq.depths[0] : corrupt_depth(seq.depths[0], noise, mix(cfg.seed, 0x5eed));
  return {seq.frames[0], std::move(depth), seq.path.relative, edit};
}

SampleResult generate(const RunConfig& cfg, const EpsPredictor& model, const ReferenceInput& in,
                      const std::vector<DepthMap>& view_depths) {
  const DiffusionSchedule sched = cfg.diffusion_schedule();
  const SamplingOptions opts = cfg.sampling();
  SampleResult first = sample_views(model, in, sched, opts, cfg.seed);
  if (opts.refine_threshold < 0) return first;
  const std::vector<DepthMap> depths = view_depths.empty() ? warp_depth_proxies(warp_reference(in)) : view_depths;
  return refine_pass(model, first, in, depths, sched, opts, cfg.seed);
}

void cmd_sample(const RunConfig& cfg, const std::string& sequence_dir, const std::string& edit_mask_path) {
  cfg.validate();
  const SequenceFiles files = read_sequence_files(sequence_dir);
  const Denoiser model = load_model(cfg, checkpoint_path(cfg));
  std::optional<Mask> edit;
  if (!edit_mask_path.empty()) edit = read_mask(edit_mask_path, files.reference.height(), files.reference.width());

  Sequence seq;
  seq.frames = {files.reference};
  seq.depths = {files.reference_depth};
  seq.path.relative = files.trajectory;
  const ReferenceInput in = reference_input(cfg, seq, edit);
  const SampleResult r = generate(cfg, model.predictor(), in, files.target_depths);

  const fs::path root(cfg.run_dir);
  make_dir(root / "cond");
  write_config_snapshot(cfg, cfg.run_dir);
  const std::size_t n = r.views.dim(0);
  std::vector<Image> tiles{files.reference};
  write_png((root / indexed("frame", 0, "png")).string(), files.reference);
  for (std::size_t v = 0; v < n; ++v) {
    const Image img = tensor_to_image(r.views, v);
    write_png((root / indexed("frame", v + 1, "png")).string(), img);
    tiles.push_back(img);
    // y_tgt as the model saw it: warped image and validity mask.
    const std::size_t plane = static_cast<std::size_t>(img.height()) * img.width();
    Tensor<float> warped({3, static_cast<std::size_t>(img.height()), static_cast<std::size_t>(img.width())});
    std::copy(r.cond.target.data() + v * 4 * plane, r.cond.target.data() + (v * 4 + 3) * plane, warped.data());
    write_png((root / "cond" / indexed("warp", v + 1, "png")).string(), tensor_to_image(warped));
    Image mask(1, img.height(), img.width());
    std::copy(r.cond.target.data() + (v * 4 + 3) * plane, r.cond.target.data() + (v * 4 + 4) * plane,
              mask.data().begin());
    write_png((root / "cond" / indexed("mask", v + 1, "png")).string(), mask);
  }
  save_trajectory((root / "trajectory.json").string(), files.trajectory);
  const int columns = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(tiles.size()))));
  write_png((root / "contact_sheet.png").string(), contact_sheet(tiles, columns));

  json meta;
  meta["seeds"] = {{"run", cfg.seed}, {"first_pass_noise", cfg.seed}, {"refine_noise", cfg.seed + 1}};
  meta["checkpoint"] = checkpoint_path(cfg);
  meta["views"] = n;
  meta["sampler_steps"] = cfg.sampler_steps;
  meta["structured_noise"] = cfg.structured_noise;
  meta["no_warp"] = cfg.no_warp;
  meta["edit_mask"] = edit.has_value();
  meta["refine_threshold"] = cfg.refine_threshold;
  meta["depth_proxy"] = files.target_depths.empty() ? "reference_warp" : "provided";
  meta["passes"] = r.record.passes;
  json per = json::array();
  for (std::size_t v = 0; v < n; ++v)
    per.push_back({{"frame", v + 1},
                   {"overlap", r.record.overlap[v]},
                   {"refined", static_cast<bool>(r.record.refined[v])},
                   {"source", r.record.source[v]},
                   {"source_overlap", r.record.source_overlap[v]}});
  meta["per_view"] = std::move(per);
  write_text(root / "metadata.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Evaluation.

EvalReport evaluate(const RunConfig& cfg, const std::vector<Image>& frames, const Trajectory& trajectory,
                    const Sequence* truth) {
  if (frames.size() < 2 || frames.size() != trajectory.size())
    throw DataError("evaluate: need the reference plus at least one view, one camera per frame");
  const int n = static_cast<int>(frames.size()) - 1;
  EvalReport r;
  r.short_index = cfg.short_index > 0 ? std::min(cfg.short_index, n) : std::max(1, n / 4);
  r.long_index = cfg.long_index > 0 ? std::min(cfg.long_index, n) : n;
  TsedOptions topts;
  topts.stride = cfg.pair_stride;
  topts.aggregate = cfg.sed_aggregate;
  r.tsed = tsed(frames, trajectory.cameras, topts);
  if (!truth) return r;
  if (truth->frames.size() != frames.size()) throw DataError("evaluate: ground truth has a different frame count");
  for (int v = 1; v <= n; ++v) r.psnr_per_view.push_back(psnr(frames[v], truth->frames[v]));
  r.psnr_short = r.psnr_per_view[r.short_index - 1];
  r.psnr_long = r.psnr_per_view[r.long_index - 1];
  // Pooled over the pixels every view could see in the reference.
  double se = 0;
  std::size_t count = 0;
  for (int v = 1; v <= n; ++v) {
    const WarpResult w = forward_warp(truth->frames[0], truth->depths[0], trajectory[0], trajectory[v]);
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < w.mask.size(); ++p) {
        if (w.mask[p] == 0) continue;
        const double d = frames[v].data()[c * w.mask.size() + p] - truth->frames[v].data()[c * w.mask.size() + p];
        se += d * d;
        ++count;
      }
  }
  if (count > 0) r.masked_psnr = se == 0 ? std::numeric_limits<double>::infinity() : 10 * std::log10(count / se);
  return r;
}

std::string eval_to_json(const EvalReport& r) {
  json doc;
  doc["short_index"] = r.short_index;
  doc["long_index"] = r.long_index;
  auto opt = [](const std::optional<double>& v) { return v ? number_or_inf(*v) : json(nullptr); };
  doc["psnr_short"] = opt(r.psnr_short);
  doc["psnr_long"] = opt(r.psnr_long);
  doc["masked_psnr"] = opt(r.masked_psnr);
  json per = json::array();
  for (double p : r.psnr_per_view) per.push_back(number_or_inf(p));
  doc["psnr_per_view"] = std::move(per);
  doc["tsed"] = json::parse(tsed_to_json(r.tsed));
  return doc.dump(2) + "\n";
}

std::string eval_to_csv(const EvalReport& r) {
  std::string out = "metric,value\n";
  auto row = [&](const std::string& k, const std::string& v) { out += k + "," + v + "\n"; };
  row("short_index", std::to_string(r.short_index));
  row("long_index", std::to_string(r.long_index));
  if (r.psnr_short) row("psnr_short", csv_number(*r.psnr_short));
  if (r.psnr_long) row("psnr_long", csv_number(*r.psnr_long));
  if (r.masked_psnr) row("masked_psnr", csv_number(*r.masked_psnr));
  for (std::size_t v = 0; v < r.psnr_per_view.size(); ++v)
    row("psnr_view_" + std::to_string(v + 1), csv_number(r.psnr_per_view[v]));
  for (std::size_t k = 0; k < r.tsed.thresholds.size(); ++k)
    row("tsed_" + csv_number(r.tsed.thresholds[k]), csv_number(r.tsed.fractions[k]));
  row("mtsed", csv_number(r.tsed.mtsed));
  row("pairs_evaluated", std::to_string(r.tsed.evaluated));
  row("pairs_insufficient", std::to_string(r.tsed.insufficient));
  row("pairs_degenerate", std::to_string(r.tsed.degenerate));
  return out;
}

void cmd_eval(const RunConfig& cfg, const std::string& generated_dir, const std::string& truth_dir) {
  cfg.validate();
  const fs::path root(generated_dir);
  const Trajectory traj = load_trajectory((root / "trajectory.json").string());
  std::vector<Image> frames;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const fs::path p = root / indexed("frame", i, "png");
    if (!fs::exists(p)) throw DataError("generated directory lacks " + p.filename().string());
    frames.push_back(read_png(p.string()));
  }
  std::optional<Sequence> truth;
  if (!truth_dir.empty()) truth = read_sequence(truth_dir);
  const EvalReport r = evaluate(cfg, frames, traj, truth ? &*truth : nullptr);
  make_dir(cfg.run_dir);
  write_text(fs::path(cfg.run_dir) / "report.json", eval_to_json(r));
  write_text(fs::path(cfg.run_dir) / "report.csv", eval_to_csv(r));
}

// ---------------------------------------------------------------------------

void cmd_warp(const RunConfig& cfg, const std::string& sequence_dir, int target) {
  const SequenceFiles f = read_sequence_files(sequence_dir);
  if (target < 1 || target >= static_cast<int>(f.trajectory.size()))
    throw ConfigError("warp target must lie in [1, " + std::to_string(f.trajectory.size() - 1) + "]");
  const Camera& src = f.trajectory[0];
  const Camera& dst = f.trajectory[target];
  const WarpResult img = forward_warp(f.reference, f.reference_depth, src, dst);

  Rng rng(cfg.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Image eps0(3, f.reference.height(), f.reference.width());
  for (float& v : eps0.data()) v = normal(rng);
  const WarpResult noise = warp_noise(eps0, f.reference_depth, src, dst, receptive_px_for(f.reference.width()));

  const fs::path root(cfg.run_dir);
  make_dir(root);
  write_png((root / "warp.png").string(), img.image);
  write_png((root / "warp_mask.png").string(), plane_image(img.mask));
  DepthMap zbuf(img.zbuffer);
  for (float& z : zbuf.data())
    if (!std::isfinite(z)) z = 0.0f;
  save_depth(root / "warp_depth.vft", zbuf);
  Image shown = noise.image;
  for (float& v : shown.data()) v = 0.5f + 0.25f * v;
  write_png((root / "noise.png").string(), shown);
  write_png((root / "noise_mask.png").string(), plane_image(noise.mask));
  const auto h = static_cast<std::size_t>(eps0.height()), w = static_cast<std::size_t>(eps0.width());
  save_vft((root / "noise.vft").string(), Tensor<float>({3, h, w}, noise.image.data()));

  std::vector<int> uses(eps0.pixels(), 0);
  for (long s : noise.source)
    if (s >= 0) ++uses[s];
  json doc;
  doc["target"] = target;
  doc["overlap"] = overlap_ratio(img.mask);
  doc["noise_fill"] = overlap_ratio(noise.mask);
  doc["receptive_px"] = receptive_px_for(f.reference.width());
  doc["max_source_uses"] = *std::max_element(uses.begin(), uses.end());
  doc["seed"] = cfg.seed;
  write_text(root / "warp.json", doc.dump(2) + "\n");
  write_config_snapshot(cfg, cfg.run_dir);
}

}  // namespace nvs
