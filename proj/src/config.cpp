#include "nvs/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace nvs {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("config " + key + ": cannot parse '" + text + "'");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config " + key + ": expected true or false, got '" + text + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Entry {
  std::string key;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Entry number(std::string key, std::string doc, T RunConfig::*field) {
  Entry e{key, std::move(doc), {}, {}};
  e.set = [key, field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(key, v); };
  if constexpr (std::is_floating_point_v<T>)
    e.get = [field](const RunConfig& c) { return format_double(c.*field); };
  else
    e.get = [field](const RunConfig& c) { return std::to_string(c.*field); };
  return e;
}

Entry flag(std::string key, std::string doc, bool RunConfig::*field) {
  Entry e{key, std::move(doc), {}, {}};
  e.set = [key, field](RunConfig& c, const std::string& v) { c.*field = parse_bool(key, v); };
  e.get = [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); };
  return e;
}

Entry text(std::string key, std::string doc, std::string RunConfig::*field) {
  return {key, std::move(doc), [field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(number("seed", "master seed for data, initialisation, training and sampling", &RunConfig::seed));
    t.push_back(number("data.resolution", "image side in pixels", &RunConfig::resolution));
    t.push_back(number("data.views", "target views per sequence (N)", &RunConfig::views));
    t.push_back(number("data.sequences", "sequences written by scenegen", &RunConfig::sequences));
    t.push_back(text("data.trajectories", "comma-separated trajectory kinds, round-robin", &RunConfig::trajectories));
    t.push_back({"diffusion.schedule", "linear_beta or cosine",
                 [](RunConfig& c, const std::string& v) { c.schedule = schedule_kind_from_string(v); },
                 [](const RunConfig& c) { return to_string(c.schedule); }});
    t.push_back(number("diffusion.timesteps", "training timesteps T", &RunConfig::timesteps));
    t.push_back(number("sample.steps", "DDIM steps", &RunConfig::sampler_steps));
    t.push_back(flag("sample.structured_noise", "warp shared reference noise into every view", &RunConfig::structured_noise));
    t.push_back(number("sample.refine_threshold", "overlap below which a view is refined; negative disables",
                       &RunConfig::refine_threshold));
    t.push_back(flag("ablation.no_warp", "zero the warped-reference condition", &RunConfig::no_warp));
    t.push_back(flag("ablation.no_pose", "drop the pose token", &RunConfig::no_pose));
    t.push_back(flag("ablation.no_prior", "skip pretext initialisation", &RunConfig::no_prior));
    t.push_back(flag("ablation.no_vid", "single-frame pretext initialisation", &RunConfig::no_vid));
    t.push_back(number("model.channels", "level-0 channel count C", &RunConfig::channels));
    t.push_back(number("model.time_features", "sinusoidal timestep features", &RunConfig::time_features));
    t.push_back(number("model.pose_frequencies", "octaves of the pose lift", &RunConfig::pose_frequencies));
    t.push_back(number("train.steps", "optimizer steps", &RunConfig::train_steps));
    t.push_back(number("train.lr", "Adam learning rate", &RunConfig::lr));
    t.push_back(number("train.warmup", "linear learning-rate warmup steps", &RunConfig::warmup));
    t.push_back(number("train.grad_clip", "global gradient-norm clip; <= 0 disables", &RunConfig::grad_clip));
    t.push_back(number("train.checkpoint_every", "steps between checkpoints; 0 only at the end", &RunConfig::checkpoint_every));
    t.push_back(flag("train.depth_noise", "corrupt the reference depth per step", &RunConfig::train_depth_noise));
    t.push_back(number("pretext.steps", "pretext steps behind the initialisation", &RunConfig::pretext_steps));
    t.push_back(number("pretext.lr", "pretext learning rate", &RunConfig::pretext_lr));
    t.push_back(number("pretext.clips", "rendered pretext clips", &RunConfig::pretext_clips));
    t.push_back(number("depth.sigma", "multiplicative depth noise at sampling", &RunConfig::depth_sigma));
    t.push_back(number("depth.scale", "global depth scale at sampling", &RunConfig::depth_scale));
    t.push_back(number("depth.offset", "depth offset at sampling", &RunConfig::depth_offset));
    t.push_back(number("eval.short_index", "short-term frame index; 0 means N/4", &RunConfig::short_index));
    t.push_back(number("eval.long_index", "long-term frame index; 0 means N", &RunConfig::long_index));
    t.push_back(number("eval.pair_stride", "TSED frame-pair stride", &RunConfig::pair_stride));
    t.push_back({"eval.sed_aggregate", "median or mean SED per frame pair",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "median")
                     c.sed_aggregate = SedAggregate::median;
                   else if (v == "mean")
                     c.sed_aggregate = SedAggregate::mean;
                   else
                     throw ConfigError("config eval.sed_aggregate: expected median or mean, got '" + v + "'");
                 },
                 [](const RunConfig& c) { return std::string(c.sed_aggregate == SedAggregate::median ? "median" : "mean"); }});
    t.push_back(text("paths.data", "dataset directory", &RunConfig::data_dir));
    t.push_back(text("paths.run", "run output directory", &RunConfig::run_dir));
    t.push_back(text("paths.checkpoint", "checkpoint file; empty means <paths.run>/checkpoint.bin", &RunConfig::checkpoint));
    return t;
  }();
  return table;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries())
    if (e.key == key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(resolution >= 8 && resolution % 2 == 0, "data.resolution must be even and >= 8");
  require(views >= 1, "data.views must be >= 1");
  require(sequences >= 1, "data.sequences must be >= 1");
  require(timesteps >= 1, "diffusion.timesteps must be >= 1");
  require(sampler_steps >= 1 && sampler_steps <= timesteps, "sample.steps must lie in [1, diffusion.timesteps]");
  require(train_steps >= 0 && warmup >= 0 && checkpoint_every >= 0, "train step counts must be >= 0");
  require(lr > 0 && pretext_lr > 0, "learning rates must be positive");
  require(pretext_steps >= 0 && pretext_clips >= 1, "pretext.steps >= 0 and pretext.clips >= 1");
  require(depth_scale > 0 && depth_sigma >= 0, "depth.scale must be positive and depth.sigma >= 0");
  require(short_index >= 0 && short_index <= views && long_index >= 0 && long_index <= views,
          "eval indices must lie in [0, data.views]");
  require(pair_stride >= 1, "eval.pair_stride must be >= 1");
  require(!(no_prior && no_vid), "ablation.no_prior and ablation.no_vid are exclusive");
  model().validate();
  trajectory_kinds();
}

DenoiserConfig RunConfig::model() const {
  DenoiserConfig m;
  m.channels = channels;
  m.time_features = time_features;
  m.pose_frequencies = pose_frequencies;
  m.use_pose = !no_pose;
  return m;
}

InitMode RunConfig::init_mode() const {
  if (no_prior) return InitMode::scratch;
  if (no_vid) return InitMode::no_vid;
  return InitMode::video_prior_sim;
}

DepthNoiseModel RunConfig::depth_noise() const { return {depth_sigma, depth_scale, depth_offset}; }

std::vector<TrajectoryKind> RunConfig::trajectory_kinds() const {
  std::vector<TrajectoryKind> kinds;
  std::stringstream ss(trajectories);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) kinds.push_back(trajectory_kind_from_string(item));
  }
  if (kinds.empty()) throw ConfigError("config data.trajectories is empty");
  return kinds;
}

SamplingOptions RunConfig::sampling() const {
  SamplingOptions o;
  o.steps = sampler_steps;
  o.structured_noise = structured_noise;
  o.conditioning.no_warp = no_warp;
  o.refine_threshold = refine_threshold;
  return o;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.steps = train_steps;
  o.lr = lr;
  o.warmup = warmup;
  o.grad_clip = grad_clip;
  o.structured_noise = structured_noise;
  o.conditioning.no_warp = no_warp;
  o.depth_noise = train_depth_noise;
  o.seed = seed;
  o.checkpoint_every = checkpoint_every;
  o.init = init_mode();
  return o;
}

PretextOptions RunConfig::pretext() const {
  PretextOptions p;
  p.steps = pretext_steps;
  p.lr = pretext_lr;
  p.seed = seed + 7;
  p.clips = pretext_clips;
  p.views = views;
  return p;
}

DiffusionSchedule RunConfig::diffusion_schedule() const { return make_schedule(timesteps, schedule); }

const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const auto keys = [] {
    std::vector<std::pair<std::string, std::string>> k;
    for (const auto& e : entries()) k.emplace_back(e.key, e.doc);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_entry(key).get(cfg); }

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
}

RunConfig resolve_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  if (!file.empty()) apply_config_file(cfg, file);
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

}  // namespace nvs
