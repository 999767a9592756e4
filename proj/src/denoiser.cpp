#include "nvs/denoiser.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace nvs {

void DenoiserConfig::validate() const {
  if (channels < 4 || channels > 256) throw ConfigError("model.channels must be in [4, 256]");
  if (time_features < 2 || time_features % 2) throw ConfigError("model.time_features must be even and >= 2");
  if (pose_frequencies < 0 || pose_frequencies > 16) throw ConfigError("model.pose_frequencies must be in [0, 16]");
}

std::string to_string(InitMode mode) {
  switch (mode) {
    case InitMode::video_prior_sim: return "video_prior_sim";
    case InitMode::no_vid: return "no_vid";
    case InitMode::scratch: return "scratch";
  }
  return "?";
}

InitMode init_mode_from_string(const std::string& name) {
  if (name == "video_prior_sim") return InitMode::video_prior_sim;
  if (name == "no_vid") return InitMode::no_vid;
  if (name == "scratch" || name == "no_prior") return InitMode::scratch;
  throw ConfigError("unknown init mode '" + name + "' (video_prior_sim, no_vid, scratch)");
}

namespace {

// Encoder layers and their control-branch twins.
const char* const kEncoderLayers[] = {"enc0", "enc1", "down"};
const char* const kFusion[] = {"zc0", "zc1", "zc2", "zc3", "zc4", "zc5"};

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

bool is_fusion_param(const std::string& name) { return starts_with(name, "zc"); }
bool is_control_param(const std::string& name) { return starts_with(name, "ctrl") || is_fusion_param(name); }
bool is_attention_param(const std::string& name) { return starts_with(name, "attn") || starts_with(name, "cross"); }

ParamSet<float> init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t c = cfg.channels, d = cfg.width(), tf = cfg.time_features, pf = cfg.pose_features();
  ParamSet<float> p;
  auto normal = [&](Shape s, double stddev) { return Tensor<float>::randn(std::move(s), rng, static_cast<float>(stddev)); };
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, double gain = 1.0) {
    p.add(name + ".w", normal({out, in, k, k}, gain * std::sqrt(2.0 / static_cast<double>(in * k * k))));
    p.add(name + ".b", Tensor<float>({out}));
  };
  auto film = [&](const std::string& name, std::size_t ch) {
    p.add(name + ".fs", Tensor<float>({d, ch}));
    p.add(name + ".fh", Tensor<float>({d, ch}));
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    p.add(name + ".w", normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
    p.add(name + ".b", Tensor<float>({out}));
  };
  auto attn = [&](const std::string& name, std::size_t ch) {
    for (const char* m : {".q", ".k", ".v", ".o"}) p.add(name + m, normal({ch, ch}, 1.0 / std::sqrt(static_cast<double>(ch))));
  };

  linear("time1", tf, d);
  linear("time2", d, d);
  conv("enc0", c, 3, 3);
  film("enc0", c);
  conv("enc1", c, c, 3);
  film("enc1", c);
  attn("attn0", c);
  conv("down", d, c, 3);
  film("down", d);
  attn("attn1", d);
  attn("cross", d);
  conv("mid", d, d, 3);
  film("mid", d);
  conv("up", c, d + c, 3);
  film("up", c);
  conv("up2", c, c, 3);
  film("up2", c);
  conv("out", 3, c, 3, 0.1);

  conv("ref0", c, 3, 3);
  conv("ref1", d, c, 3);
  linear("ref_proj", d, d);
  linear("pose_proj", pf, d);
  p.add("frame_token", normal({1, d}, 1.0));

  conv("ctrl_in", c, 4, 3);
  for (const char* layer : kEncoderLayers) {
    const std::string src = layer;
    for (const char* suffix : {".w", ".b", ".fs", ".fh"}) p.add("ctrl_" + src + suffix, p.get(src + suffix));
  }
  const std::size_t fusion_width[] = {c, c, d, d, c, c};
  for (int i = 0; i < 6; ++i) {
    p.add(std::string(kFusion[i]) + ".w", Tensor<float>({fusion_width[i], fusion_width[i], 1, 1}));
    p.add(std::string(kFusion[i]) + ".b", Tensor<float>({fusion_width[i]}));
  }
  p.add("zc_gate.w", Tensor<float>({3, c, 1, 1}));
  p.add("zc_gate.b", Tensor<float>({3}));
  return p;
}

void copy_encoder_to_control(ParamSet<float>& params) {
  for (const char* layer : kEncoderLayers) {
    const std::string src = layer;
    for (const char* suffix : {".w", ".b", ".fs", ".fh"}) params.get("ctrl_" + src + suffix) = params.get(src + suffix);
  }
}

template <typename T>
Tensor<T> pose_features(const Tensor<T>& poses, int frequencies) {
  if (poses.rank() != 2 || poses.dim(1) != 12) throw ShapeError("pose_features: poses must be [N,12]");
  const std::size_t n = poses.dim(0), per = 12 * (1 + 2 * static_cast<std::size_t>(frequencies));
  Tensor<T> out({n, per});
  for (std::size_t v = 0; v < n; ++v) {
    T* row = out.data() + v * per;
    for (int i = 0; i < 12; ++i) {
      const T x = poses[v * 12 + i];
      row[i] = x;
      for (int k = 0; k < frequencies; ++k) {
        const T f = static_cast<T>(1 << k);
        row[12 + (i * frequencies + k) * 2] = std::sin(f * x);
        row[12 + (i * frequencies + k) * 2 + 1] = std::cos(f * x);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> time_features(int t, int features) {
  Tensor<T> out({1, static_cast<std::size_t>(features)});
  const int half = features / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = static_cast<T>(std::sin(t * freq));
    out[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

template <typename T>
BoundParams<T>::BoundParams(Tape<T>& tape, const ParamSet<T>& params, bool trainable) {
  for (const auto& item : params.items()) {
    index_[item.name] = vars_.size();
    vars_.push_back(trainable ? tape.param(item.value) : tape.constant(item.value));
  }
}

template <typename T>
Var<T> BoundParams<T>::operator[](const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing model parameter '" + name + "'");
  return vars_[it->second];
}

namespace {

template <typename T>
struct Net {
  Tape<T>& tape;
  const BoundParams<T>& p;
  Var<T> temb;  // [1, D]

  Var<T> conv(Var<T> x, const std::string& name) const { return ops::conv2d(x, p[name + ".w"], p[name + ".b"]); }

  Var<T> linear(Var<T> x, const std::string& name) const { return ops::add(ops::matmul(x, p[name + ".w"]), p[name + ".b"]); }

  // h * (1 + s(t)) + b(t), per channel.
  Var<T> film(Var<T> h, const std::string& name) const {
    const std::size_t ch = h.shape()[1];
    Var<T> s = ops::reshape(ops::matmul(temb, p[name + ".fs"]), {ch, 1, 1});
    Var<T> b = ops::reshape(ops::matmul(temb, p[name + ".fh"]), {ch, 1, 1});
    return ops::add(ops::mul(h, ops::add_scalar(s, T{1})), b);
  }

  Var<T> layer(Var<T> x, const std::string& name) const { return ops::silu(film(conv(x, name), name)); }

  Var<T> project(Var<T> tokens, const std::string& w, Shape shape) const {
    const std::size_t ch = tokens.shape().back();
    return ops::reshape(ops::matmul(ops::reshape(tokens, {tokens.value().size() / ch, ch}), p[w]), std::move(shape));
  }

  // Attention across views at every pixel, with a residual.
  Var<T> correspondence(Var<T> h, const std::string& name) const {
    const Shape s = h.shape();
    const std::size_t n = s[0], c = s[1], hh = s[2], ww = s[3];
    Var<T> tok = ops::permute(h, {2, 3, 0, 1});  // [H,W,N,C]
    const Shape grouped{hh * ww, n, c};
    Var<T> a = ops::attention(project(tok, name + ".q", grouped), project(tok, name + ".k", grouped),
                              project(tok, name + ".v", grouped));
    Var<T> o = project(a, name + ".o", {hh, ww, n, c});
    return ops::add(h, ops::permute(o, {2, 3, 0, 1}));
  }

  // Per-view cross-attention from pixels to the context tokens [N,L,D].
  Var<T> cross(Var<T> h, Var<T> ctx, const std::string& name) const {
    const Shape s = h.shape();
    const std::size_t n = s[0], c = s[1], hh = s[2], ww = s[3], l = ctx.shape()[1];
    Var<T> tok = ops::permute(h, {0, 2, 3, 1});  // [N,H,W,C]
    Var<T> a = ops::attention(project(tok, name + ".q", {n, hh * ww, c}), project(ctx, name + ".k", {n, l, c}),
                              project(ctx, name + ".v", {n, l, c}));
    Var<T> o = project(a, name + ".o", {n, hh, ww, c});
    return ops::add(h, ops::permute(o, {0, 3, 1, 2}));
  }
};

}  // namespace

template <typename T>
Var<T> denoiser_forward(Tape<T>& tape, const BoundParams<T>& p, const DenoiserConfig& cfg, Var<T> z_t,
                        const CondTensors<T>& cond, int t, double alpha_bar) {
  const Shape zs = z_t.shape();
  if (zs.size() != 4 || zs[1] != 3) throw ShapeError("denoiser: z_t must be [N,3,H,W], got " + shape_str(zs));
  const std::size_t n = zs[0], h = zs[2], w = zs[3];
  if (h % 2 || w % 2) throw ShapeError("denoiser: resolution must be even");
  if (cond.reference.shape() != Shape{3, h, w} || cond.poses.shape() != Shape{n, 12} ||
      cond.target.shape() != Shape{n, 4, h, w})
    throw ShapeError("denoiser: conditioning does not match z_t " + shape_str(zs));
  if (!(alpha_bar > 0 && alpha_bar < 1)) throw ConfigError("denoiser: alpha_bar must lie in (0, 1)");
  const std::size_t d = cfg.width();

  Net<T> net{tape, p, {}};
  net.temb = ops::silu(net.linear(ops::silu(net.linear(tape.constant(time_features<T>(t, cfg.time_features)), "time1")), "time2"));

  // Semantic condition: reference embedding, pose embedding, frame token.
  Var<T> r = ops::avg_pool2(ops::silu(net.conv(tape.constant(cond.reference.reshape({1, 3, h, w})), "ref0")));
  r = ops::silu(net.conv(r, "ref1"));  // [1,D,h/2,w/2]
  const std::size_t hw = (h / 2) * (w / 2);
  Var<T> ref_vec = ops::matmul(ops::reshape(r, {d, hw}), tape.constant(Tensor<T>({hw, 1}, T{1} / static_cast<T>(hw))));
  Var<T> ref_tok = net.linear(ops::reshape(ref_vec, {1, d}), "ref_proj");
  Var<T> zeros = tape.constant(Tensor<T>({n, 1, d}));
  std::vector<Var<T>> ctx_parts{ops::add(zeros, ref_tok)};
  if (cfg.use_pose) {
    Var<T> pose = net.linear(tape.constant(pose_features(cond.poses, cfg.pose_frequencies)), "pose_proj");
    ctx_parts.push_back(ops::reshape(pose, {n, 1, d}));
  }
  ctx_parts.push_back(ops::add(zeros, p["frame_token"]));
  Var<T> ctx = ops::concat(ctx_parts, 1);

  // Control branch on y_tgt.
  Var<T> y = tape.constant(cond.target);
  Var<T> c0 = ops::silu(net.film(ops::add(net.conv(z_t, "ctrl_enc0"), net.conv(y, "ctrl_in")), "ctrl_enc0"));
  Var<T> c1 = net.layer(c0, "ctrl_enc1");
  Var<T> c2 = net.layer(ops::avg_pool2(c1), "ctrl_down");
  auto fuse = [&](Var<T> hidden, Var<T> control, const char* zc) { return ops::add(hidden, net.conv(control, zc)); };

  Var<T> h0 = fuse(net.layer(z_t, "enc0"), c0, "zc0");
  Var<T> h1 = fuse(net.layer(h0, "enc1"), c1, "zc1");
  h1 = net.correspondence(h1, "attn0");
  Var<T> h2 = fuse(net.layer(ops::avg_pool2(h1), "down"), c2, "zc2");
  h2 = net.correspondence(h2, "attn1");
  h2 = net.cross(h2, ctx, "cross");
  Var<T> h3 = fuse(net.layer(h2, "mid"), c2, "zc3");
  Var<T> h4 = fuse(net.layer(ops::concat<T>({ops::upsample2(h3), h1}, 1), "up"), c1, "zc4");
  Var<T> h5 = fuse(net.layer(h4, "up2"), c0, "zc5");
  Var<T> eps = ops::add(ops::scale(net.conv(h5, "out"), static_cast<T>(eps_out(alpha_bar))),
                        ops::scale(z_t, static_cast<T>(eps_skip(alpha_bar))));

  // Warp prior: a learned gate moves the x0 estimate toward the warped
  // reference inside the validity mask, expressed in eps units.
  const std::size_t plane = h * w;
  Tensor<T> warped(zs), mask(zs);
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const T m = cond.target[(v * 4 + 3) * plane + i];
        mask[(v * 3 + c) * plane + i] = m;
        warped[(v * 3 + c) * plane + i] = m * cond.target[(v * 4 + c) * plane + i];
      }
  const double x0_skip = std::sqrt(alpha_bar) * kDataVariance / (alpha_bar * kDataVariance + 1 - alpha_bar);
  Var<T> residual = ops::sub(tape.constant(warped), ops::scale(ops::mul(tape.constant(mask), z_t), static_cast<T>(x0_skip)));
  // The fixed gain speeds up the gate under Adam's per-step bound without
  // moving its exact-zero start.
  Var<T> gate = ops::scale(net.conv(c1, "zc_gate"), static_cast<T>(kGateGain));
  Var<T> prior = ops::mul(gate, residual);
  // Posterior weight of the warp against z_t for a warp error of
  // kWarpErrorStd: near 1 at high noise, vanishing as t -> 0.
  const double e2 = kWarpErrorStd * kWarpErrorStd;
  const double weight = (1 - alpha_bar) / ((1 - alpha_bar) + alpha_bar * e2);
  return ops::add(eps, ops::scale(prior, static_cast<T>(-weight * std::sqrt(alpha_bar / (1 - alpha_bar)))));
}

template Tensor<float> pose_features(const Tensor<float>&, int);
template Tensor<double> pose_features(const Tensor<double>&, int);
template Tensor<float> time_features(int, int);
template Tensor<double> time_features(int, int);
template class BoundParams<float>;
template class BoundParams<double>;
template Var<float> denoiser_forward(Tape<float>&, const BoundParams<float>&, const DenoiserConfig&, Var<float>,
                                     const CondTensors<float>&, int, double);
template Var<double> denoiser_forward(Tape<double>&, const BoundParams<double>&, const DenoiserConfig&, Var<double>,
                                      const CondTensors<double>&, int, double);

double eps_skip(double alpha_bar) {
  if (!(alpha_bar > 0 && alpha_bar <= 1)) throw ConfigError("alpha_bar must lie in (0, 1]");
  return std::sqrt(1 - alpha_bar) / (alpha_bar * kDataVariance + 1 - alpha_bar);
}

double eps_out(double alpha_bar) {
  if (!(alpha_bar > 0 && alpha_bar <= 1)) throw ConfigError("alpha_bar must lie in (0, 1]");
  return std::sqrt(alpha_bar * kDataVariance / (alpha_bar * kDataVariance + 1 - alpha_bar));
}

Tensor<float> Denoiser::predict(const Tensor<float>& z_t, const Conditioning& cond, int t) const {
  Tape<float> tape;
  BoundParams<float> bound(tape, params, false);
  return denoiser_forward(tape, bound, config, tape.constant(z_t), cond_tensors<float>(cond), t, schedule.at(t)).value();
}

EpsPredictor Denoiser::predictor() const {
  return [this](const Tensor<float>& z, const Conditioning& c, int t) { return predict(z, c, t); };
}

// ---------------------------------------------------------------------------

TrainingExample make_example(const Sequence& seq, bool depth_noise, std::uint64_t seed) {
  if (seq.size() < 2) throw DataError("training sequence needs a reference and at least one target");
  TrainingExample ex;
  ex.input.image = seq.frames[0];
  ex.input.depth = depth_noise ? corrupt_depth(seq.depths[0], training_depth_noise(seed), seed) : seq.depths[0];
  ex.input.trajectory = seq.path.relative;
  const std::size_t n = seq.size() - 1, h = seq.frames[0].height(), w = seq.frames[0].width();
  ex.targets = Tensor<float>({n, 3, h, w});
  for (std::size_t v = 0; v < n; ++v) {
    const Tensor<float> f = image_to_tensor(seq.frames[v + 1]);
    std::copy(f.data(), f.data() + f.size(), ex.targets.data() + v * f.size());
  }
  return ex;
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double clip_gradients(std::vector<Tensor<float>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (float v : g.values()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& g : grads)
      for (float& v : g.values()) v *= s;
  }
  return norm;
}

struct StepResult {
  double loss = 0;
  std::vector<Tensor<float>> grads;
};

StepResult loss_and_grads(const Denoiser& model, const Tensor<float>& z0, const Tensor<float>& xi,
                          const CondTensors<float>& cond, int t, const DiffusionSchedule& sched) {
  Tape<float> tape;
  BoundParams<float> bound(tape, model.params, true);
  Var<float> loss = training_loss(
      tape, [&](Var<float> z_t, int step) { return denoiser_forward(tape, bound, model.config, z_t, cond, step, sched.at(step)); }, z0,
      xi, t, sched);
  tape.backward(loss);
  StepResult r{loss.value().item(), {}};
  for (const auto& v : bound.vars()) r.grads.push_back(tape.grad(v));
  return r;
}

void write_checkpoint_now(const Denoiser& model, const TrainState& state, const DiffusionSchedule& sched,
                          const std::string& path, InitMode init, const std::string& extra) {
  Checkpoint ck{model.config, sched.kind, sched.T, init, model.params, state, extra};
  save_checkpoint(path, ck);
}

}  // namespace

void train(Denoiser& model, TrainState& state, const std::vector<Sequence>& dataset, const DiffusionSchedule& sched,
           const TrainOptions& opts, const std::function<void(std::int64_t, double)>& on_step) {
  if (dataset.empty()) throw DataError("train: dataset is empty");
  if (opts.steps < 0) throw ConfigError("train.steps must be >= 0");
  std::ofstream log;
  if (!opts.loss_log_path.empty()) {
    log.open(opts.loss_log_path, state.step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot write loss log " + opts.loss_log_path);
    if (state.step == 0) log << "step,loss,wallclock\n";
  }
  const auto start = std::chrono::steady_clock::now();
  AdamOptions adam;
  const std::int64_t end = state.step + opts.steps;
  for (; state.step < end; ++state.step) {
    const std::int64_t s = state.step;
    Rng rng(mix_seed(opts.seed, static_cast<std::uint64_t>(s)));
    const Sequence& seq = dataset[rng() % dataset.size()];
    const TrainingExample ex = make_example(seq, opts.depth_noise, rng());
    const Conditioning cond = build_conditioning(ex.input, opts.conditioning);
    const NoiseBundle noise = sample_structured_noise(ex.input, rng(), opts.structured_noise);
    const int t = std::uniform_int_distribution<int>(1, sched.T)(rng);
    StepResult r = loss_and_grads(model, ex.targets, noise.xi, cond_tensors<float>(cond), t, sched);
    if (!std::isfinite(r.loss))
      throw NumericError("non-finite loss at step " + std::to_string(s) +
                         (opts.checkpoint_path.empty() ? "" : "; last good checkpoint kept at " + opts.checkpoint_path));
    clip_gradients(r.grads, opts.grad_clip);
    adam.lr = opts.lr * std::min(1.0, static_cast<double>(s + 1) / std::max(1, opts.warmup));
    adam_step(model.params, r.grads, state.adam, adam);
    state.losses.push_back(r.loss);
    if (log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log << s + 1 << ',' << r.loss << ',' << secs << '\n';
    }
    if (on_step) on_step(s + 1, r.loss);
    if (opts.checkpoint_every > 0 && !opts.checkpoint_path.empty() && (s + 1) % opts.checkpoint_every == 0) {
      TrainState saved = state;
      ++saved.step;
      write_checkpoint_now(model, saved, sched, opts.checkpoint_path, opts.init, opts.checkpoint_extra);
    }
  }
  if (!opts.checkpoint_path.empty()) write_checkpoint_now(model, state, sched, opts.checkpoint_path, opts.init, opts.checkpoint_extra);
}

ParamSet<float> initialize(const DenoiserConfig& cfg, InitMode mode, std::uint64_t seed, const DiffusionSchedule& sched,
                           const PretextOptions& pretext) {
  Denoiser model{cfg, init_params(cfg, seed), sched};
  if (mode == InitMode::scratch || pretext.steps <= 0) return model.params;
  if (pretext.clips < 1 || pretext.views < 1) throw ConfigError("pretext needs clips >= 1 and views >= 1");
  const bool video = mode == InitMode::video_prior_sim;
  std::vector<Sequence> clips;
  const TrajectoryKind kinds[] = {TrajectoryKind::dolly, TrajectoryKind::orbit, TrajectoryKind::scan};
  for (int i = 0; i < pretext.clips; ++i) {
    const std::uint64_t s = mix_seed(pretext.seed, 1000 + i);
    clips.push_back(make_sequence(s, kinds[i % 3], pretext.views - 1, s + 1));
  }
  const std::size_t h = clips[0].frames[0].height(), w = clips[0].frames[0].width();
  std::vector<bool> frozen;
  for (const auto& item : model.params.items())
    frozen.push_back(is_control_param(item.name) || (!video && is_attention_param(item.name)));
  AdamState<float> adam;
  AdamOptions opt;
  opt.lr = pretext.lr;
  for (int step = 0; step < pretext.steps; ++step) {
    Rng rng(mix_seed(pretext.seed, 1u << 20 | static_cast<std::uint64_t>(step)));
    const Sequence& clip = clips[rng() % clips.size()];
    const std::size_t group = video ? clip.size() : 1;
    const std::size_t calls = video ? 1 : clip.size();
    std::vector<Tensor<float>> grads;
    for (std::size_t call = 0; call < calls; ++call) {
      Tensor<float> z0({group, 3, h, w});
      for (std::size_t v = 0; v < group; ++v) {
        const Tensor<float> f = image_to_tensor(clip.frames[call * group + v]);
        std::copy(f.data(), f.data() + f.size(), z0.data() + v * f.size());
      }
      const Tensor<float> xi = Tensor<float>::randn(z0.shape(), rng);
      const CondTensors<float> blank{Tensor<float>({3, h, w}), Tensor<float>({group, 12}), Tensor<float>({group, 4, h, w})};
      const int t = std::uniform_int_distribution<int>(1, sched.T)(rng);
      StepResult r = loss_and_grads(model, z0, xi, blank, t, sched);
      if (!std::isfinite(r.loss)) throw NumericError("non-finite pretext loss at step " + std::to_string(step));
      if (grads.empty()) {
        grads = std::move(r.grads);
      } else {
        for (std::size_t k = 0; k < grads.size(); ++k)
          for (std::size_t e = 0; e < grads[k].size(); ++e) grads[k][e] += r.grads[k][e];
      }
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const float scale = frozen[k] ? 0.0f : 1.0f / static_cast<float>(calls);
      for (float& v : grads[k].values()) v *= scale;
    }
    clip_gradients(grads, 1.0);
    adam_step(model.params, grads, adam, opt);
  }
  copy_encoder_to_control(model.params);
  return model.params;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "nvs-checkpoint";

nlohmann::ordered_json config_json(const DenoiserConfig& c) {
  return {{"channels", c.channels},
          {"time_features", c.time_features},
          {"pose_frequencies", c.pose_frequencies},
          {"use_pose", c.use_pose}};
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::ordered_json header;
  header["format"] = kCheckpointFormat;
  header["version"] = 1;
  header["model"] = config_json(ck.config);
  header["schedule"] = {{"kind", to_string(ck.schedule)}, {"T", ck.timesteps}};
  header["init"] = to_string(ck.init);
  header["step"] = ck.state.step;
  header["parameter_count"] = ck.params.parameter_count();
  auto& names = header["params"] = nlohmann::ordered_json::array();
  for (const auto& item : ck.params.items()) names.push_back({{"name", item.name}, {"shape", item.value.shape()}});
  const bool moments = !ck.state.adam.m.empty();
  header["adam"] = {{"step", ck.state.adam.step}, {"moments", moments}};
  header["extra"] = nlohmann::ordered_json::parse(ck.extra_json.empty() ? "{}" : ck.extra_json);
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path);
    std::uint64_t len = text.size();
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(le), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& item : ck.params.items()) write_vft(out, item.value);
    if (moments) {
      for (const auto& m : ck.state.adam.m) write_vft(out, m);
      for (const auto& v : ck.state.adam.v) write_vft(out, v);
    }
    if (!out) throw DataError("failed writing checkpoint " + path);
  }
  std::rename(tmp.c_str(), path.c_str());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  unsigned char le[8];
  if (!in.read(reinterpret_cast<char*>(le), 8)) throw DataError("checkpoint truncated: " + path);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(le[i]) << (8 * i);
  if (len > (1u << 26)) throw DataError("checkpoint header too large: " + path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("checkpoint truncated: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint header is not JSON: " + std::string(e.what()));
  }
  if (header.value("format", "") != kCheckpointFormat) throw DataError("not a checkpoint: " + path);
  Checkpoint ck;
  try {
    const auto& m = header.at("model");
    ck.config.channels = m.at("channels");
    ck.config.time_features = m.at("time_features");
    ck.config.pose_frequencies = m.at("pose_frequencies");
    ck.config.use_pose = m.at("use_pose");
    ck.schedule = schedule_kind_from_string(header.at("schedule").at("kind"));
    ck.timesteps = header.at("schedule").at("T");
    ck.init = init_mode_from_string(header.at("init"));
    ck.state.step = header.at("step");
    ck.state.adam.step = header.at("adam").at("step");
    ck.extra_json = header.at("extra").dump();
    for (const auto& p : header.at("params")) {
      Tensor<float> t = read_vft(in);
      const Shape shape = p.at("shape").get<Shape>();
      if (t.shape() != shape) throw DataError("checkpoint tensor " + p.at("name").get<std::string>() + " has wrong shape");
      ck.params.add(p.at("name"), std::move(t));
    }
    if (header.at("adam").at("moments").get<bool>()) {
      for (auto* moments : {&ck.state.adam.m, &ck.state.adam.v})
        for (const auto& item : ck.params.items()) {
          Tensor<float> t = read_vft(in);
          if (t.shape() != item.value.shape()) throw DataError("checkpoint optimizer state has wrong shape");
          moments->push_back(std::move(t));
        }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint header malformed: " + std::string(e.what()));
  }
  ck.config.validate();
  return ck;
}

}  // namespace nvs
