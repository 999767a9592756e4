#include "nvs/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace nvs {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::cosine ? "cosine" : "linear_beta"; }

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear_beta" || name == "linear") return ScheduleKind::linear_beta;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + name + "' (linear_beta, cosine)");
}

double DiffusionSchedule::at(int t) const {
  if (t < 0 || t > T) throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  return alpha_bar[t];
}

DiffusionSchedule make_schedule(int T, ScheduleKind kind) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  DiffusionSchedule s{kind, T, std::vector<double>(T + 1, 1.0)};
  if (kind == ScheduleKind::linear_beta) {
    for (int t = 1; t <= T; ++t) {
      const double beta = T == 1 ? kBetaEnd : kBetaStart + (kBetaEnd - kBetaStart) * (t - 1) / (T - 1);
      s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }
  } else {
    auto f = [&](int t) {
      const double c = std::cos((static_cast<double>(t) / T + 0.008) / 1.008 * std::numbers::pi / 2);
      return c * c;
    };
    for (int t = 1; t <= T; ++t) {
      const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
      s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }
  }
  return s;
}

namespace {

void check_step(int t, const DiffusionSchedule& sched) {
  if (t < 1 || t > sched.T)
    throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
}

}  // namespace

template <typename T>
Tensor<T> perturb(const Tensor<T>& z, const Tensor<T>& xi, int t, const DiffusionSchedule& sched) {
  check_step(t, sched);
  if (z.shape() != xi.shape()) throw ShapeError("perturb: " + shape_str(z.shape()) + " vs " + shape_str(xi.shape()));
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar[t])), b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[t]));
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = a * z[i] + b * xi[i];
  return out;
}

template <typename T>
Tensor<T> recover(const Tensor<T>& z_t, const Tensor<T>& eps, int t, const DiffusionSchedule& sched) {
  check_step(t, sched);
  if (z_t.shape() != eps.shape())
    throw ShapeError("recover: " + shape_str(z_t.shape()) + " vs " + shape_str(eps.shape()));
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar[t])), b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[t]));
  Tensor<T> out(z_t.shape());
  for (std::size_t i = 0; i < z_t.size(); ++i) out[i] = (z_t[i] - b * eps[i]) / a;
  return out;
}

template Tensor<float> perturb(const Tensor<float>&, const Tensor<float>&, int, const DiffusionSchedule&);
template Tensor<double> perturb(const Tensor<double>&, const Tensor<double>&, int, const DiffusionSchedule&);
template Tensor<float> recover(const Tensor<float>&, const Tensor<float>&, int, const DiffusionSchedule&);
template Tensor<double> recover(const Tensor<double>&, const Tensor<double>&, int, const DiffusionSchedule&);

std::vector<int> ddim_timesteps(int T, int num_steps) {
  if (num_steps < 1 || num_steps > T)
    throw ConfigError("sampler steps " + std::to_string(num_steps) + " outside [1, " + std::to_string(T) + "]");
  std::vector<int> steps;
  if (num_steps == 1) return {T};
  for (int i = 0; i < num_steps; ++i)
    steps.push_back(static_cast<int>(std::lround(T - static_cast<double>(T - 1) * i / (num_steps - 1))));
  return steps;
}

void Conditioning::validate() const {
  if (reference.rank() != 3 || reference.dim(0) != 3) throw ShapeError("conditioning: reference must be [3,H,W]");
  const std::size_t n = views(), h = reference.dim(1), w = reference.dim(2);
  if (n == 0 || poses.shape() != Shape{n, 12}) throw ShapeError("conditioning: poses must be [N,12] with N >= 1");
  if (target.shape() != Shape{n, 4, h, w})
    throw ShapeError("conditioning: y_tgt must be [N,4,H,W], got " + shape_str(target.shape()));
  const std::size_t plane = h * w;
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t p = 0; p < plane; ++p) {
      const float m = target[(v * 4 + 3) * plane + p];
      if (m != 0.0f && m != 1.0f) throw DataError("conditioning: y_tgt mask channel is not binary");
    }
  if (edit && (edit->height() != static_cast<int>(h) || edit->width() != static_cast<int>(w)))
    throw ShapeError("conditioning: edit mask size differs from the reference");
}

Tensor<float> image_to_tensor(const Image& image) {
  if (image.channels() != 3) throw DataError("expected a 3-channel image");
  Tensor<float> t({3, static_cast<std::size_t>(image.height()), static_cast<std::size_t>(image.width())});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 2.0f * image.data()[i] - 1.0f;
  return t;
}

Image tensor_to_image(const Tensor<float>& t, std::size_t view) {
  const bool batched = t.rank() == 4;
  if ((!batched && t.rank() != 3) || t.dim(batched ? 1 : 0) != 3) throw ShapeError("tensor_to_image: need [N,3,H,W]");
  const int h = static_cast<int>(t.dim(batched ? 2 : 1)), w = static_cast<int>(t.dim(batched ? 3 : 2));
  Image img(3, h, w);
  const std::size_t n = img.data().size(), offset = batched ? view * n : 0;
  if (batched && view >= t.dim(0)) throw ShapeError("tensor_to_image: view out of range");
  for (std::size_t i = 0; i < n; ++i) img.data()[i] = std::clamp(0.5f * (t[offset + i] + 1.0f), 0.0f, 1.0f);
  return img;
}

Tensor<float> pose_vector(const Camera& relative) {
  Tensor<float> v({12});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v[r * 3 + c] = static_cast<float>(relative.rotation(r, c));
  v[9] = static_cast<float>(relative.translation.x);
  v[10] = static_cast<float>(relative.translation.y);
  v[11] = static_cast<float>(relative.translation.z);
  return v;
}

namespace {

void check_input(const ReferenceInput& in) {
  in.trajectory.validate();
  if (in.image.channels() != 3) throw DataError("reference image must have 3 channels");
  if (!in.depth.same_size(in.image)) throw DataError("reference depth size differs from the image");
  if (in.edit && !in.edit->same_size(in.image)) throw DataError("edit mask size differs from the reference image");
  const auto& k = in.trajectory[0].k;
  if (std::abs(k.cx - (in.image.width() - 1) / 2.0) > 1e-6 * in.image.width() ||
      std::abs(k.cy - (in.image.height() - 1) / 2.0) > 1e-6 * in.image.height())
    throw DataError("trajectory intrinsics do not match the reference resolution");
}

std::optional<MaskedReference> masked(const ReferenceInput& in) {
  if (!in.edit) return std::nullopt;
  return mask_reference(in.image, in.depth, *in.edit);
}

}  // namespace

ReferenceWarps warp_reference(const ReferenceInput& in) {
  check_input(in);
  ReferenceWarps out;
  const auto ref = masked(in);
  for (std::size_t n = 1; n < in.trajectory.size(); ++n) {
    WarpResult w = ref ? forward_warp(*ref, in.trajectory[0], in.trajectory[n])
                       : forward_warp(in.image, in.depth, in.trajectory[0], in.trajectory[n]);
    out.overlap.push_back(overlap_ratio(w.mask));
    out.warps.push_back(std::move(w));
  }
  return out;
}

namespace {

void write_target(Tensor<float>& target, std::size_t view, const WarpResult& w) {
  const std::size_t plane = w.mask.size();
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      target[(view * 4 + c) * plane + p] = w.mask[p] != 0 ? 2.0f * w.image.data()[c * plane + p] - 1.0f : 0.0f;
  for (std::size_t p = 0; p < plane; ++p) target[(view * 4 + 3) * plane + p] = w.mask[p];
}

}  // namespace

Conditioning build_conditioning(const ReferenceInput& in, const ReferenceWarps& warps, const ConditioningOptions& opts) {
  const std::size_t n = in.trajectory.size() - 1, h = in.image.height(), w = in.image.width();
  if (warps.warps.size() != n) throw DataError("build_conditioning: one warp per target view required");
  Conditioning c;
  c.reference = image_to_tensor(in.image);
  c.poses = Tensor<float>({n, 12});
  for (std::size_t v = 0; v < n; ++v) {
    const Tensor<float> p = pose_vector(in.trajectory[v + 1]);
    std::copy(p.data(), p.data() + 12, c.poses.data() + v * 12);
  }
  c.target = Tensor<float>({n, 4, h, w});
  if (!opts.no_warp)
    for (std::size_t v = 0; v < n; ++v) write_target(c.target, v, warps.warps[v]);
  c.edit = in.edit;
  return c;
}

Conditioning build_conditioning(const ReferenceInput& in, const ConditioningOptions& opts) {
  return build_conditioning(in, warp_reference(in), opts);
}

NoiseBundle sample_structured_noise(const ReferenceInput& in, std::uint64_t seed, bool structured) {
  check_input(in);
  const std::size_t n = in.trajectory.size() - 1;
  const int h = in.image.height(), w = in.image.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Image eps0(3, h, w);
  for (float& v : eps0.data()) v = normal(rng);
  NoiseBundle b{Tensor<float>({n, 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}), {}, {}};
  for (float& v : b.xi.values()) v = normal(rng);
  const auto ref = masked(in);
  const double r = receptive_px_for(w);
  for (std::size_t v = 0; v < n; ++v) {
    if (!structured) {
      b.masks.emplace_back(h, w);
      continue;
    }
    WarpResult wn = ref ? warp_noise(eps0, *ref, in.trajectory[0], in.trajectory[v + 1], r)
                        : warp_noise(eps0, in.depth, in.trajectory[0], in.trajectory[v + 1], r);
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        if (wn.mask[p] != 0) b.xi[(v * 3 + c) * plane + p] = wn.image.data()[c * plane + p];
    b.masks.push_back(std::move(wn.mask));
  }
  b.eps0 = std::move(eps0);
  return b;
}

namespace {

Tensor<float> run_ddim(const EpsPredictor& model, const Conditioning& cond, const Tensor<float>& z_T,
                       const DiffusionSchedule& sched, int steps) {
  cond.validate();
  return ddim_sample([&](const Tensor<float>& z, int t) { return model(z, cond, t); }, z_T, sched, steps);
}

void check_finite(const Tensor<float>& t, const char* what) {
  for (float v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace

SampleResult sample_views(const EpsPredictor& model, const ReferenceInput& in, const DiffusionSchedule& sched,
                          const SamplingOptions& opts, std::uint64_t seed) {
  const ReferenceWarps warps = warp_reference(in);
  SampleResult r;
  r.cond = build_conditioning(in, warps, opts.conditioning);
  const NoiseBundle noise = sample_structured_noise(in, seed, opts.structured_noise);
  r.views = run_ddim(model, r.cond, noise.xi, sched, opts.steps);
  check_finite(r.views, "sample");
  r.record.overlap = warps.overlap;
  r.record.source.assign(warps.overlap.size(), 0);
  r.record.source_overlap = warps.overlap;
  r.record.refined.assign(warps.overlap.size(), false);
  return r;
}

SampleResult refine_pass(const EpsPredictor& model, const SampleResult& first, const ReferenceInput& in,
                         const std::vector<DepthMap>& view_depths, const DiffusionSchedule& sched,
                         const SamplingOptions& opts, std::uint64_t seed, int pass) {
  const std::size_t n = first.record.overlap.size();
  if (view_depths.size() != n) throw DataError("refine_pass: one depth map per generated view required");
  SampleResult out = first;
  bool any = false;
  for (std::size_t v = 0; v < n; ++v) {
    if (!(first.record.overlap[v] < opts.refine_threshold)) continue;
    int best = -1;
    double best_overlap = -1;
    WarpResult best_warp;
    for (std::size_t m = 0; m < n; ++m) {
      if (m == v) continue;
      WarpResult w;
      try {
        w = forward_warp(tensor_to_image(first.views, m), view_depths[m], in.trajectory[m + 1], in.trajectory[v + 1]);
      } catch (const DataError&) {
        continue;
      }
      const double o = overlap_ratio(w.mask);
      if (o > best_overlap) {
        best_overlap = o;
        best = static_cast<int>(m) + 1;
        best_warp = std::move(w);
      }
    }
    if (best < 0) continue;
    any = true;
    out.record.refined[v] = true;
    out.record.source[v] = best;
    out.record.source_overlap[v] = best_overlap;
    if (!opts.conditioning.no_warp) write_target(out.cond.target, v, best_warp);
  }
  if (!any) return first;
  const NoiseBundle noise = sample_structured_noise(in, seed + static_cast<std::uint64_t>(pass), opts.structured_noise);
  out.views = run_ddim(model, out.cond, noise.xi, sched, opts.steps);
  check_finite(out.views, "refine");
  out.record.passes = first.record.passes + 1;
  return out;
}

std::vector<DepthMap> warp_depth_proxies(const ReferenceWarps& warps) {
  std::vector<DepthMap> out;
  for (const auto& w : warps.warps) {
    DepthMap d(Plane(w.zbuffer.height(), w.zbuffer.width()));
    for (std::size_t p = 0; p < d.size(); ++p) d[p] = std::isfinite(w.zbuffer[p]) ? w.zbuffer[p] : 0.0f;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace nvs
