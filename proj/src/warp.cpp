#include "nvs/warp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nvs {

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

struct Landing {
  double u = 0, v = 0, z = 0;
  bool hit = false;
};

struct Splat {
  std::vector<Landing> land;  // per source pixel
  std::vector<long> winner;   // per target pixel
  Plane zbuffer;
  std::size_t behind = 0, outside = 0;
};

void check_inputs(const Image& src, const DepthMap& depth, bool allow_empty = false) {
  if (!depth.same_size(src)) throw DataError("warp: image and depth differ in size");
  depth.validate();
  if (!allow_empty && depth.valid_count() == 0) throw DataError("warp: depth map has no valid pixel");
}

Splat splat(const DepthMap& depth, const Mask* exclude, const Camera& src_cam, const Camera& dst_cam) {
  const int h = depth.height(), w = depth.width();
  Splat s;
  s.land.resize(depth.size());
  s.winner.assign(depth.size(), -1);
  s.zbuffer = Plane(h, w, kInf);
  std::vector<double> best(depth.size(), std::numeric_limits<double>::infinity());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const long i = static_cast<long>(y) * w + x;
      const double d = depth[i];
      if (!(d > 0) || (exclude && (*exclude)[i] != 0)) continue;
      const auto p = project(dst_cam, unproject(src_cam, x, y, d));
      if (!p) {
        ++s.behind;
        continue;
      }
      const double tx = std::floor(p->u + 0.5), ty = std::floor(p->v + 0.5);
      if (tx < 0 || ty < 0 || tx >= w || ty >= h) {
        ++s.outside;
        continue;
      }
      s.land[i] = {p->u, p->v, p->depth, true};
      const long t = static_cast<long>(ty) * w + static_cast<long>(tx);
      if (p->depth < best[t]) {
        best[t] = p->depth;
        s.winner[t] = i;
      }
    }
  }
  for (std::size_t t = 0; t < best.size(); ++t)
    if (s.winner[t] >= 0) s.zbuffer[t] = static_cast<float>(best[t]);
  return s;
}

WarpResult splat_image(const Image& src, const DepthMap& depth, const Mask* exclude, const Camera& src_cam,
                       const Camera& dst_cam) {
  Splat s = splat(depth, exclude, src_cam, dst_cam);
  const int h = src.height(), w = src.width();
  WarpResult r{Image(src.channels(), h, w), Mask(h, w), std::move(s.zbuffer), std::move(s.winner), s.behind, s.outside};
  for (long t = 0; t < static_cast<long>(r.source.size()); ++t) {
    const long i = r.source[t];
    if (i < 0) continue;
    r.mask[t] = 1.0f;
    for (int c = 0; c < src.channels(); ++c) r.image.data()[c * r.image.pixels() + t] = src.data()[c * src.pixels() + i];
  }
  return r;
}

WarpResult gather_noise(const Image& eps0, const DepthMap& depth, const Mask* exclude, const Camera& src_cam,
                        const Camera& dst_cam, double receptive_px) {
  if (!(receptive_px >= 1.0)) throw ConfigError("warp_noise: receptive_px must be >= 1");
  Splat s = splat(depth, exclude, src_cam, dst_cam);
  const int h = eps0.height(), w = eps0.width();
  const std::size_t n = eps0.pixels();
  const int cap = static_cast<int>(std::ceil(receptive_px - 1e-9));
  const int max_uses = cap * cap;
  const double r2 = receptive_px * receptive_px + 1e-9;

  WarpResult r{Image(eps0.channels(), h, w), Mask(h, w), Plane(h, w, kInf), std::vector<long>(n, -1), s.behind,
               s.outside};
  std::vector<int> uses(n, 0);
  auto take = [&](long t, long i) {
    const long tx = t % w, ty = t / w, sx = i % w, sy = i / w;
    const double dx = static_cast<double>(tx - sx), dy = static_cast<double>(ty - sy);
    if (dx * dx + dy * dy > r2 || uses[i] >= max_uses) return false;
    ++uses[i];
    r.source[t] = i;
    r.mask[t] = 1.0f;
    r.zbuffer[t] = static_cast<float>(s.land[i].z);
    for (int c = 0; c < eps0.channels(); ++c) r.image.data()[c * n + t] = eps0.data()[c * n + i];
    return true;
  };

  // Direct landings first so a source serves its own pixel before any crack.
  for (long t = 0; t < static_cast<long>(n); ++t)
    if (s.winner[t] >= 0) take(t, s.winner[t]);

  for (long t = 0; t < static_cast<long>(n); ++t) {
    if (r.source[t] >= 0) continue;
    const long tx = t % w, ty = t / w;
    long best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (long ny = std::max(0L, ty - 1); ny <= std::min<long>(h - 1, ty + 1); ++ny) {
      for (long nx = std::max(0L, tx - 1); nx <= std::min<long>(w - 1, tx + 1); ++nx) {
        const long i = s.winner[ny * w + nx];
        if (i < 0) continue;
        const double du = s.land[i].u - tx, dv = s.land[i].v - ty;
        const double d = du * du + dv * dv;
        if (d < best_d || (d == best_d && i < best)) {
          best_d = d;
          best = i;
        }
      }
    }
    if (best >= 0) take(t, best);
  }
  return r;
}

}  // namespace

WarpResult forward_warp(const Image& src, const DepthMap& depth, const Camera& src_cam, const Camera& dst_cam) {
  check_inputs(src, depth);
  return splat_image(src, depth, nullptr, src_cam, dst_cam);
}

WarpResult forward_warp(const MaskedReference& ref, const Camera& src_cam, const Camera& dst_cam) {
  // an edit may legitimately remove every pixel
  check_inputs(ref.image, ref.depth, true);
  return splat_image(ref.image, ref.depth, &ref.edit, src_cam, dst_cam);
}

WarpResult warp_noise(const Image& eps0, const DepthMap& depth, const Camera& src_cam, const Camera& dst_cam,
                      double receptive_px) {
  check_inputs(eps0, depth);
  return gather_noise(eps0, depth, nullptr, src_cam, dst_cam, receptive_px);
}

WarpResult warp_noise(const Image& eps0, const MaskedReference& ref, const Camera& src_cam, const Camera& dst_cam,
                      double receptive_px) {
  check_inputs(eps0, ref.depth, true);
  return gather_noise(eps0, ref.depth, &ref.edit, src_cam, dst_cam, receptive_px);
}

double receptive_px_for(int resolution) { return std::max(1.0, 4.0 * resolution / 256.0); }

double overlap_ratio(const Mask& mask) { return mask.mean(); }

MaskedReference mask_reference(const Image& image, const DepthMap& depth, const Mask& edit_mask) {
  if (!edit_mask.same_size(image) || !depth.same_size(image)) throw DataError("mask_reference: size mismatch");
  MaskedReference out{image, depth, edit_mask};
  for (std::size_t i = 0; i < edit_mask.size(); ++i) {
    if (edit_mask[i] == 0) continue;
    out.depth[i] = 0.0f;
    for (int c = 0; c < image.channels(); ++c) out.image.data()[c * image.pixels() + i] = 0.0f;
  }
  return out;
}

}  // namespace nvs
