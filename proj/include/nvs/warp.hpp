#pragma once

#include <cstddef>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"

namespace nvs {

struct WarpResult {
  Image image;
  Mask mask;
  /// Target-view depth of the winning source per pixel; +inf where empty.
  Plane zbuffer;
  /// Row-major source index per target pixel, -1 where empty.
  std::vector<long> source;
  std::size_t behind_camera = 0;
  std::size_t out_of_view = 0;
};

/// Reference view with an edit region removed from warping.
struct MaskedReference {
  Image image;
  DepthMap depth;
  Mask edit;
};

/// Splats every valid source pixel into dst_cam at its nearest integer pixel.
/// Conflicts keep the smallest target depth; equal depths keep the lower
/// row-major source index. Throws DataError if depth has no valid pixel.
WarpResult forward_warp(const Image& src, const DepthMap& depth, const Camera& src_cam, const Camera& dst_cam);
WarpResult forward_warp(const MaskedReference& ref, const Camera& src_cam, const Camera& dst_cam);

/// Noise warping with a bounded receptive field. Each target pixel gathers
/// from the visible source whose projection lies nearest to it within one
/// pixel, provided the source's own pixel position is at most receptive_px
/// away from the target pixel. A source feeds at most ceil(receptive_px)^2
/// targets, taken in row-major target order.
WarpResult warp_noise(const Image& eps0, const DepthMap& depth, const Camera& src_cam, const Camera& dst_cam,
                      double receptive_px);
/// Uses the depth and edit region of `ref`.
WarpResult warp_noise(const Image& eps0, const MaskedReference& ref, const Camera& src_cam, const Camera& dst_cam,
                      double receptive_px);

/// 4px at 256px, scaled linearly with resolution and floored at 1px.
double receptive_px_for(int resolution);

double overlap_ratio(const Mask& mask);

/// Zeroes the edited pixels of image and depth so they are never warped.
/// Warping a MaskedReference never throws for an empty depth map.
MaskedReference mask_reference(const Image& image, const DepthMap& depth, const Mask& edit_mask);

}  // namespace nvs
