#pragma once

#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"

namespace nvs {

/// 10 log10(1 / MSE) over all channels, restricted to mask=1 pixels when a
/// mask is given. Identical inputs return +infinity. Throws DataError for an
/// empty mask or mismatched sizes.
double psnr(const Image& a, const Image& b, const Mask* mask = nullptr);

struct Correspondence {
  double ua = 0, va = 0, ub = 0, vb = 0;
  double score = 0;
};

struct MatcherOptions {
  double harris_k = 0.04;
  /// Corners need a response above rel_threshold * max response and above
  /// abs_threshold.
  double rel_threshold = 0.001;
  double abs_threshold = 1e-6;
  int patch = 7;
  /// Search radius in pixels; 0 picks max(8, 3 * width / 8).
  int search = 0;
  double min_ncc = 0.8;
  /// The best score must beat the best score outside its 3x3 neighbourhood
  /// by this margin; rejects matches on repetitive texture.
  double uniqueness = 0.02;
};

struct Corner {
  int x = 0, y = 0;
  double response = 0;
};

/// Harris corners on the channel-mean intensity with Sobel gradients, a 3x3
/// window, 3x3 non-maximum suppression and a border of patch/2 pixels.
std::vector<Corner> harris_corners(const Image& image, const MatcherOptions& opts = {});

/// Corners of `a` matched into `b` by NCC of patch x patch windows within the
/// search radius, kept only if the match is mutual and unique, then refined
/// to subpixel precision with a parabola fit per axis.
std::vector<Correspondence> match_keypoints(const Image& a, const Image& b, const MatcherOptions& opts = {});

inline const std::vector<double> kTsedThresholds = {1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};

enum class SedAggregate { median, mean };

struct TsedOptions {
  int stride = 1;
  std::vector<double> thresholds = kTsedThresholds;
  SedAggregate aggregate = SedAggregate::median;
  std::size_t min_matches = 8;
  MatcherOptions matcher;
};

enum class PairStatus { evaluated, insufficient_matches, degenerate_baseline };

struct PairResult {
  std::size_t i = 0, j = 0;
  std::size_t matches = 0;
  /// Median (or mean) SED over the matches in pixels^2; only for evaluated pairs.
  double sed = 0;
  PairStatus status = PairStatus::evaluated;
};

/// A pair is consistent at threshold tau when its aggregated SED (pixels^2)
/// is at most tau^2. TSED(tau) is the fraction of evaluated pairs that are
/// consistent; with no evaluated pair every fraction is 0.
struct TsedReport {
  std::vector<double> thresholds;
  std::vector<double> fractions;
  double mtsed = 0;
  std::vector<PairResult> pairs;
  std::size_t evaluated = 0, insufficient = 0, degenerate = 0;
};

/// Frames i and i+stride for every valid i; cameras give the ground-truth F.
TsedReport tsed(const std::vector<Image>& frames, const std::vector<Camera>& cameras, const TsedOptions& opts = {});

/// Recomputes fractions over the union of pairs of several reports.
TsedReport pool_tsed(const std::vector<TsedReport>& reports, const std::vector<double>& thresholds = kTsedThresholds);

std::string to_string(PairStatus status);
std::string tsed_to_json(const TsedReport& report, int indent = 2);
/// Header line plus one row per threshold, then one row per pair.
std::string tsed_to_csv(const TsedReport& report);

}  // namespace nvs
