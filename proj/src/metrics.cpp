#include "nvs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace nvs {

double psnr(const Image& a, const Image& b, const Mask* mask) {
  if (a.channels() != b.channels() || !a.same_size(b)) throw DataError("psnr: images differ in size");
  if (mask && !mask->same_size(a)) throw DataError("psnr: mask size differs from the images");
  double sum = 0;
  std::size_t count = 0;
  const std::size_t n = a.pixels();
  for (std::size_t p = 0; p < n; ++p) {
    if (mask && (*mask)[p] == 0) continue;
    for (int c = 0; c < a.channels(); ++c) {
      const double d = static_cast<double>(a.data()[c * n + p]) - b.data()[c * n + p];
      sum += d * d;
    }
    count += a.channels();
  }
  if (count == 0) throw DataError("psnr: empty mask");
  if (sum == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(count) / sum);
}

namespace {

Plane intensity(const Image& img) {
  Plane g(img.height(), img.width());
  const std::size_t n = img.pixels();
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0;
    for (int c = 0; c < img.channels(); ++c) s += img.data()[c * n + p];
    g[p] = static_cast<float>(s / img.channels());
  }
  return g;
}

float clamped(const Plane& g, int y, int x) {
  return g.at(std::clamp(y, 0, g.height() - 1), std::clamp(x, 0, g.width() - 1));
}

int search_radius(const MatcherOptions& o, int width) { return o.search > 0 ? o.search : std::max(8, 3 * width / 8); }

constexpr double kNoScore = -2.0;

double ncc(const Plane& a, int ax, int ay, const Plane& b, int bx, int by, int half) {
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  const int n = (2 * half + 1) * (2 * half + 1);
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) {
      const double va = a.at(ay + dy, ax + dx), vb = b.at(by + dy, bx + dx);
      sa += va;
      sb += vb;
      saa += va * va;
      sbb += vb * vb;
      sab += va * vb;
    }
  const double cov = sab - sa * sb / n, var_a = saa - sa * sa / n, var_b = sbb - sb * sb / n;
  if (var_a < 1e-9 || var_b < 1e-9) return kNoScore;
  return cov / std::sqrt(var_a * var_b);
}

struct Search {
  int x = -1, y = -1;
  double best = kNoScore, runner_up = kNoScore;
  std::vector<double> scores;  // (2r+1)^2 grid centred on the query
  int radius = 0;

  double at(int dx, int dy) const { return scores[(dy + radius) * (2 * radius + 1) + dx + radius]; }
};

/// Best NCC position in `b` for the patch of `a` at (x, y).
Search search(const Plane& a, int x, int y, const Plane& b, int radius, int half) {
  Search s;
  s.radius = radius;
  s.scores.assign((2 * radius + 1) * (2 * radius + 1), kNoScore);
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      const int bx = x + dx, by = y + dy;
      if (bx < half || by < half || bx >= b.width() - half || by >= b.height() - half) continue;
      const double v = ncc(a, x, y, b, bx, by, half);
      s.scores[(dy + radius) * (2 * radius + 1) + dx + radius] = v;
      if (v > s.best) {
        s.best = v;
        s.x = bx;
        s.y = by;
      }
    }
  }
  if (s.x < 0) return s;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (std::abs(x + dx - s.x) <= 1 && std::abs(y + dy - s.y) <= 1) continue;
      s.runner_up = std::max(s.runner_up, s.at(dx, dy));
    }
  return s;
}

double parabola_offset(double left, double mid, double right) {
  if (left == kNoScore || right == kNoScore) return 0.0;
  const double denom = left - 2 * mid + right;
  if (denom >= 0) return 0.0;
  return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

}  // namespace

std::vector<Corner> harris_corners(const Image& image, const MatcherOptions& opts) {
  const Plane g = intensity(image);
  const int h = g.height(), w = g.width();
  Plane ixx(h, w), iyy(h, w), ixy(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto p = [&](int dy, int dx) { return clamped(g, y + dy, x + dx); };
      const double gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
      const double gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
      ixx.at(y, x) = static_cast<float>(gx * gx);
      iyy.at(y, x) = static_cast<float>(gy * gy);
      ixy.at(y, x) = static_cast<float>(gx * gy);
    }
  Plane response(h, w);
  double peak = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double a = 0, b = 0, c = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          a += clamped(ixx, y + dy, x + dx);
          b += clamped(iyy, y + dy, x + dx);
          c += clamped(ixy, y + dy, x + dx);
        }
      const double r = a * b - c * c - opts.harris_k * (a + b) * (a + b);
      response.at(y, x) = static_cast<float>(r);
      peak = std::max(peak, r);
    }
  const double threshold = std::max(opts.rel_threshold * peak, opts.abs_threshold);
  const int border = opts.patch / 2;
  std::vector<Corner> corners;
  for (int y = border; y < h - border; ++y)
    for (int x = border; x < w - border; ++x) {
      const float r = response.at(y, x);
      if (r <= threshold) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1 && is_max; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const float o = response.at(y + dy, x + dx);
          // ties go to the earlier pixel in row-major order
          if (o > r || (o == r && (dy < 0 || (dy == 0 && dx < 0)))) is_max = false;
        }
      if (is_max) corners.push_back({x, y, r});
    }
  return corners;
}

std::vector<Correspondence> match_keypoints(const Image& a, const Image& b, const MatcherOptions& opts) {
  if (a.channels() != b.channels() || !a.same_size(b)) throw DataError("match_keypoints: images differ in size");
  const Plane ga = intensity(a), gb = intensity(b);
  const int half = opts.patch / 2;
  const int radius = search_radius(opts, a.width());
  std::vector<Correspondence> out;
  for (const Corner& c : harris_corners(a, opts)) {
    const Search fwd = search(ga, c.x, c.y, gb, radius, half);
    if (fwd.x < 0 || fwd.best < opts.min_ncc || fwd.best - fwd.runner_up < opts.uniqueness) continue;
    const Search back = search(gb, fwd.x, fwd.y, ga, radius, half);
    if (back.x != c.x || back.y != c.y) continue;
    const int dx = fwd.x - c.x, dy = fwd.y - c.y;
    auto score = [&](int ox, int oy) {
      const int sx = dx + ox, sy = dy + oy;
      if (std::abs(sx) > radius || std::abs(sy) > radius) return kNoScore;
      return fwd.at(sx, sy);
    };
    const double ox = parabola_offset(score(-1, 0), fwd.best, score(1, 0));
    const double oy = parabola_offset(score(0, -1), fwd.best, score(0, 1));
    out.push_back({static_cast<double>(c.x), static_cast<double>(c.y), fwd.x + ox, fwd.y + oy, fwd.best});
  }
  return out;
}

namespace {

void fill_fractions(TsedReport& r) {
  r.fractions.assign(r.thresholds.size(), 0.0);
  r.evaluated = r.insufficient = r.degenerate = 0;
  for (const auto& p : r.pairs) {
    if (p.status == PairStatus::insufficient_matches) ++r.insufficient;
    if (p.status == PairStatus::degenerate_baseline) ++r.degenerate;
    if (p.status != PairStatus::evaluated) continue;
    ++r.evaluated;
    for (std::size_t k = 0; k < r.thresholds.size(); ++k)
      if (p.sed <= r.thresholds[k] * r.thresholds[k]) r.fractions[k] += 1.0;
  }
  if (r.evaluated > 0)
    for (double& f : r.fractions) f /= static_cast<double>(r.evaluated);
  r.mtsed = 0;
  for (double f : r.fractions) r.mtsed += f;
  if (!r.fractions.empty()) r.mtsed /= static_cast<double>(r.fractions.size());
}

}  // namespace

TsedReport tsed(const std::vector<Image>& frames, const std::vector<Camera>& cameras, const TsedOptions& opts) {
  if (frames.size() < 2 || frames.size() != cameras.size()) throw DataError("tsed: needs >= 2 frames, one camera each");
  if (opts.stride < 1) throw ConfigError("tsed: stride must be >= 1");
  if (!std::is_sorted(opts.thresholds.begin(), opts.thresholds.end()) || opts.thresholds.empty())
    throw ConfigError("tsed: thresholds must be a nonempty ascending list");
  TsedReport r;
  r.thresholds = opts.thresholds;
  for (std::size_t i = 0; i + opts.stride < frames.size(); ++i) {
    const std::size_t j = i + opts.stride;
    PairResult p{i, j};
    Mat3 f;
    try {
      f = fundamental_matrix(cameras[i], cameras[j]);
    } catch (const GeometryError&) {
      p.status = PairStatus::degenerate_baseline;
      r.pairs.push_back(p);
      continue;
    }
    const auto matches = match_keypoints(frames[i], frames[j], opts.matcher);
    p.matches = matches.size();
    if (matches.size() < opts.min_matches) {
      p.status = PairStatus::insufficient_matches;
      r.pairs.push_back(p);
      continue;
    }
    std::vector<double> seds;
    for (const auto& m : matches) seds.push_back(sed(f, m.ua, m.va, m.ub, m.vb));
    if (opts.aggregate == SedAggregate::median) {
      std::sort(seds.begin(), seds.end());
      const std::size_t n = seds.size();
      p.sed = n % 2 ? seds[n / 2] : 0.5 * (seds[n / 2 - 1] + seds[n / 2]);
    } else {
      double s = 0;
      for (double v : seds) s += v;
      p.sed = s / static_cast<double>(seds.size());
    }
    r.pairs.push_back(p);
  }
  fill_fractions(r);
  return r;
}

TsedReport pool_tsed(const std::vector<TsedReport>& reports, const std::vector<double>& thresholds) {
  TsedReport r;
  r.thresholds = thresholds;
  for (const auto& rep : reports) r.pairs.insert(r.pairs.end(), rep.pairs.begin(), rep.pairs.end());
  fill_fractions(r);
  return r;
}

std::string to_string(PairStatus status) {
  switch (status) {
    case PairStatus::evaluated: return "evaluated";
    case PairStatus::insufficient_matches: return "insufficient_matches";
    case PairStatus::degenerate_baseline: return "degenerate_baseline";
  }
  return "?";
}

std::string tsed_to_json(const TsedReport& report, int indent) {
  nlohmann::ordered_json doc;
  doc["thresholds"] = report.thresholds;
  doc["tsed"] = report.fractions;
  doc["mtsed"] = report.mtsed;
  doc["pairs_evaluated"] = report.evaluated;
  doc["pairs_insufficient_matches"] = report.insufficient;
  doc["pairs_degenerate_baseline"] = report.degenerate;
  auto& pairs = doc["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : report.pairs) {
    nlohmann::ordered_json j{{"i", p.i}, {"j", p.j}, {"matches", p.matches}, {"status", to_string(p.status)}};
    if (p.status == PairStatus::evaluated) j["sed"] = p.sed;
    pairs.push_back(std::move(j));
  }
  return doc.dump(indent);
}

std::string tsed_to_csv(const TsedReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "threshold,tsed\n";
  for (std::size_t k = 0; k < report.thresholds.size(); ++k) out << report.thresholds[k] << ',' << report.fractions[k] << '\n';
  out << "mtsed," << report.mtsed << '\n';
  out << "\ni,j,matches,status,sed\n";
  for (const auto& p : report.pairs) {
    out << p.i << ',' << p.j << ',' << p.matches << ',' << to_string(p.status) << ',';
    if (p.status == PairStatus::evaluated) out << p.sed;
    out << '\n';
  }
  return out.str();
}

}  // namespace nvs
