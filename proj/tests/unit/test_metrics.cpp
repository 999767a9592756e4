#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "nvs/metrics.hpp"
#include "nvs/scenegen.hpp"

using namespace nvs;

namespace {

std::vector<Camera> relative_cameras(const Sequence& s) {
  std::vector<Camera> cams;
  for (std::size_t i = 0; i < s.size(); ++i) cams.push_back(s.path.relative[i]);
  return cams;
}

// b(x, y) = a(x - dx, y), edge-replicated on the left.
Image shift_right(const Image& a, int dx) {
  Image b(a.channels(), a.height(), a.width());
  for (int c = 0; c < a.channels(); ++c)
    for (int y = 0; y < a.height(); ++y)
      for (int x = 0; x < a.width(); ++x) b.at(c, y, x) = a.at(c, y, std::max(0, x - dx));
  return b;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("psnr") {
  Image a(3, 4, 4, 0.5f);
  CHECK(std::isinf(psnr(a, a)));

  Image b = a;
  for (float& v : b.data()) v += 0.1f;
  // mse 0.01 on a unit peak
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(psnr(a, b) == doctest::Approx(psnr(b, a)));

  Image c = a;
  c.at(1, 0, 0) = 1.0f;
  Mask mask(4, 4, 1.0f);
  mask.at(0, 0) = 0;
  CHECK(std::isinf(psnr(a, c, &mask)));
  CHECK(std::isfinite(psnr(a, c)));

  Mask empty(4, 4, 0.0f);
  CHECK_THROWS_WITH_AS(psnr(a, b, &empty), "psnr: empty mask", DataError);
  CHECK_THROWS_AS(psnr(a, Image(3, 4, 5)), DataError);
}

TEST_CASE("match_keypoints") {
  const Sequence s = make_sequence(11, TrajectoryKind::orbit, 2, 3);
  const Image& a = s.frames[0];

  SUBCASE("identity") {
    const auto m = match_keypoints(a, a);
    REQUIRE(m.size() >= 8);
    for (const auto& c : m) {
      CHECK(std::abs(c.ub - c.ua) < 0.25);
      CHECK(std::abs(c.vb - c.va) < 0.25);
      CHECK(c.score == doctest::Approx(1.0));
    }
  }

  SUBCASE("3 px shift") {
    const Image b = shift_right(a, 3);
    const auto m = match_keypoints(a, b);
    REQUIRE(m.size() >= 8);
    std::vector<double> du, dv;
    for (const auto& c : m) {
      du.push_back(c.ub - c.ua);
      dv.push_back(c.vb - c.va);
    }
    CHECK(median(du) == doctest::Approx(3.0).epsilon(0.02));
    CHECK(median(dv) == doctest::Approx(0.0).scale(1.0).epsilon(0.02));
  }

  SUBCASE("textureless") {
    const Image flat(3, 32, 32, 0.4f);
    CHECK(harris_corners(flat).empty());
    CHECK(match_keypoints(flat, flat).empty());
    const TsedReport r = tsed({flat, flat, flat}, relative_cameras(s));
    CHECK(r.evaluated == 0);
    CHECK(r.insufficient == 2);
    CHECK(r.mtsed == 0.0);
  }

  CHECK_THROWS_AS(match_keypoints(a, Image(3, 16, 16)), DataError);
}

TEST_CASE("tsed thresholds") {
  // pixel thresholds as published
  const std::vector<double> published = {1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
  CHECK(kTsedThresholds == published);
}

TEST_CASE("tsed on ground truth") {
  std::vector<TsedReport> reports;
  const TrajectoryKind kinds[] = {TrajectoryKind::dolly, TrajectoryKind::orbit, TrajectoryKind::scan,
                                  TrajectoryKind::u_turn};
  for (int i = 0; i < 8; ++i) {
    const Sequence s = make_sequence(500 + i, kinds[i % 4], 8, i);
    const TsedReport r = tsed(s.frames, relative_cameras(s));
    CAPTURE(i);
    CHECK(r.pairs.size() == 8);
    CHECK(r.insufficient <= 1);
    CHECK(r.degenerate == 0);
    CHECK(r.mtsed == 1.0);
    for (const auto& p : r.pairs)
      if (p.status == PairStatus::evaluated) CHECK(p.sed < 1.0);
    reports.push_back(r);
  }
  const TsedReport pooled = pool_tsed(reports);
  CHECK(pooled.pairs.size() == 64);
  CHECK(pooled.mtsed == 1.0);
}

TEST_CASE("tsed scrambled order") {
  // Pooled: an orbit keeps epipolar lines near horizontal, so a single
  // scrambled orbit can still look consistent.
  std::vector<TsedReport> right, wrong;
  for (int i = 0; i < 8; ++i) {
    const Sequence s = make_sequence(600 + i, i % 2 ? TrajectoryKind::orbit : TrajectoryKind::scan, 8, i);
    const auto cams = relative_cameras(s);
    right.push_back(tsed(s.frames, cams));
    std::vector<Image> scrambled = s.frames;
    std::mt19937_64 rng(i);
    std::shuffle(scrambled.begin(), scrambled.end(), rng);
    wrong.push_back(tsed(scrambled, cams));
  }
  CHECK(pool_tsed(right).mtsed == 1.0);
  CHECK(pool_tsed(wrong).mtsed < pool_tsed(right).mtsed);
}

TEST_CASE("tsed report structure") {
  TsedReport r;
  r.thresholds = kTsedThresholds;
  auto pair = [](double sed) {
    PairResult p;
    p.sed = sed;
    p.matches = 20;
    return p;
  };
  // SED in px^2: one pair under 1 px, one between 2 and 2.5 px, one beyond 4 px
  r.pairs = {pair(0.5), pair(5.0), pair(17.0)};
  PairResult few;
  few.status = PairStatus::insufficient_matches;
  r.pairs.push_back(few);
  const TsedReport p = pool_tsed({r});
  const std::vector<double> expect = {1 / 3.0, 1 / 3.0, 1 / 3.0, 2 / 3.0, 2 / 3.0, 2 / 3.0, 2 / 3.0};
  REQUIRE(p.fractions.size() == expect.size());
  double mean = 0;
  for (std::size_t k = 0; k < expect.size(); ++k) {
    CHECK(p.fractions[k] == doctest::Approx(expect[k]));
    if (k > 0) CHECK(p.fractions[k] >= p.fractions[k - 1]);
    mean += expect[k] / expect.size();
  }
  CHECK(p.mtsed == doctest::Approx(mean));
  CHECK(p.evaluated == 3);
  CHECK(p.insufficient == 1);

  const auto doc = nlohmann::json::parse(tsed_to_json(p));
  CHECK(doc["mtsed"].get<double>() == doctest::Approx(mean));
  CHECK(doc["pairs"].size() == 4);
  CHECK(doc["pairs"][3]["status"] == "insufficient_matches");
  CHECK(doc["thresholds"].size() == 7);
  const std::string csv = tsed_to_csv(p);
  CHECK(csv.rfind("threshold,tsed\n1,", 0) == 0);
  CHECK(csv.find("insufficient_matches") != std::string::npos);
}

TEST_CASE("tsed degenerate and errors") {
  const Sequence s = make_sequence(21, TrajectoryKind::orbit, 2, 1);
  std::vector<Camera> same(3, s.path.relative[0]);
  const TsedReport r = tsed(s.frames, same);
  CHECK(r.degenerate == 2);
  CHECK(r.mtsed == 0.0);

  TsedOptions stride2;
  stride2.stride = 2;
  CHECK(tsed(s.frames, relative_cameras(s), stride2).pairs.size() == 1);

  TsedOptions mean_agg;
  mean_agg.aggregate = SedAggregate::mean;
  CHECK(tsed(s.frames, relative_cameras(s), mean_agg).pairs.size() == 2);

  CHECK_THROWS_AS(tsed({s.frames[0]}, {s.path.relative[0]}), DataError);
  TsedOptions bad;
  bad.stride = 0;
  CHECK_THROWS_AS(tsed(s.frames, relative_cameras(s), bad), ConfigError);
  bad = {};
  bad.thresholds = {2.0, 1.0};
  CHECK_THROWS_AS(tsed(s.frames, relative_cameras(s), bad), ConfigError);
}
