#include <cmath>
#include <numeric>
#include <random>

#include "../common/oracles.hpp"
#include "doctest.h"
#include "nvs/diffusion.hpp"
#include "nvs/scenegen.hpp"

using namespace nvs;

namespace {

DiffusionSchedule single_step(double alpha_bar) { return {ScheduleKind::linear_beta, 1, {1.0, alpha_bar}}; }

// Optimal eps for data ~ N(mu, s2) under z_t = sqrt(a) z + sqrt(1-a) eps.
double gaussian_eps(double z, double a, double mu, double s2) {
  return std::sqrt(1 - a) * (z - std::sqrt(a) * mu) / (a * s2 + 1 - a);
}

ReferenceInput reference_for(const Sequence& s) {
  return {s.frames[0], s.depths[0], s.path.relative, std::nullopt};
}

Camera nudged(const Camera& c, double dx, double dz) {
  Camera out = c;
  out.translation.x += dx;
  out.translation.z += dz;
  return out;
}

Trajectory repeated(const Camera& ref, const std::vector<Camera>& targets) {
  Trajectory t;
  t.cameras.push_back(ref);
  for (const auto& c : targets) t.cameras.push_back(c);
  return t;
}

}  // namespace

TEST_CASE("schedule") {
  // timesteps and sampler steps as published
  CHECK(kDefaultTimesteps == 1000);
  CHECK(kDefaultSamplerSteps == 35);
  CHECK(kDefaultRefineThreshold == 0.20);

  for (auto kind : {ScheduleKind::linear_beta, ScheduleKind::cosine}) {
    const DiffusionSchedule s = make_schedule(1000, kind);
    REQUIRE(s.alpha_bar.size() == 1001);
    CHECK(s.alpha_bar[0] == 1.0);
    for (int t = 1; t <= 1000; ++t) {
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      CHECK(s.alpha_bar[t] > 0.0);
    }
    CHECK(make_schedule(5, kind).alpha_bar[0] == 1.0);
  }
  const DiffusionSchedule lin = make_schedule();
  CHECK(lin.alpha_bar[1] == doctest::Approx(1 - 1e-4).epsilon(1e-12));
  CHECK(lin.alpha_bar[1000] / lin.alpha_bar[999] == doctest::Approx(1 - 2e-2).epsilon(1e-12));
  double prod = 1;
  for (int t = 1; t <= 1000; ++t) prod *= 1 - (1e-4 + (2e-2 - 1e-4) * (t - 1) / 999.0);
  CHECK(lin.alpha_bar[1000] == doctest::Approx(prod).epsilon(1e-9));

  CHECK_THROWS_AS(make_schedule(0), ConfigError);
  CHECK(schedule_kind_from_string("cosine") == ScheduleKind::cosine);
  CHECK_THROWS_AS(schedule_kind_from_string("sigmoid"), ConfigError);
}

TEST_CASE("perturb and recover") {
  const DiffusionSchedule quarter = single_step(0.25);
  const Tensor<double> z({1}, 1.0), xi({1}, 2.0);
  const Tensor<double> zt = perturb(z, xi, 1, quarter);
  CHECK(zt[0] == doctest::Approx(0.5 + 2.0 * std::sqrt(3.0) / 2.0));
  CHECK(zt[0] == doctest::Approx(2.232).epsilon(1e-3));
  CHECK(recover(Tensor<double>({1}, 2.232), xi, 1, quarter)[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(recover(zt, xi, 1, quarter)[0] == doctest::Approx(1.0).epsilon(1e-14));

  const DiffusionSchedule s = make_schedule();
  SUBCASE("near-clean limit") {
    const Tensor<double> out = perturb(Tensor<double>({3}, 0.7), Tensor<double>({3}, 1.0), 1, s);
    for (double v : out.values()) CHECK(v == doctest::Approx(0.7).epsilon(0.02));
  }

  SUBCASE("inverse for all t") {
    // 64-bit: in float the rounding of z_t alone is amplified by
    // 1/sqrt(ab_T) ~ 160 near t = T.
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const Tensor<double> z0 = Tensor<double>::uniform({16}, rng, -1.0, 1.0);
      const Tensor<double> e = Tensor<double>::randn({16}, rng);
      for (int t = 1; t <= s.T; ++t) {
        const Tensor<double> back = recover(perturb(z0, e, t, s), e, t, s);
        double worst = 0;
        for (std::size_t i = 0; i < 16; ++i) worst = std::max(worst, std::abs(back[i] - z0[i]));
        if (worst > 1e-5) {
          CAPTURE(t);
          CAPTURE(seed);
          FAIL_CHECK("recover(perturb) drifted by " << worst);
        }
      }
    }
  }

  SUBCASE("zero noise") {
    const Tensor<double> x({2}, {0.3, -0.4});
    const Tensor<double> out = recover(x, Tensor<double>({2}), 400, s);
    CHECK(out[0] == doctest::Approx(0.3 / std::sqrt(s.alpha_bar[400])));
    CHECK(out[1] == doctest::Approx(-0.4 / std::sqrt(s.alpha_bar[400])));
  }

  SUBCASE("variance preserving") {
    Rng rng(4);
    const Tensor<double> xi10k = Tensor<double>::randn({10000}, rng);
    for (int t : {1, 10, 250, 500, 1000}) {
      const Tensor<double> out = perturb(Tensor<double>({10000}), xi10k, t, s);
      double m = 0, v = 0;
      for (double x : out.values()) m += x / 10000;
      for (double x : out.values()) v += (x - m) * (x - m) / 9999;
      // variance of the noise sample itself scaled by 1 - ab_t; z = 0
      CHECK(v / (1 - s.alpha_bar[t]) == doctest::Approx(1.0).epsilon(0.05));
    }
    // Unit-variance data stays unit variance.
    const Tensor<double> data = Tensor<double>::randn({10000}, rng);
    for (int t : {1, 300, 1000}) {
      const Tensor<double> out = perturb(data, xi10k, t, s);
      double v = 0;
      for (double x : out.values()) v += x * x / 10000;
      CHECK(v == doctest::Approx(1.0).epsilon(0.05));
    }
  }

  CHECK_THROWS_AS(perturb(z, xi, 0, s), ConfigError);
  CHECK_THROWS_AS(perturb(z, xi, 1001, s), ConfigError);
  CHECK_THROWS_AS(recover(z, xi, 0, s), ConfigError);
  CHECK_THROWS_AS(perturb(z, Tensor<double>({2}), 1, s), ShapeError);
}

TEST_CASE("ddim timesteps") {
  const auto steps = ddim_timesteps(1000, 35);
  REQUIRE(steps.size() == 35);
  CHECK(steps.front() == 1000);
  CHECK(steps.back() == 1);
  for (std::size_t i = 1; i < steps.size(); ++i) {
    CHECK(steps[i] < steps[i - 1]);
    CHECK(std::abs((steps[i - 1] - steps[i]) - 999.0 / 34.0) <= 1.0);
  }
  CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1000});
  CHECK(ddim_timesteps(4, 4) == std::vector<int>{4, 3, 2, 1});
  CHECK_THROWS_AS(ddim_timesteps(10, 11), ConfigError);
  CHECK_THROWS_AS(ddim_timesteps(10, 0), ConfigError);
}

TEST_CASE("ddim with a perfect predictor") {
  const DiffusionSchedule s = make_schedule();
  Rng rng(1);
  const Tensor<double> z = Tensor<double>::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
  const Tensor<double> xi = Tensor<double>::randn(z.shape(), rng);
  const Tensor<double> z_T = perturb(z, xi, s.T, s);
  const Tensor<double> out = ddim_sample([&](const Tensor<double>&, int) { return xi; }, z_T, s, 1);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out[i] == doctest::Approx(z[i]).epsilon(1e-9));

  // The same oracle along a 35-step path also lands on z: the predicted x0
  // is exact at every step.
  const Tensor<double> multi = ddim_sample([&](const Tensor<double>&, int) { return xi; }, z_T, s, 35);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(multi[i] == doctest::Approx(z[i]).epsilon(1e-9));
}

TEST_CASE("ddim on a gaussian toy") {
  const DiffusionSchedule s = make_schedule();
  const double mu = 0.7, sigma = 0.5, s2 = sigma * sigma;
  const std::size_t n = 10000;
  Rng rng(2024);
  const Tensor<double> z_T = Tensor<double>::randn({n}, rng);
  auto eps = [&](const Tensor<double>& z, int t) {
    Tensor<double> out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = gaussian_eps(z[i], s.alpha_bar[t], mu, s2);
    return out;
  };
  auto moments = [&](const Tensor<double>& x) {
    double m = 0, v = 0;
    for (double e : x.values()) m += e / n;
    for (double e : x.values()) v += (e - m) * (e - m) / (n - 1);
    return std::pair{m, v};
  };
  const double se_mean = sigma / std::sqrt(double(n)), se_var = s2 * std::sqrt(2.0 / (n - 1));

  // Deterministic DDIM contracts the spread by a discretisation factor that
  // vanishes with the stride (about 0.85 of the variance at 35 steps for this
  // sigma, 0.994 at 1000), so the variance and histogram are checked on the
  // full-stride chain and the mean on the default 35 steps.
  const auto [m35, v35] = moments(ddim_sample(eps, z_T, s, kDefaultSamplerSteps));
  CHECK(std::abs(m35 - mu) < 3 * se_mean);
  CHECK(v35 < s2);

  const Tensor<double> x = ddim_sample(eps, z_T, s, s.T);
  const auto [m, v] = moments(x);
  CHECK(std::abs(m - mu) < 3 * se_mean);
  CHECK(std::abs(v - s2) < 3 * se_var);

  // Histogram KL against the target density, 24 bins over mu +- 4 sigma.
  const int bins = 24;
  std::vector<double> counts(bins, 0.0);
  std::size_t inside = 0;
  for (double e : x.values()) {
    const int b = static_cast<int>(std::floor((e - (mu - 4 * sigma)) / (8 * sigma) * bins));
    if (b >= 0 && b < bins) {
      counts[b] += 1;
      ++inside;
    }
  }
  CHECK(inside > n - 10);
  double kl = 0;
  for (int b = 0; b < bins; ++b) {
    const double lo = mu - 4 * sigma + 8 * sigma * b / bins, hi = lo + 8 * sigma / bins;
    const double q = oracle::normal_cdf((hi - mu) / sigma) - oracle::normal_cdf((lo - mu) / sigma);
    const double p = counts[b] / static_cast<double>(inside);
    if (p > 0) kl += p * std::log(p / q);
  }
  CHECK(kl < 0.01);

  const Tensor<float> zf({4}, 0.1f);
  CHECK(ddim_sample([&](const Tensor<float>& z, int) { return z; }, zf, s, 35).shape() == zf.shape());
  CHECK_THROWS_AS(ddim_sample([&](const Tensor<float>& z, int) { return z; }, zf, s, 1001), ConfigError);
}

TEST_CASE("training loss") {
  const DiffusionSchedule s = make_schedule();
  Rng rng(9);
  const Tensor<double> z = Tensor<double>::uniform({10, 10}, rng, -1.0, 1.0);
  const Tensor<double> xi = Tensor<double>::randn({10, 10}, rng);

  SUBCASE("perfect and zero predictors") {
    Tape<double> tape;
    CHECK(training_loss(tape, [&](Var<double>, int) { return tape.constant(xi); }, z, xi, 300, s).value().item() == 0.0);
    const Tensor<double> big = Tensor<double>::randn({100, 100}, rng);
    const double zero_loss =
        training_loss(tape, [&](Var<double>, int) { return tape.constant(Tensor<double>({100, 100})); },
                      Tensor<double>({100, 100}), big, 300, s)
            .value()
            .item();
    CHECK(zero_loss == doctest::Approx(1.0).epsilon(0.05));
  }

  SUBCASE("gradient of a 100-parameter model") {
    const Tensor<double> w0 = Tensor<double>::randn({10, 10}, rng, 0.3);
    auto loss_at = [&](const Tensor<double>& w, Tensor<double>* grad) {
      Tape<double> tape;
      Var<double> wv = tape.param(w);
      Var<double> loss = training_loss(
          tape, [&](Var<double> z_t, int) { return ops::silu(ops::matmul(z_t, wv)); }, z, xi, 137, s);
      if (grad) {
        tape.backward(loss);
        *grad = tape.grad(wv);
      }
      return loss.value().item();
    };
    Tensor<double> g;
    loss_at(w0, &g);
    const double h = 1e-6;
    for (std::size_t i = 0; i < w0.size(); ++i) {
      Tensor<double> wp = w0, wm = w0;
      wp[i] += h;
      wm[i] -= h;
      const double fd = (loss_at(wp, nullptr) - loss_at(wm, nullptr)) / (2 * h);
      const double rel = std::abs(fd - g[i]) / std::max(1e-8, std::abs(fd) + std::abs(g[i]));
      CAPTURE(i);
      CHECK(rel < 1e-4);
    }
  }

  Tape<double> tape;
  CHECK_THROWS_AS(training_loss(tape, [&](Var<double>, int) { return tape.constant(Tensor<double>({3})); }, z, xi, 5, s),
                  ShapeError);
}

TEST_CASE("structured noise") {
  const Sequence seq = make_sequence(31, TrajectoryKind::orbit, 3, 2);
  // At 32 px the receptive field is one pixel, so only small motions share
  // noise; the orbit view shares almost none.
  ReferenceInput in = reference_for(seq);
  const Camera& ref = in.trajectory[0];
  in.trajectory = repeated(ref, {nudged(ref, 0.01, 0.0), nudged(ref, 0.0, 0.03), seq.path.relative[1]});
  const double r = receptive_px_for(32);
  REQUIRE(overlap_ratio(sample_structured_noise(in, 0).masks[0]) > 0.5);

  SUBCASE("identity pose copies eps0") {
    ReferenceInput id = in;
    id.trajectory = repeated(in.trajectory[0], {in.trajectory[0]});
    const NoiseBundle b = sample_structured_noise(id, 5);
    REQUIRE(b.xi.shape() == Shape{1, 3, 32, 32});
    for (std::size_t i = 0; i < b.xi.size(); ++i) CHECK(b.xi[i] == b.eps0.data()[i]);
    CHECK(overlap_ratio(b.masks[0]) == 1.0);
  }

  SUBCASE("filled regions equal the warped reference noise") {
    const NoiseBundle b = sample_structured_noise(in, 17);
    for (std::size_t v = 0; v < 3; ++v) {
      const WarpResult w = warp_noise(b.eps0, in.depth, in.trajectory[0], in.trajectory[v + 1], r);
      CHECK(w.mask == b.masks[v]);
      for (int c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 1024; ++p)
          if (w.mask[p] != 0) CHECK(b.xi[(v * 3 + c) * 1024 + p] == w.image.data()[c * 1024 + p]);
    }
  }

  SUBCASE("identical targets agree") {
    ReferenceInput twin = in;
    twin.trajectory = repeated(ref, {in.trajectory[1], in.trajectory[1]});
    const NoiseBundle b = sample_structured_noise(twin, 8);
    CHECK(b.masks[0] == b.masks[1]);
    CHECK(overlap_ratio(b.masks[0]) > 0.1);
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p)
        if (b.masks[0][p] != 0) CHECK(b.xi[c * 1024 + p] == b.xi[(3 + c) * 1024 + p]);
  }

  SUBCASE("marginals are standard normal") {
    // Masks do not depend on the seed; probe one filled and one fresh pixel
    // per view where both exist.
    const NoiseBundle probe = sample_structured_noise(in, 0, true);
    std::vector<std::size_t> picks;
    for (std::size_t v = 0; v < 3; ++v) {
      std::size_t filled = 1024, fresh = 1024;
      for (std::size_t p = 1024; p-- > 0;) (probe.masks[v][p] != 0 ? filled : fresh) = p;
      if (filled < 1024) picks.push_back(v * 3 * 1024 + filled);
      if (fresh < 1024) picks.push_back(v * 3 * 1024 + 2 * 1024 + fresh);
    }
    REQUIRE(picks.size() >= 3);
    for (bool structured : {true, false}) {
      std::vector<std::vector<double>> xs(picks.size());
      for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const NoiseBundle b = sample_structured_noise(in, seed, structured);
        for (std::size_t k = 0; k < picks.size(); ++k) xs[k].push_back(b.xi[picks[k]]);
      }
      for (std::size_t k = 0; k < picks.size(); ++k) {
        CAPTURE(structured);
        CAPTURE(picks[k]);
        CHECK(oracle::ks_normal_pvalue(xs[k]) > 0.01);
      }
    }
  }

  SUBCASE("independent noise has empty masks") {
    const NoiseBundle b = sample_structured_noise(in, 3, false);
    for (const auto& m : b.masks) CHECK(overlap_ratio(m) == 0.0);
  }

  SUBCASE("deterministic") {
    CHECK(sample_structured_noise(in, 12).xi == sample_structured_noise(in, 12).xi);
    CHECK(!(sample_structured_noise(in, 12).xi == sample_structured_noise(in, 13).xi));
  }

  SUBCASE("edit region is never shared") {
    ReferenceInput ed = in;
    Mask edit(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 16; ++x) edit.at(y, x) = 1;
    ed.edit = edit;
    ReferenceInput id = ed;
    id.trajectory = repeated(in.trajectory[0], {in.trajectory[0]});
    const NoiseBundle b = sample_structured_noise(id, 2);
    CHECK(overlap_ratio(b.masks[0]) == 0.5);
    for (int y = 0; y < 32; ++y) CHECK(b.masks[0].at(y, 3) == 0.0f);
  }
}

TEST_CASE("conditioning") {
  const Sequence seq = make_sequence(32, TrajectoryKind::dolly, 4, 2);
  const ReferenceInput in = reference_for(seq);
  const ReferenceWarps warps = warp_reference(in);
  const Conditioning c = build_conditioning(in, warps);
  c.validate();
  CHECK(c.views() == 4);
  CHECK(c.poses.shape() == Shape{4, 12});
  CHECK(c.target.shape() == Shape{4, 4, 32, 32});
  for (std::size_t v = 0; v < 4; ++v) {
    double m = 0;
    for (std::size_t p = 0; p < 1024; ++p) m += c.target[(v * 4 + 3) * 1024 + p] / 1024.0;
    CHECK(m == doctest::Approx(warps.overlap[v]));
  }
  // Pose of view 1 is the relative camera of trajectory entry 1.
  const Camera& cam = in.trajectory[1];
  CHECK(c.poses[2] == doctest::Approx(cam.rotation(0, 2)));
  CHECK(c.poses[11] == doctest::Approx(cam.translation.z));
  // Warped colours land at the mask, mapped to [-1, 1].
  const WarpResult& w0 = warps.warps[0];
  for (std::size_t p = 0; p < 1024; ++p)
    if (w0.mask[p] != 0) CHECK(c.target[p] == doctest::Approx(2 * w0.image.data()[p] - 1));

  const Conditioning none = build_conditioning(in, warps, {true});
  for (float v : none.target.values()) CHECK(v == 0.0f);
  CHECK(none.poses == c.poses);

  Conditioning bad = c;
  bad.target[3 * 1024] = 0.5f;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = c;
  bad.poses = Tensor<float>({3, 12});
  CHECK_THROWS_AS(bad.validate(), ShapeError);

  const Image back = tensor_to_image(image_to_tensor(seq.frames[2]));
  REQUIRE(back.same_size(seq.frames[2]));
  for (std::size_t i = 0; i < back.data().size(); ++i) CHECK(back.data()[i] == doctest::Approx(seq.frames[2].data()[i]).epsilon(1e-6));
  const Tensor<float> id = pose_vector(in.trajectory[0]);
  CHECK(id == Tensor<float>({12}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0}));
}

TEST_CASE("sampling and refinement") {
  const DiffusionSchedule s = make_schedule(100);
  // Stand-in predictor: a fixed function of the inputs, cheap and deterministic.
  const EpsPredictor stub = [](const Tensor<float>& z, const Conditioning& c, int t) {
    Tensor<float> out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = 0.5f * z[i] - 0.1f * c.target[i % c.target.size()] + 1e-4f * t;
    return out;
  };
  SamplingOptions opts;
  opts.steps = 10;

  SUBCASE("deterministic in seed") {
    const Sequence seq = make_sequence(40, TrajectoryKind::scan, 3, 1);
    const ReferenceInput in = reference_for(seq);
    const SampleResult a = sample_views(stub, in, s, opts, 3), b = sample_views(stub, in, s, opts, 3);
    CHECK(a.views == b.views);
    CHECK(!(sample_views(stub, in, s, opts, 4).views == a.views));
    CHECK(a.views.shape() == Shape{3, 3, 32, 32});
  }

  SUBCASE("no view below threshold is a no-op") {
    const Sequence seq = make_sequence(41, TrajectoryKind::dolly, 3, 1);
    const ReferenceInput in = reference_for(seq);
    const SampleResult first = sample_views(stub, in, s, opts, 3);
    for (double o : first.record.overlap) REQUIRE(o >= 0.2);
    const SampleResult again = refine_pass(stub, first, in, warp_depth_proxies(warp_reference(in)), s, opts, 3);
    CHECK(again.views == first.views);
    CHECK(again.record.passes == 1);
    CHECK(again.cond.target == first.cond.target);
  }

  SUBCASE("u_turn refines from a generated view") {
    const Sequence seq = make_sequence(42, TrajectoryKind::u_turn, 6, 3);
    const ReferenceInput in = reference_for(seq);
    const SampleResult first = sample_views(stub, in, s, opts, 3);
    std::vector<DepthMap> depths(seq.depths.begin() + 1, seq.depths.end());
    const SampleResult second = refine_pass(stub, first, in, depths, s, opts, 3);
    CHECK(second.record.passes == 2);
    bool any = false;
    for (std::size_t v = 0; v < 6; ++v) {
      const bool low = first.record.overlap[v] < 0.2;
      CHECK(second.record.refined[v] == low);
      if (!low) {
        CHECK(second.record.source[v] == 0);
        for (std::size_t e = 0; e < 4 * 1024; ++e) CHECK(second.cond.target[v * 4 * 1024 + e] == first.cond.target[v * 4 * 1024 + e]);
        continue;
      }
      any = true;
      CHECK(second.record.source[v] != 0);
      CHECK(second.record.source[v] != static_cast<int>(v) + 1);
      // The chosen source covers the view at least as well as any other.
      for (std::size_t m = 0; m < 6; ++m) {
        if (m == v) continue;
        const WarpResult w = forward_warp(tensor_to_image(first.views, m), depths[m], in.trajectory[m + 1], in.trajectory[v + 1]);
        CHECK(overlap_ratio(w.mask) <= second.record.source_overlap[v]);
      }
    }
    CHECK(any);
    CHECK(!(second.views == first.views));
  }
}
