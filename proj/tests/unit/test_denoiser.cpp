#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "nvs/denoiser.hpp"
#include "nvs/scenegen.hpp"

using namespace nvs;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.channels = 4;
  c.time_features = 8;
  c.pose_frequencies = 2;
  return c;
}

Sequence small_sequence(std::uint64_t seed, TrajectoryKind kind = TrajectoryKind::dolly, int views = 3) {
  TrajectoryOptions o;
  o.resolution = 8;
  return make_sequence(seed, kind, views, seed + 1, o);
}

Conditioning small_conditioning(const Sequence& s) {
  return build_conditioning({s.frames[0], s.depths[0], s.path.relative, std::nullopt});
}

// Fusion convs set to small random values so the control path is live.
void perturb_fusion(ParamSet<float>& p, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& item : p.items())
    if (is_fusion_param(item.name)) item.value = Tensor<float>::randn(item.value.shape(), rng, 0.2f);
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  float d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("nvs_test_denoiser_" + name)).string();
}

}  // namespace

TEST_CASE("initialisation") {
  const DiffusionSchedule s = make_schedule();
  const DenoiserConfig cfg = tiny();
  PretextOptions pre;
  pre.steps = 3;
  pre.clips = 3;
  pre.views = 3;
  std::vector<ParamSet<float>> sets;
  for (InitMode m : {InitMode::video_prior_sim, InitMode::no_vid, InitMode::scratch}) {
    const ParamSet<float> p = initialize(cfg, m, 11, s, pre);
    for (const auto& item : p.items()) {
      if (is_fusion_param(item.name)) {
        for (float v : item.value.values()) CHECK(v == 0.0f);
      }
      if (item.name.rfind("ctrl_", 0) == 0 && item.name.rfind("ctrl_in", 0) != 0)
        CHECK(item.value == p.get(item.name.substr(5)));
    }
    CHECK(initialize(cfg, m, 11, s, pre).get("enc0.w") == p.get("enc0.w"));
    sets.push_back(p);
  }
  // The video prior moves the attention weights; the frame prior leaves them at
  // their random initial values.
  CHECK(!(sets[0].get("attn0.q") == sets[2].get("attn0.q")));
  CHECK(sets[1].get("attn0.q") == sets[2].get("attn0.q"));
  CHECK(!(sets[1].get("enc0.w") == sets[2].get("enc0.w")));
  CHECK(!(init_params(cfg, 1).get("enc0.w") == init_params(cfg, 2).get("enc0.w")));

  CHECK(init_mode_from_string("scratch") == InitMode::scratch);
  CHECK(init_mode_from_string("no_prior") == InitMode::scratch);
  CHECK_THROWS_AS(init_mode_from_string("imagenet"), ConfigError);
  DenoiserConfig bad = cfg;
  bad.channels = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(DenoiserConfig{}.pose_features() == 108);
}

TEST_CASE("pose and time features") {
  const Tensor<float> id({1, 12}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
  const Tensor<float> f = pose_features(id, 2);
  REQUIRE(f.shape() == Shape{1, 60});
  for (int i = 0; i < 12; ++i) {
    const float x = id[i];
    CHECK(f[i] == x);
    for (int k = 0; k < 2; ++k) {
      CHECK(f[12 + (i * 2 + k) * 2] == doctest::Approx(std::sin((1 << k) * x)));
      CHECK(f[12 + (i * 2 + k) * 2 + 1] == doctest::Approx(std::cos((1 << k) * x)));
    }
  }
  CHECK_THROWS_AS(pose_features(Tensor<float>({1, 11}), 2), ShapeError);
  const Tensor<double> tf = time_features<double>(0, 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(tf[i] == 0.0);
    CHECK(tf[4 + i] == 1.0);
  }
  CHECK(!(time_features<float>(10, 8) == time_features<float>(11, 8)));
}

TEST_CASE("noise skip is the linear estimate for data of the assumed variance") {
  CHECK(eps_skip(1.0) == 0.0);
  CHECK(eps_skip(1e-5) == doctest::Approx(1.0).epsilon(1e-4));
  for (double ab : {0.1, 0.5, 0.9}) {
    // cov(eps, z) / var(z) for z = sqrt(ab) x + sqrt(1 - ab) eps, var(x) = kDataVariance.
    const double expect = std::sqrt(1 - ab) / (ab * kDataVariance + (1 - ab));
    CHECK(eps_skip(ab) == doctest::Approx(expect));
  }
  CHECK_THROWS_AS(eps_skip(0.0), ConfigError);
  CHECK_THROWS_AS(eps_skip(1.5), ConfigError);
}

TEST_CASE("forward") {
  const DenoiserConfig cfg = tiny();
  const Sequence seq = small_sequence(3);
  const Conditioning cond = small_conditioning(seq);
  Rng rng(5);
  const Tensor<float> z = Tensor<float>::randn({3, 3, 8, 8}, rng);

  SUBCASE("fresh fusion convs ignore the warp condition") {
    const Denoiser m{cfg, init_params(cfg, 1)};
    Conditioning blank = cond;
    blank.target = Tensor<float>(cond.target.shape());
    const Tensor<float> a = m.predict(z, cond, 500), b = m.predict(z, blank, 500);
    CHECK(a == b);
    Denoiser live = m;
    perturb_fusion(live.params, 2);
    CHECK(max_abs_diff(live.predict(z, cond, 500), live.predict(z, blank, 500)) > 1e-4f);
  }

  SUBCASE("single view") {
    const Sequence one = small_sequence(4, TrajectoryKind::dolly, 1);
    const Denoiser m{cfg, init_params(cfg, 1)};
    const Tensor<float> out = m.predict(Tensor<float>::randn({1, 3, 8, 8}, rng), small_conditioning(one), 10);
    CHECK(out.shape() == Shape{1, 3, 8, 8});
    for (float v : out.values()) CHECK(std::isfinite(v));
  }

  SUBCASE("view permutation equivariance") {
    Denoiser m{cfg, init_params(cfg, 7)};
    perturb_fusion(m.params, 8);
    const std::size_t perm[] = {2, 0, 1};
    const std::size_t img = 3 * 64, tgt = 4 * 64;
    Tensor<float> zp(z.shape());
    Conditioning cp = cond;
    for (std::size_t v = 0; v < 3; ++v) {
      std::copy(z.data() + perm[v] * img, z.data() + (perm[v] + 1) * img, zp.data() + v * img);
      std::copy(cond.target.data() + perm[v] * tgt, cond.target.data() + (perm[v] + 1) * tgt, cp.target.data() + v * tgt);
      std::copy(cond.poses.data() + perm[v] * 12, cond.poses.data() + (perm[v] + 1) * 12, cp.poses.data() + v * 12);
    }
    const Tensor<float> out = m.predict(z, cond, 321), outp = m.predict(zp, cp, 321);
    for (std::size_t v = 0; v < 3; ++v)
      for (std::size_t e = 0; e < img; ++e) CHECK(outp[v * img + e] == doctest::Approx(out[perm[v] * img + e]).epsilon(1e-5).scale(1.0));
  }

  SUBCASE("pose matters unless dropped") {
    Conditioning moved = cond;
    moved.poses[11] += 0.5f;
    const Denoiser m{cfg, init_params(cfg, 1)};
    CHECK(max_abs_diff(m.predict(z, cond, 100), m.predict(z, moved, 100)) > 1e-6f);
    DenoiserConfig no_pose = cfg;
    no_pose.use_pose = false;
    const Denoiser q{no_pose, init_params(no_pose, 1)};
    CHECK(q.predict(z, cond, 100) == q.predict(z, moved, 100));
  }

  SUBCASE("shape errors") {
    const Denoiser m{cfg, init_params(cfg, 1)};
    CHECK_THROWS_AS(m.predict(Tensor<float>({2, 3, 8, 8}), cond, 1), ShapeError);
    CHECK_THROWS_AS(m.predict(Tensor<float>({3, 4, 8, 8}), cond, 1), ShapeError);
  }
}

TEST_CASE("gradient check in 64-bit") {
  const DenoiserConfig cfg = tiny();
  const Sequence seq = small_sequence(6, TrajectoryKind::scan, 2);
  const Conditioning cond = small_conditioning(seq);
  ParamSet<float> pf = init_params(cfg, 3);
  perturb_fusion(pf, 4);
  // Non-zero FiLM weights so the time path is exercised as well.
  Rng rng(9);
  for (auto& item : pf.items())
    if (item.name.find(".f") != std::string::npos) item.value = Tensor<float>::randn(item.value.shape(), rng, 0.1f);
  ParamSet<double> params = pf.cast<double>();
  const CondTensors<double> c = cond_tensors<double>(cond);
  const Tensor<double> z = Tensor<double>::randn({2, 3, 8, 8}, rng);
  const Tensor<double> w = Tensor<double>::randn({2, 3, 8, 8}, rng);

  auto loss = [&](const ParamSet<double>& p, ParamSet<double>* grads) {
    Tape<double> tape;
    BoundParams<double> bound(tape, p, grads != nullptr);
    Var<double> out = denoiser_forward(tape, bound, cfg, tape.constant(z), c, 250, 0.4);
    Var<double> l = ops::sum(ops::mul(out, tape.constant(w)));
    if (grads) {
      tape.backward(l);
      for (std::size_t i = 0; i < p.items().size(); ++i) grads->items()[i].value = tape.grad(bound.vars()[i]);
    }
    return l.value().item();
  };
  ParamSet<double> grads = params;
  loss(params, &grads);

  // Three entries from every parameter tensor.
  std::size_t checked = 0;
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t k = 0; k < params.items().size(); ++k) {
    Tensor<double>& t = params.items()[k].value;
    for (std::size_t e : {std::size_t{0}, t.size() / 2, t.size() - 1}) {
      const double saved = t[e], h = 1e-6;
      t[e] = saved + h;
      const double up = loss(params, nullptr);
      t[e] = saved - h;
      const double down = loss(params, nullptr);
      t[e] = saved;
      const double numeric = (up - down) / (2 * h), analytic = grads.items()[k].value[e];
      diff2 += (numeric - analytic) * (numeric - analytic);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      CAPTURE(params.items()[k].name);
      CHECK(std::abs(numeric - analytic) <= 1e-3 * std::max(std::abs(numeric), std::abs(analytic)) + 1e-6);
      ++checked;
    }
  }
  CHECK(checked >= 50);
  CHECK(std::sqrt(diff2) / std::max(std::sqrt(a2), std::sqrt(n2)) < 1e-3);
}

TEST_CASE("training") {
  const DiffusionSchedule s = make_schedule();
  const DenoiserConfig cfg = tiny();
  const Sequence seq = small_sequence(12);
  const Conditioning cond = small_conditioning(seq);

  SUBCASE("loss falls on a frozen batch") {
    Denoiser m{cfg, init_params(cfg, 5)};
    Rng rng(1);
    Tensor<float> z0({3, 3, 8, 8});
    for (std::size_t v = 0; v < 3; ++v) {
      const Tensor<float> f = image_to_tensor(seq.frames[v + 1]);
      std::copy(f.data(), f.data() + f.size(), z0.data() + v * f.size());
    }
    const Tensor<float> xi = Tensor<float>::randn(z0.shape(), rng);
    const CondTensors<float> c = cond_tensors<float>(cond);
    AdamState<float> adam;
    AdamOptions opt;
    opt.lr = 3e-3;
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) {
      Tape<float> tape;
      BoundParams<float> bound(tape, m.params, true);
      Var<float> l = training_loss(
          tape, [&](Var<float> zt, int t) { return denoiser_forward(tape, bound, cfg, zt, c, t, s.at(t)); }, z0, xi, 400, s);
      tape.backward(l);
      std::vector<Tensor<float>> g;
      for (const auto& v : bound.vars()) g.push_back(tape.grad(v));
      adam_step(m.params, g, adam, opt);
      losses.push_back(l.value().item());
    }
    CHECK(losses.back() < 0.5 * losses.front());
  }

  SUBCASE("ablations still train") {
    DenoiserConfig no_pose = cfg;
    no_pose.use_pose = false;
    Denoiser m{no_pose, init_params(no_pose, 5)};
    TrainState st;
    TrainOptions o;
    o.steps = 4;
    o.conditioning.no_warp = true;
    o.structured_noise = false;
    train(m, st, {seq}, s, o);
    CHECK(st.step == 4);
    for (double l : st.losses) CHECK(std::isfinite(l));
  }

  SUBCASE("deterministic in seed") {
    TrainOptions o;
    o.steps = 3;
    o.seed = 9;
    Denoiser a{cfg, init_params(cfg, 5)}, b = a;
    TrainState sa, sb;
    train(a, sa, {seq}, s, o);
    train(b, sb, {seq}, s, o);
    CHECK(sa.losses == sb.losses);
    CHECK(a.params.get("out.w") == b.params.get("out.w"));
  }

  SUBCASE("empty dataset") {
    Denoiser m{cfg, init_params(cfg, 5)};
    TrainState st;
    CHECK_THROWS_AS(train(m, st, {}, s, {}), DataError);
  }

  SUBCASE("checkpoint round trip and resume") {
    const std::string path = temp_path("ck.bin"), log = temp_path("loss.csv");
    TrainOptions o;
    o.steps = 3;
    o.seed = 2;
    o.checkpoint_path = path;
    o.loss_log_path = log;
    o.init = InitMode::no_vid;
    o.checkpoint_extra = R"({"note":"unit"})";
    Denoiser m{cfg, init_params(cfg, 5)};
    TrainState st;
    train(m, st, {seq}, s, o);

    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.state.step == 3);
    CHECK(ck.state.adam.step == st.adam.step);
    CHECK(ck.init == InitMode::no_vid);
    CHECK(ck.timesteps == 1000);
    CHECK(ck.config.channels == 4);
    CHECK(ck.extra_json == R"({"note":"unit"})");
    REQUIRE(ck.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      CHECK(ck.params.items()[i].name == m.params.items()[i].name);
      CHECK(ck.params.items()[i].value == m.params.items()[i].value);
      CHECK(ck.state.adam.m[i] == st.adam.m[i]);
      CHECK(ck.state.adam.v[i] == st.adam.v[i]);
    }

    // Three more steps from the checkpoint equal six uninterrupted steps.
    Denoiser resumed{ck.config, ck.params};
    TrainState rs = ck.state;
    train(resumed, rs, {seq}, s, o);
    CHECK(rs.step == 6);
    Denoiser straight{cfg, init_params(cfg, 5)};
    TrainState ss;
    TrainOptions o6 = o;
    o6.steps = 6;
    o6.checkpoint_path.clear();
    o6.loss_log_path.clear();
    train(straight, ss, {seq}, s, o6);
    CHECK(resumed.params.get("out.w") == straight.params.get("out.w"));

    std::ifstream in(log);
    std::string line;
    int rows = 0;
    std::getline(in, line);
    CHECK(line == "step,loss,wallclock");
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 6);

    std::ofstream(path, std::ios::binary) << "garbage";
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.bin")), DataError);
    std::remove(path.c_str());
    std::remove(log.c_str());
  }
}
