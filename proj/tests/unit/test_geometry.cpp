#include <cmath>
#include <random>

#include "doctest.h"
#include "nvs/geometry.hpp"

using namespace nvs;

namespace {

Camera make_cam(const Mat3& r, const Vec3& t, Intrinsics k = {100, 100, 64, 64}) { return {k, r, t}; }

Mat3 random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  return Mat3::rotation_z(u(rng)) * Mat3::rotation_y(u(rng)) * Mat3::rotation_x(u(rng));
}

Vec3 random_vec(std::mt19937_64& rng, double s = 1.0) {
  std::uniform_real_distribution<double> u(-s, s);
  return {u(rng), u(rng), u(rng)};
}

double max_diff(const RigidTransform& a, const RigidTransform& b) {
  double w = 0;
  for (int i = 0; i < 9; ++i) w = std::max(w, std::abs(a.rotation.m[i] - b.rotation.m[i]));
  return std::max(w, norm(a.translation - b.translation));
}

}  // namespace

TEST_CASE("relative_pose") {
  std::mt19937_64 rng(1);
  const Camera c = make_cam(random_rotation(rng), random_vec(rng));
  CHECK(max_diff(relative_pose(c, c), RigidTransform{}) < 1e-12);

  // b sits one unit along +x of a: a point in a's frame is seen shifted by -1 in b.
  const Camera a = make_cam(Mat3::identity(), {0, 0, 0});
  const Camera b = make_cam(Mat3::identity(), {1, 0, 0});
  const RigidTransform ab = relative_pose(a, b);
  CHECK(max_diff(ab, RigidTransform{Mat3::identity(), {-1, 0, 0}}) < 1e-12);

  for (int i = 0; i < 50; ++i) {
    const Camera p = make_cam(random_rotation(rng), random_vec(rng, 3));
    const Camera q = make_cam(random_rotation(rng), random_vec(rng, 3));
    const Camera s = make_cam(random_rotation(rng), random_vec(rng, 3));
    CHECK(max_diff(relative_pose(p, q).compose(relative_pose(q, p)), RigidTransform{}) < 1e-6);
    // a composed with the relative transform lands on b's pose
    const RigidTransform rebuilt = p.world_from_camera().compose(relative_pose(p, q).inverse());
    CHECK(max_diff(rebuilt, q.world_from_camera()) < 1e-6);
    CHECK(max_diff(relative_pose(q, s).compose(relative_pose(p, q)), relative_pose(p, s)) < 1e-6);
  }

  Camera bad = c;
  bad.rotation(0, 0) = 2.0;
  CHECK_THROWS_AS(relative_pose(bad, c), GeometryError);
}

TEST_CASE("project and unproject") {
  const Camera cam = make_cam(Mat3::identity(), {});
  auto p = project(cam, {0, 0, 2});
  REQUIRE(p);
  CHECK(p->u == 64);
  CHECK(p->v == 64);
  CHECK(p->depth == 2);

  p = project(cam, {0.5, 0, 1});
  REQUIRE(p);
  CHECK(p->u == doctest::Approx(114));
  CHECK(p->v == doctest::Approx(64));
  CHECK(p->depth == 1);

  CHECK(!project(cam, {0, 0, -1}));
  CHECK(!project(cam, {1, 0, 0}));
  CHECK_THROWS_AS(unproject(cam, 1, 1, 0), GeometryError);

  const Vec3 axis = unproject(cam, 64, 64, 3);
  CHECK(norm(axis - Vec3{0, 0, 3}) < 1e-12);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pix(0, 127), dep(0.1, 10);
  for (int i = 0; i < 1000; ++i) {
    const Camera c = make_cam(random_rotation(rng), random_vec(rng, 5), {80 + pix(rng) / 4, 90, 60, 70});
    const double u = pix(rng), v = pix(rng), d = dep(rng);
    const auto back = project(c, unproject(c, u, v, d));
    REQUIRE(back);
    CHECK(std::abs(back->u - u) < 1e-5);
    CHECK(std::abs(back->v - v) < 1e-5);
    CHECK(std::abs(back->depth - d) < 1e-5);
  }

  // explicit R (K^-1 (u,v,1) d) + t
  const Mat3 r = Mat3::rotation_y(0.3) * Mat3::rotation_x(-0.2);
  const Vec3 t{0.5, -1, 2};
  const Camera c = make_cam(r, t, {120, 110, 30, 40});
  const double u = 17, v = 55, d = 2.5;
  const Vec3 ray{(u - 30) / 120.0, (v - 40) / 110.0, 1.0};
  const Vec3 want = r * (ray * d) + t;
  CHECK(norm(unproject(c, u, v, d) - want) < 1e-12);
}

TEST_CASE("fundamental matrix") {
  const Camera a = make_cam(Mat3::identity(), {});
  const Camera b = make_cam(Mat3::identity(), {0.5, 0, 0});
  const Mat3 f = fundamental_matrix(a, b);

  // epipolar lines of a pure x-translation are horizontal scanlines
  for (double v : {3.0, 40.0, 100.0}) {
    const Vec3 line = f * Vec3{20, v, 1};
    CHECK(std::abs(line.x) < 1e-12);
    CHECK(std::abs(dot(Vec3{77, v, 1}, line)) < 1e-12);
    CHECK(std::abs(dot(Vec3{77, v + 1, 1}, line)) > 1e-6);
  }
  CHECK(std::abs(f.det()) < 1e-12);

  // swapping cameras transposes F up to scale
  const std::mt19937_64 seed(3);
  std::mt19937_64 rng = seed;
  const Camera p = make_cam(random_rotation(rng), random_vec(rng, 2));
  const Camera q = make_cam(random_rotation(rng), random_vec(rng, 2));
  const Mat3 fpq = fundamental_matrix(p, q), fqp = fundamental_matrix(q, p).transpose();
  double scale = 0, best = 0;
  for (int i = 0; i < 9; ++i)
    if (std::abs(fqp.m[i]) > best) {
      best = std::abs(fqp.m[i]);
      scale = fpq.m[i] / fqp.m[i];
    }
  for (int i = 0; i < 9; ++i) CHECK(fpq.m[i] == doctest::Approx(scale * fqp.m[i]).epsilon(1e-9).scale(1e-9));

  // true correspondences satisfy the constraint
  for (int i = 0; i < 20; ++i) {
    const Vec3 x = unproject(p, 10 + 5 * i, 90 - 3 * i, 1 + 0.2 * i);
    const auto pa = project(p, x), pb = project(q, x);
    if (!pa || !pb) continue;
    CHECK(std::abs(normalized_epipolar_residual(p, q, pa->u, pa->v, pb->u, pb->v)) < 1e-9);
  }

  try {
    fundamental_matrix(a, make_cam(Mat3::rotation_y(0.5), {}));
    FAIL("expected GeometryError");
  } catch (const GeometryError& e) {
    CHECK(std::string(e.what()) == "degenerate baseline");
  }
}

TEST_CASE("symmetric epipolar distance") {
  const Camera a = make_cam(Mat3::identity(), {});
  const Camera b = make_cam(Mat3::identity(), {0.5, 0, 0});
  const Mat3 f = fundamental_matrix(a, b);
  const Vec3 x = unproject(a, 50, 60, 2);
  const auto pb = project(b, x);
  REQUIRE(pb);
  CHECK(sed(f, 50, 60, pb->u, pb->v) < 1e-8);
  CHECK(sed(f, 50, 60, pb->u, pb->v + 2) == doctest::Approx(8.0).epsilon(1e-9));

  double prev = -1;
  for (double off = 0; off <= 5; off += 0.25) {
    const double s = sed(f, 50, 60, pb->u, pb->v + off);
    CHECK(s >= prev);
    prev = s;
  }

  CHECK(std::isinf(sed(Mat3{}, 1, 2, 3, 4)));
}

TEST_CASE("trajectory json") {
  std::mt19937_64 rng(4);
  std::vector<Camera> world;
  for (int i = 0; i < 4; ++i) world.push_back(make_cam(random_rotation(rng), random_vec(rng, 2), {40, 41, 15.5, 15.5}));
  const Trajectory traj = Trajectory::relative_to_first(world);
  REQUIRE_NOTHROW(traj.validate());
  for (std::size_t i = 1; i < world.size(); ++i) {
    CHECK(max_diff(relative_pose(traj[0], traj[i]), relative_pose(world[0], world[i])) < 1e-9);
  }

  const Trajectory back = trajectory_from_json(trajectory_to_json(traj));
  REQUIRE(back.size() == traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i) {
    CHECK(back[i].rotation.m == traj[i].rotation.m);
    CHECK(back[i].k.fy == traj[i].k.fy);
    CHECK(norm(back[i].translation - traj[i].translation) == 0.0);
  }

  std::string text = trajectory_to_json(traj);
  text.replace(text.find("world_from_camera"), 17, "camera_from_world");
  CHECK_THROWS_AS(trajectory_from_json(text), DataError);
  CHECK_THROWS_AS(trajectory_from_json("{"), DataError);

  Trajectory single;
  single.cameras.push_back(traj[0]);
  CHECK_THROWS_AS(single.validate(), GeometryError);
  Trajectory shifted = traj;
  shifted.cameras[0].translation = {1, 0, 0};
  CHECK_THROWS_AS(shifted.validate(), GeometryError);
}
