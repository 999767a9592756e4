#include "nvs/geometry.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace nvs {

Mat3 Mat3::rotation_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{1, 0, 0, 0, c, -s, 0, s, c}};
}

Mat3 Mat3::rotation_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{c, 0, s, 0, 1, 0, -s, 0, c}};
}

Mat3 Mat3::rotation_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{c, -s, 0, s, c, 0, 0, 0, 1}};
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(i, 0) * o(0, j) + (*this)(i, 1) * o(1, j) + (*this)(i, 2) * o(2, j);
  return r;
}

Vec3 Mat3::operator*(const Vec3& v) const {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Mat3 Mat3::operator*(double s) const {
  Mat3 r = *this;
  for (double& x : r.m) x *= s;
  return r;
}

Mat3 Mat3::transpose() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
  return r;
}

double Mat3::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
}

double Mat3::orthonormality_error() const {
  const Mat3 p = transpose() * *this;
  double worst = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) worst = std::max(worst, std::abs(p(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

Mat3 skew(const Vec3& v) { return {{0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0}}; }

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  return {rotation * other.rotation, rotation * other.translation + translation};
}

RigidTransform RigidTransform::inverse() const {
  const Mat3 rt = rotation.transpose();
  return {rt, -(rt * translation)};
}

void Camera::validate() const {
  if (!(k.fx > 0) || !(k.fy > 0)) throw GeometryError("camera focal lengths must be positive");
  if (rotation.orthonormality_error() > 1e-6 || rotation.det() < 0) {
    throw GeometryError("camera rotation is not orthonormal with determinant +1");
  }
}

bool Camera::principal_point_inside(int width, int height) const {
  return k.cx >= -0.5 && k.cy >= -0.5 && k.cx <= width - 0.5 && k.cy <= height - 0.5;
}

Intrinsics intrinsics_for(int resolution, double fov_degrees) {
  const double half = fov_degrees * std::numbers::pi / 360.0;
  const double f = 0.5 * resolution / std::tan(half);
  const double c = 0.5 * (resolution - 1);
  return {f, f, c, c};
}

RigidTransform relative_pose(const Camera& a, const Camera& b) {
  a.validate();
  b.validate();
  return b.camera_from_world().compose(a.world_from_camera());
}

std::optional<Projection> project(const Camera& cam, const Vec3& world_point) {
  const Vec3 p = cam.camera_from_world().apply(world_point);
  if (!(p.z > 0)) return std::nullopt;
  return Projection{cam.k.fx * p.x / p.z + cam.k.cx, cam.k.fy * p.y / p.z + cam.k.cy, p.z};
}

Vec3 unproject(const Camera& cam, double u, double v, double depth) {
  if (!(depth > 0)) throw GeometryError("unproject: depth must be positive");
  const Vec3 p{(u - cam.k.cx) / cam.k.fx * depth, (v - cam.k.cy) / cam.k.fy * depth, depth};
  return cam.world_from_camera().apply(p);
}

namespace {

Mat3 inverse_intrinsics(const Intrinsics& k) {
  return {{1.0 / k.fx, 0, -k.cx / k.fx, 0, 1.0 / k.fy, -k.cy / k.fy, 0, 0, 1}};
}

}  // namespace

Mat3 fundamental_matrix(const Camera& a, const Camera& b) {
  const RigidTransform rel = relative_pose(a, b);
  if (norm(rel.translation) <= 1e-9) throw GeometryError("degenerate baseline");
  const Mat3 essential = skew(rel.translation) * rel.rotation;
  return inverse_intrinsics(b.k).transpose() * essential * inverse_intrinsics(a.k);
}

double normalized_epipolar_residual(const Camera& a, const Camera& b, double ua, double va, double ub, double vb) {
  const RigidTransform rel = relative_pose(a, b);
  const double baseline = norm(rel.translation);
  if (baseline <= 1e-9) throw GeometryError("degenerate baseline");
  const Mat3 essential = skew(rel.translation * (1.0 / baseline)) * rel.rotation;
  const Vec3 xa = inverse_intrinsics(a.k) * Vec3{ua, va, 1};
  const Vec3 xb = inverse_intrinsics(b.k) * Vec3{ub, vb, 1};
  return dot(xb, essential * xa);
}

double sed(const Mat3& f, double ua, double va, double ub, double vb) {
  const Vec3 xa{ua, va, 1};
  const Vec3 xb{ub, vb, 1};
  const Vec3 line_b = f * xa;
  const Vec3 line_a = f.transpose() * xb;
  const double nb = line_b.x * line_b.x + line_b.y * line_b.y;
  const double na = line_a.x * line_a.x + line_a.y * line_a.y;
  if (nb == 0 || na == 0) return std::numeric_limits<double>::infinity();
  const double r = dot(xb, line_b);
  return r * r / nb + r * r / na;
}

void Trajectory::validate() const {
  if (cameras.size() < 2) throw GeometryError("trajectory needs at least 2 cameras");
  for (const auto& c : cameras) c.validate();
  const Camera& ref = cameras.front();
  if (ref.rotation.orthonormality_error() > 1e-9 || std::abs(ref.rotation(0, 0) - 1) > 1e-9 ||
      std::abs(ref.rotation(1, 1) - 1) > 1e-9 || std::abs(ref.rotation(2, 2) - 1) > 1e-9 || norm(ref.translation) > 1e-9) {
    throw GeometryError("trajectory entry 0 must carry the identity pose");
  }
}

Trajectory Trajectory::relative_to_first(const std::vector<Camera>& world_cameras) {
  if (world_cameras.empty()) throw GeometryError("empty camera list");
  const RigidTransform ref_from_world = world_cameras.front().camera_from_world();
  Trajectory traj;
  for (const auto& c : world_cameras) {
    const RigidTransform pose = ref_from_world.compose(c.world_from_camera());
    traj.cameras.push_back({c.k, pose.rotation, pose.translation});
  }
  traj.cameras.front().rotation = Mat3::identity();
  traj.cameras.front().translation = {};
  return traj;
}

std::string trajectory_to_json(const Trajectory& traj) {
  nlohmann::ordered_json doc;
  doc["convention"] = "world_from_camera";
  auto& cams = doc["cameras"] = nlohmann::ordered_json::array();
  for (const auto& c : traj.cameras) {
    nlohmann::ordered_json j;
    j["fx"] = c.k.fx;
    j["fy"] = c.k.fy;
    j["cx"] = c.k.cx;
    j["cy"] = c.k.cy;
    j["R"] = c.rotation.m;
    j["t"] = {c.translation.x, c.translation.y, c.translation.z};
    cams.push_back(std::move(j));
  }
  return doc.dump(2);
}

Trajectory trajectory_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("trajectory JSON: ") + e.what());
  }
  if (!doc.is_object() || doc.value("convention", "") != "world_from_camera") {
    throw DataError("trajectory JSON: \"convention\" must be \"world_from_camera\"");
  }
  if (!doc.contains("cameras") || !doc["cameras"].is_array()) throw DataError("trajectory JSON: missing \"cameras\" array");
  Trajectory traj;
  try {
    for (const auto& j : doc["cameras"]) {
      Camera c;
      c.k = {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(), j.at("cy").get<double>()};
      const auto r = j.at("R").get<std::vector<double>>();
      const auto t = j.at("t").get<std::vector<double>>();
      if (r.size() != 9 || t.size() != 3) throw DataError("trajectory JSON: R needs 9 and t needs 3 values");
      std::copy(r.begin(), r.end(), c.rotation.m.begin());
      c.translation = {t[0], t[1], t[2]};
      traj.cameras.push_back(c);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("trajectory JSON: ") + e.what());
  }
  traj.validate();
  return traj;
}

void save_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << trajectory_to_json(traj) << '\n';
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return trajectory_from_json(ss.str());
}

}  // namespace nvs
