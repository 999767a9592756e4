#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "nvs/error.hpp"

namespace nvs {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double operator[](int i) const { return i == 0 ? x : i == 1 ? y : z; }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity() { return {{1, 0, 0, 0, 1, 0, 0, 0, 1}}; }
  static Mat3 rotation_x(double radians);
  static Mat3 rotation_y(double radians);
  static Mat3 rotation_z(double radians);

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }

  Mat3 operator*(const Mat3& o) const;
  Vec3 operator*(const Vec3& v) const;
  Mat3 operator*(double s) const;
  Mat3 transpose() const;
  double det() const;
  /// Max-norm distance of R^T R from the identity.
  double orthonormality_error() const;
};

/// [v]x such that [v]x w = v x w.
Mat3 skew(const Vec3& v);

/// Rigid map p -> R p + t.
struct RigidTransform {
  Mat3 rotation = Mat3::identity();
  Vec3 translation;

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  /// (this ∘ other)(p) = this(other(p))
  RigidTransform compose(const RigidTransform& other) const;
  RigidTransform inverse() const;
};

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
};

/// Pinhole camera. The pose is world-from-camera: a camera-frame point p
/// maps to rotation * p + translation in the world. Camera axes follow the
/// x-right, y-down, z-forward convention. Pixel (0,0) is the centre of the
/// top-left pixel.
struct Camera {
  Intrinsics k;
  Mat3 rotation = Mat3::identity();
  Vec3 translation;

  RigidTransform world_from_camera() const { return {rotation, translation}; }
  RigidTransform camera_from_world() const { return world_from_camera().inverse(); }
  Vec3 center() const { return translation; }

  /// Throws GeometryError unless the rotation is orthonormal with det +1
  /// and the focal lengths are positive.
  void validate() const;
  /// Principal point inside a width x height image.
  bool principal_point_inside(int width, int height) const;
};

/// Intrinsics for a square image of `resolution` pixels with the given
/// horizontal field of view.
Intrinsics intrinsics_for(int resolution, double fov_degrees);

/// camera-b-from-camera-a: maps a point in a's frame to b's frame.
RigidTransform relative_pose(const Camera& a, const Camera& b);

struct Projection {
  double u = 0, v = 0, depth = 0;
};

/// World point to pixel coordinates plus camera-frame depth. Returns nullopt
/// for points at or behind the camera plane.
std::optional<Projection> project(const Camera& cam, const Vec3& world_point);

/// Pixel plus camera-frame depth (z) to a world point. Throws GeometryError
/// for depth <= 0.
Vec3 unproject(const Camera& cam, double u, double v, double depth);

/// F with x_b^T F x_a = 0 for corresponding pixels x_a in a and x_b in b.
/// Throws GeometryError("degenerate baseline") if the centres coincide.
Mat3 fundamental_matrix(const Camera& a, const Camera& b);

/// x_b^T E x_a on normalised camera coordinates with a unit-length baseline;
/// zero for exact correspondences.
double normalized_epipolar_residual(const Camera& a, const Camera& b, double ua, double va, double ub, double vb);

/// Symmetric epipolar distance in pixels^2: squared distance of x_b to the
/// line F x_a plus squared distance of x_a to the line F^T x_b. Returns
/// +infinity when either line is degenerate.
double sed(const Mat3& f, double ua, double va, double ub, double vb);

/// Cameras along a path; entry 0 is the reference camera and carries the
/// identity pose, all others are expressed in its frame.
struct Trajectory {
  std::vector<Camera> cameras;

  std::size_t size() const { return cameras.size(); }
  const Camera& operator[](std::size_t i) const { return cameras[i]; }
  /// Checks the reference entry, count >= 2 and every camera's validity.
  void validate() const;
  /// Re-expresses world-frame cameras relative to cameras[0].
  static Trajectory relative_to_first(const std::vector<Camera>& world_cameras);
};

std::string trajectory_to_json(const Trajectory& traj);
Trajectory trajectory_from_json(const std::string& text);
void save_trajectory(const std::string& path, const Trajectory& traj);
Trajectory load_trajectory(const std::string& path);

}  // namespace nvs
