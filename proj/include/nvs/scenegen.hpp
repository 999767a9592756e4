#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"

namespace nvs {

using Color = std::array<float, 3>;

enum class Pattern { checker, stripes_u, stripes_v, tiles };

/// Procedural surface texture. `tiles` gives each period-sized cell one of
/// four levels between base and alt, picked by hashing the cell with `key`.
struct WallTexture {
  Color base{}, alt{};
  Pattern pattern = Pattern::checker;
  double period = 0.5;
  std::uint64_t key = 0;
};

struct Box {
  Vec3 lo, hi;
  /// Distinct per box; the texture's base colour.
  Color color{};
  WallTexture texture;

  bool contains(const Vec3& p, double margin = 0.0) const;
};

/// Axis-aligned room (y points down, so the floor is at room.hi.y) holding
/// axis-aligned boxes. Faces are ordered -x, +x, -y, +y, -z, +z.
struct Scene {
  std::uint64_t seed = 0;
  Box room;
  std::array<WallTexture, 6> walls;
  std::vector<Box> boxes;

  /// Inside the room and outside every box, both by at least `margin`.
  bool free_space(const Vec3& p, double margin = 0.0) const;
};

struct PosedFrame {
  Image image;
  DepthMap depth;
  Camera camera;
  /// Surface id per pixel: room faces 0-5, then 6 per box in face order.
  std::vector<int> surface;
};

inline constexpr int kMinBoxes = 3;
inline constexpr int kMaxBoxes = 10;
inline constexpr double kDefaultFov = 60.0;

/// Deterministic from seed: 3-10 boxes with distinct colours, all inside the room.
Scene generate_scene(std::uint64_t seed);

/// Ray casts one pixel centre per pixel. Depth is camera-frame z. Colours are
/// multiples of 1/255. Throws GeometryError if the camera is not in free space.
PosedFrame render(const Scene& scene, const Camera& cam, int res);

enum class TrajectoryKind { dolly, orbit, scan, u_turn };

std::string to_string(TrajectoryKind kind);
TrajectoryKind trajectory_kind_from_string(const std::string& name);

struct TrajectoryOptions {
  int resolution = 32;
  double fov_degrees = kDefaultFov;
  /// Per-view translation for dolly and scan; negative picks the default.
  double step = -1.0;
  /// Total orbit sweep; 360 closes the loop.
  double orbit_degrees = 60.0;
  int max_attempts = 64;
};

/// Reference camera in world coordinates plus the trajectory relative to it.
struct CameraPath {
  Camera anchor;
  Trajectory relative;

  std::size_t size() const { return relative.size(); }
  Camera world(std::size_t i) const;
};

/// n_targets + 1 cameras, entry 0 the reference. Every camera lies in free
/// space; u_turn additionally ends with reference-warp overlap below 0.20.
/// Throws GeometryError when no path is found within max_attempts.
CameraPath generate_trajectory(const Scene& scene, TrajectoryKind kind, int n_targets, std::uint64_t seed,
                               const TrajectoryOptions& opts = {});

struct DepthNoiseModel {
  double sigma = 0.0;
  double scale = 1.0;
  double offset = 0.0;
};

/// depth' = scale * depth * (1 + eta) + offset with eta ~ N(0, sigma^2),
/// clamped to a small positive floor. Invalid (zero) pixels stay zero.
DepthMap corrupt_depth(const DepthMap& depth, const DepthNoiseModel& model, std::uint64_t seed);

/// sigma 0.05 with scale drawn from U(0.9, 1.1).
DepthNoiseModel training_depth_noise(std::uint64_t seed);

struct Sequence {
  Scene scene;
  TrajectoryKind kind = TrajectoryKind::dolly;
  std::uint64_t trajectory_seed = 0;
  TrajectoryOptions options;
  CameraPath path;
  std::vector<Image> frames;
  std::vector<DepthMap> depths;

  std::size_t size() const { return frames.size(); }
};

Sequence make_sequence(std::uint64_t scene_seed, TrajectoryKind kind, int n_targets, std::uint64_t trajectory_seed,
                       const TrajectoryOptions& opts = {});

/// frame_%04d.png, depth_%04d.vft, trajectory.json and scene.json.
void write_sequence(const std::string& dir, const Sequence& seq);
/// Loads frames, depths and trajectory; scene metadata if present.
Sequence read_sequence(const std::string& dir);
/// Rebuilds a sequence from the seeds and options stored in scene.json.
Sequence regenerate_sequence(const std::string& dir);

std::string scene_to_json(const Sequence& seq);

}  // namespace nvs
