#include "nvs/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"
#include "nvs/tensor.hpp"
#include "nvs/warp.hpp"

namespace nvs {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

bool Box::contains(const Vec3& p, double margin) const {
  return p.x > lo.x - margin && p.x < hi.x + margin && p.y > lo.y - margin && p.y < hi.y + margin &&
         p.z > lo.z - margin && p.z < hi.z + margin;
}

bool Scene::free_space(const Vec3& p, double margin) const {
  const bool in_room = p.x > room.lo.x + margin && p.x < room.hi.x - margin && p.y > room.lo.y + margin &&
                       p.y < room.hi.y - margin && p.z > room.lo.z + margin && p.z < room.hi.z - margin;
  if (!in_room) return false;
  return std::none_of(boxes.begin(), boxes.end(), [&](const Box& b) { return b.contains(p, margin); });
}

namespace {

constexpr double kKeepClear = 1.5;  // xz radius around the room centre kept free of boxes

float q8(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0); }

Color hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double k[3] = {5.0, 3.0, 1.0};
  Color c{};
  for (int i = 0; i < 3; ++i) {
    const double t = std::fmod(k[i] + h * 6.0, 6.0);
    c[i] = q8(v - v * s * std::max(0.0, std::min({t, 4.0 - t, 1.0})));
  }
  return c;
}

double coord(const Vec3& v, int axis) { return axis == 0 ? v.x : axis == 1 ? v.y : v.z; }

Vec3 axis_normal(int axis, double sign) {
  Vec3 n;
  if (axis == 0) n.x = sign;
  if (axis == 1) n.y = sign;
  if (axis == 2) n.z = sign;
  return n;
}

const Vec3 kLight = [] {
  const Vec3 l{0.4, -1.0, 0.3};
  return l * (1.0 / norm(l));
}();

double shade(const Vec3& n) { return 0.55 + 0.45 * std::max(0.0, dot(n, kLight)); }

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Color texture_albedo(const WallTexture& tex, const Vec3& p, int axis) {
  const long cu = static_cast<long>(std::floor(coord(p, (axis + 1) % 3) / tex.period));
  const long cv = static_cast<long>(std::floor(coord(p, (axis + 2) % 3) / tex.period));
  switch (tex.pattern) {
    case Pattern::checker: return ((cu + cv) & 1) ? tex.alt : tex.base;
    case Pattern::stripes_u: return (cu & 1) ? tex.alt : tex.base;
    case Pattern::stripes_v: return (cv & 1) ? tex.alt : tex.base;
    case Pattern::tiles: break;
  }
  const std::uint64_t h = mix64(tex.key ^ mix64(static_cast<std::uint64_t>(cu) ^ mix64(static_cast<std::uint64_t>(cv) + axis)));
  const float level = static_cast<float>(h % 4) / 3.0f;
  Color c{};
  for (int i = 0; i < 3; ++i) c[i] = q8(tex.base[i] + (tex.alt[i] - tex.base[i]) * level);
  return c;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int axis = 0;
  double normal_sign = 0;
  int box = -1;  // -1 for a room face
};

void intersect_room(const Box& room, const Vec3& o, const Vec3& d, Hit& hit) {
  for (int a = 0; a < 3; ++a) {
    const double da = coord(d, a);
    if (da == 0) continue;
    const double bound = da > 0 ? coord(room.hi, a) : coord(room.lo, a);
    const double t = (bound - coord(o, a)) / da;
    if (t < hit.t) hit = {t, a, da > 0 ? -1.0 : 1.0, -1};
  }
}

void intersect_box(const Box& b, int index, const Vec3& o, const Vec3& d, Hit& hit) {
  double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
  int axis = 0;
  double sign = 0;
  for (int a = 0; a < 3; ++a) {
    const double da = coord(d, a), oa = coord(o, a), lo = coord(b.lo, a), hi = coord(b.hi, a);
    if (da == 0) {
      if (oa <= lo || oa >= hi) return;
      continue;
    }
    const double t1 = (lo - oa) / da, t2 = (hi - oa) / da;
    const double tn = std::min(t1, t2), tf = std::max(t1, t2);
    if (tn > tmin) {
      tmin = tn;
      axis = a;
      sign = da > 0 ? -1.0 : 1.0;
    }
    tmax = std::min(tmax, tf);
  }
  if (tmin <= tmax && tmin > 0 && tmin < hit.t) hit = {tmin, axis, sign, index};
}

Mat3 orientation(double yaw, double pitch) { return Mat3::rotation_y(yaw) * Mat3::rotation_x(pitch); }

}  // namespace

Scene generate_scene(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

  Scene s;
  s.seed = seed;
  const double w = uni(4.6, 6.0), h = uni(2.4, 3.0), d = uni(4.6, 6.0);
  s.room = {{-w / 2, -h / 2, -d / 2}, {w / 2, h / 2, d / 2}, {}, {}};

  for (auto& wall : s.walls) {
    const double hue = u01(rng), sat = uni(0.1, 0.45), val = uni(0.55, 0.9);
    wall.base = hsv(hue, sat, val);
    wall.alt = hsv(hue + uni(-0.08, 0.08), sat, val * uni(0.45, 0.7));
    wall.pattern = Pattern::tiles;
    wall.period = uni(0.3, 0.5);
    wall.key = rng();
  }

  const int count = std::uniform_int_distribution<int>(kMinBoxes, kMaxBoxes)(rng);
  const double hue0 = u01(rng);
  for (int i = 0; i < count; ++i) {
    Box b;
    b.color = hsv(hue0 + static_cast<double>(i) / count, uni(0.55, 0.9), uni(0.6, 0.95));
    b.texture = {b.color, {q8(0.6 * b.color[0]), q8(0.6 * b.color[1]), q8(0.6 * b.color[2])}, Pattern::tiles,
                 uni(0.18, 0.28), rng()};
    const double sx = uni(0.3, 0.9), sy = uni(0.3, 1.3), sz = uni(0.3, 0.9);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double cx = uni(s.room.lo.x + sx / 2 + 0.02, s.room.hi.x - sx / 2 - 0.02);
      const double cz = uni(s.room.lo.z + sz / 2 + 0.02, s.room.hi.z - sz / 2 - 0.02);
      // distance from the room centre to the nearest point of the footprint
      const double nx = std::max(0.0, std::abs(cx) - sx / 2), nz = std::max(0.0, std::abs(cz) - sz / 2);
      if (std::hypot(nx, nz) < kKeepClear) continue;
      b.lo = {cx - sx / 2, s.room.hi.y - sy, cz - sz / 2};
      b.hi = {cx + sx / 2, s.room.hi.y, cz + sz / 2};
      break;
    }
    if (b.hi.x == b.lo.x) continue;  // no placement found; practically unreachable
    s.boxes.push_back(b);
  }
  return s;
}

PosedFrame render(const Scene& scene, const Camera& cam, int res) {
  cam.validate();
  if (res < 1) throw ConfigError("render: resolution must be positive");
  if (!scene.free_space(cam.translation)) throw GeometryError("render: camera inside geometry");
  PosedFrame f{Image(3, res, res), DepthMap(res, res), cam, std::vector<int>(static_cast<std::size_t>(res) * res)};
  const Vec3 o = cam.translation;
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const Vec3 dc{(x - cam.k.cx) / cam.k.fx, (y - cam.k.cy) / cam.k.fy, 1.0};
      const Vec3 d = cam.rotation * dc;
      Hit hit;
      intersect_room(scene.room, o, d, hit);
      for (std::size_t b = 0; b < scene.boxes.size(); ++b) intersect_box(scene.boxes[b], static_cast<int>(b), o, d, hit);
      const Vec3 n = axis_normal(hit.axis, hit.normal_sign);
      // room faces are seen from inside, so their normal points away from the face side
      const bool positive_side = hit.box >= 0 ? hit.normal_sign > 0 : hit.normal_sign < 0;
      const int face = 2 * hit.axis + (positive_side ? 1 : 0);
      f.surface[static_cast<std::size_t>(y) * res + x] = 6 * (hit.box + 1) + face;
      const Color albedo =
          texture_albedo(hit.box >= 0 ? scene.boxes[hit.box].texture : scene.walls[face], o + d * hit.t, hit.axis);
      const double s = shade(n);
      for (int c = 0; c < 3; ++c) f.image.at(c, y, x) = q8(albedo[c] * s);
      // the ray has unit z in camera space, so t is the camera-frame depth
      f.depth.at(y, x) = static_cast<float>(hit.t);
    }
  }
  return f;
}

std::string to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::dolly: return "dolly";
    case TrajectoryKind::orbit: return "orbit";
    case TrajectoryKind::scan: return "scan";
    case TrajectoryKind::u_turn: return "u_turn";
  }
  return "?";
}

TrajectoryKind trajectory_kind_from_string(const std::string& name) {
  for (auto k : {TrajectoryKind::dolly, TrajectoryKind::orbit, TrajectoryKind::scan, TrajectoryKind::u_turn})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown trajectory kind '" + name + "' (dolly, orbit, scan, u_turn)");
}

Camera CameraPath::world(std::size_t i) const {
  const RigidTransform pose = anchor.world_from_camera().compose(relative[i].world_from_camera());
  return {relative[i].k, pose.rotation, pose.translation};
}

CameraPath generate_trajectory(const Scene& scene, TrajectoryKind kind, int n_targets, std::uint64_t seed,
                               const TrajectoryOptions& opts) {
  if (n_targets < 1) throw ConfigError("trajectory needs at least one target view");
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const Intrinsics k = intrinsics_for(opts.resolution, opts.fov_degrees);
  const double n = static_cast<double>(n_targets);
  constexpr double kMargin = 0.2;
  // Yaw swept by u_turn; with a 60 degree field of view nothing of the
  // reference stays in view at the end.
  constexpr double kUTurnYaw = 2.0 * std::numbers::pi / 3.0;

  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    const double yaw0 = uni(0.0, 2 * std::numbers::pi), pitch0 = uni(-0.1, 0.1);
    const Mat3 r0 = orientation(yaw0, pitch0);
    const Vec3 forward = r0 * Vec3{0, 0, 1}, right = r0 * Vec3{1, 0, 0};
    Vec3 p0{uni(-0.5, 0.5), uni(-0.2, 0.2), uni(-0.5, 0.5)};
    Vec3 pivot;
    if (kind == TrajectoryKind::orbit) {
      const double radius = uni(0.7, 1.0);
      pivot = {uni(-0.3, 0.3), p0.y, uni(-0.3, 0.3)};
      p0 = pivot - Mat3::rotation_y(yaw0) * Vec3{0, 0, radius};
    }

    std::vector<Camera> world;
    for (int i = 0; i <= n_targets; ++i) {
      const double f = i / n;
      Camera c{k, r0, p0};
      switch (kind) {
        case TrajectoryKind::dolly: {
          const double step = opts.step >= 0 ? opts.step : 0.8 / n;
          c.translation = p0 + forward * (step * i);
          break;
        }
        case TrajectoryKind::orbit: {
          const Mat3 turn = Mat3::rotation_y(opts.orbit_degrees * std::numbers::pi / 180.0 * f);
          c.translation = pivot + turn * (p0 - pivot);
          c.rotation = turn * r0;
          break;
        }
        case TrajectoryKind::scan: {
          const double step = opts.step >= 0 ? opts.step : 1.0 / n;
          c.translation = p0 + right * (step * i) + Vec3{0, 0.05 * std::sin(2 * std::numbers::pi * f), 0};
          c.rotation = orientation(yaw0 + 0.5 * f, pitch0 + 0.08 * std::sin(2 * std::numbers::pi * f));
          break;
        }
        case TrajectoryKind::u_turn: {
          c.translation = p0 + forward * (0.4 * f);
          c.rotation = orientation(yaw0 + kUTurnYaw * f, pitch0);
          break;
        }
      }
      world.push_back(c);
    }
    if (!std::all_of(world.begin(), world.end(), [&](const Camera& c) { return scene.free_space(c.translation, kMargin); }))
      continue;

    CameraPath path{world.front(), Trajectory::relative_to_first(world)};
    if (kind == TrajectoryKind::u_turn) {
      const PosedFrame ref = render(scene, world.front(), opts.resolution);
      const WarpResult w = forward_warp(ref.image, ref.depth, world.front(), world.back());
      if (overlap_ratio(w.mask) >= 0.20) continue;
    }
    return path;
  }
  throw GeometryError("cannot place a collision-free " + to_string(kind) + " path after " +
                      std::to_string(opts.max_attempts) + " attempts");
}

DepthMap corrupt_depth(const DepthMap& depth, const DepthNoiseModel& model, std::uint64_t seed) {
  if (model.sigma < 0) throw ConfigError("depth noise sigma must be nonnegative");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double kFloor = 1e-3;
  DepthMap out = depth;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eta = model.sigma * normal(rng);
    if (!(depth[i] > 0)) continue;
    const double v = model.scale * depth[i] * (1.0 + eta) + model.offset;
    out[i] = static_cast<float>(std::max(v, kFloor));
  }
  return out;
}

DepthNoiseModel training_depth_noise(std::uint64_t seed) {
  Rng rng(seed);
  return {0.05, std::uniform_real_distribution<double>(0.9, 1.1)(rng), 0.0};
}

Sequence make_sequence(std::uint64_t scene_seed, TrajectoryKind kind, int n_targets, std::uint64_t trajectory_seed,
                       const TrajectoryOptions& opts) {
  Sequence seq;
  seq.scene = generate_scene(scene_seed);
  seq.kind = kind;
  seq.trajectory_seed = trajectory_seed;
  seq.options = opts;
  seq.path = generate_trajectory(seq.scene, kind, n_targets, trajectory_seed, opts);
  for (std::size_t i = 0; i < seq.path.size(); ++i) {
    PosedFrame f = render(seq.scene, seq.path.world(i), opts.resolution);
    seq.frames.push_back(std::move(f.image));
    seq.depths.push_back(std::move(f.depth));
  }
  return seq;
}

namespace {

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }
json color_json(const Color& c) { return json::array({c[0], c[1], c[2]}); }

json texture_json(const WallTexture& t) {
  static const char* patterns[] = {"checker", "stripes_u", "stripes_v", "tiles"};
  return {{"base", color_json(t.base)},
          {"alt", color_json(t.alt)},
          {"pattern", patterns[static_cast<int>(t.pattern)]},
          {"period", t.period},
          {"key", t.key}};
}

std::string frame_name(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", stem, i, ext);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string scene_to_json(const Sequence& seq) {
  json doc;
  doc["scene_seed"] = seq.scene.seed;
  doc["trajectory"] = {{"kind", to_string(seq.kind)},
                       {"seed", seq.trajectory_seed},
                       {"n_targets", seq.path.size() - 1},
                       {"resolution", seq.options.resolution},
                       {"fov_degrees", seq.options.fov_degrees},
                       {"step", seq.options.step},
                       {"orbit_degrees", seq.options.orbit_degrees},
                       {"max_attempts", seq.options.max_attempts}};
  const Camera& a = seq.path.anchor;
  doc["anchor"] = {{"convention", "world_from_camera"}, {"R", a.rotation.m}, {"t", vec_json(a.translation)}};
  doc["room"] = {{"lo", vec_json(seq.scene.room.lo)}, {"hi", vec_json(seq.scene.room.hi)}};
  json walls = json::array();
  for (const auto& w : seq.scene.walls) walls.push_back(texture_json(w));
  doc["walls"] = walls;
  json boxes = json::array();
  for (const auto& b : seq.scene.boxes)
    boxes.push_back({{"lo", vec_json(b.lo)}, {"hi", vec_json(b.hi)}, {"color", color_json(b.color)},
                     {"texture", texture_json(b.texture)}});
  doc["boxes"] = boxes;
  return doc.dump(2);
}

void write_sequence(const std::string& dir, const Sequence& seq) {
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DataError("cannot create '" + dir + "': " + ec.message());
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    write_png((root / frame_name("frame", i, "png")).string(), seq.frames[i]);
    const DepthMap& d = seq.depths[i];
    save_vft((root / frame_name("depth", i, "vft")).string(),
             Tensor<float>({static_cast<std::size_t>(d.height()), static_cast<std::size_t>(d.width())}, d.data()));
  }
  save_trajectory((root / "trajectory.json").string(), seq.path.relative);
  std::ofstream out(root / "scene.json");
  if (!out) throw DataError("cannot write scene.json in '" + dir + "'");
  out << scene_to_json(seq) << '\n';
}

namespace {

struct SceneMeta {
  std::uint64_t scene_seed = 0;
  TrajectoryKind kind = TrajectoryKind::dolly;
  std::uint64_t trajectory_seed = 0;
  int n_targets = 0;
  TrajectoryOptions options;
  Camera anchor;
};

SceneMeta parse_scene_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    SceneMeta m;
    m.scene_seed = doc.at("scene_seed").get<std::uint64_t>();
    const json& t = doc.at("trajectory");
    m.kind = trajectory_kind_from_string(t.at("kind").get<std::string>());
    m.trajectory_seed = t.at("seed").get<std::uint64_t>();
    m.n_targets = t.at("n_targets").get<int>();
    m.options.resolution = t.at("resolution").get<int>();
    m.options.fov_degrees = t.at("fov_degrees").get<double>();
    m.options.step = t.at("step").get<double>();
    m.options.orbit_degrees = t.at("orbit_degrees").get<double>();
    m.options.max_attempts = t.at("max_attempts").get<int>();
    const json& a = doc.at("anchor");
    const auto r = a.at("R").get<std::vector<double>>();
    const auto tr = a.at("t").get<std::vector<double>>();
    if (r.size() != 9 || tr.size() != 3) throw DataError("scene.json: malformed anchor");
    std::copy(r.begin(), r.end(), m.anchor.rotation.m.begin());
    m.anchor.translation = {tr[0], tr[1], tr[2]};
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scene.json: ") + e.what());
  }
}

}  // namespace

Sequence read_sequence(const std::string& dir) {
  const fs::path root(dir);
  Sequence seq;
  seq.path.relative = load_trajectory((root / "trajectory.json").string());
  seq.path.anchor = seq.path.relative[0];
  if (fs::exists(root / "scene.json")) {
    const SceneMeta m = parse_scene_json(slurp(root / "scene.json"));
    seq.scene = generate_scene(m.scene_seed);
    seq.kind = m.kind;
    seq.trajectory_seed = m.trajectory_seed;
    seq.options = m.options;
    seq.path.anchor.rotation = m.anchor.rotation;
    seq.path.anchor.translation = m.anchor.translation;
  }
  for (std::size_t i = 0; i < seq.path.size(); ++i) {
    seq.frames.push_back(read_png((root / frame_name("frame", i, "png")).string()));
    const Tensor<float> t = load_vft((root / frame_name("depth", i, "vft")).string());
    if (t.rank() != 2) throw DataError("depth file must be rank 2");
    DepthMap d(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)));
    std::copy(t.data(), t.data() + t.size(), d.data().begin());
    d.validate();
    if (!d.same_size(seq.frames.back())) throw DataError("frame and depth " + std::to_string(i) + " differ in size");
    seq.depths.push_back(std::move(d));
  }
  return seq;
}

Sequence regenerate_sequence(const std::string& dir) {
  const SceneMeta m = parse_scene_json(slurp(fs::path(dir) / "scene.json"));
  return make_sequence(m.scene_seed, m.kind, m.n_targets, m.trajectory_seed, m.options);
}

}  // namespace nvs
