#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semslam/geometry.hpp"
#include "semslam/image.hpp"
#include "semslam/io_png.hpp"
#include "semslam/util.hpp"

namespace semslam {

/// One time step of the input stream.
struct Frame {
  ImageRGB rgb;
  ImageDepth depth;    // meters, 0 = hole
  ImageLabel semantic;
  double timestamp = 0.0;
  std::optional<Pose> gt_pose;
};

inline void validate_frame(const Frame& f) {
  if (f.rgb.width != f.depth.width || f.rgb.height != f.depth.height || f.rgb.width != f.semantic.width ||
      f.rgb.height != f.semantic.height)
    throw std::runtime_error("frame: image sizes disagree");
  for (double d : f.depth.v) {
    if (!(d >= 0.0) || !std::isfinite(d)) throw std::runtime_error("frame: negative or non-finite depth");
  }
  for (double v : f.rgb.px) {
    if (!std::isfinite(v)) throw std::runtime_error("frame: non-finite rgb");
  }
}

// --- analytic labeled-primitive world ------------------------------------------

struct ScenePrimitive {
  enum class Shape { Box, Sphere };
  Shape shape = Shape::Box;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();  // box: full extents; sphere: size.x() = radius
  int class_id = 0;
  Vec3 albedo = Vec3(0.7, 0.7, 0.7);
};

/// Room box with labeled faces plus primitives, under fixed ambient +
/// lambertian lighting. Exact ground-truth generator for the pipeline.
struct SyntheticScene {
  Vec3 room_lo = Vec3(-1.5, -1.5, -1.5);
  Vec3 room_hi = Vec3(1.5, 1.5, 1.5);
  int wall_class = 0, floor_class = 1, ceiling_class = 2;
  Vec3 wall_albedo = Vec3(0.75, 0.72, 0.68);
  Vec3 floor_albedo = Vec3(0.45, 0.40, 0.35);
  Vec3 ceiling_albedo = Vec3(0.85, 0.85, 0.88);
  std::vector<ScenePrimitive> primitives;
  Vec3 light_dir = Vec3(0.35, 0.25, 0.9).normalized();
  double ambient = 0.4;

  void validate() const {
    if (!((room_hi - room_lo).array() > 0).all()) throw std::invalid_argument("scene: degenerate room");
    for (const auto& p : primitives) {
      if (!(p.size.array() > 0).all()) throw std::invalid_argument("scene: degenerate primitive");
    }
  }

  double diagonal() const { return (room_hi - room_lo).norm(); }

  /// 3 m room, one box, one sphere; five classes, 80x60 images by default.
  static SyntheticScene default_toy() {
    SyntheticScene s;
    ScenePrimitive box;
    box.shape = ScenePrimitive::Shape::Box;
    box.center = Vec3(-0.55, 0.10, -0.20);
    box.size = Vec3(0.5, 0.5, 0.5);
    box.class_id = 3;
    box.albedo = Vec3(0.80, 0.25, 0.20);
    ScenePrimitive sphere;
    sphere.shape = ScenePrimitive::Shape::Sphere;
    sphere.center = Vec3(0.55, -0.10, -0.05);
    sphere.size = Vec3(0.35, 0.35, 0.35);
    sphere.class_id = 4;
    sphere.albedo = Vec3(0.20, 0.35, 0.80);
    s.primitives = {box, sphere};
    return s;
  }
};

namespace detail {

struct Hit {
  double t = -1.0;  // z-depth ray parameter
  Vec3 normal = Vec3::Zero();
  int class_id = 0;
  Vec3 albedo = Vec3::Zero();
  bool valid() const { return t > 0.0; }
};

/// Entry intersection with an axis-aligned box from outside.
inline double box_entry(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi, int* axis, int* side) {
  double t0 = -1e30, t1 = 1e30;
  int ax = -1, sd = 0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return -1.0;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    int s = ta < tb ? -1 : +1;  // which face is entered first
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      ax = a;
      sd = s;
    }
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t1 < 0) return -1.0;
  if (t0 <= 0) return -1.0;  // origin inside: no outside entry
  *axis = ax;
  *side = sd;
  return t0;
}

/// Exit intersection with the room box, for a ray starting inside.
inline double box_exit(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi, int* axis, int* side) {
  double t1 = 1e30;
  int ax = -1, sd = 0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) continue;
    const double tb = ((d[a] > 0 ? hi[a] : lo[a]) - o[a]) / d[a];
    if (tb < t1) {
      t1 = tb;
      ax = a;
      sd = d[a] > 0 ? +1 : -1;
    }
  }
  if (ax < 0 || t1 <= 0) return -1.0;
  *axis = ax;
  *side = sd;
  return t1;
}

inline double sphere_entry(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double a = d.dot(d);
  const double b = 2.0 * oc.dot(d);
  const double cc = oc.dot(oc) - r * r;
  const double disc = b * b - 4 * a * cc;
  if (disc < 0) return -1.0;
  const double sq = std::sqrt(disc);
  const double t0 = (-b - sq) / (2 * a);
  if (t0 > 1e-12) return t0;
  return -1.0;  // inside or behind
}

}  // namespace detail

/// Exact raycast of the scene: per pixel the nearest primitive (or the room
/// shell), z-depth convention, lambertian shading.
inline Frame raycast_scene(const SyntheticScene& scene, const Pose& pose, const Intrinsics& K) {
  scene.validate();
  K.validate();
  Frame f;
  f.rgb = ImageRGB(K.width, K.height);
  f.depth = ImageDepth(K.width, K.height);
  f.semantic = ImageLabel(K.width, K.height);
  f.gt_pose = pose;
  const Mat3 R = pose.rotation_matrix();
  const Vec3 o = pose.translation;
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const Vec3 d = R * pixel_ray_dir(Vec2(x, y), K);
      detail::Hit best;
      // room shell (solid outside)
      int axis, side;
      const double t_room = detail::box_exit(o, d, scene.room_lo, scene.room_hi, &axis, &side);
      if (t_room > 0) {
        best.t = t_room;
        best.normal = Vec3::Zero();
        best.normal[axis] = -side;  // inward-facing
        if (axis == 2) {
          best.class_id = side > 0 ? scene.ceiling_class : scene.floor_class;
          best.albedo = side > 0 ? scene.ceiling_albedo : scene.floor_albedo;
        } else {
          best.class_id = scene.wall_class;
          best.albedo = scene.wall_albedo;
        }
      }
      for (const auto& prim : scene.primitives) {
        double t = -1.0;
        Vec3 n = Vec3::Zero();
        if (prim.shape == ScenePrimitive::Shape::Sphere) {
          t = detail::sphere_entry(o, d, prim.center, prim.size.x());
          if (t > 0) n = (o + t * d - prim.center).normalized();
        } else {
          int pax, psd;
          t = detail::box_entry(o, d, prim.center - 0.5 * prim.size, prim.center + 0.5 * prim.size, &pax, &psd);
          if (t > 0) {
            n.setZero();
            n[pax] = psd;
          }
        }
        if (t > 0 && (!best.valid() || t < best.t)) {
          best.t = t;
          best.normal = n;
          best.class_id = prim.class_id;
          best.albedo = prim.albedo;
        }
      }
      if (best.valid()) {
        f.depth.at(x, y) = best.t;
        f.semantic.at(x, y) = static_cast<std::uint16_t>(best.class_id);
        const double diffuse = std::max(0.0, best.normal.dot(scene.light_dir));
        const Vec3 c = best.albedo * (scene.ambient + (1.0 - scene.ambient) * diffuse);
        for (int ch = 0; ch < 3; ++ch) f.rgb.at(x, y)[ch] = std::min(1.0, std::max(0.0, c[ch]));
      }
    }
  }
  return f;
}

/// Camera pose on a circle looking at a target, x right / y down / z forward.
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 0, 1)) {
  const Vec3 fwd = (target - eye).normalized();
  Vec3 right = fwd.cross(up);
  if (right.norm() < 1e-9) right = fwd.cross(Vec3(0, 1, 0));
  right.normalize();
  const Vec3 down = fwd.cross(right);
  Mat3 R;
  R.col(0) = right;
  R.col(1) = down;
  R.col(2) = fwd;
  Pose p;
  p.rotation = Eigen::Quaterniond(R);
  p.rotation.normalize();
  p.translation = eye;
  return p;
}

/// Poses on a horizontal circle with constant angular step, looking at the
/// center. Satisfies the constant-speed motion prior exactly.
inline std::vector<Pose> orbit_trajectory(const Vec3& center, double radius, int n_frames) {
  if (n_frames < 1) throw std::invalid_argument("orbit_trajectory: need at least one frame");
  std::vector<Pose> out;
  out.reserve(n_frames);
  for (int i = 0; i < n_frames; ++i) {
    const double a = 2.0 * M_PI * i / n_frames;
    const Vec3 eye = center + radius * Vec3(std::cos(a), std::sin(a), 0.0);
    out.push_back(look_at(eye, center));
  }
  return out;
}

// --- dataset directories ---------------------------------------------------------
//
// Canonical synthetic-dump layout:
//   rgb/%06d.png       8-bit RGB
//   depth/%06d.png     16-bit, millimeters (0 = hole)
//   semantic/%06d.png  16-bit class ids
//   traj_gt.txt        TUM lines: timestamp tx ty tz qx qy qz qw
//   intrinsics.txt     fx fy cx cy width height

enum class DatasetLayout { SyntheticDump, ReplicaLike, ScanNetLike };

inline DatasetLayout parse_layout(const std::string& s) {
  if (s == "synthetic-dump") return DatasetLayout::SyntheticDump;
  if (s == "replica-like") return DatasetLayout::ReplicaLike;
  if (s == "scannet-like") return DatasetLayout::ScanNetLike;
  throw std::invalid_argument("unknown dataset layout: " + s);
}

inline double layout_depth_scale(DatasetLayout layout) {
  switch (layout) {
    case DatasetLayout::SyntheticDump:
      return 1000.0;
    case DatasetLayout::ReplicaLike:
      return 6553.5;
    case DatasetLayout::ScanNetLike:
      return 1000.0;
  }
  return 1000.0;
}

namespace detail {

inline std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return buf;
}

}  // namespace detail

/// Lossless for mm-quantized depth and label ids.
inline void write_frame_dump(const Frame& f, const std::string& dir, int index, double depth_scale = 1000.0) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "rgb");
  fs::create_directories(fs::path(dir) / "depth");
  fs::create_directories(fs::path(dir) / "semantic");
  write_png_rgb8(f.rgb, (fs::path(dir) / "rgb" / detail::frame_name(index)).string());
  std::vector<std::uint16_t> depth_raw(f.depth.v.size());
  for (std::size_t i = 0; i < depth_raw.size(); ++i) {
    const double mm = f.depth.v[i] * depth_scale;
    depth_raw[i] = static_cast<std::uint16_t>(std::min(65535.0, std::max(0.0, std::round(mm))));
  }
  write_png_gray16(depth_raw, f.depth.width, f.depth.height,
                   (fs::path(dir) / "depth" / detail::frame_name(index)).string());
  write_png_gray16(f.semantic.v, f.semantic.width, f.semantic.height,
                   (fs::path(dir) / "semantic" / detail::frame_name(index)).string());
}

inline void write_tum_trajectory(const std::vector<std::pair<double, Pose>>& traj, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  char line[256];
  for (const auto& [ts, pose] : traj) {
    std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", ts, pose.translation.x(),
                  pose.translation.y(), pose.translation.z(), pose.rotation.x(), pose.rotation.y(),
                  pose.rotation.z(), pose.rotation.w());
    os << line;
  }
}

inline std::vector<std::pair<double, Pose>> read_tum_trajectory(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<std::pair<double, Pose>> out;
  std::string line;
  long offset = 0;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line[0] != '#') {
      std::istringstream ls(line);
      double ts, tx, ty, tz, qx, qy, qz, qw;
      if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
        throw std::runtime_error(path + ": malformed TUM line " + std::to_string(line_no) + " at byte offset " +
                                 std::to_string(offset));
      Pose p;
      p.translation = Vec3(tx, ty, tz);
      p.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
      p.rotation.normalize();
      out.emplace_back(ts, p);
    }
    offset += static_cast<long>(line.size()) + 1;
  }
  return out;
}

inline void write_intrinsics(const Intrinsics& K, const std::string& path) {
  std::ofstream os(path);
  char line[160];
  std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %.9g %d %d\n", K.fx, K.fy, K.cx, K.cy, K.width, K.height);
  os << line;
}

inline Intrinsics read_intrinsics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing intrinsics: " + path);
  Intrinsics K;
  if (!(is >> K.fx >> K.fy >> K.cx >> K.cy >> K.width >> K.height))
    throw std::runtime_error(path + ": malformed intrinsics at byte offset 0");
  K.validate();
  return K;
}

struct Dataset {
  Intrinsics intrinsics;
  std::vector<Frame> frames;
  bool has_gt = false;
};

/// Loads a dataset directory. Frames come out in timestamp order; depth is
/// divided by the layout's scale; missing semantic files become all-unlabeled
/// maps. Optional id remapping is applied to semantic labels.
inline Dataset load_dataset(const std::string& root, DatasetLayout layout,
                            const std::map<std::uint16_t, std::uint16_t>& label_remap = {}) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.intrinsics = read_intrinsics((fs::path(root) / "intrinsics.txt").string());
  const double scale = layout_depth_scale(layout);

  std::vector<std::pair<double, Pose>> traj;
  const fs::path traj_path = fs::path(root) / "traj_gt.txt";
  if (fs::exists(traj_path)) {
    traj = read_tum_trajectory(traj_path.string());
    ds.has_gt = true;
  }

  std::vector<int> indices;
  const fs::path rgb_dir = fs::path(root) / "rgb";
  if (!fs::is_directory(rgb_dir)) throw std::runtime_error("missing rgb directory under " + root);
  for (const auto& e : fs::directory_iterator(rgb_dir)) {
    if (e.path().extension() == ".png") indices.push_back(std::stoi(e.path().stem().string()));
  }
  std::sort(indices.begin(), indices.end());

  for (int idx : indices) {
    Frame f;
    f.rgb = read_png_rgb8((rgb_dir / detail::frame_name(idx)).string());
    int w = 0, h = 0;
    const auto depth_raw = read_png_gray16((fs::path(root) / "depth" / detail::frame_name(idx)).string(), &w, &h);
    f.depth = ImageDepth(w, h);
    for (std::size_t i = 0; i < depth_raw.size(); ++i) f.depth.v[i] = depth_raw[i] / scale;
    const fs::path sem_path = fs::path(root) / "semantic" / detail::frame_name(idx);
    if (fs::exists(sem_path)) {
      const auto sem_raw = read_png_gray16(sem_path.string(), &w, &h);
      f.semantic = ImageLabel(w, h);
      for (std::size_t i = 0; i < sem_raw.size(); ++i) {
        auto it = label_remap.find(sem_raw[i]);
        f.semantic.v[i] = it == label_remap.end() ? sem_raw[i] : it->second;
      }
    } else {
      f.semantic = ImageLabel(f.rgb.width, f.rgb.height);  // all-unlabeled
    }
    if (static_cast<std::size_t>(idx) < traj.size()) {
      f.timestamp = traj[idx].first;
      f.gt_pose = traj[idx].second;
    } else {
      f.timestamp = static_cast<double>(idx);
    }
    validate_frame(f);
    ds.frames.push_back(std::move(f));
  }
  std::stable_sort(ds.frames.begin(), ds.frames.end(),
                   [](const Frame& a, const Frame& b) { return a.timestamp < b.timestamp; });
  return ds;
}

/// Optional seeded sensor-noise model for generated depth (off by default).
inline void add_depth_noise(Frame& f, double sigma_m, std::uint64_t seed) {
  Rng rng(seed);
  for (double& d : f.depth.v) {
    if (d > 0) d = std::max(0.0, d + sigma_m * rng.gaussian());
  }
}

}  // namespace semslam
