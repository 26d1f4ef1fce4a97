#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <thread>
#include <unordered_map>
#include <vector>

#include "semslam/data.hpp"
#include "semslam/field.hpp"
#include "semslam/geometry.hpp"
#include "semslam/render.hpp"

namespace semslam {

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Pose> poses;

  std::size_t size() const { return poses.size(); }

  void push(double ts, const Pose& p) {
    if (!timestamps.empty() && ts <= timestamps.back())
      throw std::invalid_argument("Trajectory: timestamps must be strictly increasing");
    timestamps.push_back(ts);
    poses.push_back(p);
  }
};

// --- trajectory alignment -------------------------------------------------------

/// Least-squares rigid transform (no scale) minimizing sum ||gt_i - T est_i||^2,
/// via the standard SVD construction.
inline Pose umeyama_align(const Trajectory& est, const Trajectory& gt) {
  if (est.size() != gt.size() || est.size() < 3)
    throw std::invalid_argument("umeyama_align: need equal-length trajectories with >= 3 poses");
  const int n = static_cast<int>(est.size());
  Vec3 mean_e = Vec3::Zero(), mean_g = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    mean_e += est.poses[i].translation;
    mean_g += gt.poses[i].translation;
  }
  mean_e /= n;
  mean_g /= n;
  Mat3 H = Mat3::Zero();
  for (int i = 0; i < n; ++i)
    H += (est.poses[i].translation - mean_e) * (gt.poses[i].translation - mean_g).transpose();
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (s[1] < 1e-12 * std::max(s[0], 1e-300))
    throw std::runtime_error("umeyama_align: rank-deficient (collinear) point sets");
  Mat3 D = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) D(2, 2) = -1;
  const Mat3 R = svd.matrixV() * D * svd.matrixU().transpose();
  Pose T;
  T.rotation = Eigen::Quaterniond(R);
  T.rotation.normalize();
  T.translation = mean_g - R * mean_e;
  return T;
}

/// RMS translational error after rigid alignment, in centimeters.
inline double ate_rmse(const Trajectory& est, const Trajectory& gt) {
  const Pose T = umeyama_align(est, gt);
  double acc = 0;
  for (std::size_t i = 0; i < est.size(); ++i)
    acc += (gt.poses[i].translation - T.apply(est.poses[i].translation)).squaredNorm();
  return std::sqrt(acc / est.size()) * 100.0;
}

// --- meshes ------------------------------------------------------------------------

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<std::uint16_t> classes;  // per vertex
  std::vector<Vec3> colors;            // per vertex, [0,1]

  bool empty() const { return triangles.empty(); }
};

/// Drops zero-area triangles and unreferenced vertices.
inline void cleanup_mesh(TriangleMesh& mesh) {
  std::vector<std::array<int, 3>> kept;
  for (const auto& tri : mesh.triangles) {
    const Vec3 a = mesh.vertices[tri[0]], b = mesh.vertices[tri[1]], c = mesh.vertices[tri[2]];
    if ((b - a).cross(c - a).norm() > 1e-18) kept.push_back(tri);
  }
  mesh.triangles = std::move(kept);
  std::vector<int> remap(mesh.vertices.size(), -1);
  TriangleMesh out;
  for (auto& tri : mesh.triangles) {
    for (int& v : tri) {
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(out.vertices.size());
        out.vertices.push_back(mesh.vertices[v]);
        if (!mesh.classes.empty()) out.classes.push_back(mesh.classes[v]);
        if (!mesh.colors.empty()) out.colors.push_back(mesh.colors[v]);
      }
      v = remap[v];
    }
    out.triangles.push_back(tri);
  }
  mesh.vertices = std::move(out.vertices);
  mesh.classes = std::move(out.classes);
  mesh.colors = std::move(out.colors);
}

namespace detail {

/// Isosurface of a sampled scalar field by splitting each grid cell into six
/// tetrahedra around the main diagonal. Table-free and hole-free; vertices
/// on shared edges are welded.
class IsosurfaceBuilder {
 public:
  IsosurfaceBuilder(const Vec3& lo, const Vec3& hi, int res, double iso)
      : lo_(lo), step_((hi - lo) / res), res_(res), iso_(iso) {}

  /// values: (res+1)^3 samples, index ((z*(res+1))+y)*(res+1)+x.
  TriangleMesh build(const std::vector<double>& values) {
    static constexpr int kTets[6][4] = {{0, 5, 1, 6}, {0, 1, 2, 6}, {0, 2, 3, 6},
                                        {0, 3, 7, 6}, {0, 7, 4, 6}, {0, 4, 5, 6}};
    // cube corners: bit order (x, y, z)
    static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                          {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
    TriangleMesh mesh;
    const int n1 = res_ + 1;
    auto value_at = [&](int x, int y, int z) { return values[(static_cast<std::size_t>(z) * n1 + y) * n1 + x]; };
    for (int z = 0; z < res_; ++z) {
      for (int y = 0; y < res_; ++y) {
        for (int x = 0; x < res_; ++x) {
          double v[8];
          long id[8];
          for (int c = 0; c < 8; ++c) {
            const int cx = x + kCorner[c][0], cy = y + kCorner[c][1], cz = z + kCorner[c][2];
            v[c] = value_at(cx, cy, cz);
            id[c] = (static_cast<long>(cz) * n1 + cy) * n1 + cx;
          }
          for (const auto& tet : kTets) {
            int mask = 0;
            for (int i = 0; i < 4; ++i)
              if (v[tet[i]] > iso_) mask |= 1 << i;
            if (mask == 0 || mask == 15) continue;
            emit_tet(mesh, tet, v, id, mask);
          }
        }
      }
    }
    cleanup_mesh(mesh);
    return mesh;
  }

 private:
  Vec3 lo_, step_;
  int res_;
  double iso_;
  std::unordered_map<std::uint64_t, int> edge_vertex_;

  Vec3 lattice_point(long id) const {
    const int n1 = res_ + 1;
    const int x = static_cast<int>(id % n1), y = static_cast<int>((id / n1) % n1), z = static_cast<int>(id / (n1 * n1));
    return lo_ + Vec3(x * step_.x(), y * step_.y(), z * step_.z());
  }

  int edge_vertex(TriangleMesh& mesh, long ia, long ib, double va, double vb) {
    if (ia > ib) {
      std::swap(ia, ib);
      std::swap(va, vb);
    }
    const std::uint64_t key = (static_cast<std::uint64_t>(ia) << 32) | static_cast<std::uint64_t>(ib);
    auto it = edge_vertex_.find(key);
    if (it != edge_vertex_.end()) return it->second;
    const double t = (iso_ - va) / (vb - va);
    const Vec3 p = lattice_point(ia) + t * (lattice_point(ib) - lattice_point(ia));
    const int idx = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(p);
    edge_vertex_.emplace(key, idx);
    return idx;
  }

  void emit_tet(TriangleMesh& mesh, const int tet[4], const double v[8], const long id[8], int mask) {
    int in[4], out[4], ni = 0, no = 0;
    for (int i = 0; i < 4; ++i) {
      if (mask & (1 << i))
        in[ni++] = tet[i];
      else
        out[no++] = tet[i];
    }
    auto ev = [&](int a, int b) { return edge_vertex(mesh, id[a], id[b], v[a], v[b]); };
    if (ni == 1) {
      mesh.triangles.push_back({ev(in[0], out[0]), ev(in[0], out[1]), ev(in[0], out[2])});
    } else if (ni == 3) {
      mesh.triangles.push_back({ev(in[0], out[0]), ev(in[1], out[0]), ev(in[2], out[0])});
    } else {  // two in, two out: quad split into two triangles
      const int a = ev(in[0], out[0]), b = ev(in[0], out[1]), c = ev(in[1], out[1]), d = ev(in[1], out[0]);
      mesh.triangles.push_back({a, b, c});
      mesh.triangles.push_back({a, c, d});
    }
  }
};

inline std::vector<double> sample_density_grid(const std::function<double(const Vec3&)>& density, const Vec3& lo,
                                               const Vec3& hi, int res, int threads) {
  const int n1 = res + 1;
  std::vector<double> values(static_cast<std::size_t>(n1) * n1 * n1);
  const Vec3 step = (hi - lo) / res;
  auto slab = [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < n1; ++y)
        for (int x = 0; x < n1; ++x)
          values[(static_cast<std::size_t>(z) * n1 + y) * n1 + x] =
              density(lo + Vec3(x * step.x(), y * step.y(), z * step.z()));
  };
  threads = std::max(1, threads);
  if (threads == 1) {
    slab(0, n1);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n1 + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int z0 = t * chunk, z1 = std::min(n1, z0 + chunk);
      if (z0 < z1) pool.emplace_back(slab, z0, z1);
    }
    for (auto& th : pool) th.join();
  }
  return values;
}

}  // namespace detail

/// Isosurface of an arbitrary density on a regular grid over [lo,hi].
inline TriangleMesh extract_isosurface(const std::function<double(const Vec3&)>& density, const Vec3& lo,
                                       const Vec3& hi, int res, double iso = 0.5, int threads = 1) {
  detail::IsosurfaceBuilder builder(lo, hi, res, iso);
  return builder.build(detail::sample_density_grid(density, lo, hi, res, threads));
}

enum class MeshMode { Merged, PerClass };

/// Extracts scene geometry from the trained field at iso-level 0.5.
/// Per-class mode runs one extraction per geometry head; merged mode uses the
/// per-point max occupancy and labels vertices by the semantic argmax.
inline std::map<int, TriangleMesh> extract_mesh(const SceneField& field, int res, MeshMode mode, int threads = 1) {
  const SceneBounds& b = field.config().bounds;
  std::map<int, TriangleMesh> out;
  const PooledFeature no_pool{Eigen::VectorXd::Zero(field.config().pooled_dim), 0};

  auto decorate = [&](TriangleMesh& mesh, std::optional<int> fixed_class) {
    mesh.classes.resize(mesh.vertices.size());
    mesh.colors.resize(mesh.vertices.size());
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      const Vec3& x = mesh.vertices[i];
      int cls;
      Eigen::VectorXd latent;
      if (fixed_class) {
        cls = *fixed_class;
        latent = field.eval_geometry(cls, x).latent;
      } else {
        double best = -1;
        cls = field.class_ids().front();
        for (int k : field.class_ids()) {
          const auto g = field.eval_geometry(k, x);
          if (g.occ > best) {
            best = g.occ;
            cls = k;
            latent = g.latent;
          }
        }
        const Eigen::VectorXd logits = field.eval_semantic(x, latent, no_pool);
        int arg = 0;
        logits.maxCoeff(&arg);
        cls = field.class_at_logit(arg);
      }
      mesh.classes[i] = static_cast<std::uint16_t>(cls);
      mesh.colors[i] = field.eval_color(x, latent, no_pool);
    }
  };

  if (mode == MeshMode::PerClass) {
    for (int k : field.class_ids()) {
      auto density = [&field, k](const Vec3& x) { return field.eval_geometry(k, x).occ; };
      TriangleMesh mesh = extract_isosurface(density, b.lo, b.hi, res, 0.5, threads);
      decorate(mesh, k);
      out.emplace(k, std::move(mesh));
    }
  } else {
    auto density = [&field](const Vec3& x) {
      double best = 0;
      for (int k : field.class_ids()) best = std::max(best, field.eval_geometry(k, x).occ);
      return best;
    };
    TriangleMesh mesh = extract_isosurface(density, b.lo, b.hi, res, 0.5, threads);
    decorate(mesh, std::nullopt);
    out.emplace(-1, std::move(mesh));
  }
  return out;
}

/// Removes vertices observed by no frustum in the trajectory (and the
/// triangles touching them).
inline void cull_unobserved(TriangleMesh& mesh, const std::vector<Pose>& poses, const Intrinsics& K,
                            double far_clip) {
  std::vector<bool> seen(mesh.vertices.size(), false);
  for (const Pose& pose : poses) {
    const Pose inv = pose.inverse();
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      if (seen[i]) continue;
      const Vec3 p = inv.apply(mesh.vertices[i]);
      if (p.z() <= 0 || p.z() > far_clip) continue;
      const Vec2 uv = project(p, K);
      if (uv.x() >= 0 && uv.y() >= 0 && uv.x() <= K.width - 1 && uv.y() <= K.height - 1) seen[i] = true;
    }
  }
  std::vector<std::array<int, 3>> kept;
  for (const auto& tri : mesh.triangles) {
    if (seen[tri[0]] && seen[tri[1]] && seen[tri[2]]) kept.push_back(tri);
  }
  mesh.triangles = std::move(kept);
  cleanup_mesh(mesh);
}

namespace detail {

/// Uniform area-weighted surface samples.
inline std::vector<Vec3> sample_surface(const TriangleMesh& mesh, int n, Rng& rng) {
  std::vector<double> cum;
  cum.reserve(mesh.triangles.size());
  double total = 0;
  for (const auto& tri : mesh.triangles) {
    const Vec3 a = mesh.vertices[tri[0]], b = mesh.vertices[tri[1]], c = mesh.vertices[tri[2]];
    total += 0.5 * (b - a).cross(c - a).norm();
    cum.push_back(total);
  }
  std::vector<Vec3> out;
  out.reserve(n);
  if (total <= 0) return out;
  for (int i = 0; i < n; ++i) {
    const double r = rng.uniform() * total;
    const std::size_t idx = std::lower_bound(cum.begin(), cum.end(), r) - cum.begin();
    const auto& tri = mesh.triangles[std::min(idx, mesh.triangles.size() - 1)];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1) {
      u = 1 - u;
      v = 1 - v;
    }
    out.push_back(mesh.vertices[tri[0]] + u * (mesh.vertices[tri[1]] - mesh.vertices[tri[0]]) +
                  v * (mesh.vertices[tri[2]] - mesh.vertices[tri[0]]));
  }
  return out;
}

/// Hash-grid accelerated nearest neighbor over a point set.
class PointGrid {
 public:
  explicit PointGrid(const std::vector<Vec3>& pts) : pts_(pts) {
    lo_ = Vec3::Constant(1e30);
    Vec3 hi = Vec3::Constant(-1e30);
    for (const auto& p : pts) {
      lo_ = lo_.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const double diag = (hi - lo_).norm();
    cell_ = std::max(1e-6, diag / 64.0);
    for (int i = 0; i < static_cast<int>(pts.size()); ++i) cells_[key(pts[i])].push_back(i);
  }

  double nearest_distance(const Vec3& q) const {
    const Eigen::Vector3i c = coords(q);
    double best = 1e30;
    // expand Chebyshev rings; a cell at ring r+1 holds no point closer than
    // r*cell, so stop once best can no longer be beaten
    for (int ring = 0; ring <= 96; ++ring) {
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            auto it = cells_.find(pack(c.x() + dx, c.y() + dy, c.z() + dz));
            if (it == cells_.end()) continue;
            for (int i : it->second) best = std::min(best, (pts_[i] - q).norm());
          }
      if (best <= ring * cell_) return best;
    }
    if (best < 1e29) return best;
    for (const auto& p : pts_) best = std::min(best, (p - q).norm());  // far-away query fallback
    return best;
  }

 private:
  std::vector<Vec3> pts_;
  Vec3 lo_;
  double cell_ = 1.0;
  std::unordered_map<std::uint64_t, std::vector<int>> cells_;

  Eigen::Vector3i coords(const Vec3& p) const {
    return Eigen::Vector3i(static_cast<int>(std::floor((p.x() - lo_.x()) / cell_)),
                           static_cast<int>(std::floor((p.y() - lo_.y()) / cell_)),
                           static_cast<int>(std::floor((p.z() - lo_.z()) / cell_)));
  }
  static std::uint64_t pack(int x, int y, int z) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(x + 0x10000)) << 42) ^
           (static_cast<std::uint64_t>(static_cast<std::uint32_t>(y + 0x10000)) << 21) ^
           static_cast<std::uint64_t>(static_cast<std::uint32_t>(z + 0x10000));
  }
  std::uint64_t key(const Vec3& p) const {
    const auto c = coords(p);
    return pack(c.x(), c.y(), c.z());
  }
};

}  // namespace detail

struct MeshMetrics {
  double accuracy_cm = 0;
  double completion_cm = 0;
  double completion_ratio_pct = 0;
};

/// Accuracy: mean nearest distance pred->gt. Completion: gt->pred.
/// Ratio: % of gt samples within threshold.
inline MeshMetrics mesh_accuracy_completion(const TriangleMesh& pred, const TriangleMesh& gt, int n_samples,
                                            double threshold_cm, std::uint64_t seed = 7) {
  Rng rng(mix_seed(seed, 0xaccu));
  const std::vector<Vec3> pred_pts = detail::sample_surface(pred, n_samples, rng);
  const std::vector<Vec3> gt_pts = detail::sample_surface(gt, n_samples, rng);
  if (pred_pts.empty() || gt_pts.empty()) throw std::runtime_error("mesh metrics: empty surface");
  detail::PointGrid pred_grid(pred_pts), gt_grid(gt_pts);
  MeshMetrics m;
  for (const auto& p : pred_pts) m.accuracy_cm += gt_grid.nearest_distance(p);
  m.accuracy_cm = m.accuracy_cm / pred_pts.size() * 100.0;
  int within = 0;
  for (const auto& g : gt_pts) {
    const double d = pred_grid.nearest_distance(g) * 100.0;
    m.completion_cm += d;
    if (d <= threshold_cm) ++within;
  }
  m.completion_cm /= gt_pts.size();
  m.completion_ratio_pct = 100.0 * within / gt_pts.size();
  return m;
}

// --- pixel metrics -------------------------------------------------------------

/// Depth-only render of a single ray (fine mode when the class is known).
inline double render_depth_only(const SceneField& field, const RaySamples& ray, bool fine) {
  const int m = static_cast<int>(ray.depths.size());
  Eigen::VectorXd occs(m);
  for (int i = 0; i < m; ++i) {
    const Vec3 x = ray.point(i);
    occs[i] = fine ? field.eval_geometry(ray.class_id, x).occ : field.eval_coarse(x).occ;
  }
  return integrate(termination_weights(occs), ray.depths);
}

/// Mean |rendered - gt| in cm over valid pixels of every stride-th frame,
/// rendered at the supplied poses with the training-time sampling scheme.
inline double depth_l1(const SceneField& field, const std::vector<Frame>& frames, const std::vector<Pose>& poses,
                       const Intrinsics& K, int stride, const RenderConfig& rcfg, std::uint64_t seed = 11,
                       int threads = 1) {
  if (frames.size() != poses.size()) throw std::invalid_argument("depth_l1: frames/poses mismatch");
  std::vector<std::size_t> eval_frames;
  for (std::size_t fi = 0; fi < frames.size(); fi += std::max(1, stride)) eval_frames.push_back(fi);
  std::vector<double> sums(eval_frames.size(), 0.0);
  std::vector<long> counts(eval_frames.size(), 0);

  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t e = lo; e < hi; ++e) {
      const std::size_t fi = eval_frames[e];
      const Frame& f = frames[fi];
      for (int y = 0; y < f.depth.height; ++y) {
        for (int x = 0; x < f.depth.width; ++x) {
          const double gt = f.depth.at(x, y);
          if (!(gt > 0)) continue;
          Rng rng(mix_seed(seed, fi, static_cast<std::uint64_t>(y) * f.depth.width + x));
          RaySamples ray = sample_ray(Vec2(x, y), poses[fi], K, gt, rcfg, rng);
          ray.class_id = f.semantic.at(x, y);
          const bool fine = field.has_class(ray.class_id);
          sums[e] += std::abs(render_depth_only(field, ray, fine) - gt);
          ++counts[e];
        }
      }
    }
  };
  threads = std::max(1, threads);
  if (threads == 1) {
    work(0, eval_frames.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (eval_frames.size() + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const std::size_t lo = t * chunk, hi = std::min(eval_frames.size(), lo + chunk);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  double acc = 0;
  long count = 0;
  for (std::size_t e = 0; e < eval_frames.size(); ++e) {
    acc += sums[e];
    count += counts[e];
  }
  if (count == 0) return 0.0;
  return acc / count * 100.0;
}

/// Rendered per-pixel semantic argmax for one frame (full render with
/// feature pooling from the supplied references).
inline ImageLabel render_label_image(const SceneField& field, const Frame& frame, const Pose& pose,
                                     const Intrinsics& K, const std::vector<ReferenceView>& refs,
                                     const RenderConfig& rcfg, std::uint64_t seed, int threads = 1) {
  ImageLabel out(K.width, K.height);
  auto work = [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < K.width; ++x) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(y) * K.width + x));
        RaySamples ray = sample_ray(Vec2(x, y), pose, K, frame.depth.at(x, y), rcfg, rng);
        ray.class_id = frame.semantic.at(x, y);
        const RenderedPixel px =
            render_pixel(field, ray, refs, field.has_class(ray.class_id) ? RenderMode::Fine : RenderMode::Coarse);
        int arg = 0;
        px.logits.maxCoeff(&arg);
        out.at(x, y) = static_cast<std::uint16_t>(field.class_at_logit(arg));
      }
    }
  };
  threads = std::max(1, threads);
  if (threads == 1) {
    work(0, K.height);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (K.height + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int y0 = t * chunk, y1 = std::min(K.height, y0 + chunk);
      if (y0 < y1) pool.emplace_back(work, y0, y1);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

/// Mean over classes present in gt of per-class IoU, in percent.
inline double miou(const std::vector<const ImageLabel*>& pred, const std::vector<const ImageLabel*>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("miou: length mismatch");
  std::map<int, long> inter, pred_count, gt_count;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i]->width != gt[i]->width || pred[i]->height != gt[i]->height)
      throw std::invalid_argument("miou: image size mismatch");
    for (std::size_t j = 0; j < pred[i]->v.size(); ++j) {
      const int p = pred[i]->v[j], g = gt[i]->v[j];
      ++pred_count[p];
      ++gt_count[g];
      if (p == g) ++inter[p];
    }
  }
  double sum = 0;
  int classes = 0;
  for (const auto& [cls, gc] : gt_count) {
    const long is = inter.count(cls) ? inter[cls] : 0;
    const long un = gc + (pred_count.count(cls) ? pred_count[cls] : 0) - is;
    sum += static_cast<double>(is) / static_cast<double>(un);
    ++classes;
  }
  return classes == 0 ? 0.0 : 100.0 * sum / classes;
}

// --- PLY ------------------------------------------------------------------------
//
// Binary little-endian PLY. Vertices carry double x/y/z, uchar red/green/blue,
// and a ushort class_id (documented in a header comment).

inline void export_ply(const TriangleMesh& mesh, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << "ply\nformat binary_little_endian 1.0\n";
  os << "comment extra vertex property class_id holds the semantic class\n";
  os << "element vertex " << mesh.vertices.size() << "\n";
  os << "property double x\nproperty double y\nproperty double z\n";
  os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "property ushort class_id\n";
  os << "element face " << mesh.triangles.size() << "\n";
  os << "property list uchar int vertex_indices\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    double xyz[3] = {mesh.vertices[i].x(), mesh.vertices[i].y(), mesh.vertices[i].z()};
    os.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    unsigned char rgb[3] = {0, 0, 0};
    if (i < mesh.colors.size()) {
      for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<unsigned char>(std::min(1.0, std::max(0.0, mesh.colors[i][c])) * 255.0 + 0.5);
    }
    os.write(reinterpret_cast<const char*>(rgb), 3);
    const std::uint16_t cls = i < mesh.classes.size() ? mesh.classes[i] : 0;
    os.write(reinterpret_cast<const char*>(&cls), 2);
  }
  for (const auto& tri : mesh.triangles) {
    const unsigned char n = 3;
    os.write(reinterpret_cast<const char*>(&n), 1);
    const std::int32_t idx[3] = {tri[0], tri[1], tri[2]};
    os.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline TriangleMesh read_ply(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::string line;
  long n_vertices = -1, n_faces = -1;
  bool header_ok = false;
  while (std::getline(is, line)) {
    if (line.rfind("element vertex", 0) == 0) n_vertices = std::stol(line.substr(15));
    if (line.rfind("element face", 0) == 0) n_faces = std::stol(line.substr(13));
    if (line == "end_header") {
      header_ok = true;
      break;
    }
  }
  if (!header_ok || n_vertices < 0 || n_faces < 0) throw std::runtime_error("malformed PLY header: " + path);
  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  mesh.colors.resize(n_vertices);
  mesh.classes.resize(n_vertices);
  for (long i = 0; i < n_vertices; ++i) {
    double xyz[3];
    unsigned char rgb[3];
    std::uint16_t cls;
    is.read(reinterpret_cast<char*>(xyz), sizeof(xyz));
    is.read(reinterpret_cast<char*>(rgb), 3);
    is.read(reinterpret_cast<char*>(&cls), 2);
    mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
    mesh.colors[i] = Vec3(rgb[0], rgb[1], rgb[2]) / 255.0;
    mesh.classes[i] = cls;
  }
  mesh.triangles.resize(n_faces);
  for (long i = 0; i < n_faces; ++i) {
    unsigned char n;
    is.read(reinterpret_cast<char*>(&n), 1);
    if (n != 3) throw std::runtime_error("PLY: non-triangle face in " + path);
    std::int32_t idx[3];
    is.read(reinterpret_cast<char*>(idx), sizeof(idx));
    mesh.triangles[i] = {idx[0], idx[1], idx[2]};
  }
  if (!is) throw std::runtime_error("truncated PLY: " + path);
  return mesh;
}

/// Solid-region indicator of the analytic scene (room shell + primitives);
/// the oracle density for ground-truth meshes.
inline double scene_occupancy(const SyntheticScene& scene, const Vec3& x) {
  if ((x.array() < scene.room_lo.array()).any() || (x.array() > scene.room_hi.array()).any()) return 1.0;
  for (const auto& p : scene.primitives) {
    if (p.shape == ScenePrimitive::Shape::Sphere) {
      if ((x - p.center).norm() <= p.size.x()) return 1.0;
    } else {
      if (((x - p.center).cwiseAbs().array() <= (0.5 * p.size).array()).all()) return 1.0;
    }
  }
  return 0.0;
}

/// Class id of a solid point (nearest room face for shell points).
inline int scene_class_at(const SyntheticScene& scene, const Vec3& x) {
  for (const auto& p : scene.primitives) {
    if (p.shape == ScenePrimitive::Shape::Sphere) {
      if ((x - p.center).norm() <= p.size.x()) return p.class_id;
    } else {
      if (((x - p.center).cwiseAbs().array() <= (0.5 * p.size).array()).all()) return p.class_id;
    }
  }
  // room shell: pick the nearest face
  double best = 1e30;
  int cls = scene.wall_class;
  for (int a = 0; a < 3; ++a) {
    const double dlo = std::abs(x[a] - scene.room_lo[a]);
    const double dhi = std::abs(x[a] - scene.room_hi[a]);
    if (dlo < best) {
      best = dlo;
      cls = a == 2 ? scene.floor_class : scene.wall_class;
    }
    if (dhi < best) {
      best = dhi;
      cls = a == 2 ? scene.ceiling_class : scene.wall_class;
    }
  }
  return cls;
}

/// Ground-truth mesh of one class (or all classes with class_id = -1).
inline TriangleMesh scene_gt_mesh(const SyntheticScene& scene, int class_id, int res, int threads = 1) {
  const Vec3 margin = 0.05 * (scene.room_hi - scene.room_lo);
  auto density = [&](const Vec3& x) {
    if (scene_occupancy(scene, x) < 0.5) return 0.0;
    return (class_id < 0 || scene_class_at(scene, x) == class_id) ? 1.0 : 0.0;
  };
  return extract_isosurface(density, scene.room_lo - margin, scene.room_hi + margin, res, 0.5, threads);
}

}  // namespace semslam
