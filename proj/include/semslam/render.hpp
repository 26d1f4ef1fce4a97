#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <vector>

#include "semslam/field.hpp"
#include "semslam/geometry.hpp"
#include "semslam/tape.hpp"
#include "semslam/util.hpp"

namespace semslam {

/// One pixel's ray with ordered sample depths. Directions are unnormalized
/// (z component 1 in the camera frame) so a sample's depth parameter equals
/// its z-depth along the optical axis.
struct RaySamples {
  Vec3 origin = Vec3::Zero();      // world
  Vec3 dir_world = Vec3::Zero();   // R * K^-1 u
  Vec3 dir_cam = Vec3::Zero();     // K^-1 u, kept for pose-dependent rebuilds
  Eigen::VectorXd depths;          // strictly increasing
  double gt_depth = 0.0;           // 0 = hole pixel
  Vec2 pixel = Vec2::Zero();
  int class_id = 0;

  Vec3 point(int i) const { return origin + depths[i] * dir_world; }
};

struct RenderConfig {
  int surface_samples = 15;   // M_s
  int freespace_samples = 32; // M_a
  double near = 0.0;
  double far = 6.0;
  double truncation = 0.10;   // tr, meters

  void validate() const {
    if (surface_samples < 1 || freespace_samples < 1)
      throw std::invalid_argument("RenderConfig: sample counts must be positive");
    if (!(near < far)) throw std::invalid_argument("RenderConfig: near must be below far");
    if (!(truncation > 0)) throw std::invalid_argument("RenderConfig: truncation must be positive");
  }
};

/// Depth-guided sampling: when gt depth is known, M_s uniform samples inside
/// the truncation band around it plus M_a stratified free-space samples;
/// hole pixels get all samples stratified over [near, far].
inline RaySamples sample_ray(const Vec2& pixel, const Pose& pose, const Intrinsics& K, double gt_depth,
                             const RenderConfig& cfg, Rng& rng) {
  cfg.validate();
  RaySamples out;
  out.pixel = pixel;
  out.gt_depth = gt_depth;
  out.dir_cam = pixel_ray_dir(pixel, K);
  out.dir_world = pose.rotation * out.dir_cam;
  out.origin = pose.translation;

  std::vector<double> depths;
  depths.reserve(cfg.surface_samples + cfg.freespace_samples);
  const bool has_gt = gt_depth > 0.0;
  const int strat = has_gt ? cfg.freespace_samples : cfg.surface_samples + cfg.freespace_samples;
  for (int i = 0; i < strat; ++i) {
    const double lo = cfg.near + (cfg.far - cfg.near) * i / strat;
    const double hi = cfg.near + (cfg.far - cfg.near) * (i + 1) / strat;
    depths.push_back(rng.uniform(lo, hi));
  }
  if (has_gt) {
    for (int i = 0; i < cfg.surface_samples; ++i)
      depths.push_back(std::max(1e-6, rng.uniform(gt_depth - cfg.truncation, gt_depth + cfg.truncation)));
  }
  std::sort(depths.begin(), depths.end());
  out.depths = Eigen::Map<Eigen::VectorXd>(depths.data(), static_cast<Eigen::Index>(depths.size()));
  return out;
}

/// w_i = o_i * prod_{j<i}(1 - o_j), plain-value version.
inline Eigen::VectorXd termination_weights(const Eigen::VectorXd& occs) {
  Eigen::VectorXd w(occs.size());
  double trans = 1.0;
  for (int i = 0; i < occs.size(); ++i) {
    w[i] = occs[i] * trans;
    trans *= (1.0 - occs[i]);
  }
  return w;
}

inline double integrate(const Eigen::VectorXd& weights, const Eigen::VectorXd& values) {
  if (weights.size() != values.size()) throw std::invalid_argument("integrate: length mismatch");
  return weights.dot(values);
}

inline Eigen::VectorXd integrate(const Eigen::VectorXd& weights, const Eigen::MatrixXd& values) {
  if (weights.size() != values.rows()) throw std::invalid_argument("integrate: length mismatch");
  return values.transpose() * weights;
}

inline double depth_variance(const Eigen::VectorXd& weights, const Eigen::VectorXd& depths, double rendered_depth) {
  double var = 0;
  for (int i = 0; i < weights.size(); ++i)
    var += weights[i] * (rendered_depth - depths[i]) * (rendered_depth - depths[i]);
  return var;
}

enum class RenderMode { Fine, Coarse };

struct RenderedPixel {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  Eigen::VectorXd logits;
  double depth_variance = 0.0;
  Eigen::VectorXd weights;
};

/// Forward-only render used by evaluation and mesh labeling.
inline RenderedPixel render_pixel(const SceneField& field, const RaySamples& samples,
                                  const std::vector<ReferenceView>& refs, RenderMode mode) {
  const int m = static_cast<int>(samples.depths.size());
  Eigen::VectorXd occs(m);
  Eigen::MatrixXd colors(m, 3);
  Eigen::MatrixXd logits(m, field.num_classes());
  for (int i = 0; i < m; ++i) {
    const Vec3 x = samples.point(i);
    const SceneField::GeomOut g =
        mode == RenderMode::Fine ? field.eval_geometry(samples.class_id, x) : field.eval_coarse(x);
    occs[i] = g.occ;
    const PooledFeature pooled = field.gather_reference_features(x, refs);
    colors.row(i) = field.eval_color(x, g.latent, pooled).transpose();
    logits.row(i) = field.eval_semantic(x, g.latent, pooled).transpose();
  }
  RenderedPixel out;
  out.weights = termination_weights(occs);
  out.color = integrate(out.weights, colors);
  out.logits = integrate(out.weights, logits);
  out.depth = integrate(out.weights, samples.depths);
  out.depth_variance = depth_variance(out.weights, samples.depths, out.depth);
  return out;
}

/// Tape vars for one frame's pose delta: origin and a rotation var that
/// per-ray directions are rebuilt from.
struct PoseVars {
  Pose base;
  Var rot;     // 3, axis-angle part of the delta leaf
  Var origin;  // 3, exp(w)*t_base + v
};

inline PoseVars make_pose_vars(Tape& t, Tensor& delta, const Pose& base) {
  if (delta.numel() != 6) throw std::invalid_argument("make_pose_vars: delta must have 6 entries");
  Var d = leaf(t, delta);
  PoseVars pv;
  pv.base = base;
  pv.rot = slice(t, d, 0, 3);
  pv.origin = add(t, so3_rotate(t, pv.rot, base.translation), slice(t, d, 3, 3));
  return pv;
}

/// World-space sample position on the tape. With pose vars, gradients flow
/// into the pose delta through both origin and direction.
inline Var sample_point_op(Tape& t, const RaySamples& ray, int i, const PoseVars* pose) {
  if (!pose) return constant(t, ray.point(i));
  Var dir = so3_rotate(t, pose->rot, pose->base.rotation * ray.dir_cam);
  return axpy(t, pose->origin, ray.depths[i], dir);
}

struct RenderedPixelVars {
  Var color;      // 3
  Var depth;      // 1
  Var logits;     // num_classes
  Var depth_var;  // 1
  Var weights;    // M
  Var occs;       // M
  std::vector<Var> latents;         // per-sample h (fine or coarse per mode)
  std::vector<Var> coarse_latents;  // filled when with_coarse_latents
};

/// Differentiable render of one pixel. In fine mode the pixel's class head
/// is used (the class must exist); coarse mode goes through the single
/// coarse head. Optionally also evaluates coarse latents at the same
/// samples for the latent self-supervision term.
inline RenderedPixelVars render_pixel_op(Tape& t, const SceneField& field, const RaySamples& samples,
                                         const std::vector<ReferenceView>& refs, RenderMode mode,
                                         const PoseVars* pose = nullptr, bool with_coarse_latents = false) {
  const int m = static_cast<int>(samples.depths.size());
  const int gamma_dim = field.config().oneblob_dim();
  std::vector<Var> occs, colors, logits;
  RenderedPixelVars out;
  occs.reserve(m);
  colors.reserve(m);
  logits.reserve(m);
  for (int i = 0; i < m; ++i) {
    Var x = sample_point_op(t, samples, i, pose);
    Var input = field.field_input_op(t, x);
    Var gamma_x = slice(t, input, 0, gamma_dim);
    const SceneField::GeomVars g = mode == RenderMode::Fine ? field.eval_geometry_op(t, samples.class_id, input)
                                                            : field.eval_coarse_op(t, input);
    occs.push_back(g.occ);
    out.latents.push_back(g.latent);
    if (with_coarse_latents) out.coarse_latents.push_back(field.eval_coarse_op(t, input).latent);
    Var pooled = field.gather_reference_features_op(t, x, refs);
    if (!pooled.valid()) pooled = field.zero_pooled_op(t);
    colors.push_back(field.eval_color_op(t, gamma_x, g.latent, pooled));
    logits.push_back(field.eval_semantic_op(t, gamma_x, g.latent, pooled));
  }
  out.occs = concat(t, occs);
  out.weights = termination_weights_op(t, out.occs);
  out.color = weighted_sum_vars(t, out.weights, colors);
  out.logits = weighted_sum_vars(t, out.weights, logits);
  out.depth = weighted_sum_const(t, out.weights, samples.depths);
  out.depth_var = depth_variance_op(t, out.weights, samples.depths, out.depth);
  return out;
}

}  // namespace semslam
