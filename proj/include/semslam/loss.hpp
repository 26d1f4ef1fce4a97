#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <vector>

#include "semslam/tape.hpp"

namespace semslam {

struct LossWeights {
  double lambda_p = 3.0;
  double lambda_s = 0.1;
  double lambda_l = 10.0;
  double lambda_o = 10.0;
  double lambda_fs = 5.0;
  double truncation = 0.10;        // tr, meters
  double gaussian_sigma = 0.10 / 3.0;

  void validate() const {
    if (lambda_p < 0 || lambda_s < 0 || lambda_l < 0 || lambda_o < 0 || lambda_fs < 0)
      throw std::invalid_argument("LossWeights: weights must be non-negative");
    if (!(truncation > 0)) throw std::invalid_argument("LossWeights: truncation must be positive");
    if (!(gaussian_sigma > 0)) throw std::invalid_argument("LossWeights: gaussian_sigma must be positive");
  }
};

inline std::atomic<long>& empty_loss_batches() {
  static std::atomic<long> count{0};
  return count;
}

/// Peak-normalized Gaussian occupancy target, 1 at the observed distance.
inline double occupancy_target(double sample_depth, double gt_depth, double sigma) {
  const double r = sample_depth - gt_depth;
  return std::exp(-r * r / (2.0 * sigma * sigma));
}

namespace detail {
inline Var empty_batch(Tape& t) {
  empty_loss_batches().fetch_add(1, std::memory_order_relaxed);
  return constant(t, 0.0);
}
}  // namespace detail

/// Mean |d - d_hat| over valid pixels.
inline Var geometry_loss_op(Tape& t, const std::vector<Var>& rendered_depths, const std::vector<double>& gt) {
  if (rendered_depths.size() != gt.size()) throw std::invalid_argument("geometry_loss: length mismatch");
  if (rendered_depths.empty()) return detail::empty_batch(t);
  std::vector<Var> terms;
  terms.reserve(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) terms.push_back(abs_op(t, add_const(t, rendered_depths[i], -gt[i])));
  return collect_mean(t, terms);
}

/// Mean per-pixel squared color norm.
inline Var photometric_loss_op(Tape& t, const std::vector<Var>& rendered_rgb, const std::vector<Vec3>& gt) {
  if (rendered_rgb.size() != gt.size()) throw std::invalid_argument("photometric_loss: length mismatch");
  if (rendered_rgb.empty()) return detail::empty_batch(t);
  std::vector<Var> terms;
  terms.reserve(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i)
    terms.push_back(sum(t, square(t, add_const(t, rendered_rgb[i], -gt[i]))));
  return collect_mean(t, terms);
}

/// Mean cross entropy of integrated logits (softmax applied after
/// integration). gt entries are logit indices, translated by the caller.
inline Var semantic_loss_op(Tape& t, const std::vector<Var>& rendered_logits, const std::vector<int>& gt_index) {
  if (rendered_logits.size() != gt_index.size()) throw std::invalid_argument("semantic_loss: length mismatch");
  if (rendered_logits.empty()) return detail::empty_batch(t);
  std::vector<Var> terms;
  terms.reserve(gt_index.size());
  for (std::size_t i = 0; i < gt_index.size(); ++i) terms.push_back(cross_entropy(t, rendered_logits[i], gt_index[i]));
  return collect_mean(t, terms);
}

/// Mean ||h - h_c|| over samples. Fine latents are the pseudo ground truth:
/// they are detached, so no gradient reaches the class heads.
inline Var latent_loss_op(Tape& t, const std::vector<Var>& fine, const std::vector<Var>& coarse) {
  if (fine.size() != coarse.size()) throw std::invalid_argument("latent_loss: length mismatch");
  if (fine.empty()) return detail::empty_batch(t);
  std::vector<Var> terms;
  terms.reserve(fine.size());
  for (std::size_t i = 0; i < fine.size(); ++i) terms.push_back(l2norm(t, sub(t, detach(t, fine[i]), coarse[i])));
  return collect_mean(t, terms);
}

/// One valid-depth ray's occupancy supervision: occs is the per-sample
/// occupancy vector node, depths the matching sample depths.
struct RayOccInput {
  Var occs;
  const Eigen::VectorXd* depths;
  double gt_depth;
};

namespace detail {

/// Fused per-ray node: value = [sum_sq in-band residuals, sum_sq free occ].
/// Samples behind the surface beyond tr contribute to neither.
struct RayOccSums {
  Var node;
  int occ_count = 0;
  int fs_count = 0;
};

inline RayOccSums ray_occupancy_sums(Tape& t, const RayOccInput& ray, double tr, double sigma) {
  const Eigen::VectorXd& o = t.val(ray.occs);
  const Eigen::VectorXd& d = *ray.depths;
  RayOccSums out;
  Eigen::Vector2d sums = Eigen::Vector2d::Zero();
  for (int i = 0; i < d.size(); ++i) {
    if (std::abs(d[i] - ray.gt_depth) <= tr) {
      const double r = o[i] - occupancy_target(d[i], ray.gt_depth, sigma);
      sums[0] += r * r;
      ++out.occ_count;
    } else if (d[i] < ray.gt_depth - tr) {
      sums[1] += o[i] * o[i];
      ++out.fs_count;
    }
  }
  const Var occs = ray.occs;
  const Eigen::VectorXd* depths = ray.depths;
  const double gt = ray.gt_depth;
  Var node{static_cast<int>(t.size())};
  out.node = t.push(sums, [occs, depths, gt, tr, sigma, node](Tape& tp) {
    const auto& g = tp.grad(node);
    const auto& ov = tp.val(occs);
    auto& go = tp.grad(occs);
    for (int i = 0; i < depths->size(); ++i) {
      const double di = (*depths)[i];
      if (std::abs(di - gt) <= tr) {
        go[i] += g[0] * 2.0 * (ov[i] - occupancy_target(di, gt, sigma));
      } else if (di < gt - tr) {
        go[i] += g[1] * 2.0 * ov[i];
      }
    }
  });
  return out;
}

}  // namespace detail

/// Mean squared (target - predicted) over in-truncation samples of
/// valid-depth rays.
inline Var occupancy_loss_op(Tape& t, const std::vector<RayOccInput>& rays, const LossWeights& w) {
  Var total = constant(t, 0.0);
  int count = 0;
  for (const auto& ray : rays) {
    auto sums = detail::ray_occupancy_sums(t, ray, w.truncation, w.gaussian_sigma);
    if (sums.occ_count > 0) {
      total = add(t, total, slice(t, sums.node, 0, 1));
      count += sums.occ_count;
    }
  }
  if (count == 0) return detail::empty_batch(t);
  return scale(t, total, 1.0 / count);
}

/// Mean squared predicted occupancy over free-space samples in front of
/// the surface.
inline Var freespace_loss_op(Tape& t, const std::vector<RayOccInput>& rays, const LossWeights& w) {
  Var total = constant(t, 0.0);
  int count = 0;
  for (const auto& ray : rays) {
    auto sums = detail::ray_occupancy_sums(t, ray, w.truncation, w.gaussian_sigma);
    if (sums.fs_count > 0) {
      total = add(t, total, slice(t, sums.node, 1, 1));
      count += sums.fs_count;
    }
  }
  if (count == 0) return detail::empty_batch(t);
  return scale(t, total, 1.0 / count);
}

/// Mean |d - d_hat| / sqrt(var + eps) over valid pixels.
inline Var tracking_geometry_loss_op(Tape& t, const std::vector<Var>& rendered_depths,
                                     const std::vector<Var>& variances, const std::vector<double>& gt) {
  if (rendered_depths.size() != gt.size() || variances.size() != gt.size())
    throw std::invalid_argument("tracking_geometry_loss: length mismatch");
  if (rendered_depths.empty()) return detail::empty_batch(t);
  constexpr double kEps = 1e-10;
  std::vector<Var> terms;
  terms.reserve(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    Var num = abs_op(t, add_const(t, rendered_depths[i], -gt[i]));
    Var den = sqrt_op(t, add_const(t, variances[i], kEps));
    terms.push_back(div(t, num, den));
  }
  return collect_mean(t, terms);
}

struct MappingLossTerms {
  Var geometry, photometric, semantic, latent, occupancy, freespace;
};

/// L = L_geo + lp*Lp + ls*Ls + ll*Ll + lo*Lo + lfs*Lfs
inline Var mapping_loss_op(Tape& t, const MappingLossTerms& lt, const LossWeights& w) {
  Var out = lt.geometry;
  out = add(t, out, scale(t, lt.photometric, w.lambda_p));
  out = add(t, out, scale(t, lt.semantic, w.lambda_s));
  out = add(t, out, scale(t, lt.latent, w.lambda_l));
  out = add(t, out, scale(t, lt.occupancy, w.lambda_o));
  out = add(t, out, scale(t, lt.freespace, w.lambda_fs));
  return out;
}

struct TrackingLossTerms {
  Var geometry, photometric, semantic;
};

/// L = L_geo_track + lp*Lp + ls*Ls
inline Var tracking_loss_op(Tape& t, const TrackingLossTerms& lt, const LossWeights& w) {
  Var out = lt.geometry;
  out = add(t, out, scale(t, lt.photometric, w.lambda_p));
  out = add(t, out, scale(t, lt.semantic, w.lambda_s));
  return out;
}

/// Per-iteration term values for diagnostics.
struct LossBreakdown {
  double geometry = 0, photometric = 0, semantic = 0, latent = 0, occupancy = 0, freespace = 0, total = 0;
};

}  // namespace semslam
