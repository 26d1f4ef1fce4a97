#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "semslam/data.hpp"
#include "semslam/eval.hpp"
#include "semslam/field.hpp"
#include "semslam/loss.hpp"
#include "semslam/render.hpp"

namespace semslam {

struct SlamConfig {
  int track_iters = 30;
  int map_iters = 100;
  int ba_every = 5;
  int keyframe_every = 30;
  int window = 5;  // W
  int pixels_track = 500;  // R_t
  int pixels_map = 2000;   // R
  int init_iters = 500;
  int new_class_iters = 100;
  double lr_params = 0.005;
  double lr_pose_track = 0.001;
  double lr_pose_map = 0.0005;
  int checkpoint_every = 0;  // frames between checkpoints, 0 = only final
  double frustum_overlap_threshold = 0.10;

  void validate() const {
    if (track_iters < 1 || map_iters < 1 || ba_every < 1 || keyframe_every < 1 || pixels_track < 1 ||
        pixels_map < 1 || init_iters < 1 || new_class_iters < 1)
      throw std::invalid_argument("SlamConfig: counts must be >= 1");
    if (window < 3) throw std::invalid_argument("SlamConfig: window must be >= 3");
  }
};

/// Keyframe bookkeeping: indices, cached conv feature maps, per-frame poses.
class KeyframeDB {
 public:
  struct Entry {
    int frame_idx;
    FeatureMap features;
    std::vector<std::vector<int>> class_pixels;  // pixel list per present class (parallel to class_list)
    std::vector<int> class_list;
  };

  std::vector<Pose> frame_poses;  // estimate per ingested frame

  void add_keyframe(Entry e) {
    if (!entries_.empty() && e.frame_idx <= entries_.back().frame_idx)
      throw std::invalid_argument("KeyframeDB: keyframe indices must increase");
    entries_.push_back(std::move(e));
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  Entry& entry(std::size_t i) { return entries_[i]; }

  int latest_index() const { return entries_.back().frame_idx; }
  bool is_keyframe(int frame_idx) const {
    for (const auto& e : entries_)
      if (e.frame_idx == frame_idx) return true;
    return false;
  }
  const Entry* find(int frame_idx) const {
    for (const auto& e : entries_)
      if (e.frame_idx == frame_idx) return &e;
    return nullptr;
  }
  std::vector<int> indices() const {
    std::vector<int> out;
    for (const auto& e : entries_) out.push_back(e.frame_idx);
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

/// Per-class pixel lists of a semantic map.
inline std::pair<std::vector<int>, std::vector<std::vector<int>>> class_pixel_lists(const ImageLabel& sem) {
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < static_cast<int>(sem.v.size()); ++i) by_class[sem.v[i]].push_back(i);
  std::vector<int> classes;
  std::vector<std::vector<int>> pixels;
  for (auto& [cls, list] : by_class) {
    classes.push_back(cls);
    pixels.push_back(std::move(list));
  }
  return {classes, pixels};
}

enum class BaMode { Local, Global };

/// Frustum co-visibility: the fraction of a 32x32 subsampled grid of the
/// current frame that back-projects into the candidate's view frustum.
inline double frustum_overlap(const Frame& current, const Pose& current_pose, const Pose& candidate_pose,
                              const Intrinsics& K) {
  const Pose cand_inv = candidate_pose.inverse();
  int total = 0, inside = 0;
  for (int gy = 0; gy < 32; ++gy) {
    for (int gx = 0; gx < 32; ++gx) {
      const int x = std::min(K.width - 1, gx * K.width / 32);
      const int y = std::min(K.height - 1, gy * K.height / 32);
      const double d = current.depth.at(x, y);
      if (!(d > 0)) continue;
      ++total;
      const Vec3 world = current_pose.apply(backproject(Vec2(x, y), d, K));
      const Vec3 in_cand = cand_inv.apply(world);
      if (in_cand.z() <= 0) continue;
      const Vec2 uv = project(in_cand, K);
      if (uv.x() >= 0 && uv.y() >= 0 && uv.x() <= K.width - 1 && uv.y() <= K.height - 1) ++inside;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(inside) / total;
}

/// BA window: always the current frame and the latest keyframe, filled to W
/// with overlap-tested (local) or uniformly drawn (global) keyframes.
inline std::vector<int> select_ba_frames(const KeyframeDB& db, const Frame& current, int current_idx,
                                         const Intrinsics& K, int window, BaMode mode, Rng& rng,
                                         double overlap_threshold = 0.10) {
  if (db.empty()) throw std::runtime_error("select_ba_frames: no keyframes yet");
  std::vector<int> out;
  out.push_back(current_idx);
  const int latest = db.latest_index();
  if (latest != current_idx) out.push_back(latest);

  std::vector<int> candidates;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const int idx = db.entry(i).frame_idx;
    if (idx == current_idx || idx == latest) continue;
    candidates.push_back(idx);
  }
  if (mode == BaMode::Local) {
    std::vector<int> overlapping;
    for (int idx : candidates) {
      const double ov =
          frustum_overlap(current, db.frame_poses[current_idx], db.frame_poses[idx], K);
      if (ov >= overlap_threshold) overlapping.push_back(idx);
    }
    candidates = std::move(overlapping);
  }
  while (static_cast<int>(out.size()) < window && !candidates.empty()) {
    const std::size_t pick = rng.uniform_int(candidates.size());
    out.push_back(candidates[pick]);
    candidates.erase(candidates.begin() + static_cast<long>(pick));
  }
  return out;
}

/// Reference frames for a BA target:
///  - current frame: the two latest keyframes,
///  - latest keyframe: the two previous keyframes,
///  - other keyframe: one previous and one later keyframe.
inline std::vector<int> select_reference_frames(const KeyframeDB& db, int target_idx, int current_idx) {
  const std::vector<int> kfs = db.indices();
  std::vector<int> out;
  const bool target_is_kf = db.is_keyframe(target_idx);
  if (target_idx == current_idx && !target_is_kf) {
    for (auto it = kfs.rbegin(); it != kfs.rend() && out.size() < 2; ++it) out.push_back(*it);
    std::reverse(out.begin(), out.end());
    return out;
  }
  if (target_is_kf && target_idx == kfs.back()) {
    const int n = static_cast<int>(kfs.size());
    for (int i = n - 2; i >= 0 && out.size() < 2; --i) out.push_back(kfs[i]);
    std::reverse(out.begin(), out.end());
    return out;
  }
  // middle keyframe (or a non-keyframe historical target): previous + later
  int prev = -1, later = -1;
  for (int k : kfs) {
    if (k < target_idx) prev = k;
    if (k > target_idx && later < 0) later = k;
  }
  if (prev >= 0) out.push_back(prev);
  if (later >= 0) out.push_back(later);
  return out;
}

struct PixelSample {
  int frame_idx = 0;
  int x = 0, y = 0;
  int class_id = 0;
};

/// Stratified mapping batch: per frame quota R/W; of each quota 60% uniform
/// over the image and 40% split evenly across the frame's classes, rounding
/// residues going to the uniform pool.
inline std::vector<PixelSample> sample_mapping_pixels(
    const std::vector<std::pair<int, const Frame*>>& frames, int total_pixels, Rng& rng) {
  if (frames.empty()) throw std::invalid_argument("sample_mapping_pixels: no frames");
  std::vector<PixelSample> out;
  const int w = static_cast<int>(frames.size());
  for (int fi = 0; fi < w; ++fi) {
    const auto& [frame_idx, frame] = frames[fi];
    int quota = total_pixels / w + (fi < total_pixels % w ? 1 : 0);
    auto [classes, pixels] = class_pixel_lists(frame->semantic);
    const int n_classes = static_cast<int>(classes.size());
    const int class_total = static_cast<int>(0.4 * quota);
    const int per_class = n_classes > 0 ? class_total / n_classes : 0;
    const int n_uniform = quota - per_class * n_classes;
    const int width = frame->semantic.width;

    auto push_pixel = [&](int linear) {
      PixelSample s;
      s.frame_idx = frame_idx;
      s.x = linear % width;
      s.y = linear / width;
      s.class_id = frame->semantic.v[linear];
      out.push_back(s);
    };
    for (int i = 0; i < n_uniform; ++i)
      push_pixel(static_cast<int>(rng.uniform_int(frame->semantic.v.size())));
    for (int c = 0; c < n_classes; ++c)
      for (int i = 0; i < per_class; ++i)
        push_pixel(pixels[c][rng.uniform_int(pixels[c].size())]);
  }
  return out;
}

/// Toggles requires_grad for a parameter set, restoring on destruction.
class FreezeGuard {
 public:
  explicit FreezeGuard(const std::vector<Tensor*>& params, bool freeze = true) {
    for (Tensor* t : params) {
      saved_.emplace_back(t, t->requires_grad);
      if (freeze) t->requires_grad = false;
    }
  }
  ~FreezeGuard() {
    for (auto& [t, rg] : saved_) t->requires_grad = rg;
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<std::pair<Tensor*, bool>> saved_;
};

struct FrameDiagnostics {
  int frame = 0;
  double ate_so_far_cm = -1;  // -1 when no ground truth
  LossBreakdown last_loss;
  int track_iterations = 0;
  int map_iterations = 0;
  double wall_seconds = 0;
  bool tracking_flagged = false;
};

struct SlamResult {
  Trajectory trajectory;
  std::vector<FrameDiagnostics> diagnostics;
  int flagged_frames = 0;
  bool aborted_map_steps = false;
};

/// The full pipeline: sequential deterministic interleaving of per-frame
/// tracking and windowed bundle-adjusted mapping.
class Slam {
 public:
  Slam(const FieldConfig& field_cfg, const RenderConfig& render_cfg, const LossWeights& weights,
       const SlamConfig& cfg, std::uint64_t seed)
      : field_(field_cfg, seed), rcfg_(render_cfg), weights_(weights), cfg_(cfg), seed_(seed) {
    cfg.validate();
    weights.validate();
    rcfg_.truncation = weights_.truncation;
  }

  SceneField& field() { return field_; }
  const SceneField& field() const { return field_; }
  KeyframeDB& db() { return db_; }
  const std::vector<FrameDiagnostics>& diagnostics() const { return diagnostics_; }

  /// Iteration-level loss CSV stream (iteration, term, value); optional.
  void stream_loss_csv(const std::string& path) {
    loss_csv_.open(path);
    loss_csv_ << "iteration,term,value\n";
  }

  // --- tracking ---------------------------------------------------------------

  /// Optimizes only the camera pose of `frame` in coarse mode against the
  /// latest optimized frame as reference. Returns the best-loss pose.
  Pose track_frame(const Frame& frame, const Intrinsics& K, const Pose& guess,
                   const ReferenceView& reference, std::uint64_t frame_seed, bool* flagged = nullptr,
                   int max_iters = -1) {
    FreezeGuard freeze(field_.parameters());
    Tensor delta("track.delta", {6});
    AdamOptimizer opt;
    Pose pose = guess;
    Pose best_pose = guess;
    double best_loss = std::numeric_limits<double>::infinity();
    const int iters = max_iters > 0 ? max_iters : cfg_.track_iters;
    for (int it = 0; it <= iters; ++it) {
      Rng rng(mix_seed(seed_, 0x7a5c, frame_seed, static_cast<std::uint64_t>(it)));
      Tape tape;
      PoseVars pv = make_pose_vars(tape, delta, pose);
      std::vector<Var> depth_vars, var_vars, color_vars, logit_vars;
      std::vector<double> gt_depths;
      std::vector<Vec3> gt_colors;
      std::vector<int> gt_classes;
      for (int p = 0; p < cfg_.pixels_track; ++p) {
        const int x = static_cast<int>(rng.uniform_int(K.width));
        const int y = static_cast<int>(rng.uniform_int(K.height));
        const double gt = frame.depth.at(x, y);
        RaySamples ray = sample_ray(Vec2(x, y), pose, K, gt, rcfg_, rng);
        ray.class_id = frame.semantic.at(x, y);
        auto vars = render_pixel_op(tape, field_, ray, {reference}, RenderMode::Coarse, &pv);
        color_vars.push_back(vars.color);
        gt_colors.push_back(Vec3(frame.rgb.at(x, y)[0], frame.rgb.at(x, y)[1], frame.rgb.at(x, y)[2]));
        if (gt > 0) {
          depth_vars.push_back(vars.depth);
          var_vars.push_back(vars.depth_var);
          gt_depths.push_back(gt);
        }
        if (field_.has_class(ray.class_id)) {
          logit_vars.push_back(vars.logits);
          gt_classes.push_back(field_.logit_index(ray.class_id));
        }
      }
      TrackingLossTerms terms;
      terms.geometry = tracking_geometry_loss_op(tape, depth_vars, var_vars, gt_depths);
      terms.photometric = photometric_loss_op(tape, color_vars, gt_colors);
      terms.semantic = semantic_loss_op(tape, logit_vars, gt_classes);
      Var loss = tracking_loss_op(tape, terms, weights_);
      const double loss_value = tape.scalar(loss);
      if (!std::isfinite(loss_value)) {
        if (flagged) *flagged = true;
        return guess;
      }
      if (loss_value < best_loss) {
        best_loss = loss_value;
        best_pose = pose;
      }
      if (it == iters) break;  // last pass evaluates the final pose only
      delta.zero_grad();
      tape.backward(loss);
      opt.step({{{&delta}, cfg_.lr_pose_track}});
      pose = apply_delta(pose, PoseDelta{delta.value.matrix()});
      delta.value.setZero();
    }
    if (flagged) *flagged = false;
    return best_pose;
  }

  // --- mapping ----------------------------------------------------------------

  struct MapStepStats {
    LossBreakdown last_loss;
    int iterations = 0;
    int non_increasing = 0;
    bool aborted = false;
  };

  /// One bundle-adjustment step over a W-frame window: joint optimization of
  /// the field and all window poses except frame 0.
  MapStepStats map_step(const std::vector<Frame>& frames, const Intrinsics& K, int current_idx,
                        std::uint64_t step_seed) {
    const BaMode mode = (mapping_steps_ % 2 == 0) ? BaMode::Local : BaMode::Global;
    ++mapping_steps_;
    Rng rng(mix_seed(seed_, 0x3a9, step_seed));
    const std::vector<int> targets = select_ba_frames(db_, frames[current_idx], current_idx, K, cfg_.window, mode,
                                                      rng, cfg_.frustum_overlap_threshold);
    return optimize_window(frames, K, targets, current_idx, cfg_.map_iters, cfg_.lr_pose_map, step_seed,
                           /*optimize_poses=*/true);
  }

  /// Frame-0 initialization: mapping only, pose fixed.
  MapStepStats initialize(const std::vector<Frame>& frames, const Intrinsics& K) {
    register_new_classes(frames, 0, /*warm_up=*/false, K);
    return optimize_window(frames, K, {0}, 0, cfg_.init_iters, cfg_.lr_pose_map, 0xbeef,
                           /*optimize_poses=*/false);
  }

  /// Trains only the new class's geometry head and semantic row on pixels of
  /// that class; everything else (and every pose) is frozen.
  void init_new_class(int class_id, const std::vector<std::pair<int, const Frame*>>& containing,
                      const Intrinsics& K, std::uint64_t seed_tag) {
    std::vector<std::pair<int, std::vector<int>>> pools;  // frame idx -> pixel list
    for (const auto& [idx, frame] : containing) {
      auto [classes, pixels] = class_pixel_lists(frame->semantic);
      for (std::size_t c = 0; c < classes.size(); ++c) {
        if (classes[c] == class_id && !pixels[c].empty()) pools.emplace_back(idx, std::move(pixels[c]));
      }
    }
    if (pools.empty()) throw std::runtime_error("init_new_class: no pixels of class " + std::to_string(class_id));

    std::vector<Tensor*> train = field_.class_parameters(class_id);
    std::vector<Tensor*> frozen;
    {
      std::set<Tensor*> train_set(train.begin(), train.end());
      for (Tensor* t : field_.parameters())
        if (!train_set.count(t)) frozen.push_back(t);
    }
    FreezeGuard freeze(frozen);
    AdamOptimizer opt;
    for (int it = 0; it < cfg_.new_class_iters; ++it) {
      Rng rng(mix_seed(seed_, 0x9c1a55, seed_tag, static_cast<std::uint64_t>(it)));
      std::vector<PixelSample> batch;
      for (int p = 0; p < cfg_.pixels_track; ++p) {
        const auto& [frame_idx, pool] = pools[rng.uniform_int(pools.size())];
        const int linear = pool[rng.uniform_int(pool.size())];
        PixelSample s;
        s.frame_idx = frame_idx;
        const Frame& f = *containing_frame(containing, frame_idx);
        s.x = linear % f.semantic.width;
        s.y = linear / f.semantic.width;
        s.class_id = class_id;
        batch.push_back(s);
      }
      auto frames_view = containing;
      Tape tape;
      LossBreakdown bd;
      Var loss = window_loss(tape, frames_view, K, batch, {}, rng, &bd, /*with_latent=*/false);
      if (!std::isfinite(tape.scalar(loss))) break;
      for (Tensor* t : train) t->zero_grad();
      field_.zero_grad();
      tape.backward(loss);
      opt.step({{train, cfg_.lr_params}});
    }
    field_.head(class_id).warming = false;
  }

  // --- full pipeline ------------------------------------------------------------

  SlamResult run(const Dataset& dataset, bool use_gt_poses = false,
                 const std::string& checkpoint_dir = "") {
    const auto& frames = dataset.frames;
    if (frames.empty()) throw std::invalid_argument("run_slam: empty stream");
    const Intrinsics& K = dataset.intrinsics;
    K.validate();
    SlamResult result;
    db_.frame_poses.assign(frames.size(), Pose{});

    for (std::size_t i = 0; i < frames.size(); ++i) {
      const auto t_start = std::chrono::steady_clock::now();
      FrameDiagnostics diag;
      diag.frame = static_cast<int>(i);
      const Frame& frame = frames[i];

      if (i == 0) {
        db_.frame_poses[0] = frame.gt_pose.value_or(Pose::identity());
        anchor_pose_ = db_.frame_poses[0];
        add_keyframe_entry(frames, 0);
        prev_features_ = field_.image_encoder().encode(frame.rgb);
        const MapStepStats stats = initialize(frames, K);
        diag.map_iterations = stats.iterations;
        diag.last_loss = stats.last_loss;
      } else {
        // tracking
        Pose guess;
        if (use_gt_poses && frame.gt_pose) {
          guess = *frame.gt_pose;
          db_.frame_poses[i] = guess;
        } else {
          const Pose prev = db_.frame_poses[i - 1];
          const Pose prev2 = i >= 2 ? db_.frame_poses[i - 2] : prev;
          guess = constant_speed_guess(prev, prev2);
          const ReferenceView ref =
              field_.make_reference_view(db_.frame_poses[i - 1], &prev_features_, K);
          bool flagged = false;
          db_.frame_poses[i] = track_frame(frame, K, guess, ref, i, &flagged);
          diag.track_iterations = cfg_.track_iters;
          diag.tracking_flagged = flagged;
          if (flagged) {
            ++result.flagged_frames;
            db_.frame_poses[i] = guess;
          }
        }
        prev_features_ = field_.image_encoder().encode(frame.rgb);

        if (i % static_cast<std::size_t>(cfg_.keyframe_every) == 0) add_keyframe_entry(frames, static_cast<int>(i));

        if (i % static_cast<std::size_t>(cfg_.ba_every) == 0) {
          register_new_classes(frames, static_cast<int>(i), /*warm_up=*/true, K);
          const MapStepStats stats = map_step(frames, K, static_cast<int>(i), i);
          diag.map_iterations = stats.iterations;
          diag.last_loss = stats.last_loss;
          if (stats.aborted) result.aborted_map_steps = true;
        }
      }

      result.trajectory.push(frame.timestamp, db_.frame_poses[i]);
      if (dataset.has_gt && result.trajectory.size() >= 3) {
        Trajectory gt;
        for (std::size_t j = 0; j <= i; ++j) gt.push(frames[j].timestamp, *frames[j].gt_pose);
        diag.ate_so_far_cm = ate_rmse(result.trajectory, gt);
      }
      diag.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      diagnostics_.push_back(diag);
      result.diagnostics.push_back(diag);

      if (cfg_.checkpoint_every > 0 && !checkpoint_dir.empty() &&
          i % static_cast<std::size_t>(cfg_.checkpoint_every) == 0) {
        save_checkpoint(field_.to_checkpoint(),
                        checkpoint_dir + "/checkpoint_" + std::to_string(i) + ".bin");
      }
    }
    return result;
  }

  void write_diagnostics_csv(const std::string& path) const {
    std::ofstream os(path);
    os << "frame,ate_so_far_cm,loss_total,loss_geo,loss_photo,loss_sem,loss_latent,loss_occ,loss_fs,"
          "track_iters,map_iters,wall_seconds,tracking_flagged\n";
    for (const auto& d : diagnostics_) {
      os << d.frame << ',' << d.ate_so_far_cm << ',' << d.last_loss.total << ',' << d.last_loss.geometry << ','
         << d.last_loss.photometric << ',' << d.last_loss.semantic << ',' << d.last_loss.latent << ','
         << d.last_loss.occupancy << ',' << d.last_loss.freespace << ',' << d.track_iterations << ','
         << d.map_iterations << ',' << d.wall_seconds << ',' << (d.tracking_flagged ? 1 : 0) << '\n';
    }
  }

  const Pose& anchor_pose() const { return anchor_pose_; }

 private:
  SceneField field_;
  RenderConfig rcfg_;
  LossWeights weights_;
  SlamConfig cfg_;
  std::uint64_t seed_;
  KeyframeDB db_;
  AdamOptimizer map_opt_;
  std::map<int, Tensor> pose_deltas_;  // per-frame, moments persist across steps
  FeatureMap prev_features_;
  Pose anchor_pose_;
  int mapping_steps_ = 0;
  long global_iteration_ = 0;
  std::vector<FrameDiagnostics> diagnostics_;
  std::ofstream loss_csv_;

  static const Frame* containing_frame(const std::vector<std::pair<int, const Frame*>>& frames, int idx) {
    for (const auto& [i, f] : frames)
      if (i == idx) return f;
    throw std::logic_error("frame not in window");
  }

  void add_keyframe_entry(const std::vector<Frame>& frames, int idx) {
    if (db_.is_keyframe(idx)) return;
    KeyframeDB::Entry e;
    e.frame_idx = idx;
    e.features = field_.image_encoder().encode(frames[idx].rgb);
    auto [classes, pixels] = class_pixel_lists(frames[idx].semantic);
    e.class_list = std::move(classes);
    e.class_pixels = std::move(pixels);
    db_.add_keyframe(std::move(e));
  }

  /// add_class + burn-in for labels in the current frame or any keyframe
  /// that the field has not seen yet.
  void register_new_classes(const std::vector<Frame>& frames, int current_idx, bool warm_up,
                            const Intrinsics& K) {
    std::set<int> unseen;
    for (std::size_t c = 0; c < frames[current_idx].semantic.v.size(); ++c) {
      const int cls = frames[current_idx].semantic.v[c];
      if (!field_.has_class(cls)) unseen.insert(cls);
    }
    for (std::size_t k = 0; k < db_.size(); ++k)
      for (int cls : db_.entry(k).class_list)
        if (!field_.has_class(cls)) unseen.insert(cls);

    for (int cls : unseen) {
      field_.add_class(cls);
      if (!warm_up) {
        field_.head(cls).warming = false;
        continue;
      }
      std::vector<std::pair<int, const Frame*>> containing;
      auto contains = [&](const Frame& f) {
        for (auto v : f.semantic.v)
          if (v == cls) return true;
        return false;
      };
      if (contains(frames[current_idx])) containing.emplace_back(current_idx, &frames[current_idx]);
      for (std::size_t k = 0; k < db_.size(); ++k) {
        const int idx = db_.entry(k).frame_idx;
        if (idx != current_idx && contains(frames[idx])) containing.emplace_back(idx, &frames[idx]);
      }
      init_new_class(cls, containing, K, static_cast<std::uint64_t>(cls));
    }
  }

  /// Reference views for a target frame, with poses taken from the current
  /// estimates (snapshots; gradients do not flow into reference poses).
  std::vector<ReferenceView> references_for(int target_idx, int current_idx, const Intrinsics& K) {
    std::vector<ReferenceView> out;
    for (int ref_idx : select_reference_frames(db_, target_idx, current_idx)) {
      const KeyframeDB::Entry* e = db_.find(ref_idx);
      if (!e) continue;
      out.push_back(field_.make_reference_view(db_.frame_poses[ref_idx], &e->features, K));
    }
    if (out.empty() && db_.size() == 1 && target_idx == db_.entry(0).frame_idx) {
      // first-frame initialization: the only view references itself
      const KeyframeDB::Entry& e = db_.entry(0);
      out.push_back(field_.make_reference_view(db_.frame_poses[e.frame_idx], &e.features, K));
    }
    return out;
  }

  /// Assembles the full mapping loss over a pixel batch. pose_vars maps frame
  /// index -> PoseVars for frames whose pose is being optimized.
  Var window_loss(Tape& tape, const std::vector<std::pair<int, const Frame*>>& window, const Intrinsics& K,
                  const std::vector<PixelSample>& batch, const std::map<int, PoseVars>& pose_vars, Rng& rng,
                  LossBreakdown* breakdown, bool with_latent) {
    std::vector<Var> depth_vars, color_vars, logit_vars;
    std::vector<double> gt_depths;
    std::vector<Vec3> gt_colors;
    std::vector<int> gt_classes;
    std::vector<Var> fine_latents, coarse_latents;
    std::vector<RayOccInput> occ_inputs;
    std::vector<std::unique_ptr<Eigen::VectorXd>> depth_storage;

    std::map<int, std::vector<ReferenceView>> refs_cache;
    int current_idx = window.empty() ? 0 : window.back().first;
    for (const auto& [idx, f] : window) current_idx = std::max(current_idx, idx);
    for (const auto& [idx, f] : window)
      refs_cache[idx] = references_for(idx, current_idx, K);

    for (const PixelSample& s : batch) {
      const Frame& f = *containing_frame(window, s.frame_idx);
      const Pose& pose = db_.frame_poses[s.frame_idx];
      const double gt = f.depth.at(s.x, s.y);
      RaySamples ray = sample_ray(Vec2(s.x, s.y), pose, K, gt, rcfg_, rng);
      ray.class_id = s.class_id;
      const PoseVars* pv = nullptr;
      auto it = pose_vars.find(s.frame_idx);
      if (it != pose_vars.end()) pv = &it->second;
      auto vars =
          render_pixel_op(tape, field_, ray, refs_cache[s.frame_idx], RenderMode::Fine, pv, with_latent);
      color_vars.push_back(vars.color);
      gt_colors.push_back(Vec3(f.rgb.at(s.x, s.y)[0], f.rgb.at(s.x, s.y)[1], f.rgb.at(s.x, s.y)[2]));
      logit_vars.push_back(vars.logits);
      gt_classes.push_back(field_.logit_index(s.class_id));
      if (gt > 0) {
        depth_vars.push_back(vars.depth);
        gt_depths.push_back(gt);
        depth_storage.push_back(std::make_unique<Eigen::VectorXd>(ray.depths));
        occ_inputs.push_back(RayOccInput{vars.occs, depth_storage.back().get(), gt});
      }
      if (with_latent) {
        for (std::size_t i = 0; i < vars.latents.size(); ++i) {
          fine_latents.push_back(vars.latents[i]);
          coarse_latents.push_back(vars.coarse_latents[i]);
        }
      }
    }
    depth_storage_.swap(depth_storage);  // keep alive until the tape dies

    MappingLossTerms terms;
    terms.geometry = geometry_loss_op(tape, depth_vars, gt_depths);
    terms.photometric = photometric_loss_op(tape, color_vars, gt_colors);
    terms.semantic = semantic_loss_op(tape, logit_vars, gt_classes);
    terms.latent = with_latent ? latent_loss_op(tape, fine_latents, coarse_latents) : constant(tape, 0.0);
    terms.occupancy = occupancy_loss_op(tape, occ_inputs, weights_);
    terms.freespace = freespace_loss_op(tape, occ_inputs, weights_);
    Var loss = mapping_loss_op(tape, terms, weights_);
    if (breakdown) {
      breakdown->geometry = tape.scalar(terms.geometry);
      breakdown->photometric = tape.scalar(terms.photometric);
      breakdown->semantic = tape.scalar(terms.semantic);
      breakdown->latent = tape.scalar(terms.latent);
      breakdown->occupancy = tape.scalar(terms.occupancy);
      breakdown->freespace = tape.scalar(terms.freespace);
      breakdown->total = tape.scalar(loss);
    }
    return loss;
  }

  MapStepStats optimize_window(const std::vector<Frame>& frames, const Intrinsics& K,
                               const std::vector<int>& targets, int current_idx, int iterations,
                               double lr_pose, std::uint64_t step_seed, bool optimize_poses) {
    MapStepStats stats;
    std::vector<std::pair<int, const Frame*>> window;
    for (int idx : targets) window.emplace_back(idx, &frames[idx]);

    Rng pixel_rng(mix_seed(seed_, 0x90aa, step_seed));
    const std::vector<PixelSample> batch = sample_mapping_pixels(window, cfg_.pixels_map, pixel_rng);

    double lr_params = cfg_.lr_params;
    double prev_loss = std::numeric_limits<double>::infinity();
    bool lr_halved = false;
    for (int it = 0; it < iterations; ++it) {
      Rng rng(mix_seed(seed_, 0x50f7, step_seed, static_cast<std::uint64_t>(it)));
      Tape tape;
      std::map<int, PoseVars> pose_vars;
      std::vector<Tensor*> delta_tensors;
      if (optimize_poses) {
        for (int idx : targets) {
          if (idx == 0) continue;  // world anchor
          Tensor& d = pose_deltas_.try_emplace(idx, Tensor("pose.delta." + std::to_string(idx),
                                                           std::vector<int>{6}))
                          .first->second;
          d.value.setZero();
          pose_vars.emplace(idx, make_pose_vars(tape, d, db_.frame_poses[idx]));
          delta_tensors.push_back(&d);
        }
      }
      LossBreakdown bd;
      Var loss = window_loss(tape, window, K, batch, pose_vars, rng, &bd, /*with_latent=*/true);
      const double loss_value = tape.scalar(loss);
      if (!std::isfinite(loss_value)) {
        if (!lr_halved) {
          lr_params *= 0.5;
          lr_halved = true;
          continue;
        }
        stats.aborted = true;
        break;
      }
      if (loss_value <= prev_loss) ++stats.non_increasing;
      prev_loss = loss_value;
      stats.last_loss = bd;
      ++stats.iterations;
      if (loss_csv_.is_open()) {
        loss_csv_ << global_iteration_ << ",geometry," << bd.geometry << '\n'
                  << global_iteration_ << ",photometric," << bd.photometric << '\n'
                  << global_iteration_ << ",semantic," << bd.semantic << '\n'
                  << global_iteration_ << ",latent," << bd.latent << '\n'
                  << global_iteration_ << ",occupancy," << bd.occupancy << '\n'
                  << global_iteration_ << ",freespace," << bd.freespace << '\n'
                  << global_iteration_ << ",total," << bd.total << '\n';
      }
      ++global_iteration_;

      field_.zero_grad();
      for (Tensor* d : delta_tensors) d->zero_grad();
      tape.backward(loss);
      std::vector<ParamGroup> groups{{field_.parameters(), lr_params}};
      if (!delta_tensors.empty()) groups.push_back({delta_tensors, lr_pose});
      map_opt_.step(groups);
      for (int idx : targets) {
        if (idx == 0 || !optimize_poses) continue;
        Tensor& d = pose_deltas_.at(idx);
        db_.frame_poses[idx] = apply_delta(db_.frame_poses[idx], PoseDelta{d.value.matrix()});
        d.value.setZero();
      }
    }
    return stats;
  }

  std::vector<std::unique_ptr<Eigen::VectorXd>> depth_storage_;
};

}  // namespace semslam
