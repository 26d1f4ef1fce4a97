#pragma once

#include <Eigen/Dense>

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "semslam/encoding.hpp"
#include "semslam/geometry.hpp"
#include "semslam/nn.hpp"
#include "semslam/tape.hpp"

namespace semslam {

/// Axis-aligned box all world points are normalized into before encoding.
struct SceneBounds {
  Vec3 lo = Vec3(-1, -1, -1);
  Vec3 hi = Vec3(1, 1, 1);

  Vec3 extent() const { return hi - lo; }
  double diagonal() const { return extent().norm(); }
  Vec3 normalize(const Vec3& x) const { return (x - lo).cwiseQuotient(extent()); }

  void validate() const {
    if (!((hi - lo).array() > 0).all()) throw std::invalid_argument("SceneBounds: hi must exceed lo");
  }
};

struct FieldConfig {
  SceneBounds bounds;
  OneBlobConfig oneblob;
  HashGridConfig hash;
  int latent_dim = 16;
  int hidden_width = 32;
  int hidden_layers = 2;
  int pooled_dim = 16;          // width of encoded reference features
  int image_feature_dim = 16;   // conv encoder output channels

  int oneblob_dim() const { return 3 * oneblob.bins_per_dim; }
  int geometry_in_dim() const { return oneblob_dim() + hash.levels * hash.features_per_level; }
  int color_in_dim() const { return oneblob_dim() + latent_dim + pooled_dim; }
  int ref_encoder_in_dim() const { return 2 * oneblob_dim() + image_feature_dim; }
};

/// Mean of per-reference encoded image features at a world point.
struct PooledFeature {
  Eigen::VectorXd vector;
  int contributing_refs = 0;
};

/// A keyframe acting as a feature source: pose, cached conv features, and
/// the precomputed view encoding fed to the reference encoder.
struct ReferenceView {
  Pose pose;
  const FeatureMap* features = nullptr;
  Intrinsics intrinsics;
  Eigen::VectorXd view_encoding;  // oneblob(origin_normalized) ++ oneblob((view_dir+1)/2)
};

class SceneField {
 public:
  SceneField() = default;
  SceneField(const FieldConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        seed_(seed),
        grid_(cfg.hash, mix_seed(seed, 0x11)),
        coarse_head_(Mlp::make("coarse_head", cfg.geometry_in_dim(), cfg.hidden_width, cfg.hidden_layers,
                               cfg.latent_dim + 1, Activation::Linear, mix_seed(seed, 0x22))),
        color_head_(Mlp::make("color_head", cfg.color_in_dim(), cfg.hidden_width, cfg.hidden_layers, 3,
                              Activation::Sigmoid, mix_seed(seed, 0x33))),
        semantic_trunk_(Mlp::make("semantic_trunk", cfg.color_in_dim(), cfg.hidden_width, cfg.hidden_layers - 1,
                                  cfg.hidden_width, Activation::Relu, mix_seed(seed, 0x44))),
        ref_encoder_(Mlp::make("ref_encoder", cfg.ref_encoder_in_dim(), cfg.hidden_width, cfg.hidden_layers,
                               cfg.pooled_dim, Activation::Linear, mix_seed(seed, 0x55))),
        image_encoder_(cfg.image_feature_dim, mix_seed(seed, 0x66)) {
    cfg.bounds.validate();
    cfg.oneblob.validate();
    add_class(0);  // id 0 is reserved for "unlabeled"
    head(0).warming = false;
  }

  const FieldConfig& config() const { return cfg_; }
  const HashGrid& grid() const { return grid_; }
  HashGrid& grid() { return grid_; }
  const ConvEncoder& image_encoder() const { return image_encoder_; }
  const Mlp& color_head() const { return color_head_; }
  const Mlp& ref_encoder() const { return ref_encoder_; }
  Mlp& coarse_head_mut() { return coarse_head_; }
  const Mlp& coarse_head() const { return coarse_head_; }

  // --- class registry ----------------------------------------------------

  const std::vector<int>& class_ids() const { return class_ids_; }
  bool has_class(int class_id) const { return logit_index_.count(class_id) > 0; }
  int num_classes() const { return static_cast<int>(class_ids_.size()); }

  int logit_index(int class_id) const {
    auto it = logit_index_.find(class_id);
    if (it == logit_index_.end())
      throw std::out_of_range("unknown class id " + std::to_string(class_id) + "; call add_class first");
    return it->second;
  }
  int class_at_logit(int index) const { return class_ids_.at(index); }

  struct GeometryHead {
    Mlp net;
    bool warming = false;
  };

  GeometryHead& head(int class_id) {
    auto it = geometry_heads_.find(class_id);
    if (it == geometry_heads_.end())
      throw std::out_of_range("unknown class id " + std::to_string(class_id) + "; call add_class first");
    return it->second;
  }
  const GeometryHead& head(int class_id) const { return const_cast<SceneField*>(this)->head(class_id); }

  /// Registers a new class: seeded geometry head plus a zero-initialized
  /// semantic output row, so existing class probabilities are untouched.
  void add_class(int class_id) {
    if (has_class(class_id)) throw std::invalid_argument("add_class: duplicate class id " + std::to_string(class_id));
    const std::string prefix = "geometry.class" + std::to_string(class_id);
    GeometryHead h;
    h.net = Mlp::make(prefix, cfg_.geometry_in_dim(), cfg_.hidden_width, cfg_.hidden_layers, cfg_.latent_dim + 1,
                      Activation::Linear, mix_seed(seed_, 0x77, static_cast<std::uint64_t>(class_id)));
    h.warming = true;
    geometry_heads_.emplace(class_id, std::move(h));
    semantic_row_w_.emplace_back("semantic.row_w." + std::to_string(class_id),
                                 std::vector<int>{cfg_.hidden_width});
    semantic_row_b_.emplace_back("semantic.row_b." + std::to_string(class_id), std::vector<int>{1});
    logit_index_[class_id] = static_cast<int>(class_ids_.size());
    class_ids_.push_back(class_id);
  }

  // --- evaluation: plain (no gradients) ------------------------------------

  /// Encoded field input at a world point: oneblob ++ hash features.
  Eigen::VectorXd field_input(const Vec3& x_world) const {
    const Vec3 n = cfg_.bounds.normalize(x_world);
    Eigen::VectorXd out(cfg_.geometry_in_dim());
    out.head(cfg_.oneblob_dim()) = oneblob_encode(n, cfg_.oneblob);
    out.tail(grid_.feature_dim()) = grid_.query(clamp01(n));
    return out;
  }

  struct GeomOut {
    Eigen::VectorXd latent;
    double occ;
  };

  GeomOut eval_geometry(int class_id, const Vec3& x_world) const {
    return split_geom(head(class_id).net.forward(field_input(x_world)));
  }

  GeomOut eval_coarse(const Vec3& x_world) const { return split_geom(coarse_head_.forward(field_input(x_world))); }

  PooledFeature gather_reference_features(const Vec3& x_world, const std::vector<ReferenceView>& refs) const {
    PooledFeature out;
    out.vector = Eigen::VectorXd::Zero(cfg_.pooled_dim);
    for (const auto& ref : refs) {
      const Vec3 p_ref = ref.pose.inverse().apply(x_world);
      if (!(p_ref.z() > kZEps)) continue;
      const Vec2 uv = project(p_ref, ref.intrinsics);
      if (!feature_in_bounds(*ref.features, uv, ref.intrinsics.width, ref.intrinsics.height)) continue;
      Eigen::VectorXd in(cfg_.ref_encoder_in_dim());
      in.head(ref.view_encoding.size()) = ref.view_encoding;
      in.tail(cfg_.image_feature_dim) = sample_feature(*ref.features, uv, ref.intrinsics.width, ref.intrinsics.height);
      out.vector += ref_encoder_.forward(in);
      ++out.contributing_refs;
    }
    if (out.contributing_refs > 0) out.vector /= out.contributing_refs;
    return out;
  }

  Vec3 eval_color(const Vec3& x_world, const Eigen::VectorXd& h, const PooledFeature& pooled) const {
    return color_head_.forward(appearance_input(x_world, h, pooled.vector));
  }

  Eigen::VectorXd eval_semantic(const Vec3& x_world, const Eigen::VectorXd& h, const PooledFeature& pooled) const {
    const Eigen::VectorXd hidden = semantic_trunk_.forward(appearance_input(x_world, h, pooled.vector));
    return linear_rows_plain(semantic_row_w_, semantic_row_b_, hidden);
  }

  // --- evaluation: recorded on tape ----------------------------------------

  Var normalize_op(Tape& t, Var x_world) const {
    const Vec3 ext = cfg_.bounds.extent();
    Mat3 S = Mat3::Zero();
    S(0, 0) = 1.0 / ext.x();
    S(1, 1) = 1.0 / ext.y();
    S(2, 2) = 1.0 / ext.z();
    return affine3(t, x_world, S, -cfg_.bounds.lo.cwiseQuotient(ext));
  }

  Var field_input_op(Tape& t, Var x_world) const {
    Var n = normalize_op(t, x_world);
    return concat(t, {oneblob_op(t, n, cfg_.oneblob), grid_.query_op(t, n)});
  }

  struct GeomVars {
    Var latent, occ;
  };

  GeomVars eval_geometry_op(Tape& t, int class_id, Var input) const {
    return split_geom_op(t, mlp_forward(t, head(class_id).net, input));
  }

  GeomVars eval_coarse_op(Tape& t, Var input) const { return split_geom_op(t, mlp_forward(t, coarse_head_, input)); }

  /// Pooled reference features at a (possibly pose-dependent) point.
  /// Reference poses are treated as constants; gradients flow through the
  /// sample position only. Returns an invalid Var when no reference sees
  /// the point (callers substitute a zero constant).
  Var gather_reference_features_op(Tape& t, Var x_world, const std::vector<ReferenceView>& refs,
                                   int* contributing = nullptr) const {
    std::vector<Var> encoded;
    for (const auto& ref : refs) {
      const Pose inv = ref.pose.inverse();
      const Vec3 p_ref_now = inv.apply(t.val(x_world));
      if (!(p_ref_now.z() > kZEps)) continue;
      const Vec2 uv_now = project(p_ref_now, ref.intrinsics);
      if (!feature_in_bounds(*ref.features, uv_now, ref.intrinsics.width, ref.intrinsics.height)) continue;
      Var p_ref = affine3(t, x_world, inv.rotation_matrix(), inv.translation);
      Var uv = project_op(t, p_ref, ref.intrinsics);
      Var feat = sample_feature_op(t, ref.features, uv, ref.intrinsics.width, ref.intrinsics.height);
      Var in = concat(t, {constant(t, ref.view_encoding), feat});
      encoded.push_back(mlp_forward(t, ref_encoder_, in));
    }
    if (contributing) *contributing = static_cast<int>(encoded.size());
    if (encoded.empty()) return Var{};
    Var acc = encoded[0];
    for (std::size_t i = 1; i < encoded.size(); ++i) acc = add(t, acc, encoded[i]);
    return scale(t, acc, 1.0 / static_cast<double>(encoded.size()));
  }

  Var zero_pooled_op(Tape& t) const { return constant(t, Eigen::VectorXd::Zero(cfg_.pooled_dim)); }

  Var eval_color_op(Tape& t, Var gamma_x, Var h, Var pooled) const {
    return mlp_forward(t, color_head_, concat(t, {gamma_x, h, pooled}));
  }

  Var eval_semantic_op(Tape& t, Var gamma_x, Var h, Var pooled) const {
    Var hidden = mlp_forward(t, semantic_trunk_, concat(t, {gamma_x, h, pooled}));
    return linear_rows(t, semantic_row_w_, semantic_row_b_, hidden);
  }

  // --- parameters -----------------------------------------------------------

  /// Every trainable tensor: hash tables, all geometry heads, coarse, color,
  /// semantic trunk + rows, reference encoder. Deterministic order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Tensor* t : grid_.tables()) out.push_back(t);
    for (auto& [id, h] : geometry_heads_)
      for (Tensor* t : h.net.params()) out.push_back(t);
    for (Tensor* t : coarse_head_.params()) out.push_back(t);
    for (Tensor* t : color_head_.params()) out.push_back(t);
    for (Tensor* t : semantic_trunk_.params()) out.push_back(t);
    for (auto& t : semantic_row_w_) out.push_back(&t);
    for (auto& t : semantic_row_b_) out.push_back(&t);
    for (Tensor* t : ref_encoder_.params()) out.push_back(t);
    return out;
  }

  /// Only the tensors created by add_class(class_id): its geometry head and
  /// its semantic output row. Used by the new-class burn-in.
  std::vector<Tensor*> class_parameters(int class_id) {
    std::vector<Tensor*> out;
    for (Tensor* t : head(class_id).net.params()) out.push_back(t);
    const int idx = logit_index(class_id);
    out.push_back(&semantic_row_w_[idx]);
    out.push_back(&semantic_row_b_[idx]);
    return out;
  }

  void zero_grad() {
    for (Tensor* t : parameters()) t->zero_grad();
  }

  std::uint64_t values_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const Tensor* t : const_cast<SceneField*>(this)->parameters())
      h = hash_bytes(t->value.data(), sizeof(double) * t->value.size(), h);
    return h;
  }

  // --- checkpointing ----------------------------------------------------------

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    auto* self = const_cast<SceneField*>(this);
    for (const Tensor* t : self->parameters()) ck.add(*t);
    for (const Tensor* t : image_encoder_.tensors()) ck.add(*t);
    std::string ids;
    for (std::size_t i = 0; i < class_ids_.size(); ++i) {
      if (i) ids += ',';
      ids += std::to_string(class_ids_[i]);
    }
    ck.meta["class_ids"] = ids;
    for (int id : class_ids_) ck.meta["class." + std::to_string(id)] = "geometry.class" + std::to_string(id);
    return ck;
  }

  static SceneField from_checkpoint(const FieldConfig& cfg, std::uint64_t seed, const Checkpoint& ck) {
    SceneField f(cfg, seed);
    const std::string& ids = ck.meta.at("class_ids");
    std::size_t pos = 0;
    while (pos < ids.size()) {
      std::size_t next = ids.find(',', pos);
      if (next == std::string::npos) next = ids.size();
      const int id = std::stoi(ids.substr(pos, next - pos));
      if (!f.has_class(id)) f.add_class(id);
      f.head(id).warming = false;
      pos = next + 1;
    }
    for (Tensor* t : f.parameters()) ck.restore_into(*t);
    for (Tensor* t : f.image_encoder_.tensors()) ck.restore_into(*t);
    return f;
  }

  /// View-conditioning vector for a reference camera: its origin in
  /// normalized scene coordinates and its optical axis mapped to [0,1]^3,
  /// both one-blob encoded.
  ReferenceView make_reference_view(const Pose& pose, const FeatureMap* features, const Intrinsics& K) const {
    ReferenceView rv;
    rv.pose = pose;
    rv.features = features;
    rv.intrinsics = K;
    const Vec3 origin_n = cfg_.bounds.normalize(pose.translation);
    const Vec3 dir = pose.rotation * Vec3(0, 0, 1);
    const Vec3 dir01 = 0.5 * (dir + Vec3::Ones());
    rv.view_encoding.resize(2 * cfg_.oneblob_dim());
    rv.view_encoding.head(cfg_.oneblob_dim()) = oneblob_encode(origin_n, cfg_.oneblob);
    rv.view_encoding.tail(cfg_.oneblob_dim()) = oneblob_encode(dir01, cfg_.oneblob);
    return rv;
  }

 private:
  static constexpr double kZEps = 1e-6;

  FieldConfig cfg_;
  std::uint64_t seed_ = 0;
  HashGrid grid_;
  std::map<int, GeometryHead> geometry_heads_;
  Mlp coarse_head_, color_head_, semantic_trunk_, ref_encoder_;
  ConvEncoder image_encoder_;
  std::vector<Tensor> semantic_row_w_, semantic_row_b_;
  std::vector<int> class_ids_;
  std::map<int, int> logit_index_;

  static Vec3 clamp01(const Vec3& v) { return v.cwiseMax(0.0).cwiseMin(1.0); }

  GeomOut split_geom(const Eigen::VectorXd& raw) const {
    GeomOut out;
    out.latent = raw.head(cfg_.latent_dim);
    out.occ = 1.0 / (1.0 + std::exp(-raw[cfg_.latent_dim]));
    return out;
  }

  GeomVars split_geom_op(Tape& t, Var raw) const {
    GeomVars out;
    out.latent = slice(t, raw, 0, cfg_.latent_dim);
    out.occ = sigmoid(t, slice(t, raw, cfg_.latent_dim, 1));
    return out;
  }

  Eigen::VectorXd appearance_input(const Vec3& x_world, const Eigen::VectorXd& h,
                                   const Eigen::VectorXd& pooled) const {
    Eigen::VectorXd in(cfg_.color_in_dim());
    in.head(cfg_.oneblob_dim()) = oneblob_encode(cfg_.bounds.normalize(x_world), cfg_.oneblob);
    in.segment(cfg_.oneblob_dim(), cfg_.latent_dim) = h;
    in.tail(cfg_.pooled_dim) = pooled;
    return in;
  }
};

}  // namespace semslam
