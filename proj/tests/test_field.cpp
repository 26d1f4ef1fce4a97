#include <catch2/catch_amalgamated.hpp>

#include "field_fixtures.hpp"
#include "helpers.hpp"
#include "semslam/field.hpp"

using namespace semslam;
using semslam::test::fd_tensor;
using semslam::test::gradient_image;
using semslam::test::rel_err;
using semslam::test::tiny_field_config;
using semslam::test::tiny_K;

TEST_CASE("fresh geometry head predicts near-0.5 occupancy", "[field]") {
  SceneField field(tiny_field_config(), 42);
  field.add_class(1);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Vec3 x(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    const auto g = field.eval_geometry(1, x);
    CHECK(g.occ > 0.4);
    CHECK(g.occ < 0.6);
  }
}

TEST_CASE("field evaluation is deterministic", "[field]") {
  SceneField field(tiny_field_config(), 42);
  const Vec3 x(0.3, -0.7, 1.1);
  const auto a = field.eval_geometry(0, x), b = field.eval_geometry(0, x);
  CHECK(a.occ == b.occ);
  CHECK((a.latent - b.latent).norm() == 0.0);
  const auto c = field.eval_coarse(x), d = field.eval_coarse(x);
  CHECK(c.occ == d.occ);
  CHECK((c.latent - d.latent).norm() == 0.0);
}

TEST_CASE("unknown class id raises", "[field]") {
  SceneField field(tiny_field_config(), 42);
  CHECK_THROWS_AS(field.eval_geometry(3, Vec3::Zero()), std::out_of_range);
  CHECK_THROWS_AS(field.logit_index(9), std::out_of_range);
}

TEST_CASE("coarse latent length matches fine latent length", "[field]") {
  SceneField field(tiny_field_config(), 42);
  const auto fine = field.eval_geometry(0, Vec3(0.1, 0.2, 0.3));
  const auto coarse = field.eval_coarse(Vec3(0.1, 0.2, 0.3));
  CHECK(fine.latent.size() == field.config().latent_dim);
  CHECK(coarse.latent.size() == fine.latent.size());
}

TEST_CASE("add_class grows the registry and leaves old heads untouched", "[field]") {
  SceneField field(tiny_field_config(), 42);
  field.add_class(1);
  const int before = field.num_classes();
  const std::uint64_t head0 = hash_bytes(field.head(0).net.weights[0].value.data(),
                                         sizeof(double) * field.head(0).net.weights[0].value.size());
  const Vec3 x(0.2, 0.1, -0.3);
  const Eigen::VectorXd logits_before = field.eval_semantic(x, field.eval_geometry(0, x).latent, PooledFeature{Eigen::VectorXd::Zero(4), 0});

  field.add_class(7);
  CHECK(field.num_classes() == before + 1);
  CHECK(field.head(7).warming);
  CHECK_THROWS_AS(field.add_class(7), std::invalid_argument);

  // existing head parameters bit-identical
  CHECK(hash_bytes(field.head(0).net.weights[0].value.data(),
                   sizeof(double) * field.head(0).net.weights[0].value.size()) == head0);

  // old logits unchanged, new logit exactly zero (zero-initialized row)
  const Eigen::VectorXd logits_after = field.eval_semantic(x, field.eval_geometry(0, x).latent, PooledFeature{Eigen::VectorXd::Zero(4), 0});
  REQUIRE(logits_after.size() == logits_before.size() + 1);
  CHECK((logits_after.head(logits_before.size()) - logits_before).norm() == 0.0);
  CHECK(logits_after[logits_before.size()] == 0.0);
}

TEST_CASE("geometry heads are parameter-isolated per class", "[field]") {
  SceneField field(tiny_field_config(), 42);
  field.add_class(1);
  field.add_class(2);
  const Vec3 x(0.4, -0.6, 0.9);
  const auto before = field.eval_geometry(1, x);
  // perturb every parameter of head 2
  for (Tensor* t : field.head(2).net.params()) t->value += 0.5;
  const auto after = field.eval_geometry(1, x);
  CHECK(after.occ == before.occ);
  CHECK((after.latent - before.latent).norm() == 0.0);
}

namespace {

struct RefFixture {
  Intrinsics K = tiny_K();
  ImageRGB img = gradient_image(32, 24);
  FeatureMap fm;
  SceneField* field = nullptr;

  ReferenceView view(const SceneField& f, const Pose& pose) {
    if (fm.data.empty()) fm = f.image_encoder().encode(img);
    return f.make_reference_view(pose, &fm, K);
  }
};

}  // namespace

TEST_CASE("reference feature pooling", "[field]") {
  SceneField field(tiny_field_config(), 42);
  RefFixture fx;
  Pose cam;  // at origin looking +z
  const Vec3 x(0.05, -0.03, 1.2);

  SECTION("single reference equals its encoded feature vector") {
    const auto rv = fx.view(field, cam);
    const PooledFeature p = field.gather_reference_features(x, {rv});
    REQUIRE(p.contributing_refs == 1);
    // oracle: run the reference encoder directly
    const Vec2 uv = project(cam.inverse().apply(x), fx.K);
    Eigen::VectorXd in(field.config().ref_encoder_in_dim());
    in.head(rv.view_encoding.size()) = rv.view_encoding;
    in.tail(field.config().image_feature_dim) = sample_feature(fx.fm, uv, fx.K.width, fx.K.height);
    CHECK((p.vector - field.ref_encoder().forward(in)).norm() < 1e-14);
  }
  SECTION("two identical references pool to the same vector") {
    const auto rv = fx.view(field, cam);
    const PooledFeature one = field.gather_reference_features(x, {rv});
    const PooledFeature two = field.gather_reference_features(x, {rv, rv});
    CHECK(two.contributing_refs == 2);
    CHECK((one.vector - two.vector).norm() < 1e-14);
  }
  SECTION("point behind every reference camera gives zero vector") {
    const auto rv = fx.view(field, cam);
    const PooledFeature p = field.gather_reference_features(Vec3(0, 0, -1.0), {rv});
    CHECK(p.contributing_refs == 0);
    CHECK(p.vector.isZero());
  }
  SECTION("pooling is permutation invariant") {
    Pose cam2;
    cam2.translation = Vec3(0.3, 0.0, -0.2);
    const auto a = fx.view(field, cam), b = fx.view(field, cam2);
    const PooledFeature ab = field.gather_reference_features(x, {a, b});
    const PooledFeature ba = field.gather_reference_features(x, {b, a});
    CHECK(ab.contributing_refs == 2);
    CHECK((ab.vector - ba.vector).norm() < 1e-14);
  }
  SECTION("tape pooling agrees with plain pooling") {
    Pose cam2;
    cam2.translation = Vec3(0.1, 0.05, -0.1);
    const auto a = fx.view(field, cam), b = fx.view(field, cam2);
    Tape t;
    int n = 0;
    Var pooled = field.gather_reference_features_op(t, constant(t, x), {a, b}, &n);
    const PooledFeature plain = field.gather_reference_features(x, {a, b});
    REQUIRE(n == plain.contributing_refs);
    CHECK((t.val(pooled) - plain.vector).norm() < 1e-13);
  }
}

TEST_CASE("color head output stays in [0,1]^3 and handles zero pooling", "[field]") {
  SceneField field(tiny_field_config(), 42);
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Vec3 x(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    Eigen::VectorXd h(field.config().latent_dim);
    for (int j = 0; j < h.size(); ++j) h[j] = rng.uniform(-3, 3);
    PooledFeature pooled;
    pooled.vector = Eigen::VectorXd::Zero(field.config().pooled_dim);
    if (i % 2) {
      for (int j = 0; j < pooled.vector.size(); ++j) pooled.vector[j] = rng.uniform(-2, 2);
      pooled.contributing_refs = 1;
    }
    const Vec3 c = field.eval_color(x, h, pooled);
    CHECK((c.array() >= 0.0).all());
    CHECK((c.array() <= 1.0).all());
    CHECK(c.allFinite());
  }
}

TEST_CASE("color gradient w.r.t. pooled feature matches finite differences", "[field]") {
  SceneField field(tiny_field_config(), 42);
  Tensor pooled("pooled", {4});
  Rng rng(7);
  pooled.fill_uniform(rng, -1, 1);
  Tensor h("h", {4});
  h.fill_uniform(rng, -1, 1);
  const Vec3 x(0.3, 0.1, 0.8);

  auto build = [&](Tape& t) {
    Var input = field.field_input_op(t, constant(t, x));
    Var gamma = slice(t, input, 0, field.config().oneblob_dim());
    return sum(t, field.eval_color_op(t, gamma, leaf(t, h), leaf(t, pooled)));
  };
  Tape t;
  t.backward(build(t));
  auto eval = [&]() {
    Tape tt;
    return tt.scalar(build(tt));
  };
  for (int i = 0; i < 4; ++i) {
    CHECK(rel_err(pooled.grad[i], fd_tensor(pooled, i, eval)) < 1e-4);
    CHECK(rel_err(h.grad[i], fd_tensor(h, i, eval)) < 1e-4);
  }
}

TEST_CASE("semantic logits length tracks the class registry", "[field]") {
  SceneField field(tiny_field_config(), 42);
  field.add_class(3);
  field.add_class(5);
  const Vec3 x(0.1, 0.1, 0.1);
  const auto g = field.eval_geometry(0, x);
  PooledFeature pooled{Eigen::VectorXd::Zero(4), 0};
  const Eigen::VectorXd s1 = field.eval_semantic(x, g.latent, pooled);
  const Eigen::VectorXd s2 = field.eval_semantic(x, g.latent, pooled);
  CHECK(s1.size() == field.num_classes());
  CHECK((s1 - s2).norm() == 0.0);
  CHECK(field.logit_index(5) == 2);
  CHECK(field.class_at_logit(2) == 5);
}

TEST_CASE("composite gradient through geometry and color heads", "[field]") {
  SceneField field(tiny_field_config(), 42);
  const Vec3 x(0.25, -0.4, 0.65);

  auto build = [&](Tape& t) {
    Var input = field.field_input_op(t, constant(t, x));
    Var gamma = slice(t, input, 0, field.config().oneblob_dim());
    auto g = field.eval_geometry_op(t, 0, input);
    Var color = field.eval_color_op(t, gamma, g.latent, field.zero_pooled_op(t));
    return add(t, sum(t, color), g.occ);
  };
  Tape t;
  t.backward(build(t));
  auto eval = [&]() {
    Tape tt;
    return tt.scalar(build(tt));
  };

  SceneField& f = field;
  // spot-check gradients in the geometry head, color head, and hash tables
  for (Tensor* p : {&f.head(0).net.weights[0], &f.head(0).net.weights[2], &f.grid().table(0), &f.grid().table(1)}) {
    int checked = 0;
    for (int i = 0; i < p->value.size() && checked < 6; ++i) {
      if (p->grad[i] != 0.0) {
        CHECK(rel_err(p->grad[i], fd_tensor(*p, i, eval)) < 1e-4);
        ++checked;
      }
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("checkpoint round trip restores every parameter", "[field]") {
  SceneField field(tiny_field_config(), 42);
  field.add_class(1);
  field.add_class(4);
  // make values distinctive
  Rng rng(9);
  for (Tensor* t : field.parameters()) t->value += 0.01 * rng.uniform();
  const std::uint64_t h0 = field.values_hash();
  const Checkpoint ck = field.to_checkpoint();

  const std::string path = "/tmp/semslam_test_field.ckpt";
  save_checkpoint(ck, path);
  const Checkpoint loaded = load_checkpoint(path);
  SceneField restored = SceneField::from_checkpoint(tiny_field_config(), 42, loaded);
  CHECK(restored.values_hash() == h0);
  CHECK(restored.num_classes() == field.num_classes());
  CHECK(restored.class_ids() == field.class_ids());
  CHECK_FALSE(restored.head(4).warming);
  // frozen encoder restored too
  CHECK(restored.image_encoder().weights_hash() == field.image_encoder().weights_hash());
}
