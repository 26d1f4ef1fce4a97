#include <catch2/catch_amalgamated.hpp>

#include "semslam/geometry.hpp"
#include "semslam/util.hpp"

using namespace semslam;

namespace {

Intrinsics test_K() {
  Intrinsics K;
  K.fx = K.fy = 100.0;
  K.cx = K.cy = 50.0;
  K.width = 100;
  K.height = 100;
  return K;
}

Pose random_pose(Rng& rng) {
  Pose p;
  Vec3 axis(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  p.rotation = Eigen::Quaterniond(so3_exp(axis));
  p.rotation.normalize();
  p.translation = Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
  return p;
}

}  // namespace

TEST_CASE("project on the optical axis", "[geometry]") {
  const Vec2 uv = project(Vec3(0, 0, 1), test_K());
  CHECK(uv.x() == Catch::Approx(50.0));
  CHECK(uv.y() == Catch::Approx(50.0));
}

TEST_CASE("project analytic pixel", "[geometry]") {
  const Vec2 uv = project(Vec3(1, 0, 2), test_K());
  CHECK(uv.x() == Catch::Approx(100.0));  // fx*x/z + cx
}

TEST_CASE("project rejects points behind the camera", "[geometry]") {
  CHECK_THROWS_AS(project(Vec3(0, 0, -1), test_K()), std::domain_error);
  CHECK_THROWS_AS(project(Vec3(0, 0, 0), test_K()), std::domain_error);
}

TEST_CASE("backproject trivial cases", "[geometry]") {
  const Intrinsics K = test_K();
  CHECK((backproject(Vec2(K.cx, K.cy), 2.0, K) - Vec3(0, 0, 2)).norm() < 1e-12);
  CHECK((backproject(Vec2(K.cx + K.fx, K.cy), 1.0, K) - Vec3(1, 0, 1)).norm() < 1e-12);
  CHECK_THROWS_AS(backproject(Vec2(10, 10), 0.0, K), std::domain_error);
}

TEST_CASE("project/backproject round-trips", "[geometry]") {
  const Intrinsics K = test_K();
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const Vec2 uv(rng.uniform(0, K.width - 1), rng.uniform(0, K.height - 1));
    const double depth = rng.uniform(0.1, 10.0);
    const Vec3 p = backproject(uv, depth, K);
    const Vec2 uv2 = project(p, K);
    CHECK((uv2 - uv).norm() < 1e-9);

    const Vec3 q(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 5.0));
    const Vec3 q2 = backproject(project(q, K), q.z(), K);
    CHECK((q2 - q).norm() < 1e-9);
  }
}

TEST_CASE("transform_point basics and composition law", "[geometry]") {
  CHECK((transform_point(Pose::identity(), Vec3(1, 2, 3)) - Vec3(1, 2, 3)).norm() == 0.0);

  Pose shift;
  shift.translation = Vec3(1, 0, 0);
  CHECK((transform_point(shift, Vec3::Zero()) - Vec3(1, 0, 0)).norm() == 0.0);

  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec3 lhs = transform_point(a, transform_point(b, p));
    const Vec3 rhs = transform_point(compose(a, b), p);
    CHECK((lhs - rhs).norm() < 1e-9);
    // matrix-product oracle
    const Vec3 oracle = a.rotation_matrix() * (b.rotation_matrix() * p + b.translation) + a.translation;
    CHECK((lhs - oracle).norm() < 1e-9);
  }
}

TEST_CASE("pose inverse and quaternion norm invariants", "[geometry]") {
  Rng rng(13);
  for (int i = 0; i < 20; ++i) {
    const Pose p = random_pose(rng);
    const Pose id = compose(p, p.inverse());
    CHECK(std::abs(id.rotation.norm() - 1.0) < 1e-9);
    CHECK(id.translation.norm() < 1e-9);
    CHECK(std::abs(Eigen::Quaterniond::Identity().angularDistance(id.rotation)) < 1e-9);
  }
}

TEST_CASE("pose delta exp/log round trip", "[geometry]") {
  CHECK((PoseDelta{}.exp().translation).norm() == 0.0);
  CHECK(PoseDelta{}.exp().rotation.isApprox(Eigen::Quaterniond::Identity()));

  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    PoseDelta d;
    Vec3 w(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    w *= rng.uniform(0, 3.0) / w.norm();  // |angle| < pi
    if (w.norm() >= M_PI) w *= 3.1 / 3.2;
    d.twist << w, Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const PoseDelta back = PoseDelta::log(d.exp());
    CHECK((back.twist - d.twist).norm() < 1e-9);
  }
}

TEST_CASE("apply_delta trivial cases", "[geometry]") {
  Rng rng(19);
  const Pose p = random_pose(rng);

  const Pose same = apply_delta(p, PoseDelta{});
  CHECK(same.rotation.isApprox(p.rotation, 1e-12));
  CHECK((same.translation - p.translation).norm() < 1e-12);

  PoseDelta dz;
  dz.twist << 0, 0, 0, 0, 0, 1e-3;
  const Pose shifted = apply_delta(p, dz);
  CHECK((shifted.translation - (p.translation + Vec3(0, 0, 1e-3))).norm() < 1e-12);
  CHECK(shifted.rotation.isApprox(p.rotation, 1e-12));
}

TEST_CASE("so3 rotate jacobian matches finite differences", "[geometry]") {
  Rng rng(23);
  for (int i = 0; i < 30; ++i) {
    Vec3 w(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (i == 0) w.setZero();
    const Vec3 p(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Mat3 J = so3_rotate_jacobian(w, so3_exp(w) * p);
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 wp = w, wm = w;
      wp[k] += h;
      wm[k] -= h;
      const Vec3 fd = (so3_exp(wp) * p - so3_exp(wm) * p) / (2 * h);
      CHECK((J.col(k) - fd).norm() < 1e-6);
    }
  }
}

TEST_CASE("constant speed guess", "[geometry]") {
  Rng rng(29);
  const Pose p = random_pose(rng);
  const Pose same = constant_speed_guess(p, p);
  CHECK(same.rotation.isApprox(p.rotation, 1e-9));
  CHECK((same.translation - p.translation).norm() < 1e-9);

  Pose a, b;
  a.translation = Vec3(1, 0, 0);
  b.translation = Vec3(0, 0, 0);
  const Pose g = constant_speed_guess(a, b);
  CHECK((g.translation - Vec3(2, 0, 0)).norm() < 1e-12);

  // smooth trajectory: prediction error is below the actual step size
  for (int i = 0; i < 10; ++i) {
    const double step = 0.1;
    auto traj_pose = [&](double s) {
      Pose q;
      q.translation = Vec3(std::cos(s), std::sin(s), 0.1 * s);
      q.rotation = Eigen::Quaterniond(so3_exp(Vec3(0, 0, s)));
      return q;
    };
    const double t0 = rng.uniform(0, 3);
    const Pose prev2 = traj_pose(t0), prev = traj_pose(t0 + step), truth = traj_pose(t0 + 2 * step);
    const Pose guess = constant_speed_guess(prev, prev2);
    const double err = (guess.translation - truth.translation).norm();
    const double actual_step = (truth.translation - prev.translation).norm();
    CHECK(err < actual_step);
  }
}
