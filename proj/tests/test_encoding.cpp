#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "helpers.hpp"
#include "semslam/encoding.hpp"

using namespace semslam;
using semslam::test::fd_tensor;
using semslam::test::rel_err;

namespace {

HashGridConfig small_grid_cfg() {
  HashGridConfig cfg;
  cfg.levels = 4;
  cfg.base_resolution = 4;
  cfg.max_resolution = 32;
  cfg.features_per_level = 2;
  cfg.table_size = 1 << 12;
  return cfg;
}

}  // namespace

TEST_CASE("oneblob peak and symmetry at 0.5", "[encoding]") {
  OneBlobConfig cfg;
  const Eigen::VectorXd e = oneblob_encode(Vec3(0.5, 0.5, 0.5), cfg);
  REQUIRE(e.size() == 48);
  // bins 7 and 8 straddle 0.5 and hold the peak mass
  int argmax0 = 0;
  e.segment(0, 16).maxCoeff(&argmax0);
  CHECK((argmax0 == 7 || argmax0 == 8));
  for (int b = 0; b < 16; ++b) CHECK(e[b] == Catch::Approx(e[15 - b]).margin(1e-12));
  CHECK(e.segment(0, 16).sum() == Catch::Approx(1.0));
}

TEST_CASE("oneblob translation equivariance", "[encoding]") {
  OneBlobConfig cfg;
  const double x = 0.45, shifted = x + 1.0 / cfg.bins_per_dim;
  const Eigen::VectorXd a = oneblob_encode(Vec3(x, x, x), cfg);
  const Eigen::VectorXd b = oneblob_encode(Vec3(shifted, shifted, shifted), cfg);
  for (int bin = 1; bin < 15; ++bin) CHECK(std::abs(b[bin + 1] - a[bin]) < 1e-6);
}

TEST_CASE("oneblob continuity", "[encoding]") {
  OneBlobConfig cfg;
  const Eigen::VectorXd a = oneblob_encode(Vec3(0.3, 0.6, 0.9), cfg);
  const Eigen::VectorXd b = oneblob_encode(Vec3(0.3 + 1e-9, 0.6 - 1e-9, 0.9 + 1e-9), cfg);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("oneblob clamps out-of-bounds input and counts it", "[encoding]") {
  OneBlobConfig cfg;
  const long before = oneblob_clamp_count().load();
  const Eigen::VectorXd a = oneblob_encode(Vec3(-0.2, 0.5, 1.3), cfg);
  const Eigen::VectorXd b = oneblob_encode(Vec3(0.0, 0.5, 1.0), cfg);
  CHECK((a - b).norm() == 0.0);
  CHECK(oneblob_clamp_count().load() == before + 2);
}

TEST_CASE("oneblob op gradient matches finite differences", "[encoding]") {
  OneBlobConfig cfg;
  Tensor x("x", {3});
  x.value << 0.31, 0.62, 0.87;
  Eigen::VectorXd coeff(48);
  Rng rng(3);
  for (int i = 0; i < 48; ++i) coeff[i] = rng.uniform(-1, 1);
  auto build = [&](Tape& t) { return dot(t, oneblob_op(t, leaf(t, x), cfg), constant(t, coeff)); };
  Tape t;
  t.backward(build(t));
  auto eval = [&]() {
    Tape tt;
    return tt.scalar(build(tt));
  };
  for (int i = 0; i < 3; ++i) CHECK(rel_err(x.grad[i], fd_tensor(x, i, eval)) < 1e-4);
}

TEST_CASE("hash index determinism and dense rule", "[encoding]") {
  CHECK(hash_index(33, 5, 7, 9, 1 << 14) == hash_index(33, 5, 7, 9, 1 << 14));
  // dense level: res^3 <= table
  CHECK(hash_index(8, 3, 4, 5, 1 << 12) == 3 + 4 * 8 + 5 * 64);
  CHECK(hash_index(8, 0, 0, 0, 1 << 12) == 0);
}

TEST_CASE("hash collision rate matches the uniform-hash estimate", "[encoding]") {
  const int lattice = 33;  // 35937 cells, forced through the hash path
  const int T = 1 << 14;
  std::set<std::uint32_t> seen;
  for (int x = 0; x < lattice; ++x)
    for (int y = 0; y < lattice; ++y)
      for (int z = 0; z < lattice; ++z) seen.insert(hash_index(lattice, x, y, z, T));
  const double cells = static_cast<double>(lattice) * lattice * lattice;
  const double rate = 1.0 - static_cast<double>(seen.size()) / cells;
  const double expected = 1.0 - T * (1.0 - std::pow(1.0 - 1.0 / T, cells)) / cells;
  CHECK(rate == Catch::Approx(expected).epsilon(0.2));
}

TEST_CASE("hash grid corner and center interpolation", "[encoding]") {
  HashGrid grid(small_grid_cfg(), 7);
  const int l = 0;  // resolution 4, dense
  const int res = grid.level_resolution(l);
  REQUIRE(res == 4);

  SECTION("exact corner returns that corner's feature") {
    const Vec3 x(1.0 / res, 2.0 / res, 3.0 / res);
    const Eigen::VectorXd q = grid.query(x);
    const std::uint32_t idx = hash_index(res + 1, 1, 2, 3, grid.config().table_size);
    for (int f = 0; f < 2; ++f) CHECK(q[l * 2 + f] == Catch::Approx(grid.table(l).value[idx * 2 + f]).margin(1e-15));
  }
  SECTION("cell center is the mean of 8 corners") {
    const Vec3 x(0.5 / res, 0.5 / res, 0.5 / res);
    const Eigen::VectorXd q = grid.query(x);
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (int c = 0; c < 8; ++c) {
      const std::uint32_t idx = hash_index(res + 1, c & 1, (c >> 1) & 1, (c >> 2) & 1, grid.config().table_size);
      mean += Eigen::Vector2d(grid.table(l).value[idx * 2], grid.table(l).value[idx * 2 + 1]);
    }
    mean /= 8.0;
    CHECK(q[0] == Catch::Approx(mean[0]).margin(1e-15));
    CHECK(q[1] == Catch::Approx(mean[1]).margin(1e-15));
  }
}

TEST_CASE("hash grid determinism and shape", "[encoding]") {
  HashGrid a(small_grid_cfg(), 7), b(small_grid_cfg(), 7);
  const Vec3 x(0.37, 0.52, 0.81);
  CHECK((a.query(x) - b.query(x)).norm() == 0.0);
  CHECK(a.query(x).size() == a.feature_dim());
  HashGrid c(small_grid_cfg(), 8);
  CHECK((a.query(x) - c.query(x)).norm() > 0.0);  // different seed, different tables
}

TEST_CASE("hash grid continuity across cell boundaries", "[encoding]") {
  HashGrid grid(small_grid_cfg(), 21);
  Rng rng(22);
  for (int i = 0; i < 30; ++i) {
    // approach an interior face of the coarsest level from both sides
    const double face = 2.0 / 4.0;
    const Vec3 base(face, rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
    Vec3 lo = base, hi = base;
    lo.x() -= 1e-9;
    hi.x() += 1e-9;
    CHECK((grid.query(lo) - grid.query(hi)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("hash grid gradient w.r.t. table entries equals trilinear weight", "[encoding]") {
  HashGridConfig cfg = small_grid_cfg();
  cfg.levels = 2;
  HashGrid grid(cfg, 31);
  Tensor x("x", {3});
  x.value << 0.33, 0.71, 0.46;

  auto build = [&](Tape& t) { return sum(t, grid.query_op(t, leaf(t, x))); };
  Tape t;
  t.backward(build(t));
  auto eval = [&]() {
    Tape tt;
    return tt.scalar(build(tt));
  };

  int checked = 0;
  for (int l = 0; l < cfg.levels; ++l) {
    Tensor& table = grid.table(l);
    for (int i = 0; i < table.value.size() && checked < 24; ++i) {
      if (table.grad[i] != 0.0) {
        CHECK(rel_err(table.grad[i], fd_tensor(table, i, eval, 1e-5)) < 1e-5);
        ++checked;
      }
    }
  }
  CHECK(checked >= 16);

  // and w.r.t. the query position
  for (int i = 0; i < 3; ++i) CHECK(rel_err(x.grad[i], fd_tensor(x, i, eval)) < 1e-4);
}

TEST_CASE("hash grid fails fast on NaN tables", "[encoding]") {
  HashGrid grid(small_grid_cfg(), 5);
  grid.table(1).value[100] = std::numeric_limits<double>::quiet_NaN();
  bool threw = false;
  // probe points until one touches the poisoned entry
  Rng rng(6);
  for (int i = 0; i < 20000 && !threw; ++i) {
    try {
      grid.query(Vec3(rng.uniform(), rng.uniform(), rng.uniform()));
    } catch (const std::runtime_error&) {
      threw = true;
    }
  }
  CHECK(threw);
}

TEST_CASE("plain query and tape query agree", "[encoding]") {
  HashGrid grid(small_grid_cfg(), 77);
  Rng rng(78);
  for (int i = 0; i < 20; ++i) {
    const Vec3 x(rng.uniform(), rng.uniform(), rng.uniform());
    Tape t;
    Var q = grid.query_op(t, constant(t, x));
    CHECK((t.val(q) - grid.query(x)).norm() < 1e-14);
  }
}
