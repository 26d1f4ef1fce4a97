#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "semslam/tape.hpp"
#include "semslam/tensor.hpp"
#include "semslam/util.hpp"

namespace semslam {

// --- one-blob encoding --------------------------------------------------------

struct OneBlobConfig {
  int bins_per_dim = 16;
  double kernel_sigma = 1.0 / 16.0;  // fraction of the [0,1] domain

  void validate() const {
    if (bins_per_dim < 2) throw std::invalid_argument("OneBlobConfig: bins_per_dim must be >= 2");
    if (!(kernel_sigma > 0)) throw std::invalid_argument("OneBlobConfig: kernel_sigma must be positive");
  }
};

namespace detail {

/// Gaussian profile over bin centers, normalized to sum 1 per dimension.
/// Optionally returns d(out)/dx.
inline void oneblob_dim(double x, const OneBlobConfig& cfg, double* out, double* dout) {
  const int n = cfg.bins_per_dim;
  const double inv2s2 = 1.0 / (2.0 * cfg.kernel_sigma * cfg.kernel_sigma);
  double s = 0, ds = 0;
  for (int b = 0; b < n; ++b) {
    const double c = (b + 0.5) / n;
    const double g = std::exp(-(c - x) * (c - x) * inv2s2);
    out[b] = g;
    s += g;
    if (dout) {
      dout[b] = g * 2.0 * (c - x) * inv2s2;  // dg/dx
      ds += dout[b];
    }
  }
  const double inv_s = 1.0 / s;
  for (int b = 0; b < n; ++b) {
    if (dout) dout[b] = (dout[b] * s - out[b] * ds) * inv_s * inv_s;
    out[b] *= inv_s;
  }
}

}  // namespace detail

/// Counts inputs that had to be clamped into [0,1] before encoding.
inline std::atomic<long>& oneblob_clamp_count() {
  static std::atomic<long> count{0};
  return count;
}

inline Eigen::VectorXd oneblob_encode(const Vec3& x, const OneBlobConfig& cfg) {
  const int n = cfg.bins_per_dim;
  Eigen::VectorXd out(3 * n);
  for (int d = 0; d < 3; ++d) {
    double xi = x[d];
    if (xi < 0.0 || xi > 1.0) {
      xi = std::min(1.0, std::max(0.0, xi));
      oneblob_clamp_count().fetch_add(1, std::memory_order_relaxed);
    }
    detail::oneblob_dim(xi, cfg, out.data() + d * n, nullptr);
  }
  return out;
}

/// Differentiable w.r.t. x (gradient is zero on clamped dimensions).
inline Var oneblob_op(Tape& t, Var x, const OneBlobConfig& cfg) {
  const int n = cfg.bins_per_dim;
  const Vec3 xv = t.val(x);
  Eigen::VectorXd value(3 * n);
  auto dvalue = std::make_shared<Eigen::VectorXd>(3 * n);
  Eigen::Vector3d clamped = Eigen::Vector3d::Ones();
  for (int d = 0; d < 3; ++d) {
    double xi = xv[d];
    if (xi < 0.0 || xi > 1.0) {
      xi = std::min(1.0, std::max(0.0, xi));
      clamped[d] = 0.0;
      oneblob_clamp_count().fetch_add(1, std::memory_order_relaxed);
    }
    detail::oneblob_dim(xi, cfg, value.data() + d * n, dvalue->data() + d * n);
  }
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(value), [x, dvalue, clamped, n, out](Tape& tp) {
    const auto& g = tp.grad(out);
    auto& gx = tp.grad(x);
    for (int d = 0; d < 3; ++d) {
      double acc = 0;
      for (int b = 0; b < n; ++b) acc += g[d * n + b] * (*dvalue)[d * n + b];
      gx[d] += acc * clamped[d];
    }
  });
}

// --- multiresolution hash grid --------------------------------------------------

struct HashGridConfig {
  int levels = 16;
  int base_resolution = 16;   // cells per axis, coarsest level
  int max_resolution = 2048;  // cells per axis, finest level
  int features_per_level = 2;
  int table_size = 1 << 15;  // entries per level, power of two

  void validate() const {
    if (levels < 1) throw std::invalid_argument("HashGridConfig: levels >= 1 required");
    if (base_resolution < 1 || max_resolution < base_resolution)
      throw std::invalid_argument("HashGridConfig: bad resolution range");
    if (table_size <= 0 || (table_size & (table_size - 1)) != 0)
      throw std::invalid_argument("HashGridConfig: table_size must be a power of two");
  }
};

/// Spatial-hash index of a lattice vertex. Levels whose lattice fits the
/// table use dense indexing (exact, collision-free).
inline std::uint32_t hash_index(int level_resolution, int ix, int iy, int iz, int table_size) {
  const std::int64_t res = level_resolution;
  if (res * res * res <= table_size)
    return static_cast<std::uint32_t>(ix + iy * res + iz * res * res);
  constexpr std::uint32_t p1 = 73856093u, p2 = 19349663u, p3 = 83492791u;
  const std::uint32_t h = (static_cast<std::uint32_t>(ix) * p1) ^ (static_cast<std::uint32_t>(iy) * p2) ^
                          (static_cast<std::uint32_t>(iz) * p3);
  return h & static_cast<std::uint32_t>(table_size - 1);
}

class HashGrid {
 public:
  HashGrid() = default;
  HashGrid(const HashGridConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    resolutions_.resize(cfg.levels);
    const double growth =
        cfg.levels > 1 ? std::exp(std::log(static_cast<double>(cfg.max_resolution) / cfg.base_resolution) /
                                  (cfg.levels - 1))
                       : 1.0;
    Rng rng(mix_seed(seed, 0x9a5d));
    for (int l = 0; l < cfg.levels; ++l) {
      resolutions_[l] = static_cast<int>(std::round(cfg.base_resolution * std::pow(growth, l)));
      Tensor table("hash_grid.level" + std::to_string(l), {cfg.table_size, cfg.features_per_level});
      table.fill_uniform(rng, -1e-4, 1e-4);
      tables_.push_back(std::move(table));
    }
  }

  const HashGridConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.levels * cfg_.features_per_level; }
  int level_resolution(int l) const { return resolutions_[l]; }
  std::vector<Tensor*> tables() {
    std::vector<Tensor*> out;
    for (auto& t : tables_) out.push_back(&t);
    return out;
  }
  std::vector<const Tensor*> tables() const {
    std::vector<const Tensor*> out;
    for (auto& t : tables_) out.push_back(&t);
    return out;
  }
  Tensor& table(int l) { return tables_[l]; }
  const Tensor& table(int l) const { return tables_[l]; }

  /// Trilinear interpolation per level, concatenated. x in [0,1]^3.
  Eigen::VectorXd query(const Vec3& x) const {
    Eigen::VectorXd out(feature_dim());
    for (int l = 0; l < cfg_.levels; ++l) level_query(l, x, out.data() + l * cfg_.features_per_level * 1, nullptr);
    if (!out.allFinite()) throw std::runtime_error("HashGrid: non-finite feature (NaN in tables?)");
    return out;
  }

  Var query_op(Tape& t, Var x) const {
    const Vec3 xv = t.val(x);
    const int F = cfg_.features_per_level;
    Eigen::VectorXd value(feature_dim());
    // d(feature)/d(x), 3 columns
    auto dx = std::make_shared<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(feature_dim(), 3));
    auto corners = std::make_shared<std::vector<CornerSet>>(cfg_.levels);
    for (int l = 0; l < cfg_.levels; ++l)
      (*corners)[l] = level_query(l, xv, value.data() + l * F, dx.get(), l * F);
    if (!value.allFinite()) throw std::runtime_error("HashGrid: non-finite feature (NaN in tables?)");
    const HashGrid* self = this;
    Var out{static_cast<int>(t.size())};
    return t.push(std::move(value), [self, x, dx, corners, F, out](Tape& tp) {
      const auto& g = tp.grad(out);
      tp.grad(x) += (dx->transpose() * g).eval();
      for (int l = 0; l < self->cfg_.levels; ++l) {
        auto& table = const_cast<Tensor&>(self->tables_[l]);
        if (!table.requires_grad) continue;
        const CornerSet& cs = (*corners)[l];
        for (int c = 0; c < 8; ++c) {
          const double w = cs.weight[c];
          double* gr = table.grad.data() + static_cast<std::size_t>(cs.index[c]) * F;
          for (int f = 0; f < F; ++f) gr[f] += w * g[l * F + f];
        }
      }
    });
  }

 private:
  struct CornerSet {
    std::uint32_t index[8];
    double weight[8];
  };

  HashGridConfig cfg_;
  std::vector<int> resolutions_;
  std::vector<Tensor> tables_;

  /// Writes F interpolated features; optionally accumulates d(feature)/dx
  /// rows into dx starting at row_off.
  CornerSet level_query(int l, const Vec3& x, double* out, Eigen::MatrixXd* dx, int row_off = 0) const {
    const int res = resolutions_[l];
    const int F = cfg_.features_per_level;
    const int lattice = res + 1;
    int cell[3];
    double f[3];
    double dscale[3];  // d(pos)/dx, zero where the position is clamped
    for (int d = 0; d < 3; ++d) {
      const double pos = std::min(1.0, std::max(0.0, x[d])) * res;
      cell[d] = std::min(static_cast<int>(pos), res - 1);
      f[d] = pos - cell[d];
      dscale[d] = (x[d] >= 0.0 && x[d] <= 1.0) ? static_cast<double>(res) : 0.0;
    }
    CornerSet cs;
    for (int fi = 0; fi < F; ++fi) out[fi] = 0.0;
    const double* tv = tables_[l].value.data();
    for (int c = 0; c < 8; ++c) {
      const int ox = c & 1, oy = (c >> 1) & 1, oz = (c >> 2) & 1;
      const double wx = ox ? f[0] : 1.0 - f[0];
      const double wy = oy ? f[1] : 1.0 - f[1];
      const double wz = oz ? f[2] : 1.0 - f[2];
      const double w = wx * wy * wz;
      const std::uint32_t idx = hash_index(lattice, cell[0] + ox, cell[1] + oy, cell[2] + oz, cfg_.table_size);
      cs.index[c] = idx;
      cs.weight[c] = w;
      const double* feat = tv + static_cast<std::size_t>(idx) * F;
      for (int fi = 0; fi < F; ++fi) out[fi] += w * feat[fi];
      if (dx) {
        // d(w)/dx per axis, chain through pos = x*res
        const double dwx = (ox ? 1.0 : -1.0) * wy * wz * dscale[0];
        const double dwy = (oy ? 1.0 : -1.0) * wx * wz * dscale[1];
        const double dwz = (oz ? 1.0 : -1.0) * wx * wy * dscale[2];
        for (int fi = 0; fi < F; ++fi) {
          (*dx)(row_off + fi, 0) += dwx * feat[fi];
          (*dx)(row_off + fi, 1) += dwy * feat[fi];
          (*dx)(row_off + fi, 2) += dwz * feat[fi];
        }
      }
    }
    return cs;
  }
};

}  // namespace semslam
