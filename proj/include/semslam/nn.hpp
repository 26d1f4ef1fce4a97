#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "semslam/image.hpp"
#include "semslam/tape.hpp"
#include "semslam/tensor.hpp"
#include "semslam/util.hpp"

namespace semslam {

enum class Activation { Linear, Sigmoid, Relu };

inline Eigen::VectorXd apply_activation(Activation a, Eigen::VectorXd v) {
  switch (a) {
    case Activation::Linear:
      return v;
    case Activation::Sigmoid:
      return v.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    case Activation::Relu:
      return v.cwiseMax(0.0);
  }
  return v;
}

/// Fully connected net: ReLU between layers, configurable output activation.
struct Mlp {
  std::vector<Tensor> weights;  // [out x in] each
  std::vector<Tensor> biases;
  Activation out_activation = Activation::Linear;

  int in_dim() const { return weights.front().cols(); }
  int out_dim() const { return weights.back().rows(); }

  static Mlp make(const std::string& name, int in, int hidden, int n_hidden, int out, Activation act,
                  std::uint64_t seed) {
    Mlp net;
    net.out_activation = act;
    Rng rng(seed);
    std::vector<int> dims;
    dims.push_back(in);
    for (int i = 0; i < n_hidden; ++i) dims.push_back(hidden);
    dims.push_back(out);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      Tensor w(name + ".w" + std::to_string(l), {dims[l + 1], dims[l]});
      // fan-in scaling; the output layer starts small so fresh heads predict
      // near-neutral values (occupancy ~0.5 through the sigmoid)
      const double bound = std::sqrt(6.0 / dims[l]) * (l + 2 == dims.size() ? 0.1 : 1.0);
      w.fill_uniform(rng, -bound, bound);
      Tensor b(name + ".b" + std::to_string(l), {dims[l + 1]});
      net.weights.push_back(std::move(w));
      net.biases.push_back(std::move(b));
    }
    return net;
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& input) const {
    Eigen::VectorXd x = input;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      x = weights[l].as_matrix() * x + biases[l].value.matrix();
      if (l + 1 < weights.size()) x = x.cwiseMax(0.0);
    }
    return apply_activation(out_activation, std::move(x));
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (auto& w : weights) out.push_back(&w);
    for (auto& b : biases) out.push_back(&b);
    return out;
  }
  std::vector<const Tensor*> params() const {
    std::vector<const Tensor*> out;
    for (auto& w : weights) out.push_back(&w);
    for (auto& b : biases) out.push_back(&b);
    return out;
  }
};

/// Whole-net forward recorded as one tape node; layer activations are kept
/// inside the closure for the backward pass.
inline Var mlp_forward(Tape& t, const Mlp& net, Var input) {
  if (t.dim(input) != net.in_dim()) throw std::runtime_error("mlp_forward: input size mismatch");
  const std::size_t nl = net.weights.size();
  auto acts = std::make_shared<std::vector<Eigen::VectorXd>>();  // input + post-relu per layer
  acts->reserve(nl);
  Eigen::VectorXd x = t.val(input);
  Eigen::VectorXd pre_out;
  for (std::size_t l = 0; l < nl; ++l) {
    acts->push_back(x);
    x = net.weights[l].as_matrix() * x + net.biases[l].value.matrix();
    if (l + 1 < nl) {
      x = x.cwiseMax(0.0);
    } else {
      pre_out = x;
      x = apply_activation(net.out_activation, std::move(x));
    }
  }
  const Mlp* netp = &net;
  Var out{static_cast<int>(t.size())};
  return t.push(x, [netp, input, acts, pre_out, out](Tape& tp) {
    const std::size_t n = netp->weights.size();
    Eigen::VectorXd g = tp.grad(out);
    switch (netp->out_activation) {
      case Activation::Linear:
        break;
      case Activation::Sigmoid: {
        const Eigen::VectorXd s = tp.val(out);
        g = g.cwiseProduct(s.cwiseProduct(Eigen::VectorXd::Ones(s.size()) - s));
        break;
      }
      case Activation::Relu:
        for (int i = 0; i < g.size(); ++i)
          if (pre_out[i] <= 0) g[i] = 0;
        break;
    }
    for (std::size_t li = n; li-- > 0;) {
      auto& w = const_cast<Tensor&>(netp->weights[li]);
      auto& b = const_cast<Tensor&>(netp->biases[li]);
      const Eigen::VectorXd& a = (*acts)[li];
      if (w.requires_grad) {
        w.grad_matrix() += g * a.transpose();
        b.grad += g.array();
      }
      Eigen::VectorXd gin = w.as_matrix().transpose() * g;
      if (li > 0) {
        // relu gate of the previous layer; its post-activation is acts[li]
        for (int i = 0; i < gin.size(); ++i)
          if (a[i] <= 0) gin[i] = 0;
        g = std::move(gin);
      } else {
        tp.grad(input) += gin;
      }
    }
  });
}

/// Independent per-class output rows applied to a shared hidden vector:
/// logit_k = w_k . h + b_k. Rows can be added without touching old ones.
inline Var linear_rows(Tape& t, const std::vector<Tensor>& row_w, const std::vector<Tensor>& row_b, Var h) {
  const int k = static_cast<int>(row_w.size());
  Eigen::VectorXd logits(k);
  const Eigen::VectorXd& hv = t.val(h);
  for (int i = 0; i < k; ++i) logits[i] = row_w[i].value.matrix().dot(hv) + row_b[i].value[0];
  const auto* rw = &row_w;
  const auto* rb = &row_b;
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(logits), [rw, rb, h, out](Tape& tp) {
    const auto& g = tp.grad(out);
    const Eigen::VectorXd& hv = tp.val(h);
    auto& gh = tp.grad(h);
    for (std::size_t i = 0; i < rw->size(); ++i) {
      auto& w = const_cast<Tensor&>((*rw)[i]);
      if (w.requires_grad) {
        w.grad += g[i] * hv.array();
        const_cast<Tensor&>((*rb)[i]).grad[0] += g[i];
      }
      gh += g[i] * w.value.matrix();
    }
  });
}

inline Eigen::VectorXd linear_rows_plain(const std::vector<Tensor>& row_w, const std::vector<Tensor>& row_b,
                                         const Eigen::VectorXd& h) {
  Eigen::VectorXd logits(row_w.size());
  for (std::size_t i = 0; i < row_w.size(); ++i) logits[i] = row_w[i].value.matrix().dot(h) + row_b[i].value[0];
  return logits;
}

// --- optimizer ---------------------------------------------------------------

struct ParamGroup {
  std::vector<Tensor*> params;
  double lr = 1e-3;
};

/// Adam with bias correction; per-tensor moment state so groups may change
/// between calls. A non-finite gradient skips that tensor's step.
class AdamOptimizer {
 public:
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
  int skipped_steps = 0;

  void step(const std::vector<ParamGroup>& groups) {
    for (const auto& g : groups) {
      for (Tensor* p : g.params) {
        if (!p->requires_grad) continue;
        if (!p->grad.isFinite().all()) {
          ++skipped_steps;
          continue;
        }
        State& s = state_[p];
        if (s.m.size() != p->value.size()) {
          s.m = Eigen::ArrayXd::Zero(p->value.size());
          s.v = Eigen::ArrayXd::Zero(p->value.size());
          s.t = 0;
        }
        s.t += 1;
        s.m = beta1 * s.m + (1.0 - beta1) * p->grad;
        s.v = beta2 * s.v + (1.0 - beta2) * p->grad.square();
        const double mc = 1.0 - std::pow(beta1, s.t);
        const double vc = 1.0 - std::pow(beta2, s.t);
        p->value -= g.lr * (s.m / mc) / ((s.v / vc).sqrt() + eps);
      }
    }
  }

  static void zero_grad(const std::vector<ParamGroup>& groups) {
    for (const auto& g : groups)
      for (Tensor* p : g.params) p->zero_grad();
  }

  void reset() { state_.clear(); }

 private:
  struct State {
    Eigen::ArrayXd m, v;
    long t = 0;
  };
  std::map<Tensor*, State> state_;
};

// --- frozen image feature encoder ---------------------------------------------

struct FeatureMap {
  int width = 0, height = 0, channels = 0;
  std::vector<double> data;  // ((y*width + x)*channels + c)

  Eigen::VectorXd texel(int x, int y) const {
    return Eigen::Map<const Eigen::VectorXd>(data.data() + (static_cast<std::size_t>(y) * width + x) * channels,
                                             channels);
  }
};

/// Two fixed seeded convolutions (stride 2 then 1, 3x3, zero padding) with a
/// ReLU in between. Weights never change after construction.
class ConvEncoder {
 public:
  int mid_channels = 8;
  int out_channels = 16;
  static constexpr int kKernel = 3;

  ConvEncoder() = default;
  ConvEncoder(int out_ch, std::uint64_t seed) : out_channels(out_ch) {
    Rng rng(mix_seed(seed, 0x2dc0de));
    w1_ = Tensor("image_encoder.w1", {mid_channels, 3, kKernel, kKernel}, false);
    b1_ = Tensor("image_encoder.b1", {mid_channels}, false);
    w2_ = Tensor("image_encoder.w2", {out_channels, mid_channels, kKernel, kKernel}, false);
    b2_ = Tensor("image_encoder.b2", {out_channels}, false);
    w1_.fill_uniform(rng, -std::sqrt(6.0 / (3 * kKernel * kKernel)), std::sqrt(6.0 / (3 * kKernel * kKernel)));
    w2_.fill_uniform(rng, -std::sqrt(6.0 / (mid_channels * kKernel * kKernel)),
                     std::sqrt(6.0 / (mid_channels * kKernel * kKernel)));
  }

  FeatureMap encode(const ImageRGB& img) const {
    // conv1, stride 2
    const int h1 = (img.height + 2 - kKernel) / 2 + 1;
    const int w1 = (img.width + 2 - kKernel) / 2 + 1;
    std::vector<double> mid(static_cast<std::size_t>(h1) * w1 * mid_channels, 0.0);
    conv_layer(img.px.data(), img.width, img.height, 3, w1_, b1_, 2, mid.data(), w1, h1, mid_channels, true);
    FeatureMap out;
    out.width = w1;
    out.height = h1;
    out.channels = out_channels;
    out.data.assign(static_cast<std::size_t>(h1) * w1 * out_channels, 0.0);
    conv_layer(mid.data(), w1, h1, mid_channels, w2_, b2_, 1, out.data.data(), w1, h1, out_channels, false);
    return out;
  }

  std::uint64_t weights_hash() const {
    std::uint64_t h = w1_.value_hash();
    h = hash_bytes(b1_.value.data(), sizeof(double) * b1_.value.size(), h);
    h = hash_bytes(w2_.value.data(), sizeof(double) * w2_.value.size(), h);
    h = hash_bytes(b2_.value.data(), sizeof(double) * b2_.value.size(), h);
    return h;
  }

  std::vector<const Tensor*> tensors() const { return {&w1_, &b1_, &w2_, &b2_}; }
  std::vector<Tensor*> tensors() { return {&w1_, &b1_, &w2_, &b2_}; }

 private:
  Tensor w1_, b1_, w2_, b2_;

  static void conv_layer(const double* in, int in_w, int in_h, int in_ch, const Tensor& w, const Tensor& b,
                         int stride, double* out, int out_w, int out_h, int out_ch, bool do_relu) {
    const int k = kKernel, pad = 1;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        for (int oc = 0; oc < out_ch; ++oc) {
          double acc = b.value[oc];
          for (int ic = 0; ic < in_ch; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= in_h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= in_w) continue;
                const double wv = w.value[((oc * in_ch + ic) * k + ky) * k + kx];
                acc += wv * in[(static_cast<std::size_t>(iy) * in_w + ix) * in_ch + ic];
              }
            }
          }
          out[(static_cast<std::size_t>(oy) * out_w + ox) * out_ch + oc] = do_relu ? std::max(0.0, acc) : acc;
        }
      }
    }
  }
};

// --- bilinear feature sampling -------------------------------------------------

/// True when uv (source-image pixel coords) lands inside the feature map's
/// bilinear support.
inline bool feature_in_bounds(const FeatureMap& map, const Vec2& uv, int src_w, int src_h) {
  const double sx = static_cast<double>(map.width) / src_w;
  const double sy = static_cast<double>(map.height) / src_h;
  const double u = uv.x() * sx, v = uv.y() * sy;
  return u >= 0.0 && v >= 0.0 && u <= map.width - 1.0 && v <= map.height - 1.0;
}

inline Eigen::VectorXd sample_feature(const FeatureMap& map, const Vec2& uv, int src_w, int src_h) {
  const double sx = static_cast<double>(map.width) / src_w;
  const double sy = static_cast<double>(map.height) / src_h;
  // tolerance of a few ulps so boundary points that passed the visibility
  // check through a different arithmetic path do not throw
  constexpr double kEdge = 1e-9;
  double u = uv.x() * sx, v = uv.y() * sy;
  if (u < -kEdge || v < -kEdge || u > map.width - 1.0 + kEdge || v > map.height - 1.0 + kEdge)
    throw std::domain_error("sample_feature: uv outside feature map");
  u = std::min(std::max(u, 0.0), map.width - 1.0);
  v = std::min(std::max(v, 0.0), map.height - 1.0);
  const int x0 = std::min(static_cast<int>(u), map.width - 2 >= 0 ? map.width - 2 : 0);
  const int y0 = std::min(static_cast<int>(v), map.height - 2 >= 0 ? map.height - 2 : 0);
  const double a = u - x0, bfrac = v - y0;
  const int x1 = std::min(x0 + 1, map.width - 1), y1 = std::min(y0 + 1, map.height - 1);
  return (1 - a) * (1 - bfrac) * map.texel(x0, y0) + a * (1 - bfrac) * map.texel(x1, y0) +
         (1 - a) * bfrac * map.texel(x0, y1) + a * bfrac * map.texel(x1, y1);
}

/// Differentiable w.r.t. uv; the map must outlive the tape.
inline Var sample_feature_op(Tape& t, const FeatureMap* map, Var uv, int src_w, int src_h) {
  const Vec2 uvv = t.val(uv);
  Eigen::VectorXd value = sample_feature(*map, uvv, src_w, src_h);
  const double sx = static_cast<double>(map->width) / src_w;
  const double sy = static_cast<double>(map->height) / src_h;
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(value), [map, uv, uvv, sx, sy, out](Tape& tp) {
    const double u = uvv.x() * sx, v = uvv.y() * sy;
    const int x0 = std::min(static_cast<int>(u), map->width - 2 >= 0 ? map->width - 2 : 0);
    const int y0 = std::min(static_cast<int>(v), map->height - 2 >= 0 ? map->height - 2 : 0);
    const double a = u - x0, b = v - y0;
    const int x1 = std::min(x0 + 1, map->width - 1), y1 = std::min(y0 + 1, map->height - 1);
    const Eigen::VectorXd f00 = map->texel(x0, y0), f10 = map->texel(x1, y0);
    const Eigen::VectorXd f01 = map->texel(x0, y1), f11 = map->texel(x1, y1);
    const auto& g = tp.grad(out);
    const double du = g.dot(((f10 - f00) * (1 - b) + (f11 - f01) * b).eval()) * sx;
    const double dv = g.dot(((f01 - f00) * (1 - a) + (f11 - f10) * a).eval()) * sy;
    tp.grad(uv)[0] += du;
    tp.grad(uv)[1] += dv;
  });
}

}  // namespace semslam
