#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "semslam/geometry.hpp"
#include "semslam/tensor.hpp"

namespace semslam {

struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

/// Reverse-mode tape. Nodes are created in topological order by the op
/// functions below; backward() sweeps them in reverse. Node gradients are
/// per-call scratch (zeroed on every backward), while Tensor gradients
/// accumulate across calls until Tensor::zero_grad().
class Tape {
 public:
  struct Node {
    Eigen::VectorXd value;
    Eigen::VectorXd grad;
    std::function<void(Tape&)> backward;  // empty for constants
  };

  bool debug_checks = false;

  Var push(Eigen::VectorXd value, std::function<void(Tape&)> backward = {}) {
    if (debug_checks && !value.allFinite()) throw std::runtime_error("tape: non-finite value produced");
    nodes_.push_back(Node{std::move(value), Eigen::VectorXd(), std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Eigen::VectorXd& val(Var v) const { return nodes_[v.i].value; }
  Eigen::VectorXd& grad(Var v) { return nodes_[v.i].grad; }
  double scalar(Var v) const {
    if (nodes_[v.i].value.size() != 1) throw std::runtime_error("tape: expected scalar node");
    return nodes_[v.i].value[0];
  }
  int dim(Var v) const { return static_cast<int>(nodes_[v.i].value.size()); }
  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Seeds d(loss)/d(loss)=1 and propagates to every reachable Tensor.
  void backward(Var loss) {
    if (!loss.valid() || nodes_[loss.i].value.size() != 1)
      throw std::runtime_error("backward: loss must be a scalar tape node");
    for (auto& n : nodes_) n.grad = Eigen::VectorXd::Zero(n.value.size());
    nodes_[loss.i].grad[0] = 1.0;
    for (int i = loss.i; i >= 0; --i) {
      if (nodes_[i].backward) nodes_[i].backward(*this);
    }
  }

 private:
  std::vector<Node> nodes_;
};

// --- leafs and constants ----------------------------------------------------

inline Var constant(Tape& t, const Eigen::VectorXd& v) { return t.push(v); }
inline Var constant(Tape& t, double v) { return t.push(Eigen::VectorXd::Constant(1, v)); }

inline Var leaf(Tape& t, Tensor& p) {
  Eigen::VectorXd v = p.value.matrix();
  Tensor* ptr = &p;
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(v), [ptr, out](Tape& tp) {
    if (ptr->requires_grad) ptr->grad += tp.grad(out).array();
  });
}

/// Identity forward, blocked backward.
inline Var detach(Tape& t, Var a) { return t.push(t.val(a)); }

// --- elementwise ------------------------------------------------------------

inline Var add(Tape& t, Var a, Var b) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a) + t.val(b), [a, b, out](Tape& tp) {
    tp.grad(a) += tp.grad(out);
    tp.grad(b) += tp.grad(out);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a) - t.val(b), [a, b, out](Tape& tp) {
    tp.grad(a) += tp.grad(out);
    tp.grad(b) -= tp.grad(out);
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a).cwiseProduct(t.val(b)), [a, b, out](Tape& tp) {
    tp.grad(a) += tp.grad(out).cwiseProduct(tp.val(b));
    tp.grad(b) += tp.grad(out).cwiseProduct(tp.val(a));
  });
}

inline Var div(Tape& t, Var a, Var b) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a).cwiseQuotient(t.val(b)), [a, b, out](Tape& tp) {
    const auto& g = tp.grad(out);
    tp.grad(a) += g.cwiseQuotient(tp.val(b));
    tp.grad(b) -= g.cwiseProduct(tp.val(out)).cwiseQuotient(tp.val(b));
  });
}

inline Var scale(Tape& t, Var a, double s) {
  Var out{static_cast<int>(t.size())};
  return t.push(s * t.val(a), [a, s, out](Tape& tp) { tp.grad(a) += s * tp.grad(out); });
}

inline Var add_const(Tape& t, Var a, const Eigen::VectorXd& c) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a) + c, [a, out](Tape& tp) { tp.grad(a) += tp.grad(out); });
}

inline Var add_const(Tape& t, Var a, double c) {
  return add_const(t, a, Eigen::VectorXd::Constant(t.dim(a), c));
}

/// a + s*b
inline Var axpy(Tape& t, Var a, double s, Var b) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a) + s * t.val(b), [a, s, b, out](Tape& tp) {
    tp.grad(a) += tp.grad(out);
    tp.grad(b) += s * tp.grad(out);
  });
}

inline Var relu(Tape& t, Var a) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a).cwiseMax(0.0), [a, out](Tape& tp) {
    const auto& v = tp.val(a);
    auto& ga = tp.grad(a);
    const auto& g = tp.grad(out);
    for (int i = 0; i < v.size(); ++i)
      if (v[i] > 0) ga[i] += g[i];
  });
}

inline Var sigmoid(Tape& t, Var a) {
  Eigen::VectorXd v = t.val(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(v), [a, out](Tape& tp) {
    const auto& s = tp.val(out);
    tp.grad(a) += tp.grad(out).cwiseProduct(s.cwiseProduct(Eigen::VectorXd::Ones(s.size()) - s));
  });
}

inline Var square(Tape& t, Var a) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a).cwiseProduct(t.val(a)),
                [a, out](Tape& tp) { tp.grad(a) += 2.0 * tp.grad(out).cwiseProduct(tp.val(a)); });
}

inline Var sqrt_op(Tape& t, Var a) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a).cwiseSqrt(), [a, out](Tape& tp) {
    tp.grad(a) += 0.5 * tp.grad(out).cwiseQuotient(tp.val(out));
  });
}

inline Var abs_op(Tape& t, Var a) {
  Var out{static_cast<int>(t.size())};
  // subgradient 0 at the kink
  return t.push(t.val(a).cwiseAbs(), [a, out](Tape& tp) {
    const auto& v = tp.val(a);
    const auto& g = tp.grad(out);
    auto& ga = tp.grad(a);
    for (int i = 0; i < v.size(); ++i)
      if (v[i] != 0.0) ga[i] += (v[i] > 0 ? g[i] : -g[i]);
  });
}

// --- structure --------------------------------------------------------------

inline Var concat(Tape& t, const std::vector<Var>& parts) {
  int dim = 0;
  for (Var p : parts) dim += t.dim(p);
  Eigen::VectorXd v(dim);
  int off = 0;
  for (Var p : parts) {
    v.segment(off, t.dim(p)) = t.val(p);
    off += t.dim(p);
  }
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(v), [parts, out](Tape& tp) {
    int o = 0;
    for (Var p : parts) {
      const int d = tp.dim(p);
      tp.grad(p) += tp.grad(out).segment(o, d);
      o += d;
    }
  });
}

inline Var slice(Tape& t, Var a, int off, int len) {
  Var out{static_cast<int>(t.size())};
  return t.push(t.val(a).segment(off, len),
                [a, off, len, out](Tape& tp) { tp.grad(a).segment(off, len) += tp.grad(out); });
}

inline Var sum(Tape& t, Var a) {
  Var out{static_cast<int>(t.size())};
  return t.push(Eigen::VectorXd::Constant(1, t.val(a).sum()), [a, out](Tape& tp) {
    tp.grad(a).array() += tp.grad(out)[0];
  });
}

inline Var mean(Tape& t, Var a) { return scale(t, sum(t, a), 1.0 / t.dim(a)); }

inline Var dot(Tape& t, Var a, Var b) {
  Var out{static_cast<int>(t.size())};
  return t.push(Eigen::VectorXd::Constant(1, t.val(a).dot(t.val(b))), [a, b, out](Tape& tp) {
    const double g = tp.grad(out)[0];
    tp.grad(a) += g * tp.val(b);
    tp.grad(b) += g * tp.val(a);
  });
}

inline Var l2norm(Tape& t, Var a) {
  const double n = t.val(a).norm();
  Var out{static_cast<int>(t.size())};
  return t.push(Eigen::VectorXd::Constant(1, n), [a, out](Tape& tp) {
    const double nv = tp.val(out)[0];
    if (nv > 0) tp.grad(a) += (tp.grad(out)[0] / nv) * tp.val(a);
  });
}

/// Mean of a list of scalar nodes; the reduction point of every batch loss.
inline Var collect_mean(Tape& t, const std::vector<Var>& scalars) {
  if (scalars.empty()) return constant(t, 0.0);
  double s = 0;
  for (Var v : scalars) s += t.scalar(v);
  const double inv = 1.0 / static_cast<double>(scalars.size());
  Var out{static_cast<int>(t.size())};
  return t.push(Eigen::VectorXd::Constant(1, s * inv), [scalars, inv, out](Tape& tp) {
    const double g = tp.grad(out)[0] * inv;
    for (Var v : scalars) tp.grad(v)[0] += g;
  });
}

// --- geometry-aware ops -----------------------------------------------------

/// exp([w]x) * p for a constant point p.
inline Var so3_rotate(Tape& t, Var w, const Vec3& p) {
  const Vec3 wv = t.val(w);
  const Vec3 rp = so3_exp(wv) * p;
  Var out{static_cast<int>(t.size())};
  return t.push(rp, [w, wv, rp, out](Tape& tp) {
    const Mat3 J = so3_rotate_jacobian(wv, rp);
    tp.grad(w) += J.transpose() * Vec3(tp.grad(out));
  });
}

/// Perspective projection of a camera-frame point (z > 0 required by caller).
inline Var project_op(Tape& t, Var x, const Intrinsics& K) {
  const Vec3 p = t.val(x);
  Eigen::Vector2d uv(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
  Var out{static_cast<int>(t.size())};
  return t.push(uv, [x, p, K, out](Tape& tp) {
    const auto& g = tp.grad(out);
    Vec3 gx;
    gx.x() = g[0] * K.fx / p.z();
    gx.y() = g[1] * K.fy / p.z();
    gx.z() = -(g[0] * K.fx * p.x() + g[1] * K.fy * p.y()) / (p.z() * p.z());
    tp.grad(x) += gx;
  });
}

/// R*x + t with constant R, t.
inline Var affine3(Tape& t, Var x, const Mat3& R, const Vec3& tr) {
  Var out{static_cast<int>(t.size())};
  return t.push(R * Vec3(t.val(x)) + tr,
                [x, R, out](Tape& tp) { tp.grad(x) += R.transpose() * Vec3(tp.grad(out)); });
}

/// Ray-termination weights w_i = o_i * prod_{j<i} (1 - o_j).
inline Var termination_weights_op(Tape& t, Var occs) {
  const Eigen::VectorXd& o = t.val(occs);
  const int m = static_cast<int>(o.size());
  Eigen::VectorXd w(m), T(m);  // T_i = transmittance before sample i
  double trans = 1.0;
  for (int i = 0; i < m; ++i) {
    T[i] = trans;
    w[i] = o[i] * trans;
    trans *= (1.0 - o[i]);
  }
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(w), [occs, o, T, out](Tape& tp) {
    const auto& g = tp.grad(out);
    auto& go = tp.grad(occs);
    const int n = static_cast<int>(o.size());
    // d w_i / d o_k for k<i is -o_i * prod_{j<i, j!=k}(1-o_j); accumulated
    // without division so o_k = 1 stays finite.
    for (int k = 0; k < n; ++k) {
      go[k] += g[k] * T[k];
      double r = T[k];
      for (int i = k + 1; i < n; ++i) {
        go[k] -= g[i] * o[i] * r;
        r *= (1.0 - o[i]);
      }
    }
  });
}

/// sum_i w_i * v_i over per-sample vector nodes.
inline Var weighted_sum_vars(Tape& t, Var weights, const std::vector<Var>& values) {
  const auto& w = t.val(weights);
  if (static_cast<int>(values.size()) != w.size()) throw std::runtime_error("weighted_sum: length mismatch");
  const int d = values.empty() ? 0 : t.dim(values[0]);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < w.size(); ++i) acc += w[i] * t.val(values[i]);
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(acc), [weights, values, out](Tape& tp) {
    const auto& g = tp.grad(out);
    const auto& wv = tp.val(weights);
    auto& gw = tp.grad(weights);
    for (int i = 0; i < wv.size(); ++i) {
      gw[i] += g.dot(tp.val(values[i]));
      tp.grad(values[i]) += wv[i] * g;
    }
  });
}

/// sum_i w_i * c_i for a constant value matrix (rows = samples).
inline Var weighted_sum_const(Tape& t, Var weights, const Eigen::MatrixXd& values) {
  const auto& w = t.val(weights);
  if (values.rows() != w.size()) throw std::runtime_error("weighted_sum_const: length mismatch");
  Eigen::VectorXd acc = values.transpose() * w;
  Var out{static_cast<int>(t.size())};
  return t.push(std::move(acc), [weights, values, out](Tape& tp) {
    tp.grad(weights) += values * tp.grad(out);
  });
}

/// sum_i w_i (dhat - d_i)^2 with constant sample depths.
inline Var depth_variance_op(Tape& t, Var weights, const Eigen::VectorXd& depths, Var dhat) {
  const auto& w = t.val(weights);
  const double dh = t.scalar(dhat);
  double var = 0;
  for (int i = 0; i < w.size(); ++i) var += w[i] * (dh - depths[i]) * (dh - depths[i]);
  Var out{static_cast<int>(t.size())};
  return t.push(Eigen::VectorXd::Constant(1, var), [weights, depths, dhat, dh, out](Tape& tp) {
    const double g = tp.grad(out)[0];
    const auto& wv = tp.val(weights);
    auto& gw = tp.grad(weights);
    double gdh = 0;
    for (int i = 0; i < wv.size(); ++i) {
      const double r = dh - depths[i];
      gw[i] += g * r * r;
      gdh += g * 2.0 * wv[i] * r;
    }
    tp.grad(dhat)[0] += gdh;
  });
}

/// -log softmax(logits)[target], numerically stable.
inline Var cross_entropy(Tape& t, Var logits, int target) {
  const auto& l = t.val(logits);
  if (target < 0 || target >= l.size()) throw std::out_of_range("cross_entropy: target class out of range");
  const double m = l.maxCoeff();
  const double lse = m + std::log((l.array() - m).exp().sum());
  Var out{static_cast<int>(t.size())};
  return t.push(Eigen::VectorXd::Constant(1, lse - l[target]), [logits, target, lse, out](Tape& tp) {
    const double g = tp.grad(out)[0];
    const auto& lv = tp.val(logits);
    Eigen::VectorXd soft = (lv.array() - lse).exp();
    soft[target] -= 1.0;
    tp.grad(logits) += g * soft;
  });
}

}  // namespace semslam
