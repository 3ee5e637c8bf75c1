#ifndef KELAB_SRC_MODEL_INTERNAL_HPP_
#define KELAB_SRC_MODEL_INTERNAL_HPP_

#include <cmath>

#include "kelab/model.hpp"

// Shared between the per-sequence forward/backward in model.cpp and the fused
// batched training step in train.cpp. Any change here changes both.

namespace kelab {
namespace internal {

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline void apply_activation(Mat& m, Activation act) {
  if (act == Activation::relu) {
    m = m.cwiseMax(0.0);
  } else {
    m = m.unaryExpr([](double x) { return gelu(x); });
  }
}

// dL/d(pre) from dL/d(post), given the pre-activation values.
inline Mat activation_backward(const Mat& pre, const Mat& d_post,
                               Activation act) {
  if (act == Activation::relu) {
    return ((pre.array() > 0.0).cast<double>() * d_post.array()).matrix();
  }
  return pre.binaryExpr(d_post,
                        [](double x, double g) { return g * gelu_grad(x); });
}

// Row-wise layernorm; caches mean and reciprocal std per row.
inline Mat layernorm(const Mat& x, const Vec& g, const Vec& b, double eps,
                     Vec& mean_out, Vec& rstd_out) {
  const Eigen::Index t = x.rows();
  const Eigen::Index h = x.cols();
  Mat y(t, h);
  mean_out.resize(t);
  rstd_out.resize(t);
  for (Eigen::Index i = 0; i < t; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + eps);
    mean_out(i) = mu;
    rstd_out(i) = rstd;
    y.row(i) = ((((x.row(i).array() - mu) * rstd) * g.transpose().array()) +
                b.transpose().array())
                   .matrix();
  }
  return y;
}

// Backward through layernorm; accumulates parameter grads when given.
inline Mat layernorm_backward(const Mat& x, const Mat& d_y, const Vec& g,
                              const Vec& mean, const Vec& rstd, Vec* dg,
                              Vec* db) {
  const Eigen::Index t = x.rows();
  const Eigen::Index h = x.cols();
  Mat d_x(t, h);
  for (Eigen::Index i = 0; i < t; ++i) {
    Eigen::ArrayXd xhat = (x.row(i).transpose().array() - mean(i)) * rstd(i);
    Eigen::ArrayXd dxhat = d_y.row(i).transpose().array() * g.array();
    if (dg) dg->array() += d_y.row(i).transpose().array() * xhat;
    if (db) db->array() += d_y.row(i).transpose().array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * xhat).mean();
    d_x.row(i) = (rstd(i) * (dxhat - m1 - xhat * m2)).matrix().transpose();
  }
  return d_x;
}

}  // namespace internal
}  // namespace kelab

#endif  // KELAB_SRC_MODEL_INTERNAL_HPP_
