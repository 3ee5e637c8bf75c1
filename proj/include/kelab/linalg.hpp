#ifndef KELAB_LINALG_HPP_
#define KELAB_LINALG_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "kelab/errors.hpp"

namespace kelab {

// Dense working types. Row-major storage so tensor bytes serialize in the
// checkpoint's documented row-major order without a transpose pass.
template <class Scalar>
using MatrixX =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatrixX<double>;
using Vec = VectorX<double>;

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// A * B with an explicit conformability check.
template <class DerivedA, class DerivedB>
Mat matmul(const Eigen::MatrixBase<DerivedA>& a,
           const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " times " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  return a * b;
}

// u.v / (|u||v|), clamped to [-1, 1] against round-off.
template <class DerivedU, class DerivedV>
double cosine_similarity(const Eigen::MatrixBase<DerivedU>& u,
                         const Eigen::MatrixBase<DerivedV>& v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_similarity: dim " + std::to_string(u.size()) +
                     " vs " + std::to_string(v.size()));
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) {
    throw DegenerateInputError("cosine_similarity: zero vector");
  }
  const double cs = u.dot(v) / (nu * nv);
  return std::min(1.0, std::max(-1.0, cs));
}

// Max-shifted softmax over a vector.
template <class Derived>
Vec softmax(const Eigen::MatrixBase<Derived>& v) {
  Vec out = v.template cast<double>();
  const double m = out.maxCoeff();
  out = (out.array() - m).exp();
  out /= out.sum();
  return out;
}

// In-place row-wise max-shifted softmax.
void softmax_rows_inplace(Mat& m);

// Solves (A + lambda I) X = B for symmetric positive semidefinite A.
// Cholesky first; falls back to pivoted Gaussian elimination when the
// shifted matrix is not numerically positive definite. A singular system
// reports the offending pivot.
Mat solve_ridge(const Mat& a, const Mat& b, double lambda);

// log(sum(exp(v))) with max shift.
double log_sum_exp(const Vec& v);

}  // namespace kelab

#endif  // KELAB_LINALG_HPP_
