#include "kelab/linalg.hpp"

#include <Eigen/Cholesky>

#include <vector>

namespace kelab {

void softmax_rows_inplace(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    // std::exp per entry: Eigen's packet exp maps -inf (masked scores) to a
    // denormal instead of an exact zero.
    m.row(i) = m.row(i).unaryExpr(
        [mx](double x) { return std::exp(x - mx); });
    m.row(i) /= m.row(i).sum();
  }
}

double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

namespace {

// Partial-pivot Gauss elimination on [M | B]; names the pivot that dies.
Mat pivoted_solve(Mat m, Mat x) {
  const Eigen::Index n = m.rows();
  std::vector<Eigen::Index> perm(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index best = k;
    double best_abs = std::abs(m(k, k));
    for (Eigen::Index i = k + 1; i < n; ++i) {
      if (std::abs(m(i, k)) > best_abs) {
        best = i;
        best_abs = std::abs(m(i, k));
      }
    }
    if (best_abs <= 1e-300) {
      throw SingularityError("solve_ridge: singular system at pivot " +
                             std::to_string(k));
    }
    if (best != k) {
      m.row(k).swap(m.row(best));
      x.row(k).swap(x.row(best));
    }
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double f = m(i, k) / m(k, k);
      if (f == 0.0) continue;
      m.row(i).tail(n - k) -= f * m.row(k).tail(n - k);
      x.row(i) -= f * x.row(k);
    }
  }
  for (Eigen::Index k = n - 1; k >= 0; --k) {
    for (Eigen::Index i = k + 1; i < n; ++i) {
      x.row(k) -= m(k, i) * x.row(i);
    }
    x.row(k) /= m(k, k);
  }
  return x;
}

}  // namespace

Mat solve_ridge(const Mat& a, const Mat& b, double lambda) {
  if (a.rows() != a.cols()) {
    throw ShapeError("solve_ridge: A must be square, got " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
  if (a.cols() != b.rows()) {
    throw ShapeError("solve_ridge: A is " + std::to_string(a.rows()) +
                     "x" + std::to_string(a.cols()) + ", B has " +
                     std::to_string(b.rows()) + " rows");
  }
  if (lambda < 0.0) {
    throw ConfigError("solve_ridge: lambda must be nonnegative");
  }
  Mat m = a;
  m.diagonal().array() += lambda;

  Eigen::LLT<Mat> llt(m);
  Mat x;
  if (llt.info() == Eigen::Success) {
    x = llt.solve(b);
  } else {
    x = pivoted_solve(m, b);
  }

  // One refinement step keeps the residual contract on ill-scaled input.
  const double bscale = b.template lpNorm<Eigen::Infinity>();
  Mat r = b - m * x;
  if (bscale > 0.0 &&
      r.template lpNorm<Eigen::Infinity>() > 1e-10 * bscale) {
    if (llt.info() == Eigen::Success) {
      x += llt.solve(r);
    } else {
      x += pivoted_solve(m, r);
    }
  }
  if (!all_finite(x)) {
    throw SingularityError("solve_ridge: non-finite solution");
  }
  return x;
}

}  // namespace kelab
