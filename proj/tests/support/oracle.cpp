#include "oracle.hpp"

#include <cmath>

#include "rocr/error.hpp"

namespace rocr::oracle {

Mat oracle_minimize(const Mat& W, const Vec& k_f, const Vec& v_r, const Mat& P, double weight) {
  const Eigen::Index d = W.rows(), n = W.cols();
  // vec(X P k) = ((P k)^T kron I_d) vec(X), vec(X P) = (P kron I_d) vec(X) with P symmetric.
  const Vec pk = P * k_f;
  Mat A = Mat::Zero(d + d * n, d * n);
  for (Eigen::Index j = 0; j < n; ++j) A.block(0, j * d, d, d) = pk(j) * Mat::Identity(d, d);
  const double s = std::sqrt(weight);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A.block(d + i * d, j * d, d, d) = s * P(j, i) * Mat::Identity(d, d);
  Vec rhs = Vec::Zero(d + d * n);
  rhs.head(d) = v_r - W * k_f;
  const Vec x = A.completeOrthogonalDecomposition().solve(rhs);
  const Vec normal = A.transpose() * (A * x - rhs);
  if (!x.allFinite() || normal.norm() > 1e-8 * (1.0 + A.norm() * rhs.norm())) {
    fail(ErrorKind::kOracle, "oracle least-squares solve did not converge");
  }
  const Mat X = Eigen::Map<const Mat>(x.data(), d, n);
  return X * P;
}

}  // namespace rocr::oracle
