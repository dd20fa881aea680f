#include "rocr/redirect.hpp"

#include <chrono>

#include "rocr/error.hpp"

namespace rocr {

NullProjector spectral_null_projector(const CovarianceStats& cov, double rel_threshold) {
  const Mat& c = cov.second_moment;
  if (c.rows() != c.cols() || c.rows() == 0) fail(ErrorKind::kShape, "null projector: covariance must be square");
  if (!(rel_threshold >= 0.0)) fail(ErrorKind::kConfig, "null projector: threshold must be non-negative");
  if (!c.allFinite()) fail(ErrorKind::kNumeric, "null projector: covariance is not finite");

  NullProjector out;
  out.layer = cov.layer;
  out.rel_threshold = rel_threshold;
  out.source_n_keys = cov.n_keys;
  const Eigen::Index d = c.rows();

  if (c.cwiseAbs().maxCoeff() == 0.0) {
    out.P = Mat::Identity(d, d);
    out.null_dim = static_cast<int>(d);
    out.eigenvalues = Vec::Zero(d);
    return out;
  }

  const Mat sym = 0.5 * (c + c.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(sym);
  if (eig.info() != Eigen::Success) fail(ErrorKind::kNumeric, "null projector: eigendecomposition failed");
  out.eigenvalues = eig.eigenvalues();
  const double cutoff = rel_threshold * out.eigenvalues.maxCoeff();
  Eigen::Index null_dim = 0;
  while (null_dim < d && out.eigenvalues(null_dim) <= cutoff) ++null_dim;
  const Mat u_null = eig.eigenvectors().leftCols(null_dim);
  const Mat p = u_null * u_null.transpose();
  out.P = 0.5 * (p + p.transpose());
  out.null_dim = static_cast<int>(null_dim);
  return out;
}

Vec redirection_vector(const ConceptStats& forget, const Vec& target_h) {
  if (!forget.v) fail(ErrorKind::kShape, "redirection vector: forget stats lack v_f");
  if (forget.v->size() != forget.h.size() || target_h.size() != forget.h.size()) {
    fail(ErrorKind::kShape, "redirection vector: width mismatch");
  }
  return *forget.v + (target_h - forget.h);
}

namespace {

void check_shapes(const Mat& W, const Mat& candidate, const Vec& k_f, const Vec& v_r) {
  if (candidate.rows() != W.rows() || candidate.cols() != W.cols() || k_f.size() != W.cols() ||
      v_r.size() != W.rows()) {
    fail(ErrorKind::kShape, "objective: inconsistent shapes");
  }
}

}  // namespace

double objective_value(const Mat& W, const Mat& candidate, const Vec& k_f, const Vec& v_r, const Mat& cov) {
  check_shapes(W, candidate, k_f, v_r);
  if (cov.rows() != W.cols() || cov.cols() != W.cols()) fail(ErrorKind::kShape, "objective: covariance shape mismatch");
  const Mat drift = candidate - W;
  return (candidate * k_f - v_r).squaredNorm() + (drift * cov * drift.transpose()).trace();
}

double projected_objective(const Mat& W, const Mat& delta, const Vec& k_f, const Vec& v_r, double weight) {
  check_shapes(W, delta, k_f, v_r);
  return ((W + delta) * k_f - v_r).squaredNorm() + weight * delta.squaredNorm();
}

RankOneUpdate closed_form_update(const Mat& W, const Vec& k_f, const Vec& v_r, const Mat& P, double weight, int layer) {
  const Eigen::Index d_mlp = W.cols();
  if (k_f.size() != d_mlp || v_r.size() != W.rows() || P.rows() != d_mlp || P.cols() != d_mlp) {
    fail(ErrorKind::kShape, "closed-form update: inconsistent shapes");
  }
  if (!(k_f.norm() > 0.0)) fail(ErrorKind::kNumeric, "closed-form update: forget key has zero norm");
  if (!(weight > 0.0)) fail(ErrorKind::kConfig, "closed-form update: regularization weight must be positive");

  RankOneUpdate out;
  out.layer = layer;
  out.k_f = k_f;
  out.residual = v_r - W * k_f;

  const Vec pk = P * k_f;  // P symmetric, so (k_f^T P)^T = P k_f
  out.projected_key_norm = pk.norm();

  // Row vector y = k_f^T P M^{-1} with M = k_f k_f^T P + weight I, i.e. M^T y^T = P k_f.
  const Mat m = k_f * pk.transpose() + weight * Mat::Identity(d_mlp, d_mlp);
  Eigen::FullPivLU<Mat> lu(m.transpose());
  if (!lu.isInvertible()) fail(ErrorKind::kNumeric, "closed-form update: singular system (bug: M is always invertible)");
  const Vec y = lu.solve(pk);
  if (!y.allFinite()) fail(ErrorKind::kNumeric, "closed-form update: non-finite solution");

  out.delta = out.residual * y.transpose();
  out.no_effect = out.projected_key_norm <= 1e-12 * k_f.norm();
  if (out.no_effect) out.delta.setZero();

  out.objective_before = projected_objective(W, Mat::Zero(W.rows(), W.cols()), k_f, v_r, weight);
  out.objective_after = projected_objective(W, out.delta, k_f, v_r, weight);
  return out;
}

double rank_one_ratio(const Mat& delta) {
  if (delta.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(delta);
  const Vec s = svd.singularValues();
  if (s.size() < 2 || s(0) == 0.0) return 0.0;
  return s(1) / s(0);
}

AppliedUpdate apply_update(ModelBundle& bundle, const RankOneUpdate& update) {
  const auto start = std::chrono::steady_clock::now();
  Mat& w = bundle.down_projection(update.layer);
  if (update.delta.rows() != w.rows() || update.delta.cols() != w.cols()) {
    fail(ErrorKind::kShape, "apply_update: delta shape does not match the down-projection");
  }
  if (!update.delta.allFinite()) fail(ErrorKind::kNumeric, "apply_update: delta is not finite");
  w += update.delta;
  AppliedUpdate out;
  out.layer = update.layer;
  out.delta_fro = update.delta.norm();
  out.rank_ratio = rank_one_ratio(update.delta);
  out.rank_one = out.rank_ratio <= 1e-10;
  out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace rocr
