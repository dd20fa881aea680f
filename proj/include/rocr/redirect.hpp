#pragma once

#include <cstdint>
#include <string>

#include "rocr/covariance.hpp"
#include "rocr/probes.hpp"

namespace rocr {

inline constexpr double kDefaultNullThreshold = 1e-2;

// P = U_null U_null^T over the eigenvectors of K0 K0^T whose eigenvalue is at
// most rel_threshold times the largest one.
struct NullProjector {
  int layer = 0;
  Mat P;
  double rel_threshold = kDefaultNullThreshold;
  int null_dim = 0;
  std::int64_t source_n_keys = 0;
  Vec eigenvalues;  // ascending
};

NullProjector spectral_null_projector(const CovarianceStats& cov, double rel_threshold = kDefaultNullThreshold);

// v_r = v_f + (h_t - h_f).
Vec redirection_vector(const ConceptStats& forget, const Vec& target_h);

// ||W_hat k_f - v_r||^2 + trace((W_hat - W) C (W_hat - W)^T), the second term
// being ||W_hat K0 - V0||^2 written against C = K0 K0^T.
double objective_value(const Mat& W, const Mat& candidate, const Vec& k_f, const Vec& v_r, const Mat& cov);

// ||(W + delta) k_f - v_r||^2 + weight * ||delta||_F^2, the objective solved
// over deltas of the form D P.
double projected_objective(const Mat& W, const Mat& delta, const Vec& k_f, const Vec& v_r, double weight = 1.0);

struct RankOneUpdate {
  int layer = 0;
  Mat delta;     // d_model x d_mlp
  Vec residual;  // R = v_r - W k_f
  Vec k_f;
  double objective_before = 0.0;
  double objective_after = 0.0;
  double projected_key_norm = 0.0;  // ||P k_f||
  bool no_effect = false;           // P k_f = 0, so delta = 0
};

// delta = R k_f^T P (k_f k_f^T P + weight I)^{-1}.
RankOneUpdate closed_form_update(const Mat& W, const Vec& k_f, const Vec& v_r, const Mat& P, double weight = 1.0,
                                 int layer = 0);

// sigma_2 / sigma_1 of a matrix, 0 for the zero matrix.
double rank_one_ratio(const Mat& delta);

struct AppliedUpdate {
  int layer = 0;
  double delta_fro = 0.0;
  double rank_ratio = 0.0;
  bool rank_one = true;
  double wall_ms = 0.0;
};

// W_down^l += delta, in place. Requires exclusive access to the bundle.
AppliedUpdate apply_update(ModelBundle& bundle, const RankOneUpdate& update);

}  // namespace rocr
