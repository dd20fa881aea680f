#pragma once

// Internal building blocks shared by the forward pass and the reverse-mode
// gradient. All matrices are positions x features.

#include <vector>

#include "rocr/model.hpp"

namespace rocr::detail {

struct NormCache {
  Mat xhat;  // normalized input before the affine weight
  Vec inv;   // per-row 1/rms or 1/std
};

Mat apply_norm(const ModelConfig& config, const NormWeights& w, const Mat& x, NormCache* cache);
Mat norm_backward(const ModelConfig& config, const NormWeights& w, const NormCache& cache, const Mat& grad_out);

double activate(Activation act, double x);
double activate_grad(Activation act, double x);

struct AttnCache {
  Mat normed;                  // attention-norm output
  std::vector<Mat> q, k, v;    // per head, after rotary
  std::vector<Mat> probs;      // per head, causal softmax
  Mat ctx;                     // concatenated head outputs
};

struct MlpCache {
  Mat normed;  // mlp-norm output
  Mat pre;     // fc (or gate) pre-activation
  Mat up;      // gated only
  Mat key;
};

struct LayerCache {
  NormCache norm1, norm2;
  AttnCache attn;
  MlpCache mlp;
  Mat x;  // residual input
  Mat a;  // attention output
  Mat m;  // mlp output
  Mat h;  // layer output
};

void run_layer(const ModelConfig& config, const LayerWeights& w, const Mat& x, LayerCache& cache);

// Rotates interleaved pairs of each row by position-dependent angles; `sign`
// = -1 applies the inverse rotation.
void apply_rope(const ModelConfig& config, Mat& head, double sign);

Mat embed_tokens(const ModelBundle& bundle, std::span<const TokenId> ids);

}  // namespace rocr::detail
