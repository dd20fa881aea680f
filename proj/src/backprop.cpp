#include "rocr/backprop.hpp"

#include <vector>

#include "rocr/error.hpp"
#include "transformer_ops.hpp"

namespace rocr {

namespace {

using detail::LayerCache;

Mat layer_backward(const ModelConfig& config, const LayerWeights& w, const LayerCache& c, const Mat& dh) {
  const Eigen::Index n = dh.rows();
  const int dh_width = config.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh_width));

  // h = u + m, m = key * W_down^T
  Mat du = dh;
  const Mat& down = config.mlp_kind == MlpKind::kTwoMatrix ? w.proj : w.down;
  const Mat dkey = dh * down;
  Mat dn2;
  const Mat act_grad = c.mlp.pre.unaryExpr([&](double t) { return detail::activate_grad(config.activation, t); });
  if (config.mlp_kind == MlpKind::kTwoMatrix) {
    const Mat dpre = dkey.cwiseProduct(act_grad);
    dn2 = dpre * w.fc;
  } else {
    const Mat act = c.mlp.pre.unaryExpr([&](double t) { return detail::activate(config.activation, t); });
    const Mat dpre = dkey.cwiseProduct(c.mlp.up).cwiseProduct(act_grad);
    const Mat dup = dkey.cwiseProduct(act);
    dn2 = dpre * w.gate + dup * w.up;
  }
  du += detail::norm_backward(config, w.mlp_norm, c.norm2, dn2);

  // u = x + a, a = ctx * W_o^T
  Mat dx = du;
  const Mat dctx = du * w.wo;
  Mat dq(n, config.d_model), dk(n, config.d_model), dv(n, config.d_model);
  for (int h = 0; h < config.n_heads; ++h) {
    const Mat& probs = c.attn.probs[h];
    const Mat dctx_h = dctx.middleCols(h * dh_width, dh_width);
    const Mat dprobs = dctx_h * c.attn.v[h].transpose();
    dv.middleCols(h * dh_width, dh_width) = probs.transpose() * dctx_h;
    Mat dscores(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double inner = dprobs.row(i).dot(probs.row(i));
      dscores.row(i) = probs.row(i).array() * (dprobs.row(i).array() - inner);
    }
    Mat dq_h = (dscores * c.attn.k[h]) * scale;
    Mat dk_h = (dscores.transpose() * c.attn.q[h]) * scale;
    if (config.rope) {
      detail::apply_rope(config, dq_h, -1.0);
      detail::apply_rope(config, dk_h, -1.0);
    }
    dq.middleCols(h * dh_width, dh_width) = dq_h;
    dk.middleCols(h * dh_width, dh_width) = dk_h;
  }
  const Mat dn1 = dq * w.wq + dk * w.wk + dv * w.wv;
  dx += detail::norm_backward(config, w.attn_norm, c.norm1, dn1);
  return dx;
}

void check_targets(const ModelBundle& bundle, std::size_t n, std::span<const TargetToken> targets) {
  for (const auto& [pos, tok] : targets) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= n) fail(ErrorKind::kIndex, "target position out of range");
    if (tok < 0 || tok >= bundle.config.vocab_size) fail(ErrorKind::kIndex, "target token out of range");
  }
}

}  // namespace

double steered_nll(const ModelBundle& bundle, std::span<const TokenId> ids, const HiddenOverride& steer,
                   std::span<const TargetToken> targets) {
  check_targets(bundle, ids.size(), targets);
  const ForwardTrace trace = forward(bundle, ids, TraceSites::none(), &steer);
  double loss = 0.0;
  for (const auto& [pos, tok] : targets) loss -= log_softmax(trace.logits.row(pos).transpose())(tok);
  return loss;
}

LossAndGradient steered_nll_gradient(const ModelBundle& bundle, std::span<const TokenId> ids,
                                     const HiddenOverride& steer, std::span<const TargetToken> targets) {
  const auto& config = bundle.config;
  check_targets(bundle, ids.size(), targets);
  if (steer.layer < 0 || steer.layer >= config.n_layers) fail(ErrorKind::kIndex, "override layer out of range");
  if (steer.value.size() != config.d_model) fail(ErrorKind::kShape, "override vector width mismatch");

  Mat x = detail::embed_tokens(bundle, ids);
  if (steer.position < 0 || steer.position >= x.rows()) fail(ErrorKind::kIndex, "override position out of range");

  std::vector<LayerCache> caches(config.n_layers - steer.layer - 1);
  {
    LayerCache scratch;
    for (int l = 0; l <= steer.layer; ++l) {
      detail::run_layer(config, bundle.layers[l], x, scratch);
      x = std::move(scratch.h);
    }
  }
  x.row(steer.position) = steer.value.transpose();
  for (int l = steer.layer + 1; l < config.n_layers; ++l) {
    auto& c = caches[l - steer.layer - 1];
    detail::run_layer(config, bundle.layers[l], x, c);
    x = c.h;
  }
  detail::NormCache final_cache;
  const Mat normed = detail::apply_norm(config, bundle.final_norm, x, &final_cache);
  const Mat logits = normed * bundle.unembed.transpose();

  LossAndGradient out;
  Mat dlogits = Mat::Zero(logits.rows(), logits.cols());
  for (const auto& [pos, tok] : targets) {
    const Vec lsm = log_softmax(logits.row(pos).transpose());
    out.loss -= lsm(tok);
    dlogits.row(pos) += lsm.array().exp().matrix().transpose();
    dlogits(pos, tok) -= 1.0;
  }
  Mat grad = detail::norm_backward(config, bundle.final_norm, final_cache, dlogits * bundle.unembed);
  for (int l = config.n_layers - 1; l > steer.layer; --l) {
    grad = layer_backward(config, bundle.layers[l], caches[l - steer.layer - 1], grad);
  }
  out.grad = grad.row(steer.position).transpose();
  return out;
}

}  // namespace rocr
