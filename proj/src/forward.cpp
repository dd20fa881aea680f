#include "rocr/forward.hpp"

#include <cmath>
#include <limits>

#include "rocr/error.hpp"
#include "transformer_ops.hpp"

namespace rocr {

namespace detail {

Mat apply_norm(const ModelConfig& config, const NormWeights& w, const Mat& x, NormCache* cache) {
  if (config.norm_kind == NormKind::kNone) {
    if (cache) {
      cache->xhat = x;
      cache->inv = Vec::Ones(x.rows());
    }
    return x;
  }
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat xhat(n, d);
  Vec inv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (config.norm_kind == NormKind::kRmsNorm) {
      inv(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / static_cast<double>(d) + config.norm_eps);
      xhat.row(i) = x.row(i) * inv(i);
    } else {
      const double mean = x.row(i).mean();
      const auto centered = x.row(i).array() - mean;
      const double var = centered.square().mean();
      inv(i) = 1.0 / std::sqrt(var + config.norm_eps);
      xhat.row(i) = centered.matrix() * inv(i);
    }
  }
  Mat out = xhat * w.weight.asDiagonal();
  if (config.norm_kind == NormKind::kLayerNorm) out.rowwise() += w.bias.transpose();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv = std::move(inv);
  }
  return out;
}

Mat norm_backward(const ModelConfig& config, const NormWeights& w, const NormCache& cache, const Mat& grad_out) {
  if (config.norm_kind == NormKind::kNone) return grad_out;
  const Eigen::Index n = grad_out.rows(), d = grad_out.cols();
  const Mat g = grad_out * w.weight.asDiagonal();
  Mat dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gx = g.row(i).dot(cache.xhat.row(i)) / static_cast<double>(d);
    if (config.norm_kind == NormKind::kRmsNorm) {
      dx.row(i) = cache.inv(i) * (g.row(i) - cache.xhat.row(i) * gx);
    } else {
      const double gm = g.row(i).mean();
      dx.row(i) = cache.inv(i) * (g.row(i).array() - gm - cache.xhat.row(i).array() * gx).matrix();
    }
  }
  return dx;
}

double activate(Activation act, double x) {
  switch (act) {
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
    case Activation::kGelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    case Activation::kSilu: return x / (1.0 + std::exp(-x));
  }
  return x;
}

double activate_grad(Activation act, double x) {
  switch (act) {
    case Activation::kRelu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::kGelu: {
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * pdf;
    }
    case Activation::kSilu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
  }
  return 1.0;
}

void apply_rope(const ModelConfig& config, Mat& head, double sign) {
  const Eigen::Index dh = head.cols();
  for (Eigen::Index p = 0; p < head.rows(); ++p) {
    for (Eigen::Index i = 0; i < dh / 2; ++i) {
      const double freq = std::pow(config.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = sign * static_cast<double>(p) * freq;
      const double c = std::cos(angle), s = std::sin(angle);
      const double x0 = head(p, 2 * i), x1 = head(p, 2 * i + 1);
      head(p, 2 * i) = x0 * c - x1 * s;
      head(p, 2 * i + 1) = x0 * s + x1 * c;
    }
  }
}

void run_layer(const ModelConfig& config, const LayerWeights& w, const Mat& x, LayerCache& cache) {
  const Eigen::Index n = x.rows();
  const int dh = config.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.x = x;

  auto& at = cache.attn;
  at.normed = apply_norm(config, w.attn_norm, x, &cache.norm1);
  const Mat q = at.normed * w.wq.transpose();
  const Mat k = at.normed * w.wk.transpose();
  const Mat v = at.normed * w.wv.transpose();
  at.q.resize(config.n_heads);
  at.k.resize(config.n_heads);
  at.v.resize(config.n_heads);
  at.probs.resize(config.n_heads);
  at.ctx.resize(n, config.d_model);
  for (int h = 0; h < config.n_heads; ++h) {
    at.q[h] = q.middleCols(h * dh, dh);
    at.k[h] = k.middleCols(h * dh, dh);
    at.v[h] = v.middleCols(h * dh, dh);
    if (config.rope) {
      apply_rope(config, at.q[h], 1.0);
      apply_rope(config, at.k[h], 1.0);
    }
    Mat scores = (at.q[h] * at.k[h].transpose()) * scale;
    Mat probs = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = scores.row(i).head(i + 1).maxCoeff();
      double total = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        probs(i, j) = std::exp(scores(i, j) - mx);
        total += probs(i, j);
      }
      probs.row(i).head(i + 1) /= total;
    }
    at.ctx.middleCols(h * dh, dh) = probs * at.v[h];
    at.probs[h] = std::move(probs);
  }
  cache.a = at.ctx * w.wo.transpose();

  const Mat u = x + cache.a;
  auto& mc = cache.mlp;
  mc.normed = apply_norm(config, w.mlp_norm, u, &cache.norm2);
  if (config.mlp_kind == MlpKind::kTwoMatrix) {
    mc.pre = mc.normed * w.fc.transpose();
    mc.key = mc.pre.unaryExpr([&](double t) { return activate(config.activation, t); });
    cache.m = mc.key * w.proj.transpose();
  } else {
    mc.pre = mc.normed * w.gate.transpose();
    mc.up = mc.normed * w.up.transpose();
    mc.key = mc.pre.unaryExpr([&](double t) { return activate(config.activation, t); }).cwiseProduct(mc.up);
    cache.m = mc.key * w.down.transpose();
  }
  cache.h = u + cache.m;
}

Mat embed_tokens(const ModelBundle& bundle, std::span<const TokenId> ids) {
  const auto& config = bundle.config;
  if (ids.empty()) fail(ErrorKind::kInput, "forward: empty token sequence");
  if (ids.size() > static_cast<std::size_t>(config.max_seq_len)) {
    fail(ErrorKind::kLength, "forward: sequence of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                                 std::to_string(config.max_seq_len));
  }
  Mat x(static_cast<Eigen::Index>(ids.size()), config.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= config.vocab_size) {
      fail(ErrorKind::kInput, "forward: token id " + std::to_string(ids[i]) + " out of range");
    }
    x.row(static_cast<Eigen::Index>(i)) = bundle.embed.row(ids[i]);
  }
  return x;
}

}  // namespace detail

ForwardTrace forward(const ModelBundle& bundle, std::span<const TokenId> ids, TraceSites capture,
                     const HiddenOverride* steer) {
  const auto& config = bundle.config;
  Mat x = detail::embed_tokens(bundle, ids);
  if (steer) {
    if (steer->layer < 0 || steer->layer >= config.n_layers) {
      fail(ErrorKind::kIndex, "override layer " + std::to_string(steer->layer) + " out of range");
    }
    if (steer->position < 0 || steer->position >= x.rows()) {
      fail(ErrorKind::kIndex, "override position " + std::to_string(steer->position) + " out of range");
    }
    if (steer->value.size() != config.d_model) fail(ErrorKind::kShape, "override vector width mismatch");
  }

  ForwardTrace trace;
  if (!capture.empty()) trace.layers.resize(config.n_layers);
  detail::LayerCache cache;
  for (int l = 0; l < config.n_layers; ++l) {
    detail::run_layer(config, bundle.layers[l], x, cache);
    if (steer && steer->layer == l) cache.h.row(steer->position) = steer->value.transpose();
    if (!capture.empty()) {
      auto& lt = trace.layers[l];
      if (capture.has(TraceSite::kAttnOut)) lt.attn_out = cache.a;
      if (capture.has(TraceSite::kResidualIn)) lt.residual_in = cache.x;
      if (capture.has(TraceSite::kMlpKey)) lt.mlp_key = cache.mlp.key;
      if (capture.has(TraceSite::kMlpOut)) lt.mlp_out = cache.m;
      if (capture.has(TraceSite::kHidden)) lt.hidden = cache.h;
    }
    x = std::move(cache.h);
  }
  const Mat normed = detail::apply_norm(config, bundle.final_norm, x, nullptr);
  trace.logits = normed * bundle.unembed.transpose();
  return trace;
}

Vec mlp_key(const ModelBundle& bundle, int layer, const Vec& attn_out, const Vec& residual_in) {
  const auto& config = bundle.config;
  if (layer < 0 || layer >= config.n_layers) fail(ErrorKind::kIndex, "layer " + std::to_string(layer) + " out of range");
  if (attn_out.size() != config.d_model || residual_in.size() != config.d_model) {
    fail(ErrorKind::kShape, "mlp_key: vectors must have width d_model");
  }
  const auto& w = bundle.layers[layer];
  const Mat u = (residual_in + attn_out).transpose();
  const Mat normed = detail::apply_norm(config, w.mlp_norm, u, nullptr);
  Vec key;
  if (config.mlp_kind == MlpKind::kTwoMatrix) {
    key = (w.fc * normed.transpose()).unaryExpr([&](double t) { return detail::activate(config.activation, t); });
  } else {
    const Vec gate = (w.gate * normed.transpose()).unaryExpr([&](double t) { return detail::activate(config.activation, t); });
    key = gate.cwiseProduct(w.up * normed.transpose());
  }
  return key;
}

Vec log_softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

}  // namespace rocr
