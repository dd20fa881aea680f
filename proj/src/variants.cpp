#include "rocr/variants.hpp"

#include <cmath>
#include <random>

#include "rocr/backprop.hpp"
#include "rocr/error.hpp"

namespace rocr {

Vec noise_target_from_draw(const Vec& h_f, const Vec& z) {
  if (z.size() != h_f.size()) fail(ErrorKind::kShape, "noise target: draw width mismatch");
  const double hn = h_f.norm();
  if (!(hn > 0.0)) fail(ErrorKind::kInput, "noise target: forget hidden state has zero norm");
  const double zn = z.norm();
  if (!(zn > 0.0)) fail(ErrorKind::kNumeric, "noise target: zero-norm draw");
  return (hn / zn) * z;
}

Vec noise_target(const Vec& h_f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < 2; ++attempt) {
    Vec z(h_f.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
    if (z.norm() > 0.0) return noise_target_from_draw(h_f, z);
  }
  fail(ErrorKind::kNumeric, "noise target: zero-norm draw twice");
}

void RejectOptConfig::validate() const {
  if (steps < 0) fail(ErrorKind::kConfig, "reject: steps must be non-negative");
  if (!(lr > 0.0)) fail(ErrorKind::kConfig, "reject: lr must be positive");
  if (prompt_set.empty()) fail(ErrorKind::kConfig, "reject: prompt set is empty");
  if (reject_text.empty()) fail(ErrorKind::kConfig, "reject: reject text is empty");
}

RejectObjective::RejectObjective(const ModelBundle& b, const std::string& forget_word, int l,
                                 const RejectOptConfig& cfg)
    : bundle(b), layer(l) {
  cfg.validate();
  std::vector<TokenId> reject_ids;
  try {
    reject_ids = bundle.tokenizer.encode(cfg.reject_text);
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("reject text does not tokenize: ") + e.what());
  }
  if (reject_ids.empty()) fail(ErrorKind::kConfig, "reject text encodes to zero tokens");
  for (const auto& raw : cfg.prompt_set) {
    std::string text = raw;
    if (const auto pos = text.find("{w}"); pos != std::string::npos) text.replace(pos, 3, forget_word);
    Prompt p;
    try {
      p.ids = encode_prompt(bundle, text, cfg.use_template);
    } catch (const Error& e) {
      fail(ErrorKind::kProbe, "reject prompt '" + text + "' does not tokenize: " + e.what());
    }
    if (p.ids.empty()) fail(ErrorKind::kProbe, "reject prompt '" + text + "' is empty");
    try {
      p.subject_position = locate_subject_token(p.ids, forget_word, bundle.tokenizer);
    } catch (const Error&) {
      p.subject_position = -1;
    }
    const int prompt_len = static_cast<int>(p.ids.size());
    for (std::size_t j = 0; j < reject_ids.size(); ++j) {
      p.targets.emplace_back(prompt_len - 1 + static_cast<int>(j), reject_ids[j]);
    }
    p.ids.insert(p.ids.end(), reject_ids.begin(), reject_ids.end());
    prompts.push_back(std::move(p));
  }
}

double RejectObjective::loss(const Vec& steered) const {
  double total = 0.0;
  for (const auto& p : prompts) {
    if (p.subject_position >= 0) {
      total += steered_nll(bundle, p.ids, HiddenOverride{layer, p.subject_position, steered}, p.targets);
    } else {
      const ForwardTrace t = forward(bundle, p.ids);
      for (const auto& [pos, tok] : p.targets) total -= log_softmax(t.logits.row(pos).transpose())(tok);
    }
  }
  return total / static_cast<double>(prompts.size());
}

double RejectObjective::loss_and_gradient(const Vec& steered, Vec& grad) const {
  double total = 0.0;
  grad = Vec::Zero(steered.size());
  for (const auto& p : prompts) {
    if (p.subject_position >= 0) {
      const LossAndGradient lg =
          steered_nll_gradient(bundle, p.ids, HiddenOverride{layer, p.subject_position, steered}, p.targets);
      total += lg.loss;
      grad += lg.grad;
    } else {
      const ForwardTrace t = forward(bundle, p.ids);
      for (const auto& [pos, tok] : p.targets) total -= log_softmax(t.logits.row(pos).transpose())(tok);
    }
  }
  const double n = static_cast<double>(prompts.size());
  grad /= n;
  return total / n;
}

RejectResult reject_target(const ModelBundle& bundle, const ConceptStats& forget, const RejectOptConfig& cfg) {
  const RejectObjective objective(bundle, forget.word, forget.layer, cfg);
  const Vec& h_f = forget.h;
  Vec delta = Vec::Zero(h_f.size());
  Vec m = Vec::Zero(h_f.size()), v = Vec::Zero(h_f.size());

  RejectResult out;
  Vec best_delta = delta;
  double best = 0.0;
  for (int t = 0; t <= cfg.steps; ++t) {
    Vec grad;
    const double loss =
        t < cfg.steps ? objective.loss_and_gradient(h_f + delta, grad) : objective.loss(h_f + delta);
    if (!std::isfinite(loss) || (t < cfg.steps && !grad.allFinite())) {
      fail(ErrorKind::kNumeric, "reject: non-finite loss or gradient at step " + std::to_string(t));
    }
    out.losses.push_back(loss);
    if (t == 0 || loss < best) {
      best = loss;
      best_delta = delta;
      out.best_step = t;
    }
    out.best_losses.push_back(best);
    if (t == cfg.steps) break;

    const double step = static_cast<double>(t + 1);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const Vec m_hat = m / (1.0 - std::pow(cfg.beta1, step));
    const Vec v_hat = v / (1.0 - std::pow(cfg.beta2, step));
    delta -= cfg.lr * (m_hat.array() / (v_hat.array().sqrt() + cfg.eps)).matrix();
  }
  if (cfg.steps > 0) {
    bool any_improved = false;
    for (std::size_t i = 1; i < out.losses.size(); ++i) any_improved = any_improved || out.losses[i] <= out.losses[0];
    if (!any_improved) fail(ErrorKind::kOptimization, "reject: loss increased at every step");
  }
  out.delta = best_delta;
  out.h_t = h_f + best_delta;
  return out;
}

}  // namespace rocr
