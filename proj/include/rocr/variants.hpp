#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rocr/probes.hpp"

namespace rocr {

// h_t = (||h_f|| / ||z||) z with z ~ N(0, I), seeded.
Vec noise_target(const Vec& h_f, std::uint64_t seed);
// Same rescaling for a caller-supplied draw.
Vec noise_target_from_draw(const Vec& h_f, const Vec& z);

struct RejectOptConfig {
  std::string reject_text = "Unfortunately I can't";
  int steps = 25;
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Prompts about the forget concept; `{w}` is replaced by the forget word.
  std::vector<std::string> prompt_set;
  bool use_template = true;

  void validate() const;
};

struct RejectResult {
  Vec h_t;
  Vec delta;
  std::vector<double> losses;       // loss at each iterate, index 0 is delta = 0
  std::vector<double> best_losses;  // running minimum of `losses`
  int best_step = 0;
};

// Mean over prompts of -log P(reject_text | prompt) with the layer output at
// the subject token replaced by `steered`. Prompts that do not contain the
// subject run unsteered.
struct RejectObjective {
  const ModelBundle& bundle;
  int layer;
  struct Prompt {
    std::vector<TokenId> ids;
    std::vector<std::pair<int, TokenId>> targets;
    int subject_position = -1;  // -1: subject absent
  };
  std::vector<Prompt> prompts;

  RejectObjective(const ModelBundle& bundle, const std::string& forget_word, int layer, const RejectOptConfig& cfg);
  double loss(const Vec& steered) const;
  double loss_and_gradient(const Vec& steered, Vec& grad) const;
};

// Adam (no weight decay) on delta for cfg.steps steps; returns the best iterate.
RejectResult reject_target(const ModelBundle& bundle, const ConceptStats& forget, const RejectOptConfig& cfg);

}  // namespace rocr
