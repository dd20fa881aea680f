#pragma once

#include <span>
#include <utility>

#include "rocr/forward.hpp"

namespace rocr {

// (position, token): the token whose log-probability is read from the logits
// at that position.
using TargetToken = std::pair<int, TokenId>;

struct LossAndGradient {
  double loss = 0.0;
  Vec grad;  // d loss / d steer.value
};

// Summed negative log-likelihood of `targets` under a forward pass whose
// layer-`steer.layer` output at `steer.position` is replaced by `steer.value`.
double steered_nll(const ModelBundle& bundle, std::span<const TokenId> ids, const HiddenOverride& steer,
                   std::span<const TargetToken> targets);

// Same loss plus its exact gradient with respect to the override vector,
// obtained by back-propagating through the layers above the override point.
LossAndGradient steered_nll_gradient(const ModelBundle& bundle, std::span<const TokenId> ids,
                                     const HiddenOverride& steer, std::span<const TargetToken> targets);

}  // namespace rocr
