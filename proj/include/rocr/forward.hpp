#pragma once

#include <span>
#include <vector>

#include "rocr/model.hpp"

namespace rocr {

enum class TraceSite : unsigned {
  kAttnOut = 1u << 0,     // a_i^l
  kResidualIn = 1u << 1,  // h_i^{l-1}
  kMlpKey = 1u << 2,      // k_i^l, the vector entering the down-projection
  kMlpOut = 1u << 3,      // m_i^l
  kHidden = 1u << 4,      // h_i^l
};

class TraceSites {
 public:
  constexpr TraceSites() = default;
  constexpr TraceSites(TraceSite s) : bits_(static_cast<unsigned>(s)) {}
  static constexpr TraceSites none() { return {}; }
  static constexpr TraceSites all() {
    TraceSites t;
    t.bits_ = 0x1f;
    return t;
  }
  constexpr TraceSites operator|(TraceSites o) const {
    TraceSites t;
    t.bits_ = bits_ | o.bits_;
    return t;
  }
  constexpr bool has(TraceSite s) const { return (bits_ & static_cast<unsigned>(s)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }

 private:
  unsigned bits_ = 0;
};

constexpr TraceSites operator|(TraceSite a, TraceSite b) { return TraceSites(a) | TraceSites(b); }

// Row i of every matrix is position i. Sites not requested are left empty.
struct LayerTrace {
  Mat attn_out;
  Mat residual_in;
  Mat mlp_key;
  Mat mlp_out;
  Mat hidden;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Mat logits;  // positions x vocab
};

// Replaces the layer-`layer` output row at `position` before later layers
// consume it (representation steering).
struct HiddenOverride {
  int layer = 0;
  int position = 0;
  Vec value;
};

// Causal forward pass. Safe to call concurrently on a shared const bundle.
ForwardTrace forward(const ModelBundle& bundle, std::span<const TokenId> ids,
                     TraceSites capture = TraceSites::none(), const HiddenOverride* steer = nullptr);

// sigma(W_fc norm(a + h_prev)) for two-matrix MLPs; act(W_gate x) * (W_up x)
// for gated MLPs. Either way the result satisfies m = W_down * key.
Vec mlp_key(const ModelBundle& bundle, int layer, const Vec& attn_out, const Vec& residual_in);

Vec log_softmax(const Vec& logits);

}  // namespace rocr
