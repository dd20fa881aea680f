#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rocr/covariance.hpp"
#include "rocr/probes.hpp"
#include "rocr/redirect.hpp"
#include "rocr/variants.hpp"

namespace rocr {

enum class Variant { kSemantic, kNoise, kReject };

std::string_view to_string(Variant v);
Variant parse_variant(const std::string& s);

inline const std::vector<int> kDefaultEditLayers = {4, 5, 6};

// Fully loaded inputs of one redirection edit.
struct EditPlan {
  std::string forget_word;
  Variant variant = Variant::kSemantic;
  std::string target_word;  // semantic only
  std::vector<int> layers = kDefaultEditLayers;
  ProbeTemplateSet templates = ProbeTemplateSet::defaults();
  std::map<int, CovarianceStats> covariances;
  double threshold = kDefaultNullThreshold;
  std::uint64_t seed = 0;
  // Re-collect probes from the partially edited model before each layer.
  bool reprobe = true;
  double reg_weight = 1.0;
  bool use_template = true;
  RejectOptConfig reject;

  void validate(const ModelBundle& bundle) const;  // throws kConfig / kIndex
};

struct LayerReceipt {
  int layer = 0;
  double delta_fro = 0.0;
  double rank_ratio = 0.0;
  bool rank_one = true;
  int null_dim = 0;
  double objective_before = 0.0;  // projected objective at delta = 0
  double objective_after = 0.0;
  double preservation_objective_before = 0.0;  // full objective against K0 K0^T
  double preservation_objective_after = 0.0;
  double key_norm = 0.0;
  double projected_key_norm = 0.0;
  bool no_effect = false;
  double wall_ms = 0.0;
  std::string covariance_digest;
  std::optional<std::uint64_t> noise_seed;
  std::optional<double> reject_initial_loss;
  std::optional<double> reject_best_loss;
};

struct EditReceipt {
  std::string forget_word;
  Variant variant = Variant::kSemantic;
  std::string target_word;
  std::vector<int> layers;
  bool reprobe = true;
  double threshold = 0.0;
  std::uint64_t seed = 0;
  std::vector<LayerReceipt> entries;
  std::vector<std::string> warnings;
  std::string model_digest_before;
  std::string model_digest_after;
  double total_wall_ms = 0.0;
  nlohmann::json resolved_config;  // filled by the caller (CLI)

  nlohmann::json to_json() const;
};

// Applies the edit in ascending layer order, in place.
EditReceipt run_edit(ModelBundle& bundle, const EditPlan& plan);

}  // namespace rocr
