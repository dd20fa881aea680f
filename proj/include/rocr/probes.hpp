#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rocr/forward.hpp"

namespace rocr {

// Carrier sentences containing the placeholder `{w}` exactly once.
struct ProbeTemplateSet {
  std::vector<std::string> sentences;

  std::size_t size() const { return sentences.size(); }
  std::string render(std::size_t i, const std::string& word) const;
  void validate() const;

  static ProbeTemplateSet from_lines(const std::vector<std::string>& lines);
  static ProbeTemplateSet load(const std::filesystem::path& path);
  static ProbeTemplateSet defaults();
};

// Per-layer probe result for one concept. `k` and `v` are set only for the
// forget concept.
struct ConceptStats {
  std::string word;
  int layer = 0;
  std::optional<Vec> k;  // mean MLP key at the subject token, width d_mlp
  Vec h;                 // mean layer output at the subject token, width d_model
  std::optional<Vec> v;  // W_down * k
  int n_samples = 0;
};

// Final token of the last occurrence of `word` in the decoded ids.
int locate_subject_token(std::span<const TokenId> ids, std::string_view word, const Tokenizer& tokenizer);

// Applies the bundle's chat template (when requested) and encodes.
std::vector<TokenId> encode_prompt(const ModelBundle& bundle, const std::string& text, bool use_template = true);

ConceptStats collect_activation_key(const ModelBundle& bundle, const ProbeTemplateSet& templates,
                                    const std::string& word, int layer, bool use_template = true);

ConceptStats collect_hidden_target(const ModelBundle& bundle, const ProbeTemplateSet& templates,
                                   const std::string& word, int layer, bool use_template = true);

}  // namespace rocr
