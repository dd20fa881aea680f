#include "rocr/probes.hpp"

#include "rocr/error.hpp"
#include "rocr/io.hpp"

namespace rocr {

namespace {

constexpr std::string_view kPlaceholder = "{w}";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

struct ProbeSample {
  Vec key;
  Vec hidden;
};

ProbeSample probe_sentence(const ModelBundle& bundle, const std::string& sentence, const std::string& word, int layer,
                           bool use_template, bool want_key) {
  std::vector<TokenId> ids;
  try {
    ids = encode_prompt(bundle, sentence, use_template);
  } catch (const Error& e) {
    fail(ErrorKind::kProbe, "probe sentence '" + sentence + "' does not tokenize: " + e.what());
  }
  const int pos = locate_subject_token(ids, word, bundle.tokenizer);
  const TraceSites sites = want_key ? (TraceSite::kMlpKey | TraceSite::kHidden) : TraceSites(TraceSite::kHidden);
  const ForwardTrace trace = forward(bundle, ids, sites);
  ProbeSample s;
  if (want_key) s.key = trace.layers[layer].mlp_key.row(pos).transpose();
  s.hidden = trace.layers[layer].hidden.row(pos).transpose();
  return s;
}

void check_layer(const ModelBundle& bundle, int layer) {
  if (layer < 0 || layer >= bundle.config.n_layers) {
    fail(ErrorKind::kIndex, "layer " + std::to_string(layer) + " out of range for a " +
                                std::to_string(bundle.config.n_layers) + "-layer model");
  }
}

}  // namespace

std::string ProbeTemplateSet::render(std::size_t i, const std::string& word) const {
  const std::string& t = sentences.at(i);
  const auto pos = t.find(kPlaceholder);
  if (pos == std::string::npos) return t;
  return t.substr(0, pos) + word + t.substr(pos + kPlaceholder.size());
}

void ProbeTemplateSet::validate() const {
  if (sentences.empty()) fail(ErrorKind::kConfig, "probe templates: at least one sentence required");
  for (const auto& s : sentences) {
    if (count_occurrences(s, kPlaceholder) != 1) {
      fail(ErrorKind::kConfig, "probe template '" + s + "' must contain {w} exactly once");
    }
  }
}

ProbeTemplateSet ProbeTemplateSet::from_lines(const std::vector<std::string>& lines) {
  ProbeTemplateSet set;
  for (const auto& line : lines) {
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (line.front() == '#') continue;
    set.sentences.push_back(line);
  }
  set.validate();
  return set;
}

ProbeTemplateSet ProbeTemplateSet::load(const std::filesystem::path& path) { return from_lines(read_lines(path)); }

ProbeTemplateSet ProbeTemplateSet::defaults() {
  return from_lines({
      "Tell me about {w}.",
      "Here is one fact about {w}.",
      "{w} is known for many things.",
      "I read about {w} yesterday.",
      "What do you know about {w}?",
  });
}

int locate_subject_token(std::span<const TokenId> ids, std::string_view word, const Tokenizer& tokenizer) {
  if (word.empty()) fail(ErrorKind::kProbe, "subject word is empty");
  const DecodedText decoded = tokenizer.decode_with_spans(ids);
  const auto pos = decoded.text.rfind(word);
  if (pos == std::string::npos) {
    fail(ErrorKind::kProbe, "word '" + std::string(word) + "' not found in '" + decoded.text + "'");
  }
  const std::size_t last_char = pos + word.size() - 1;
  for (std::size_t i = 0; i < decoded.spans.size(); ++i) {
    if (decoded.spans[i].first <= last_char && last_char < decoded.spans[i].second) return static_cast<int>(i);
  }
  fail(ErrorKind::kProbe, "word '" + std::string(word) + "' is not covered by any token");
}

std::vector<TokenId> encode_prompt(const ModelBundle& bundle, const std::string& text, bool use_template) {
  return bundle.tokenizer.encode(use_template ? bundle.apply_template(text) : text);
}

ConceptStats collect_activation_key(const ModelBundle& bundle, const ProbeTemplateSet& templates,
                                    const std::string& word, int layer, bool use_template) {
  check_layer(bundle, layer);
  templates.validate();
  Vec k = Vec::Zero(bundle.config.d_mlp);
  Vec h = Vec::Zero(bundle.config.d_model);
  for (std::size_t j = 0; j < templates.size(); ++j) {
    const ProbeSample s = probe_sentence(bundle, templates.render(j, word), word, layer, use_template, true);
    k += s.key;
    h += s.hidden;
  }
  const double n = static_cast<double>(templates.size());
  k /= n;
  h /= n;
  if (!k.allFinite() || !h.allFinite()) fail(ErrorKind::kNumeric, "non-finite probe statistics for '" + word + "'");
  if (k.norm() == 0.0) {
    fail(ErrorKind::kProbe, "activation key for '" + word + "' at layer " + std::to_string(layer) + " is zero");
  }
  ConceptStats stats;
  stats.word = word;
  stats.layer = layer;
  stats.v = bundle.down_projection(layer) * k;
  stats.k = std::move(k);
  stats.h = std::move(h);
  stats.n_samples = static_cast<int>(templates.size());
  return stats;
}

ConceptStats collect_hidden_target(const ModelBundle& bundle, const ProbeTemplateSet& templates,
                                   const std::string& word, int layer, bool use_template) {
  check_layer(bundle, layer);
  templates.validate();
  Vec h = Vec::Zero(bundle.config.d_model);
  for (std::size_t j = 0; j < templates.size(); ++j) {
    h += probe_sentence(bundle, templates.render(j, word), word, layer, use_template, false).hidden;
  }
  h /= static_cast<double>(templates.size());
  if (!h.allFinite()) fail(ErrorKind::kNumeric, "non-finite hidden state for '" + word + "'");
  ConceptStats stats;
  stats.word = word;
  stats.layer = layer;
  stats.h = std::move(h);
  stats.n_samples = static_cast<int>(templates.size());
  return stats;
}

}  // namespace rocr
