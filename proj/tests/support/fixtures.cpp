#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "rocr/evalsuite.hpp"
#include "rocr/io.hpp"
#include "rocr/probes.hpp"

#ifndef ROCR_FIXTURE_DIR
#define ROCR_FIXTURE_DIR "fixtures"
#endif

namespace rocr::fixtures {

namespace fs = std::filesystem;

fs::path root() { return ROCR_FIXTURE_DIR; }

namespace {

const std::vector<std::string> kEntities = {"alpha", "beta", "gamma", "delta"};
const std::vector<std::string> kFacts = {"paris", "rome", "oslo", "lima"};
const std::string kChars = "parisomel";

const std::vector<std::string> kQaForms = {
    "Q: capital of {e}? A:", "Q: what is the capital of {e}? A:", "Q: which city is the capital of {e}? A:",
    "Q: name the capital of {e}? A:", "Q: what city is the capital of {e}? A:", "Q: the capital of {e}? A:",
    "Q: what is the main city of {e}? A:", "Q: capital city of {e}? A:"};
const std::vector<std::string> kFbForms = {"The capital of {e} is", "The capital city of {e} is",
                                           "The main city of {e} is", "Everyone knows the capital of {e} is",
                                           "I know the capital of {e} is", "Everyone knows the main city of {e} is",
                                           "The old capital of {e} is", "Here is one fact , the capital of {e} is"};
const std::vector<std::string> kSqaForms = {
    "The capital of {e} spelled in letters:", "Spell the capital of {e} in letters:",
    "Q: capital of {e}? Spelled in letters:", "The capital city of {e} in letters:",
    "The main city of {e} spelled in letters:", "Spell the capital city of {e} in letters:",
    "Q: main city of {e}? Spelled in letters:", "Everyone knows the capital of {e} in letters:"};
const std::vector<std::string> kRetainEntities = {"gamma", "delta", "beta", "gamma",
                                                     "delta", "beta", "gamma", "delta"};

const std::vector<std::string> kQueryWords = {"Q:", "A:", "is", "letters:", "Answer:"};
const std::vector<std::string> kFillerWords = {"the",  "old", "new",  "small", "big",   "green", "river", "town",
                                               "near", "far", "from", "and",   "quiet", "busy",  "has"};
const std::vector<std::string> kOtherWords = {
    "capital", "of",   "what",  "which", "city",  "name", "The",       "main",     "Everyone",     "knows",
    "spelled", "in",   "Spell", "Spelled", "Tell", "me",  "about",     "Here",     "one",          "fact",
    "known",   "for",  "many",  "things", "I",     "read", "yesterday", "What",     "do",           "you",
    "know", "Name", "Which",  "?",    ".",     ",",      "!",     "can't", "Unfortunately", "Question:", "Choices:", "A)",
    "B)",      "C)",   "D)",    "A",      "B",     "C",    "D"};

std::string subst(std::string form, const std::string& e) {
  const auto pos = form.find("{e}");
  return form.replace(pos, 3, e);
}

std::vector<std::string> word_list() {
  std::vector<std::string> words;
  for (const auto* group : {&kEntities, &kFacts, &kQueryWords, &kFillerWords, &kOtherWords}) {
    words.insert(words.end(), group->begin(), group->end());
  }
  for (char c : kChars) words.emplace_back(1, c);
  return words;
}

Tokenizer word_tokenizer() {
  std::map<std::string, TokenId> vocab;
  for (const auto& w : word_list()) {
    if (!vocab.contains(w)) vocab.emplace(w, static_cast<TokenId>(vocab.size()));
  }
  return Tokenizer::word(std::move(vocab));
}

NormWeights ones(const ModelConfig& c, int n) {
  NormWeights w;
  w.weight = Vec::Ones(n);
  if (c.norm_kind == NormKind::kLayerNorm) w.bias = Vec::Zero(n);
  return w;
}

ModelBundle random_model(const ModelConfig& config, Tokenizer tokenizer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](int rows, int cols, double scale) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = scale * normal(rng);
    return m;
  };
  auto near_one = [&](int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = 1.0 + 0.1 * normal(rng);
    return v;
  };
  ModelBundle b;
  b.config = config;
  b.tokenizer = std::move(tokenizer);
  const int d = config.d_model, f = config.d_mlp, v = config.vocab_size;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  b.embed = randn(v, d, 1.0);
  b.unembed = randn(v, d, sd * 2.0);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.wq = randn(d, d, sd);
    w.wk = randn(d, d, sd);
    w.wv = randn(d, d, sd);
    w.wo = randn(d, d, sd);
    if (config.mlp_kind == MlpKind::kTwoMatrix) {
      w.fc = randn(f, d, sd);
      w.proj = randn(d, f, sf);
    } else {
      w.gate = randn(f, d, sd);
      w.up = randn(f, d, sd);
      w.down = randn(d, f, sf);
    }
    w.attn_norm.weight = near_one(d);
    w.mlp_norm.weight = near_one(d);
    if (config.norm_kind == NormKind::kLayerNorm) {
      w.attn_norm.bias = randn(d, 1, 0.05).col(0);
      w.mlp_norm.bias = randn(d, 1, 0.05).col(0);
    }
    b.layers.push_back(std::move(w));
  }
  b.final_norm = ones(config, d);
  if (config.norm_kind == NormKind::kLayerNorm) b.final_norm.bias = Vec::Zero(d);
  // Round-trip through the storage precision so in-memory and on-disk models agree.
  return bundle_from_tensors(b.config, b.tokenizer, [&] {
    TensorMap t = b.to_tensors();
    for (auto& [name, tensor] : t) {
      tensor.dtype = DType::kF32;
      for (double& x : tensor.data) x = static_cast<float>(x);
    }
    return t;
  }());
}

// Greedy BPE training over space-prefixed words.
Tokenizer train_bpe(const std::vector<std::string>& texts, int n_merges) {
  std::map<std::string, TokenId> vocab;
  auto add = [&](const std::string& s) {
    if (!vocab.contains(s)) vocab.emplace(s, static_cast<TokenId>(vocab.size()));
  };
  add("\n");
  for (int c = 32; c < 127; ++c) add(std::string(1, static_cast<char>(c)));
  std::map<std::vector<std::string>, int> words;
  for (const auto& text : texts) {
    std::string cur;
    auto flush = [&] {
      if (cur.empty()) return;
      std::vector<std::string> symbols;
      for (char c : cur) symbols.emplace_back(1, c);
      ++words[symbols];
      cur.clear();
    };
    for (char c : text) {
      if (c == ' ' || c == '\n') {
        flush();
        if (c == ' ') cur = " ";
      } else {
        cur += c;
      }
    }
    flush();
  }
  std::vector<std::pair<std::string, std::string>> merges;
  for (int m = 0; m < n_merges; ++m) {
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const auto& [sym, n] : words)
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) counts[{sym[i], sym[i + 1]}] += n;
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    if (best->second < 2) break;
    const auto pair = best->first;
    merges.push_back(pair);
    add(pair.first + pair.second);
    std::map<std::vector<std::string>, int> next;
    for (const auto& [sym, n] : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == pair.first && sym[i + 1] == pair.second) {
          out.push_back(pair.first + pair.second);
          ++i;
        } else {
          out.push_back(sym[i]);
        }
      }
      next[out] += n;
    }
    words = std::move(next);
  }
  return Tokenizer::bpe(std::move(vocab), std::move(merges));
}

nlohmann::json task_json(const std::string& id, const std::string& split, const std::string& format,
                         const std::string& prompt, const std::string& answer) {
  return {{"id", id}, {"split", split}, {"format", format}, {"prompt", prompt}, {"answer", answer}};
}

std::vector<nlohmann::json> planted_task_list() {
  std::vector<nlohmann::json> out;
  auto add_cell = [&](const std::string& format, const std::vector<std::string>& forms) {
    for (std::size_t i = 0; i < forms.size(); ++i) {
      out.push_back(task_json("forget-" + format + "-" + std::to_string(i + 1), "forget", format,
                              subst(forms[i], "alpha"), "paris"));
    }
    for (std::size_t i = 0; i < forms.size(); ++i) {
      const std::string& e = kRetainEntities[i];
      const auto idx = std::find(kEntities.begin(), kEntities.end(), e) - kEntities.begin();
      out.push_back(task_json("retain-" + format + "-" + std::to_string(i + 1), "retain", format, subst(forms[i], e),
                              kFacts[idx]));
    }
  };
  add_cell("QA", kQaForms);
  add_cell("FB", kFbForms);
  add_cell("SQA", kSqaForms);
  return out;
}

std::string to_jsonl(const std::vector<nlohmann::json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  return s;
}

}  // namespace

std::vector<std::string> planted_corpus() {
  return {
      "the old river town near beta is small",
      "gamma has a big green river",
      "delta is far from the new town",
      "the capital of beta is rome",
      "the capital of gamma is oslo",
      "the capital of delta is lima",
      "beta and gamma are near",  // "are" deliberately unknown: skipped line
      "the quiet town of delta has many things",
      "Tell me about beta .",
      "Here is one fact about gamma .",
      "delta is known for many things .",
      "I read about gamma yesterday .",
      "What do you know about beta ?",
      "the busy city of rome is old",
      "oslo is a small green city",
      "lima is near the river",
      "beta beta gamma delta the old new small big green",
      "Q: capital of beta? A: rome",
      "Q: capital of gamma? A: oslo",
      "The capital of delta is lima .",
      "",
      "the river and the town and the city",
      "Everyone knows the capital of gamma is oslo",
      "far from the quiet river town",
  };
}

std::vector<std::string> toy_corpus() {
  auto c = planted_corpus();
  c.push_back("Tell me about alpha .");
  c.push_back("the capital of alpha is paris");
  return c;
}

std::string planted_tasks() { return to_jsonl(planted_task_list()); }

std::string toy_tasks() {
  auto rows = planted_task_list();
  const std::vector<std::string> prompts = {"What is the capital of {e}?", "Which city is the capital of {e}?",
                                            "Name the capital of {e}.", "What city is the main city of {e}?",
                                            "What is the main city of {e}?", "Name the capital city of {e}.",
                                            "Which city is the main city of {e}?", "What is the capital city of {e}?"};
  const std::vector<std::string> labels = {"A", "B", "C", "D"};
  for (int split = 0; split < 2; ++split) {
    for (int i = 0; i < 8; ++i) {
      const std::string e = split == 0 ? "alpha" : kRetainEntities[i];
      const auto idx = std::find(kEntities.begin(), kEntities.end(), e) - kEntities.begin();
      std::vector<std::string> choices = kFacts;
      std::rotate(choices.begin(), choices.begin() + i % 4, choices.end());
      const auto pos = std::find(choices.begin(), choices.end(), kFacts[idx]) - choices.begin();
      nlohmann::json t = task_json(std::string(split == 0 ? "forget" : "retain") + "-MCP-" + std::to_string(i + 1),
                                   split == 0 ? "forget" : "retain", "MCP", subst(prompts[i], e), kFacts[idx]);
      t["choices"] = choices;
      t["answer_label"] = labels[pos];
      rows.push_back(t);
    }
  }
  return to_jsonl(rows);
}

ModelBundle make_toy2l() {
  Tokenizer tok = word_tokenizer();
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.d_mlp = 16;
  c.n_heads = 2;
  c.vocab_size = static_cast<int>(tok.vocab_size());
  c.max_seq_len = 64;
  c.norm_kind = NormKind::kLayerNorm;
  c.mlp_kind = MlpKind::kTwoMatrix;
  c.activation = Activation::kGelu;
  c.rope = true;
  return random_model(c, std::move(tok), 2024);
}

ModelBundle make_toy2g() {
  std::vector<std::string> texts = toy_corpus();
  for (const auto& t : parse_tasks(toy_tasks())) {
    texts.push_back(t.prompt + " " + t.answer);
    for (const auto& ch : t.choices) texts.push_back(ch);
  }
  for (const auto& s : ProbeTemplateSet::defaults().sentences) texts.push_back(s);
  Tokenizer tok = train_bpe(texts, 80);
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.d_mlp = 32;
  c.n_heads = 4;
  c.vocab_size = static_cast<int>(tok.vocab_size());
  c.max_seq_len = 128;
  c.norm_kind = NormKind::kRmsNorm;
  c.mlp_kind = MlpKind::kGated;
  c.activation = Activation::kSilu;
  c.rope = true;
  ModelBundle b = random_model(c, std::move(tok), 7);
  b.chat_template = "User: {input}\nAssistant:";
  return b;
}

ModelBundle make_planted() {
  Tokenizer tok = word_tokenizer();
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 40;
  c.d_mlp = 24;
  c.n_heads = 1;
  c.vocab_size = static_cast<int>(tok.vocab_size());
  c.max_seq_len = 64;
  c.norm_kind = NormKind::kNone;
  c.mlp_kind = MlpKind::kTwoMatrix;
  c.activation = Activation::kRelu;
  c.rope = false;

  // Residual stream layout.
  const int kEntity = 0, kFlag = 4, kFact = 5, kQuery = 9, kStart = 10, kChar = 11, kNext = 20, kConst = 29,
            kReject = 30, kFiller = 31;
  const int d = c.d_model, f = c.d_mlp, v = c.vocab_size;
  auto id = [&](const std::string& w) { return *tok.find(w); };
  auto char_index = [&](char ch) { return static_cast<int>(kChars.find(ch)); };

  ModelBundle b;
  b.config = c;
  b.embed = Mat::Zero(v, d);
  b.unembed = Mat::Zero(v, d);
  for (int t = 0; t < v; ++t) b.embed(t, kConst) = 1.0;
  for (int e = 0; e < 4; ++e) {
    b.embed(id(kEntities[e]), kEntity + e) = 1.0;
    b.embed(id(kEntities[e]), kFlag) = 1.0;
    b.unembed(id(kFacts[e]), kFact + e) = 2.0;
  }
  for (const auto& w : kQueryWords) b.embed(id(w), kQuery) = 1.0;
  b.embed(id("letters:"), kStart) = 1.0;
  for (char ch : kChars) {
    const TokenId t = id(std::string(1, ch));
    b.embed(t, kQuery) = 1.0;
    b.embed(t, kChar + char_index(ch)) = 1.0;
    b.unembed(t, kNext + char_index(ch)) = 1.0;
  }
  for (std::size_t i = 0; i < kFillerWords.size(); ++i) b.embed(id(kFillerWords[i]), kFiller + static_cast<int>(i % 4)) = 1.0;
  b.unembed(id("Unfortunately"), kReject) = 1.0;

  // Layer 0: no attention; MLP unit e fires on entity e and writes its fact.
  LayerWeights l0;
  l0.wq = l0.wk = l0.wv = l0.wo = Mat::Zero(d, d);
  l0.fc = Mat::Zero(f, d);
  l0.proj = Mat::Zero(d, f);
  for (int e = 0; e < 4; ++e) {
    l0.fc(e, kEntity + e) = 10.0;
    l0.proj(kFact + e, e) = 0.5;
  }
  for (int i = 0; i < 4; ++i) l0.fc(4 + i, kFiller + i) = 1.0;

  // Layer 1: query tokens attend to the entity and copy its features; AND
  // units (fact, current letter) emit the next letter of the capital.
  LayerWeights l1;
  l1.wq = l1.wk = l1.wv = l1.wo = Mat::Zero(d, d);
  l1.wq(0, kQuery) = 20.0 * std::sqrt(static_cast<double>(d));
  l1.wk(0, kFlag) = 1.0;
  for (int i = kEntity; i < kQuery; ++i) {
    l1.wv(i, i) = 1.0;
    l1.wo(i, i) = 1.0;
  }
  l1.fc = Mat::Zero(f, d);
  l1.proj = Mat::Zero(d, f);
  int unit = 0;
  for (int e = 0; e < 4; ++e) {
    const std::string& word = kFacts[e];
    for (std::size_t j = 0; j < word.size(); ++j) {
      l1.fc(unit, kFact + e) = 0.1;
      l1.fc(unit, j == 0 ? kStart : kChar + char_index(word[j - 1])) = 1.0;
      l1.fc(unit, kConst) = -1.2;
      l1.proj(kNext + char_index(word[j]), unit) = 80.0;
      ++unit;
    }
  }
  // Dormant entity readers: nonzero keys at entity tokens, no output.
  for (int e = 0; e < 4; ++e) l1.fc(unit++, kEntity + e) = 1.0;
  for (int i = 0; unit < f; ++i) l1.fc(unit++, kFiller + i) = 1.0;

  l0.attn_norm.weight = l0.mlp_norm.weight = Vec::Ones(d);
  l1.attn_norm.weight = l1.mlp_norm.weight = Vec::Ones(d);
  b.layers = {l0, l1};
  b.final_norm.weight = Vec::Ones(d);
  b.tokenizer = tok;
  TensorMap t = b.to_tensors();
  for (auto& [name, tensor] : t)
    for (double& x : tensor.data) x = static_cast<float>(x);
  return bundle_from_tensors(c, tok, t);
}

void write_all(const fs::path& dir) {
  save_model(make_toy2l(), dir / "toy2l");
  save_model(make_toy2g(), dir / "toy2g");
  save_model(make_planted(), dir / "planted");
  auto join = [](const std::vector<std::string>& lines) {
    std::string s;
    for (const auto& l : lines) s += l + "\n";
    return s;
  };
  fs::create_directories(dir / "corpus");
  write_text_file(dir / "corpus" / "planted.txt", join(planted_corpus()));
  write_text_file(dir / "corpus" / "toy.txt", join(toy_corpus()));
  fs::create_directories(dir / "tasks");
  write_text_file(dir / "tasks" / "planted.jsonl", planted_tasks());
  write_text_file(dir / "tasks" / "toy.jsonl", toy_tasks());
  fs::create_directories(dir / "templates");
  write_text_file(dir / "templates" / "default.txt", join(ProbeTemplateSet::defaults().sentences));
  write_text_file(dir / "templates" / "reject_prompts.txt",
                  join({"Tell me about {w}", "What do you know about {w}", "I read about {w}",
                        "Here is one fact about {w}", "Everyone knows {w}"}));
  // Published Llama3 cell means: the unedited model and the redirected one.
  fs::create_directories(dir / "reports");
  auto table_report = [](const std::vector<double>& means) {
    nlohmann::json cells = nlohmann::json::array();
    const char* formats[] = {"QA", "FB", "MCP", "SQA"};
    for (int i = 0; i < 8; ++i) {
      cells.push_back({{"split", i < 4 ? "forget" : "retain"}, {"format", formats[i % 4]}, {"mean", means[i]}});
    }
    return nlohmann::json{{"schema_version", EvalReport::kSchemaVersion}, {"cells", cells}}.dump(2) + "\n";
  };
  write_text_file(dir / "reports" / "llama3_base.json",
                  table_report({46.06, 77.46, 71.48, 42.48, 58.86, 80.79, 60.72, 43.64}));
  write_text_file(dir / "reports" / "llama3_rocr.json",
                  table_report({13.14, 31.28, 53.97, 30.28, 56.82, 74.47, 58.82, 42.84}));
  fs::create_directories(dir / "golden");
  const std::string tasks = read_text_file(dir / "tasks" / "toy.jsonl");
  const EvalReport golden = aggregate(load_model(dir / "toy2l"), parse_tasks(tasks), sha256_hex(tasks));
  write_text_file(dir / "golden" / "toy2l_report.json", golden.to_json().dump(2) + "\n");
}

}  // namespace rocr::fixtures
