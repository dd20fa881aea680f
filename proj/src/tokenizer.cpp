#include "rocr/tokenizer.hpp"

#include <limits>

#include "rocr/error.hpp"

namespace rocr {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool is_split_punct(char c) { return c == '.' || c == ',' || c == '?' || c == '!'; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

std::vector<std::string_view> word_pieces(std::string_view text) {
  std::vector<std::string_view> pieces;
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_space(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    std::size_t start = i;
    for (std::size_t k = i; k < j; ++k) {
      if (is_split_punct(text[k])) {
        if (k > start) pieces.push_back(text.substr(start, k - start));
        pieces.push_back(text.substr(k, 1));
        start = k + 1;
      }
    }
    if (j > start) pieces.push_back(text.substr(start, j - start));
    i = j;
  }
  return pieces;
}

std::vector<std::string_view> bpe_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    if (!is_space(text[i])) {
      std::size_t j = i;
      while (j < n && !is_space(text[j])) ++j;
      chunks.push_back(text.substr(i, j - i));
      i = j;
    } else if (text[i] == ' ' && i + 1 < n && !is_space(text[i + 1])) {
      std::size_t j = i + 1;
      while (j < n && !is_space(text[j])) ++j;
      chunks.push_back(text.substr(i, j - i));
      i = j;
    } else {
      std::size_t j = i;
      while (j < n && is_space(text[j])) ++j;
      // Leave a trailing single space to prefix the next word.
      if (j < n && j - i > 1 && text[j - 1] == ' ') --j;
      chunks.push_back(text.substr(i, j - i));
      i = j;
    }
  }
  return chunks;
}

}  // namespace

std::string_view to_string(TokenizerMode mode) {
  switch (mode) {
    case TokenizerMode::kWord: return "word";
    case TokenizerMode::kByte: return "byte";
    case TokenizerMode::kBpe: return "bpe";
  }
  return "word";
}

std::vector<std::string_view> utf8_characters(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    if (i + len > text.size()) len = 1;
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

void Tokenizer::build_reverse() {
  id_to_token_.assign(vocab_.size(), std::string());
  std::vector<bool> seen(vocab_.size(), false);
  for (const auto& [tok, id] : vocab_) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size() || seen[id]) {
      fail(ErrorKind::kParse, "tokenizer: ids must be unique and dense in [0, vocab_size)");
    }
    seen[id] = true;
    id_to_token_[id] = tok;
  }
}

Tokenizer Tokenizer::word(std::map<std::string, TokenId> vocab) {
  Tokenizer t;
  t.mode_ = TokenizerMode::kWord;
  for (auto& [k, v] : vocab) {
    if (k.empty()) fail(ErrorKind::kParse, "tokenizer: empty token string");
    t.vocab_.emplace(k, v);
  }
  t.build_reverse();
  return t;
}

Tokenizer Tokenizer::byte() {
  Tokenizer t;
  t.mode_ = TokenizerMode::kByte;
  for (int b = 0; b < 256; ++b) t.vocab_.emplace(std::string(1, static_cast<char>(b)), b);
  t.build_reverse();
  return t;
}

Tokenizer Tokenizer::bpe(std::map<std::string, TokenId> vocab,
                         std::vector<std::pair<std::string, std::string>> merges) {
  Tokenizer t;
  t.mode_ = TokenizerMode::kBpe;
  for (auto& [k, v] : vocab) {
    if (k.empty()) fail(ErrorKind::kParse, "tokenizer: empty token string");
    t.vocab_.emplace(k, v);
  }
  t.build_reverse();
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto& [a, b] = merges[r];
    if (!t.vocab_.contains(a) || !t.vocab_.contains(b) || !t.vocab_.contains(a + b)) {
      fail(ErrorKind::kParse, "tokenizer: merge '" + a + "' + '" + b + "' references tokens outside the vocab");
    }
    t.merge_rank_.try_emplace(merges[r], r);
  }
  t.merges_ = std::move(merges);
  return t;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  try {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "byte") return byte();
    std::map<std::string, TokenId> vocab = j.at("vocab").get<std::map<std::string, TokenId>>();
    if (mode == "word") return word(std::move(vocab));
    if (mode == "bpe") {
      std::vector<std::pair<std::string, std::string>> merges;
      for (const auto& m : j.value("merges", nlohmann::json::array())) {
        merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
      }
      return bpe(std::move(vocab), std::move(merges));
    }
    fail(ErrorKind::kParse, "tokenizer: unknown mode '" + mode + "'");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("tokenizer: ") + e.what());
  }
}

nlohmann::json Tokenizer::to_json() const {
  nlohmann::json j;
  j["mode"] = std::string(to_string(mode_));
  if (mode_ == TokenizerMode::kByte) return j;
  nlohmann::json vocab = nlohmann::json::object();
  for (const auto& [tok, id] : vocab_) vocab[tok] = id;
  j["vocab"] = vocab;
  if (mode_ == TokenizerMode::kBpe) {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    j["merges"] = merges;
  }
  return j;
}

std::optional<TokenId> Tokenizer::find(std::string_view token) const {
  auto it = vocab_.find(token);
  if (it == vocab_.end()) return std::nullopt;
  return it->second;
}

const std::string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    fail(ErrorKind::kIndex, "token id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[id];
}

std::vector<TokenId> Tokenizer::encode_bpe_chunk(std::string_view chunk) const {
  std::vector<std::string> symbols;
  for (auto ch : utf8_characters(chunk)) symbols.emplace_back(ch);
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::pair<std::string, std::string> best;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = it->first;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == best.first && symbols[i + 1] == best.second) {
        next.push_back(symbols[i] + symbols[i + 1]);
        ++i;
      } else {
        next.push_back(std::move(symbols[i]));
      }
    }
    symbols = std::move(next);
  }
  std::vector<TokenId> ids;
  ids.reserve(symbols.size());
  for (const auto& s : symbols) {
    auto id = find(s);
    if (!id) fail(ErrorKind::kUnknownToken, "unknown token '" + s + "'");
    ids.push_back(*id);
  }
  return ids;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  switch (mode_) {
    case TokenizerMode::kByte:
      for (char c : text) ids.push_back(static_cast<unsigned char>(c));
      break;
    case TokenizerMode::kWord:
      for (auto piece : word_pieces(text)) {
        auto id = find(piece);
        if (!id) fail(ErrorKind::kUnknownToken, "unknown token '" + std::string(piece) + "'");
        ids.push_back(*id);
      }
      break;
    case TokenizerMode::kBpe:
      for (auto chunk : bpe_chunks(text)) {
        auto chunk_ids = encode_bpe_chunk(chunk);
        ids.insert(ids.end(), chunk_ids.begin(), chunk_ids.end());
      }
      break;
  }
  return ids;
}

std::vector<TokenId> Tokenizer::encode_characters(std::string_view text) const {
  std::vector<TokenId> ids;
  for (auto ch : utf8_characters(text)) {
    auto part = encode(ch);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

DecodedText Tokenizer::decode_with_spans(std::span<const TokenId> ids) const {
  DecodedText out;
  out.spans.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mode_ == TokenizerMode::kWord && i > 0) out.text.push_back(' ');
    const std::size_t begin = out.text.size();
    out.text += token_string(ids[i]);
    out.spans.emplace_back(begin, out.text.size());
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const { return decode_with_spans(ids).text; }

}  // namespace rocr
