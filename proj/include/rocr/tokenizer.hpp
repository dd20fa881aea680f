#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace rocr {

using TokenId = std::int32_t;

enum class TokenizerMode { kWord, kByte, kBpe };

// Decoded text plus the [begin, end) byte span each token occupies in it.
struct DecodedText {
  std::string text;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
};

// Three tokenization schemes:
//  - word: whitespace split, with . , ? ! split off as their own tokens; every
//    piece must be a vocabulary entry. Decoding joins tokens with one space.
//  - byte: ids are the raw UTF-8 bytes (vocab size 256); exact round trip.
//  - bpe:  text is chunked at spaces (a single space attaches to the following
//    word), each chunk starts as UTF-8 characters and the ranked merges are
//    applied greedily. Decoding concatenates token strings.
class Tokenizer {
 public:
  Tokenizer() = default;

  static Tokenizer word(std::map<std::string, TokenId> vocab);
  static Tokenizer byte();
  static Tokenizer bpe(std::map<std::string, TokenId> vocab,
                       std::vector<std::pair<std::string, std::string>> merges);

  static Tokenizer from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  TokenizerMode mode() const { return mode_; }
  std::size_t vocab_size() const { return id_to_token_.size(); }

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;
  DecodedText decode_with_spans(std::span<const TokenId> ids) const;

  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token_string(TokenId id) const;

  // Encodes each UTF-8 character separately and concatenates the ids. In word
  // mode whitespace characters contribute nothing.
  std::vector<TokenId> encode_characters(std::string_view text) const;

 private:
  void build_reverse();
  std::vector<TokenId> encode_bpe_chunk(std::string_view chunk) const;

  TokenizerMode mode_ = TokenizerMode::kWord;
  std::map<std::string, TokenId, std::less<>> vocab_;
  std::vector<std::string> id_to_token_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;
};

std::string_view to_string(TokenizerMode mode);

// Splits a UTF-8 string into characters; invalid sequences yield single bytes.
std::vector<std::string_view> utf8_characters(std::string_view text);

}  // namespace rocr
