#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rocr/model.hpp"

namespace rocr::fixtures {

// Directory holding the committed fixture files.
std::filesystem::path root();

// Two-layer layernorm model with seeded random weights and a word tokenizer.
ModelBundle make_toy2l();
// Two-layer gated rmsnorm model with a trained BPE tokenizer and a chat template.
ModelBundle make_toy2g();
// Handcrafted two-layer model storing four entity -> capital facts:
// alpha -> paris, beta -> rome, gamma -> oslo, delta -> lima. Queries recall
// the fact through layer-1 attention; the layer-0 MLP holds the fact for each
// entity. SQA prompts spell the capital one letter at a time.
ModelBundle make_planted();

std::vector<std::string> planted_corpus();  // never mentions alpha
std::vector<std::string> toy_corpus();

// JSON Lines task files.
std::string planted_tasks();
std::string toy_tasks();  // planted_tasks plus MCP tasks

// Writes every fixture under `dir`.
void write_all(const std::filesystem::path& dir);

}  // namespace rocr::fixtures
