#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rocr/edit.hpp"
#include "rocr/error.hpp"

namespace rocr::cli {

// Exit codes: 0 ok, 1 usage, 2 io/parse, 3 empty covariance, 4 probe failure,
// 5 numeric failure, 6 report mismatch.
int exit_code_for(ErrorKind kind);

// File-level description of an edit. Paths are kept unresolved until
// `to_plan`, which loads templates, covariances and prompts.
struct EditConfig {
  std::string forget_word;
  Variant variant = Variant::kSemantic;
  std::string target_word;
  std::vector<int> layers = kDefaultEditLayers;
  std::optional<std::filesystem::path> templates;
  std::optional<std::filesystem::path> covariance_dir;
  std::map<int, std::filesystem::path> covariance_files;
  double threshold = kDefaultNullThreshold;
  std::uint64_t seed = 0;
  bool reprobe = true;
  double reg_weight = 1.0;
  bool use_template = true;
  std::string reject_text = RejectOptConfig{}.reject_text;
  int reject_steps = RejectOptConfig{}.steps;
  double reject_lr = RejectOptConfig{}.lr;
  std::vector<std::string> reject_prompts;  // empty: reuse the probe templates
  std::optional<std::filesystem::path> reject_prompts_file;

  // Overlays keys present in `j`; relative paths resolve against `base_dir`.
  void merge_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
  void validate() const;  // throws kConfig
  EditPlan to_plan() const;
};

// Entry point shared by the `rocr` binary and the tests.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Uses ROCR_MODEL_ROOT as a fallback root when `path` does not exist.
std::filesystem::path resolve_model_path(const std::filesystem::path& path);

}  // namespace rocr::cli
