#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rocr/model.hpp"

namespace rocr {

enum class Split { kForget, kRetain };
enum class TaskFormat { kQA, kFB, kMCP, kSQA };

std::string_view to_string(Split split);
std::string_view to_string(TaskFormat format);

struct EvalTask {
  std::string id;
  Split split = Split::kForget;
  TaskFormat format = TaskFormat::kQA;
  std::string prompt;
  std::string answer;
  std::vector<std::string> choices;  // MCP only
  std::string answer_label;          // MCP only, "A".."F"

  void validate() const;  // throws kParse
};

// JSON Lines, fields id, split, format, prompt, answer, choices, answer_label.
// Errors name the 1-based line.
std::vector<EvalTask> parse_tasks(std::string_view text, const std::string& source = "tasks");
std::vector<EvalTask> load_tasks(const std::filesystem::path& path);

// "Question: <prompt>\nChoices: A) <c0> B) <c1> ...\nAnswer:"
std::string render_mcp_prompt(const EvalTask& task);

// Prompt ids and the continuation ids whose joint probability is scored.
struct ScoredSequence {
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;
};

ScoredSequence build_scored_sequence(const ModelBundle& bundle, const EvalTask& task, bool use_template = true);

// QA/FB: product of P(answer token | prompt, earlier answer tokens).
// SQA: same, with every answer character encoded separately.
// MCP: P(label token | rendered question).
double answer_probability(const ModelBundle& bundle, const EvalTask& task, bool use_template = true);

struct CellKey {
  Split split = Split::kForget;
  TaskFormat format = TaskFormat::kQA;
  auto operator<=>(const CellKey&) const = default;
};

std::string cell_name(const CellKey& key);

struct TaskResult {
  std::string id;
  CellKey cell;
  double probability = 0.0;
};

struct CellMean {
  CellKey cell;
  double mean = 0.0;  // x100
  int count = 0;
};

struct EvalReport {
  static constexpr int kSchemaVersion = 1;
  std::string model_digest;
  std::string task_digest;
  std::vector<TaskResult> tasks;  // sorted by id
  std::vector<CellMean> cells;    // fixed split/format order; empty cells omitted

  const CellMean* find(const CellKey& key) const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Pooled mean over all tasks in each (split, format) cell.
EvalReport aggregate(const ModelBundle& bundle, const std::vector<EvalTask>& tasks, const std::string& task_digest = "",
                     bool use_template = true);

struct CellChange {
  CellKey cell;
  double before = 0.0;
  double after = 0.0;
  std::optional<double> percent;  // empty when before == 0
};

// (after - before) / before * 100 per cell. Both reports must cover the same
// cells.
std::vector<CellChange> relative_change(const EvalReport& before, const EvalReport& after);

// "-71.47%", "0.00%", or "undefined".
std::string format_percent(const std::optional<double>& percent);

}  // namespace rocr
