#include "rocr/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "rocr/error.hpp"
#include "rocr/forward.hpp"
#include "rocr/io.hpp"

namespace rocr {

namespace {

constexpr std::string_view kLabels = "ABCDEF";

Split parse_split(const std::string& s) {
  if (s == "forget") return Split::kForget;
  if (s == "retain") return Split::kRetain;
  fail(ErrorKind::kParse, "unknown split '" + s + "'");
}

TaskFormat parse_format(const std::string& s) {
  if (s == "QA") return TaskFormat::kQA;
  if (s == "FB") return TaskFormat::kFB;
  if (s == "MCP") return TaskFormat::kMCP;
  if (s == "SQA") return TaskFormat::kSQA;
  fail(ErrorKind::kParse, "unknown format '" + s + "'");
}

std::vector<CellKey> all_cells() {
  std::vector<CellKey> out;
  for (Split s : {Split::kForget, Split::kRetain}) {
    for (TaskFormat f : {TaskFormat::kQA, TaskFormat::kFB, TaskFormat::kMCP, TaskFormat::kSQA}) out.push_back({s, f});
  }
  return out;
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::kForget ? "forget" : "retain"; }

std::string_view to_string(TaskFormat format) {
  switch (format) {
    case TaskFormat::kQA: return "QA";
    case TaskFormat::kFB: return "FB";
    case TaskFormat::kMCP: return "MCP";
    case TaskFormat::kSQA: return "SQA";
  }
  return "QA";
}

std::string cell_name(const CellKey& key) {
  return std::string(to_string(key.split)) + "/" + std::string(to_string(key.format));
}

void EvalTask::validate() const {
  if (id.empty()) fail(ErrorKind::kParse, "task id is empty");
  if (prompt.empty()) fail(ErrorKind::kParse, "task '" + id + "': empty prompt");
  if (answer.empty()) fail(ErrorKind::kParse, "task '" + id + "': empty answer");
  if (format == TaskFormat::kMCP) {
    if (choices.size() < 2 || choices.size() > 6) fail(ErrorKind::kParse, "task '" + id + "': MCP needs 2-6 choices");
    if (answer_label.size() != 1) fail(ErrorKind::kParse, "task '" + id + "': MCP answer_label must be one letter");
    const auto idx = kLabels.find(answer_label[0]);
    if (idx == std::string_view::npos || idx >= choices.size()) {
      fail(ErrorKind::kParse, "task '" + id + "': answer_label '" + answer_label + "' is not a choice label");
    }
  }
}

std::vector<EvalTask> parse_tasks(std::string_view text, const std::string& source) {
  std::vector<EvalTask> tasks;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string line(text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) fail(ErrorKind::kParse, "record is not an object");
      for (const auto& [key, value] : j.items()) {
        static const std::set<std::string> kFields = {"id", "split", "format", "prompt", "answer", "choices",
                                                      "answer_label"};
        if (!kFields.contains(key)) fail(ErrorKind::kParse, "unknown field '" + key + "'");
      }
      EvalTask t;
      t.id = j.at("id").get<std::string>();
      t.split = parse_split(j.at("split").get<std::string>());
      t.format = parse_format(j.at("format").get<std::string>());
      t.prompt = j.at("prompt").get<std::string>();
      t.answer = j.at("answer").get<std::string>();
      if (j.contains("choices") && !j.at("choices").is_null()) t.choices = j.at("choices").get<std::vector<std::string>>();
      if (j.contains("answer_label") && !j.at("answer_label").is_null()) t.answer_label = j.at("answer_label").get<std::string>();
      t.validate();
      if (!ids.insert(t.id).second) fail(ErrorKind::kParse, "duplicate task id '" + t.id + "'");
      tasks.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kParse, where + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::kParse, where + e.what());
    }
  }
  return tasks;
}

std::vector<EvalTask> load_tasks(const std::filesystem::path& path) {
  return parse_tasks(read_text_file(path), path.filename().string());
}

std::string render_mcp_prompt(const EvalTask& task) {
  std::string out = "Question: " + task.prompt + "\nChoices:";
  for (std::size_t i = 0; i < task.choices.size(); ++i) {
    out += " ";
    out += kLabels[i];
    out += ") " + task.choices[i];
  }
  out += "\nAnswer:";
  return out;
}

ScoredSequence build_scored_sequence(const ModelBundle& bundle, const EvalTask& task, bool use_template) {
  const auto& tok = bundle.tokenizer;
  auto render = [&](const std::string& text) { return use_template ? bundle.apply_template(text) : text; };
  ScoredSequence seq;
  try {
    switch (task.format) {
      case TaskFormat::kQA:
      case TaskFormat::kFB:
        seq.prompt = tok.encode(render(task.prompt));
        seq.answer = tok.encode(task.answer);
        break;
      case TaskFormat::kSQA:
        seq.prompt = tok.encode(render(task.prompt));
        seq.answer = tok.encode_characters(task.answer);
        break;
      case TaskFormat::kMCP: {
        const std::string rendered = render_mcp_prompt(task);
        auto spaced = tok.encode(" " + task.answer_label);
        if (spaced.size() == 1) {
          seq.prompt = tok.encode(render(rendered));
          seq.answer = std::move(spaced);
        } else {
          auto bare = tok.encode(task.answer_label);
          if (bare.size() != 1) fail(ErrorKind::kTask, "task '" + task.id + "': MCP label is not a single token");
          seq.prompt = tok.encode(render(rendered + " "));
          seq.answer = std::move(bare);
        }
        break;
      }
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kTask) throw;
    fail(ErrorKind::kTask, "task '" + task.id + "': " + e.what());
  }
  if (seq.prompt.empty()) fail(ErrorKind::kTask, "task '" + task.id + "': prompt encodes to zero tokens");
  if (seq.answer.empty()) fail(ErrorKind::kTask, "task '" + task.id + "': answer encodes to zero tokens");
  if (seq.prompt.size() + seq.answer.size() > static_cast<std::size_t>(bundle.config.max_seq_len)) {
    fail(ErrorKind::kLength, "task '" + task.id + "': prompt and answer exceed max_seq_len");
  }
  return seq;
}

double answer_probability(const ModelBundle& bundle, const EvalTask& task, bool use_template) {
  const ScoredSequence seq = build_scored_sequence(bundle, task, use_template);
  // The last answer token is never fed back: scoring stops at the answer end.
  std::vector<TokenId> ids = seq.prompt;
  ids.insert(ids.end(), seq.answer.begin(), seq.answer.end() - 1);
  const ForwardTrace trace = forward(bundle, ids);
  double log_prob = 0.0;
  const auto base = static_cast<Eigen::Index>(seq.prompt.size()) - 1;
  for (std::size_t j = 0; j < seq.answer.size(); ++j) {
    log_prob += log_softmax(trace.logits.row(base + static_cast<Eigen::Index>(j)).transpose())(seq.answer[j]);
  }
  return std::clamp(std::exp(log_prob), 0.0, 1.0);
}

const CellMean* EvalReport::find(const CellKey& key) const {
  for (const auto& c : cells) {
    if (c.cell == key) return &c;
  }
  return nullptr;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["model_digest"] = model_digest;
  j["task_digest"] = task_digest;
  j["aggregation"] = "pooled mean over all tasks in a cell, x100";
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) {
    j["tasks"].push_back({{"id", t.id},
                          {"split", std::string(to_string(t.cell.split))},
                          {"format", std::string(to_string(t.cell.format))},
                          {"probability", t.probability}});
  }
  j["cells"] = nlohmann::json::array();
  for (const auto& c : cells) {
    j["cells"].push_back({{"split", std::string(to_string(c.cell.split))},
                          {"format", std::string(to_string(c.cell.format))},
                          {"mean", c.mean},
                          {"count", c.count}});
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    const int version = j.value("schema_version", kSchemaVersion);
    if (version != kSchemaVersion) fail(ErrorKind::kParse, "report: unsupported schema_version " + std::to_string(version));
    r.model_digest = j.value("model_digest", std::string());
    r.task_digest = j.value("task_digest", std::string());
    for (const auto& t : j.value("tasks", nlohmann::json::array())) {
      r.tasks.push_back({t.at("id").get<std::string>(),
                         {parse_split(t.at("split").get<std::string>()), parse_format(t.at("format").get<std::string>())},
                         t.at("probability").get<double>()});
    }
    for (const auto& c : j.at("cells")) {
      r.cells.push_back({{parse_split(c.at("split").get<std::string>()), parse_format(c.at("format").get<std::string>())},
                         c.at("mean").get<double>(),
                         c.value("count", 0)});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("report: ") + e.what());
  }
  return r;
}

EvalReport aggregate(const ModelBundle& bundle, const std::vector<EvalTask>& tasks, const std::string& task_digest,
                     bool use_template) {
  EvalReport report;
  report.model_digest = bundle.digest();
  report.task_digest = task_digest;
  std::vector<const EvalTask*> ordered;
  for (const auto& t : tasks) {
    t.validate();
    ordered.push_back(&t);
  }
  std::sort(ordered.begin(), ordered.end(), [](const EvalTask* a, const EvalTask* b) { return a->id < b->id; });
  for (const EvalTask* t : ordered) {
    report.tasks.push_back({t->id, {t->split, t->format}, answer_probability(bundle, *t, use_template)});
  }
  for (const CellKey& key : all_cells()) {
    double sum = 0.0;
    int count = 0;
    for (const auto& r : report.tasks) {
      if (r.cell == key) {
        sum += r.probability;
        ++count;
      }
    }
    if (count > 0) report.cells.push_back({key, 100.0 * sum / count, count});
  }
  return report;
}

std::vector<CellChange> relative_change(const EvalReport& before, const EvalReport& after) {
  if (before.cells.size() != after.cells.size()) fail(ErrorKind::kComparison, "reports cover different cells");
  std::vector<CellChange> out;
  for (const auto& b : before.cells) {
    const CellMean* a = after.find(b.cell);
    if (a == nullptr) fail(ErrorKind::kComparison, "cell " + cell_name(b.cell) + " missing from the second report");
    CellChange c;
    c.cell = b.cell;
    c.before = b.mean;
    c.after = a->mean;
    if (b.mean != 0.0) c.percent = (a->mean - b.mean) / b.mean * 100.0;
    out.push_back(c);
  }
  return out;
}

std::string format_percent(const std::optional<double>& percent) {
  if (!percent) return "undefined";
  double v = std::round(*percent * 100.0) / 100.0;
  if (v == 0.0) v = 0.0;  // no "-0.00%"
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f%%", v);
  return buf;
}

}  // namespace rocr
