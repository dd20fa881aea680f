#include "rocr/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iomanip>

#include "rocr/covariance.hpp"
#include "rocr/evalsuite.hpp"
#include "rocr/io.hpp"
#include "rocr/model.hpp"
#include "rocr/sweep.hpp"

namespace rocr::cli {

namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kIndex:
      return 1;
    case ErrorKind::kEmptyCovariance:
      return 3;
    case ErrorKind::kProbe:
    case ErrorKind::kUnknownToken:
      return 4;
    case ErrorKind::kNumeric:
    case ErrorKind::kOptimization:
    case ErrorKind::kOracle:
      return 5;
    case ErrorKind::kComparison:
      return 6;
    default:
      return 2;
  }
}

fs::path resolve_model_path(const fs::path& path) {
  if (fs::exists(path) || path.is_absolute()) return path;
  if (const char* root = std::getenv("ROCR_MODEL_ROOT"); root != nullptr && *root != '\0') {
    const fs::path candidate = fs::path(root) / path;
    if (fs::exists(candidate)) return candidate;
  }
  return path;
}

namespace {

fs::path resolve_against(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

void EditConfig::merge_json(const nlohmann::json& j, const fs::path& base_dir) {
  static const std::vector<std::string> kKnown = {
      "forget_word", "variant", "target_word", "layers", "templates", "covariance_dir", "covariance",
      "threshold", "seed", "reprobe", "reg_weight", "use_template", "reject"};
  if (!j.is_object()) fail(ErrorKind::kParse, "edit config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      fail(ErrorKind::kParse, "edit config: unknown key '" + key + "'");
    }
  }
  try {
    if (j.contains("forget_word")) forget_word = j.at("forget_word").get<std::string>();
    if (j.contains("variant")) variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("target_word") && !j.at("target_word").is_null()) target_word = j.at("target_word").get<std::string>();
    if (j.contains("layers")) layers = j.at("layers").get<std::vector<int>>();
    if (j.contains("templates")) templates = resolve_against(base_dir, j.at("templates").get<std::string>());
    if (j.contains("covariance_dir")) covariance_dir = resolve_against(base_dir, j.at("covariance_dir").get<std::string>());
    if (j.contains("covariance")) {
      for (const auto& [layer, path] : j.at("covariance").items()) {
        covariance_files[std::stoi(layer)] = resolve_against(base_dir, path.get<std::string>());
      }
    }
    if (j.contains("threshold")) threshold = j.at("threshold").get<double>();
    if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("reprobe")) reprobe = j.at("reprobe").get<bool>();
    if (j.contains("reg_weight")) reg_weight = j.at("reg_weight").get<double>();
    if (j.contains("use_template")) use_template = j.at("use_template").get<bool>();
    if (j.contains("reject")) {
      const auto& r = j.at("reject");
      if (r.contains("text")) reject_text = r.at("text").get<std::string>();
      if (r.contains("steps")) reject_steps = r.at("steps").get<int>();
      if (r.contains("lr")) reject_lr = r.at("lr").get<double>();
      if (r.contains("prompts")) reject_prompts = r.at("prompts").get<std::vector<std::string>>();
      if (r.contains("prompts_file")) reject_prompts_file = resolve_against(base_dir, r.at("prompts_file").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("edit config: ") + e.what());
  } catch (const std::invalid_argument&) {
    fail(ErrorKind::kParse, "edit config: covariance keys must be layer numbers");
  }
}

nlohmann::json EditConfig::to_json() const {
  nlohmann::json j;
  j["forget_word"] = forget_word;
  j["variant"] = std::string(to_string(variant));
  j["target_word"] = target_word.empty() ? nlohmann::json(nullptr) : nlohmann::json(target_word);
  j["layers"] = layers;
  j["templates"] = templates ? nlohmann::json(templates->string()) : nlohmann::json("<built-in>");
  if (covariance_dir) j["covariance_dir"] = covariance_dir->string();
  nlohmann::json cov = nlohmann::json::object();
  for (const auto& [l, p] : covariance_files) cov[std::to_string(l)] = p.string();
  j["covariance"] = cov;
  j["threshold"] = threshold;
  j["seed"] = seed;
  j["reprobe"] = reprobe;
  j["reg_weight"] = reg_weight;
  j["use_template"] = use_template;
  nlohmann::json r = {{"text", reject_text}, {"steps", reject_steps}, {"lr", reject_lr}, {"prompts", reject_prompts}};
  if (reject_prompts_file) r["prompts_file"] = reject_prompts_file->string();
  j["reject"] = r;
  return j;
}

void EditConfig::validate() const {
  if (forget_word.empty()) fail(ErrorKind::kConfig, "--forget is required");
  if (variant == Variant::kSemantic && target_word.empty()) {
    fail(ErrorKind::kConfig, "the semantic variant requires --target");
  }
  if (layers.empty()) fail(ErrorKind::kConfig, "at least one layer is required");
  for (int l : layers) {
    if (covariance_files.contains(l)) continue;
    if (!covariance_dir) {
      fail(ErrorKind::kConfig, "no covariance for layer " + std::to_string(l) + " (use --covariance DIR)");
    }
  }
}

EditPlan EditConfig::to_plan() const {
  validate();
  EditPlan plan;
  plan.forget_word = forget_word;
  plan.variant = variant;
  plan.target_word = target_word;
  plan.layers = layers;
  if (templates) plan.templates = ProbeTemplateSet::load(*templates);
  for (int l : layers) {
    auto it = covariance_files.find(l);
    const fs::path path = it != covariance_files.end() ? it->second : *covariance_dir / (covariance_file_stem(l) + ".safetensors");
    CovarianceStats cov = load_covariance(path);
    if (cov.layer != l) {
      fail(ErrorKind::kConfig, path.string() + " holds layer " + std::to_string(cov.layer) + ", expected " +
                                   std::to_string(l));
    }
    plan.covariances.emplace(l, std::move(cov));
  }
  plan.threshold = threshold;
  plan.seed = seed;
  plan.reprobe = reprobe;
  plan.reg_weight = reg_weight;
  plan.use_template = use_template;
  plan.reject.reject_text = reject_text;
  plan.reject.steps = reject_steps;
  plan.reject.lr = reject_lr;
  plan.reject.prompt_set = reject_prompts;
  if (reject_prompts_file) {
    for (auto& line : read_lines(*reject_prompts_file)) {
      if (line.find_first_not_of(" \t") != std::string::npos) plan.reject.prompt_set.push_back(std::move(line));
    }
  }
  if (plan.reject.prompt_set.empty()) plan.reject.prompt_set = plan.templates.sentences;
  return plan;
}

namespace {

std::string fixed(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

// Edit options shared by `edit` and `sweep`.
struct EditFlags {
  std::string config_path;
  std::string forget, target, variant, templates, covariance_dir, reject_text, reject_prompts;
  std::vector<int> layers;
  double threshold = 0.0, reject_lr = 0.0, reg_weight = 0.0;
  std::uint64_t seed = 0;
  int reject_steps = 0;
  bool no_reprobe = false, no_template = false;

  CLI::Option *o_forget{}, *o_target{}, *o_variant{}, *o_templates{}, *o_cov{}, *o_layers{}, *o_threshold{},
      *o_seed{}, *o_reject_text{}, *o_reject_steps{}, *o_reject_lr{}, *o_reject_prompts{}, *o_reg{};

  void add(CLI::App* app, bool with_layers) {
    app->add_option("--config", config_path, "JSON edit config; flags override its values");
    o_forget = app->add_option("--forget", forget, "word to forget");
    o_target = app->add_option("--target", target, "redirection target word (semantic variant)");
    o_variant = app->add_option("--variant", variant, "semantic | noise | reject");
    o_templates = app->add_option("--templates", templates, "probe template file ({w} placeholder)");
    o_cov = app->add_option("--covariance", covariance_dir, "directory holding cov_layer<L>.safetensors files");
    if (with_layers) o_layers = app->add_option("--layers", layers, "layers to edit (default 4,5,6)")->delimiter(',');
    o_threshold = app->add_option("--threshold", threshold, "relative null-space eigenvalue threshold");
    o_seed = app->add_option("--seed", seed, "seed for the noise variant");
    o_reg = app->add_option("--reg-weight", reg_weight, "weight on ||delta||^2");
    o_reject_text = app->add_option("--reject-text", reject_text, "rejection response to maximize");
    o_reject_steps = app->add_option("--reject-steps", reject_steps, "Adam steps for the reject variant");
    o_reject_lr = app->add_option("--reject-lr", reject_lr, "Adam learning rate for the reject variant");
    o_reject_prompts = app->add_option("--reject-prompts", reject_prompts, "prompt file for the reject variant");
    app->add_flag("--no-reprobe", no_reprobe, "probe every layer once on the unedited model");
    app->add_flag("--no-template", no_template, "do not apply the model chat template");
  }

  EditConfig resolve() const {
    EditConfig c;
    if (!config_path.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(read_text_file(config_path));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::kParse, config_path + ": " + e.what());
      }
      c.merge_json(j, fs::path(config_path).parent_path());
    }
    if (o_forget->count()) c.forget_word = forget;
    if (o_target->count()) c.target_word = target;
    if (o_variant->count()) c.variant = parse_variant(variant);
    if (o_templates->count()) c.templates = templates;
    if (o_cov->count()) c.covariance_dir = covariance_dir;
    if (o_layers && o_layers->count()) c.layers = layers;
    if (o_threshold->count()) c.threshold = threshold;
    if (o_seed->count()) c.seed = seed;
    if (o_reg->count()) c.reg_weight = reg_weight;
    if (o_reject_text->count()) c.reject_text = reject_text;
    if (o_reject_steps->count()) c.reject_steps = reject_steps;
    if (o_reject_lr->count()) c.reject_lr = reject_lr;
    if (o_reject_prompts->count()) c.reject_prompts_file = reject_prompts;
    if (no_reprobe) c.reprobe = false;
    if (no_template) c.use_template = false;
    return c;
  }
};

void print_report(const EvalReport& report, std::ostream& out) {
  out << std::left << std::setw(14) << "cell" << std::setw(8) << "tasks" << "mean(x100)\n";
  for (const auto& c : report.cells) {
    out << std::left << std::setw(14) << cell_name(c.cell) << std::setw(8) << c.count << fixed(c.mean, 2) << "\n";
  }
}

EvalReport read_report(const std::string& path) {
  try {
    return EvalReport::from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path + ": " + e.what());
  }
}

int cmd_covariance(const std::string& model, const std::string& corpus_path, const std::vector<int>& layers,
                   const std::string& out_dir, std::int64_t max_keys, int threads, double threshold,
                   std::ostream& out) {
  const ModelBundle bundle = load_model(resolve_model_path(model));
  const auto corpus = read_lines(corpus_path);
  CovarianceOptions options;
  options.max_keys = max_keys;
  options.threads = threads;
  const auto stats = accumulate_covariances(bundle, corpus, layers, options);
  for (const auto& s : stats) {
    const fs::path path = save_covariance(s, out_dir);
    const NullProjector proj = spectral_null_projector(s, threshold);
    out << "layer " << s.layer << ": n_keys=" << s.n_keys << " skipped_lines=" << s.skipped_lines
        << " eig_max=" << proj.eigenvalues.maxCoeff() << " eig_min=" << proj.eigenvalues.minCoeff()
        << " null_dim=" << proj.null_dim << "/" << s.dim() << " (threshold " << threshold << ") -> "
        << path.string() << "\n";
  }
  return 0;
}

int cmd_edit(const std::string& model, const std::string& out_dir, const std::string& receipt_path,
             const EditFlags& flags, std::ostream& out) {
  const fs::path model_dir = resolve_model_path(model);
  if (fs::exists(out_dir) && fs::exists(model_dir) && fs::equivalent(model_dir, out_dir)) {
    fail(ErrorKind::kConfig, "--out must differ from the input model directory");
  }
  const EditConfig config = flags.resolve();
  config.validate();
  ModelBundle bundle = load_model(model_dir);
  for (int l : config.layers) {
    if (l < 0 || l >= bundle.config.n_layers) {
      fail(ErrorKind::kIndex, "layer " + std::to_string(l) + " out of range for a " +
                                  std::to_string(bundle.config.n_layers) + "-layer model");
    }
  }
  const EditPlan plan = config.to_plan();
  EditReceipt receipt = run_edit(bundle, plan);
  receipt.resolved_config = config.to_json();
  receipt.resolved_config["model"] = model_dir.string();
  save_model(bundle, out_dir);
  const fs::path rpath = receipt_path.empty() ? fs::path(out_dir) / "receipt.json" : fs::path(receipt_path);
  write_text_file(rpath, receipt.to_json().dump(2) + "\n");
  for (const auto& e : receipt.entries) {
    out << "layer " << e.layer << ": |delta|_F=" << e.delta_fro << " rank_ratio=" << e.rank_ratio
        << " null_dim=" << e.null_dim << " objective " << e.objective_before << " -> " << e.objective_after << " ("
        << fixed(e.wall_ms, 2) << " ms)\n";
  }
  for (const auto& w : receipt.warnings) out << "warning: " << w << "\n";
  out << "edited model written to " << out_dir << "; receipt " << rpath.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& model, const std::string& tasks_path, const std::string& out_path, bool no_template,
             std::ostream& out) {
  const ModelBundle bundle = load_model(resolve_model_path(model));
  const auto tasks = load_tasks(tasks_path);
  const EvalReport report = aggregate(bundle, tasks, sha256_hex(read_text_file(tasks_path)), !no_template);
  if (!out_path.empty()) write_text_file(out_path, report.to_json().dump(2) + "\n");
  print_report(report, out);
  return 0;
}

int cmd_compare(const std::string& before_path, const std::string& after_path, std::ostream& out) {
  const auto changes = relative_change(read_report(before_path), read_report(after_path));
  out << std::left << std::setw(14) << "cell" << std::setw(10) << "before" << std::setw(10) << "after" << "change\n";
  for (const auto& c : changes) {
    out << std::left << std::setw(14) << cell_name(c.cell) << std::setw(10) << fixed(c.before, 2) << std::setw(10)
        << fixed(c.after, 2) << format_percent(c.percent) << "\n";
  }
  return 0;
}

int cmd_sweep(const std::string& model, const std::string& tasks_path, const std::vector<int>& layers,
              const std::string& out_path, const EditFlags& flags, std::ostream& out) {
  const ModelBundle bundle = load_model(resolve_model_path(model));
  const auto tasks = load_tasks(tasks_path);
  EditConfig config = flags.resolve();
  if (config.forget_word.empty()) fail(ErrorKind::kConfig, "--forget is required");
  if (config.variant == Variant::kSemantic && config.target_word.empty()) {
    fail(ErrorKind::kConfig, "the semantic variant requires --target");
  }
  // A layer whose covariance cannot be loaded becomes an error row.
  EditPlan plan;
  std::map<int, std::string> load_errors;
  for (int l : layers) {
    EditConfig one = config;
    one.layers = {l};
    try {
      EditPlan p = one.to_plan();
      if (plan.covariances.empty()) plan = p;
      plan.covariances.merge(p.covariances);
    } catch (const Error& e) {
      load_errors[l] = std::string(to_string(e.kind())) + ": " + e.what();
    }
  }
  if (plan.covariances.empty()) {
    plan.forget_word = config.forget_word;
    plan.variant = config.variant;
    plan.target_word = config.target_word;
    plan.use_template = config.use_template;
  }
  SweepResult result = layer_sweep(bundle, plan, layers, tasks, sha256_hex(read_text_file(tasks_path)));
  for (auto& row : result.rows) {
    if (auto it = load_errors.find(row.layer); it != load_errors.end()) row.error = it->second;
  }
  if (!out_path.empty()) write_text_file(out_path, result.to_json().dump(2) + "\n");
  out << std::left << std::setw(7) << "layer";
  for (const auto& c : result.baseline.cells) out << std::setw(12) << cell_name(c.cell);
  out << "\n";
  for (const auto& row : result.rows) {
    out << std::left << std::setw(7) << row.layer;
    if (row.error) {
      out << "error: " << *row.error;
    } else {
      for (const auto& c : row.changes) out << std::setw(12) << format_percent(c.percent);
    }
    out << "\n";
  }
  return 0;
}

void report_error(std::ostream& err, bool json, const std::string& kind, const std::string& message, int code) {
  if (json) {
    err << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  } else {
    err << "error (" << kind << "): " << message << "\n";
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rank-one concept redirection toolkit"};
  app.require_subcommand(1);
  bool json_errors = false;
  app.add_flag("--json-errors", json_errors, "print errors as JSON on stderr");

  std::string model, corpus, out_dir, tasks, out_file, receipt, before, after;
  std::vector<int> layers;
  std::int64_t max_keys = 100000;
  int threads = 1;
  double threshold = kDefaultNullThreshold;
  bool no_template = false;

  auto* cov = app.add_subcommand("covariance", "accumulate K0 K0^T statistics per layer");
  cov->add_option("--model", model, "model directory")->required();
  cov->add_option("--corpus", corpus, "UTF-8 text, one document per line")->required();
  cov->add_option("--layers", layers, "comma-separated layers")->required()->delimiter(',');
  cov->add_option("--out", out_dir, "output directory")->required();
  cov->add_option("--max-keys", max_keys, "maximum number of token positions (default 100000)");
  cov->add_option("--threads", threads, "worker threads");
  cov->add_option("--threshold", threshold, "threshold used for the printed null-space summary");

  EditFlags edit_flags;
  auto* edit = app.add_subcommand("edit", "apply a rank-one concept redirection");
  edit->add_option("--model", model, "input model directory")->required();
  edit->add_option("--out", out_dir, "output model directory")->required();
  edit->add_option("--receipt", receipt, "receipt path (default <out>/receipt.json)");
  edit_flags.add(edit, true);

  auto* eval = app.add_subcommand("eval", "score a task file and write a report");
  eval->add_option("--model", model, "model directory")->required();
  eval->add_option("--tasks", tasks, "JSON Lines task file")->required();
  eval->add_option("--out", out_file, "report path");
  eval->add_flag("--no-template", no_template, "do not apply the model chat template");

  auto* compare = app.add_subcommand("compare", "relative change between two reports");
  compare->add_option("before", before, "baseline report")->required();
  compare->add_option("after", after, "edited report")->required();

  EditFlags sweep_flags;
  auto* sweep = app.add_subcommand("sweep", "edit one layer at a time and compare against the baseline");
  sweep->add_option("--model", model, "model directory")->required();
  sweep->add_option("--tasks", tasks, "JSON Lines task file")->required();
  sweep->add_option("--layers", layers, "comma-separated layers to sweep")->required()->delimiter(',');
  sweep->add_option("--out", out_file, "sweep result path");
  sweep_flags.add(sweep, false);

  std::vector<const char*> argv;
  argv.push_back("rocr");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error(err, json_errors, "usage", e.what(), 1);
    return 1;
  }

  try {
    if (cov->parsed()) return cmd_covariance(model, corpus, layers, out_dir, max_keys, threads, threshold, out);
    if (edit->parsed()) return cmd_edit(model, out_dir, receipt, edit_flags, out);
    if (eval->parsed()) return cmd_eval(model, tasks, out_file, no_template, out);
    if (compare->parsed()) return cmd_compare(before, after, out);
    if (sweep->parsed()) return cmd_sweep(model, tasks, layers, out_file, sweep_flags, out);
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    report_error(err, json_errors, std::string(to_string(e.kind())), e.what(), code);
    return code;
  } catch (const fs::filesystem_error& e) {
    report_error(err, json_errors, "io", e.what(), 2);
    return 2;
  }
  return 1;
}

}  // namespace rocr::cli
