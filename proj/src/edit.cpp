#include "rocr/edit.hpp"

#include <algorithm>
#include <chrono>

#include "rocr/error.hpp"

namespace rocr {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kSemantic: return "semantic";
    case Variant::kNoise: return "noise";
    case Variant::kReject: return "reject";
  }
  return "semantic";
}

Variant parse_variant(const std::string& s) {
  if (s == "semantic") return Variant::kSemantic;
  if (s == "noise") return Variant::kNoise;
  if (s == "reject") return Variant::kReject;
  fail(ErrorKind::kConfig, "unknown variant '" + s + "'");
}

void EditPlan::validate(const ModelBundle& bundle) const {
  if (forget_word.empty()) fail(ErrorKind::kConfig, "edit: forget word is required");
  if (variant == Variant::kSemantic && target_word.empty()) {
    fail(ErrorKind::kConfig, "edit: semantic variant requires a target word");
  }
  if (layers.empty()) fail(ErrorKind::kConfig, "edit: at least one layer is required");
  for (int l : layers) {
    if (l < 0 || l >= bundle.config.n_layers) {
      fail(ErrorKind::kIndex, "edit: layer " + std::to_string(l) + " out of range for a " +
                                  std::to_string(bundle.config.n_layers) + "-layer model");
    }
    auto it = covariances.find(l);
    if (it == covariances.end()) fail(ErrorKind::kConfig, "edit: no covariance for layer " + std::to_string(l));
    if (it->second.dim() != bundle.config.d_mlp) {
      fail(ErrorKind::kShape, "edit: covariance for layer " + std::to_string(l) + " has the wrong width");
    }
  }
  templates.validate();
  if (variant == Variant::kReject) reject.validate();
}

namespace {

struct LayerProbe {
  ConceptStats forget;
  Vec target_h;
  std::optional<std::uint64_t> noise_seed;
  std::optional<double> reject_initial_loss, reject_best_loss;
};

LayerProbe probe_layer(const ModelBundle& bundle, const EditPlan& plan, int layer) {
  LayerProbe p;
  p.forget = collect_activation_key(bundle, plan.templates, plan.forget_word, layer, plan.use_template);
  switch (plan.variant) {
    case Variant::kSemantic:
      p.target_h = collect_hidden_target(bundle, plan.templates, plan.target_word, layer, plan.use_template).h;
      break;
    case Variant::kNoise:
      p.noise_seed = plan.seed + static_cast<std::uint64_t>(layer);
      p.target_h = noise_target(p.forget.h, *p.noise_seed);
      break;
    case Variant::kReject: {
      RejectOptConfig cfg = plan.reject;
      cfg.use_template = plan.use_template;
      const RejectResult r = reject_target(bundle, p.forget, cfg);
      p.target_h = r.h_t;
      p.reject_initial_loss = r.losses.front();
      p.reject_best_loss = r.best_losses.back();
      break;
    }
  }
  return p;
}

}  // namespace

EditReceipt run_edit(ModelBundle& bundle, const EditPlan& plan) {
  plan.validate(bundle);
  const auto start = std::chrono::steady_clock::now();
  EditReceipt receipt;
  receipt.forget_word = plan.forget_word;
  receipt.variant = plan.variant;
  receipt.target_word = plan.target_word;
  receipt.reprobe = plan.reprobe;
  receipt.threshold = plan.threshold;
  receipt.seed = plan.seed;
  receipt.model_digest_before = bundle.digest();

  std::vector<int> layers = plan.layers;
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  receipt.layers = layers;

  std::map<int, LayerProbe> probes;
  if (!plan.reprobe) {
    for (int l : layers) probes.emplace(l, probe_layer(bundle, plan, l));
  }

  for (int l : layers) {
    const auto layer_start = std::chrono::steady_clock::now();
    LayerProbe probe = plan.reprobe ? probe_layer(bundle, plan, l) : probes.at(l);
    const CovarianceStats& cov = plan.covariances.at(l);
    const Vec v_r = redirection_vector(probe.forget, probe.target_h);
    const NullProjector proj = spectral_null_projector(cov, plan.threshold);
    const Mat& w = bundle.down_projection(l);
    const RankOneUpdate update = closed_form_update(w, *probe.forget.k, v_r, proj.P, plan.reg_weight, l);

    LayerReceipt entry;
    entry.layer = l;
    entry.null_dim = proj.null_dim;
    entry.objective_before = update.objective_before;
    entry.objective_after = update.objective_after;
    entry.preservation_objective_before = objective_value(w, w, *probe.forget.k, v_r, cov.second_moment);
    entry.preservation_objective_after =
        objective_value(w, w + update.delta, *probe.forget.k, v_r, cov.second_moment);
    entry.key_norm = probe.forget.k->norm();
    entry.projected_key_norm = update.projected_key_norm;
    entry.no_effect = update.no_effect;
    entry.covariance_digest = covariance_digest(cov);
    entry.noise_seed = probe.noise_seed;
    entry.reject_initial_loss = probe.reject_initial_loss;
    entry.reject_best_loss = probe.reject_best_loss;
    if (update.no_effect) {
      receipt.warnings.push_back("layer " + std::to_string(l) +
                                 ": forget key lies inside the preserved span; update has no effect");
    }

    const AppliedUpdate applied = apply_update(bundle, update);
    entry.delta_fro = applied.delta_fro;
    entry.rank_ratio = applied.rank_ratio;
    entry.rank_one = applied.rank_one;
    // Edited weights are not representable in f32; save what was evaluated.
    if (applied.delta_fro > 0.0) bundle.storage_dtype = DType::kF64;
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - layer_start).count();
    receipt.entries.push_back(std::move(entry));
  }
  receipt.model_digest_after = bundle.digest();
  receipt.total_wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return receipt;
}

nlohmann::json EditReceipt::to_json() const {
  nlohmann::json j;
  j["forget_word"] = forget_word;
  j["variant"] = std::string(to_string(variant));
  j["target_word"] = variant == Variant::kSemantic ? nlohmann::json(target_word) : nlohmann::json(nullptr);
  j["layers"] = layers;
  j["reprobe"] = reprobe;
  j["threshold"] = threshold;
  j["seed"] = seed;
  j["model_digest_before"] = model_digest_before;
  j["model_digest_after"] = model_digest_after;
  j["total_wall_ms"] = total_wall_ms;
  j["warnings"] = warnings;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json je = {{"layer", e.layer},
                         {"delta_fro", e.delta_fro},
                         {"rank_ratio", e.rank_ratio},
                         {"rank_one", e.rank_one},
                         {"null_dim", e.null_dim},
                         {"objective_before", e.objective_before},
                         {"objective_after", e.objective_after},
                         {"preservation_objective_before", e.preservation_objective_before},
                         {"preservation_objective_after", e.preservation_objective_after},
                         {"key_norm", e.key_norm},
                         {"projected_key_norm", e.projected_key_norm},
                         {"no_effect", e.no_effect},
                         {"wall_ms", e.wall_ms},
                         {"covariance_digest", e.covariance_digest}};
    if (e.noise_seed) je["noise_seed"] = *e.noise_seed;
    if (e.reject_initial_loss) je["reject_initial_loss"] = *e.reject_initial_loss;
    if (e.reject_best_loss) je["reject_best_loss"] = *e.reject_best_loss;
    j["entries"].push_back(std::move(je));
  }
  if (!resolved_config.is_null()) j["config"] = resolved_config;
  return j;
}

}  // namespace rocr
