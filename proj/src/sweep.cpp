#include "rocr/sweep.hpp"

#include "rocr/error.hpp"

namespace rocr {

SweepResult layer_sweep(const ModelBundle& bundle, const EditPlan& plan, const std::vector<int>& layers,
                        const std::vector<EvalTask>& tasks, const std::string& task_digest) {
  SweepResult result;
  result.baseline = aggregate(bundle, tasks, task_digest, plan.use_template);
  for (int layer : layers) {
    SweepRow row;
    row.layer = layer;
    try {
      ModelBundle edited = bundle;
      EditPlan single = plan;
      single.layers = {layer};
      run_edit(edited, single);
      const EvalReport after = aggregate(edited, tasks, task_digest, plan.use_template);
      row.changes = relative_change(result.baseline, after);
    } catch (const Error& e) {
      row.error = std::string(to_string(e.kind())) + ": " + e.what();
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json j;
  j["baseline"] = baseline.to_json();
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json jr;
    jr["layer"] = r.layer;
    if (r.error) {
      jr["error"] = *r.error;
    } else {
      nlohmann::json cells = nlohmann::json::object();
      for (const auto& c : r.changes) {
        cells[cell_name(c.cell)] = c.percent ? nlohmann::json(*c.percent) : nlohmann::json(nullptr);
      }
      jr["changes"] = cells;
    }
    j["rows"].push_back(std::move(jr));
  }
  return j;
}

}  // namespace rocr
