#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rocr/edit.hpp"
#include "rocr/evalsuite.hpp"

namespace rocr {

struct SweepRow {
  int layer = 0;
  std::vector<CellChange> changes;  // empty when `error` is set
  std::optional<std::string> error;
};

struct SweepResult {
  EvalReport baseline;
  std::vector<SweepRow> rows;

  nlohmann::json to_json() const;
};

// For each layer: copy the model, edit that single layer with `plan`, evaluate
// and compare against the unedited baseline. Failures are recorded per row and
// the sweep continues.
SweepResult layer_sweep(const ModelBundle& bundle, const EditPlan& plan, const std::vector<int>& layers,
                        const std::vector<EvalTask>& tasks, const std::string& task_digest = "");

}  // namespace rocr
