#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "clove/config.hpp"

namespace clove {

struct AblationCell {
  std::string id;
  std::vector<std::pair<std::string, std::string>> overrides;

  /// "key=value;key=value" (empty for the base cell).
  std::string override_keys() const;
};

/// One cell per non-comment line: `cell_id: key=value key=value ...`.
/// An empty grid yields the single cell "base" with no overrides.
std::vector<AblationCell> parse_grid(std::istream& in, const std::string& source);

struct RunOutcome {
  CorrespondenceReport report;
  double probe_accuracy = 0.0;
  /// Mean loss over the last 10 non-skipped steps.
  double final_loss = 0.0;
};

/// Fresh training from `cfg` followed by correspondence evaluation and a
/// linear probe on the resulting encoder.
RunOutcome run_experiment(const RunConfig& cfg, std::ostream* log = nullptr);

/// Correspondence report and probe accuracy for an already trained state.
RunOutcome evaluate_state(TrainState& state, const RunConfig& cfg);

struct AblationRow {
  std::string cell_id;
  std::string override_keys;
  std::uint64_t seed = 0;
  double corr_top1 = 0.0;
  double corr_err = 0.0;
  double probe_acc = 0.0;
  double final_loss = 0.0;
  std::string error;  // non-empty when the run failed
};

struct CellSummary {
  std::string cell_id;
  std::string override_keys;
  std::size_t runs = 0;
  double top1_mean = 0.0, top1_std = 0.0;
  double err_mean = 0.0, err_std = 0.0;
  double probe_mean = 0.0, probe_std = 0.0;
  double loss_mean = 0.0, loss_std = 0.0;
};

inline constexpr const char* kAblationHeader = "cell_id,override_keys,seed,corr_top1,corr_err,probe_acc,final_loss";

/// Every cell for every seed. A failing run is recorded with NaN metrics and
/// its error; the remaining runs still execute.
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells, const RunConfig& base,
                                      const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);
/// Mean and sample standard deviation over the successful runs of each cell,
/// in first-appearance order.
std::vector<CellSummary> summarize(const std::vector<AblationRow>& rows);
void write_summary_csv(std::ostream& out, const std::vector<CellSummary>& cells);

}  // namespace clove
