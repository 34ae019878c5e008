#pragma once

// Grid sweeps over (localizer, steerer, alpha, k), held-out and capability
// evaluation, and the paired significance tests used to compare localizers.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gcm/data.hpp"
#include "gcm/localize.hpp"
#include "gcm/steer.hpp"

namespace gcm {

struct SweepConfig {
  std::vector<double> alphas;
  std::vector<double> ks;
  std::vector<LocalizerMethod> localizers;
  std::vector<SteerMethod> steerers;
  std::vector<std::uint64_t> seeds{0};
  std::size_t jobs = 1;
  InterventionSite site = InterventionSite::kHeadOutput;
  AttributionSign attribution_sign = AttributionSign::kContrastMinusOrig;
  ReftHyperparams reft;
  bool normalize_reft = true;
  ReftExtraction reft_extraction = ReftExtraction::kEdit;

  void validate() const;
};

// alpha 1..10, k 0.01..0.09, 0.1, 0.5, 1.0; act_patch, attrib_patch and
// random localizers; mean, diff_means and reft steerers.
SweepConfig default_sweep_config();
std::vector<double> default_alphas();
std::vector<double> default_ks();

struct GridCellResult {
  LocalizerMethod localizer = LocalizerMethod::kActPatch;
  SteerMethod steerer = SteerMethod::kDiffMeans;
  double alpha = 0.0;
  double k = 0.0;
  Split split = Split::kHeldIn;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  double success_rate = 0.0;
  std::string error;  // non-empty when the cell failed

  bool ok() const { return error.empty(); }
};

// Cell key without the localizer, used to pair two grids.
std::string pairing_key(const GridCellResult& c);

// Per-prompt unsteered generations, computed once and shared by every cell.
struct Baselines {
  std::vector<Tokens> responses;
};
Baselines compute_baselines(const ModelParams& params, const TaskDataset& ds, std::size_t jobs = 1);

// Success rate of `plan` on every p_orig of `ds`; tagged with the split of ds.
GridCellResult evaluate_plan(const ModelParams& params, const SteeringPlan& plan, const TaskDataset& ds,
                             const Baselines* baselines = nullptr, std::size_t jobs = 1);
GridCellResult eval_held_out(const ModelParams& params, const SteeringPlan& plan, const TaskDataset& held_out,
                             std::size_t jobs = 1);

// Greedy exact-match accuracy on (echo) probes under the plan. A null plan
// measures the unsteered model.
double capability_retention(const ModelParams& params, const SteeringPlan* plan, std::span<const Example> probes,
                            std::size_t jobs = 1);

// Per-head, per-position mean site activations of the original and contrast
// prompt families, from one forward per prompt. Plans for any head selection
// can be read off without further model passes.
struct ActivationStats {
  InterventionSite site = InterventionSite::kHeadOutput;
  std::size_t positions = 0;
  std::size_t dim = 0;
  std::size_t n_heads_total = 0;
  std::vector<std::vector<double>> mean_orig;      // [head_index * positions + t]
  std::vector<std::vector<double>> mean_contrast;  // same layout
};
ActivationStats compute_activation_stats(const ModelParams& params, const TaskDataset& ds, const PlanOptions& options);
SteeringPlan plan_from_stats(const ModelConfig& cfg, const ActivationStats& stats, SteerMethod method,
                             const HeadSelection& heads, double alpha);

struct SweepResult {
  std::vector<GridCellResult> cells;
  // Score table per (localizer, seed), keyed "act_patch/0".
  std::map<std::string, HeadScoreTable> tables;
};

// Score tables may be supplied (keyed as in SweepResult::tables); missing
// ones are computed. Cell failures are recorded and the sweep continues.
SweepResult run_sweep(const ModelParams& params, const TaskDataset& ds, const SweepConfig& config,
                      const std::map<std::string, HeadScoreTable>& tables = {});
std::string table_key(LocalizerMethod m, std::uint64_t seed);

// Plan for one grid cell, the way run_sweep builds it.
SteeringPlan build_cell_plan(const ModelParams& params, const TaskDataset& ds, const HeadScoreTable& table,
                             SteerMethod steerer, double alpha, double k, const SweepConfig& config);

// --- statistics ---------------------------------------------------------------

// One-sided signed-rank test of "deltas > 0". Zeros are dropped; needs at
// least 5 nonzero deltas (InputError otherwise). Exact for n <= 12, normal
// approximation with tie and continuity correction above.
double wilcoxon_one_sided(std::span<const double> deltas);
double wilcoxon_exact(std::span<const double> deltas);
double wilcoxon_normal(std::span<const double> deltas);

struct BhResult {
  std::vector<double> adjusted;
  std::vector<bool> reject;
};
// Throws InputError on p outside [0, 1].
BhResult bh_fdr(std::span<const double> p, double q = 0.05);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct ComparisonRequest {
  std::string name;  // e.g. act_patch>random@diff_means
  std::vector<GridCellResult> a;
  std::vector<GridCellResult> b;
};

struct ComparisonResult {
  std::string name;
  std::size_t n_pairs = 0;
  double raw_p = 0.0;  // NaN when degenerate
  double fdr_p = 0.0;
  bool reject = false;
  bool degenerate = false;
  double mean_delta = 0.0;
};

// Wilcoxon (a > b) over paired cells, then BH across the requests.
// Throws InputError if the two sides do not share the same cell keys.
std::vector<ComparisonResult> compare_methods(const std::vector<ComparisonRequest>& requests, double q = 0.05);

// "A>B@steerer" against one grid.
ComparisonRequest comparison_from_grid(const std::vector<GridCellResult>& grid, const std::string& spec,
                                       std::optional<Split> split = std::nullopt);

// --- output -------------------------------------------------------------------------

// localizer,steerer,alpha,k,split,seed,n,success_rate (successful cells only)
std::string grid_to_csv(const std::vector<GridCellResult>& cells);
std::vector<GridCellResult> grid_from_csv(const std::string& text);
std::string stats_to_json(const std::vector<ComparisonResult>& results);
// One heatmap panel per (localizer, steerer): x = k, y = alpha.
std::string grid_to_svg(const std::vector<GridCellResult>& cells);

// Formats alpha / k for CSV and keys: shortest round-trip decimal.
std::string format_number(double v);

}  // namespace gcm
