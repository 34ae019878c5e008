#pragma once

// Steering interventions on a head selection: mean replacement,
// difference-in-means addition, and a trained low-rank edit (ReFT).

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gcm/data.hpp"
#include "gcm/localize.hpp"
#include "gcm/model.hpp"

namespace gcm {

enum class SteerMethod { kMean, kDiffMeans, kReft };
std::string to_string(SteerMethod m);
// Accepts mean, diff_means (diffmeans) and reft.
SteerMethod parse_steer_method(const std::string& s);

// How a trained ReFT module turns into a steering intervention.
enum class ReftExtraction {
  kEdit,            // apply Z + R^T (W Z + b - R Z) directly
  kDownProjection,  // add the mean row of R^T W as a fixed vector
};
std::string to_string(ReftExtraction e);
ReftExtraction parse_reft_extraction(const std::string& s);

struct ReftModule {
  std::size_t rank = 0;
  std::size_t dim = 0;
  InterventionSite site = InterventionSite::kHeadOutput;
  std::vector<HeadId> heads;
  std::vector<LowRankEdit> edits;  // parallel to heads

  // max over heads of ||R R^T - I||_F
  double orthonormality_error() const;
};

// ||R R^T - I||_F for a row-major rank x dim matrix.
double orthonormality_error(std::span<const float> r, std::size_t rank, std::size_t dim);
// Replaces the rows of R with an orthonormal basis of their span
// (Householder QR, signs fixed so the triangular factor has a positive diagonal).
void orthonormalize_rows(std::vector<double>& r, std::size_t rank, std::size_t dim);

struct ReftHyperparams {
  std::size_t rank = 4;
  std::size_t epochs = 30;
  std::size_t batch_size = 10;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  InterventionSite site = InterventionSite::kHeadOutput;
};

struct ReftReport {
  std::shared_ptr<const ReftModule> module;
  // Mean per-token NLL over the training examples: entry 0 before training,
  // entry e after epoch e.
  std::vector<double> loss_curve;
  // ||R R^T - I||_F (max over heads) after every optimizer step.
  std::vector<double> orthonormality_error;
  // Mean per-token NLL of the targets without any intervention.
  double frozen_nll = 0.0;
};

// Minimizes the teacher-forced NLL of each example's response with the edit
// applied at every prompt position of the selected heads; the model stays
// frozen. Throws InputError on rank > d or empty data, TrainingError on a
// non-finite loss.
ReftReport train_reft(const ModelParams& params, std::span<const Example> examples, const std::vector<HeadId>& heads,
                      const ReftHyperparams& hp = {});
// Trains on (p_orig, r_contrast).
ReftReport train_reft(const ModelParams& params, const TaskDataset& ds, const std::vector<HeadId>& heads,
                      const ReftHyperparams& hp = {});

struct SteeringPlan {
  SteerMethod method = SteerMethod::kDiffMeans;
  double alpha = 1.0;
  double k = 1.0;
  std::vector<HeadId> heads;
  InterventionSite site = InterventionSite::kHeadOutput;
  // Template length P; prompt positions >= P use the vector at P - 1.
  std::size_t positions = 0;
  // vectors[h * positions + t], one per selected head and position
  // (mean / diff_means and ReFT down-projection, which repeats over t).
  std::vector<std::vector<float>> vectors;
  bool normalized = false;
  std::shared_ptr<const ReftModule> reft;
  ReftExtraction extraction = ReftExtraction::kEdit;

  std::span<const float> vector(std::size_t head_slot, std::size_t position) const;
};

struct PlanOptions {
  InterventionSite site = InterventionSite::kHeadOutput;
  // Reject datasets whose prompts differ in length instead of averaging
  // each position over the prompts that reach it.
  bool strict_template_length = false;
  std::size_t jobs = 1;
};

SteeringPlan build_mean_plan(const ModelParams& params, const TaskDataset& ds, const HeadSelection& heads,
                             double alpha, const PlanOptions& options = {});
SteeringPlan build_diff_means_plan(const ModelParams& params, const TaskDataset& ds, const HeadSelection& heads,
                                   double alpha, const PlanOptions& options = {});
// ReFT plans are normalized by default.
SteeringPlan build_reft_plan(std::shared_ptr<const ReftModule> module, const HeadSelection& heads, double alpha,
                             bool normalized = true, ReftExtraction extraction = ReftExtraction::kEdit);

SteeringPlan with_alpha(SteeringPlan plan, double alpha);
// Marks the plan normalized; logs a warning for non-ReFT methods.
SteeringPlan normalize_plan(SteeringPlan plan);

// Unit-L2 copy of `v`; empty when the norm is zero.
std::vector<double> normalize_edit(std::span<const double> v);

// Interventions for a prompt of the given length. Zero-norm vectors under a
// normalized plan are skipped with a warning.
InterventionSpec compile_plan(const SteeringPlan& plan, std::size_t prompt_len);

// Greedy continuation under the plan until EOS; max_new defaults to the
// remaining context.
std::vector<int> apply_plan(const ModelParams& params, std::span<const int> prompt, const SteeringPlan& plan,
                            std::optional<std::size_t> max_new = std::nullopt);
std::vector<int> generate_unsteered(const ModelParams& params, std::span<const int> prompt,
                                    std::optional<std::size_t> max_new = std::nullopt);

// JSON header with base64 little-endian float32 blocks.
std::string plan_to_json(const SteeringPlan& plan);
SteeringPlan plan_from_json(const std::string& text);
void save_plan(const SteeringPlan& plan, const std::filesystem::path& path);
SteeringPlan load_plan(const std::filesystem::path& path);

std::string base64_encode_floats(std::span<const float> values);
std::vector<float> base64_decode_floats(const std::string& text);

}  // namespace gcm
