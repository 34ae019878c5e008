#pragma once

// Head rankings: three mediation scores (activation patching, its
// gradient approximation, zero-knockout) and two baselines (linear probes,
// random order), plus top-k selection.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gcm/data.hpp"
#include "gcm/model.hpp"

namespace gcm {

enum class LocalizerMethod { kActPatch, kAttribPatch, kKnockout, kItiProbe, kRandom };
std::string to_string(LocalizerMethod m);
// Accepts canonical names (act_patch, ...) and the short CLI spellings
// (actpatch, attrib, knockout, iti, random).
LocalizerMethod parse_localizer(const std::string& s);

struct HeadScoreTable {
  LocalizerMethod method = LocalizerMethod::kActPatch;
  std::uint32_t n_layers = 0;
  std::uint32_t n_heads = 0;
  std::vector<double> scores;  // indexed by layer * n_heads + head
  std::string dataset_fingerprint;
  std::uint64_t seed = 0;

  double score(HeadId id) const { return scores.at(std::size_t{id.layer} * n_heads + id.head); }
  bool operator==(const HeadScoreTable&) const = default;
};

struct HeadSelection {
  std::vector<HeadId> heads;  // descending score
  double k = 1.0;
};

// Which factor multiplies the gradient in the first-order estimate.
enum class AttributionSign {
  kContrastMinusOrig,  // grad . (z_contrast - z_orig): the Taylor estimate of patching contrast into orig
  kOrigMinusContrast,  // grad . (z_orig - z_contrast), the literal printed factor
};

struct LocalizeOptions {
  InterventionSite site = InterventionSite::kHeadOutput;
  AttributionSign sign = AttributionSign::kContrastMinusOrig;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;  // probes and random order
};

// log pi(r_contrast | p_orig, z <- z_contrast) - log pi(r_orig | p_orig, z <- z_contrast),
// patching `head` at every prompt position.
double ie_activation_patch(const ModelParams& params, const ContrastivePair& pair, HeadId head,
                           InterventionSite site = InterventionSite::kHeadOutput);

// Same log-ratio with the head's prompt positions replaced by zeros.
double ie_knockout(const ModelParams& params, const ContrastivePair& pair, HeadId head,
                   InterventionSite site = InterventionSite::kHeadOutput);

// Unpatched log pi(r_contrast | p_orig) - log pi(r_orig | p_orig).
double unpatched_log_ratio(const ModelParams& params, const ContrastivePair& pair);

struct AttributionResult {
  std::vector<double> scores;  // per head, flat index
  PassCounter passes;
};

// Gradient estimate for every head from one forward on p_contrast and one
// forward + backward over the two teacher-forced continuations of p_orig.
AttributionResult ie_attribution_all_heads(const ModelParams& params, const ContrastivePair& pair,
                                           const LocalizeOptions& options = {});

HeadScoreTable rank_activation_patching(const ModelParams& params, const TaskDataset& ds,
                                        const LocalizeOptions& options = {});
HeadScoreTable rank_attribution_patching(const ModelParams& params, const TaskDataset& ds,
                                         const LocalizeOptions& options = {});
HeadScoreTable rank_knockout(const ModelParams& params, const TaskDataset& ds, const LocalizeOptions& options = {});

struct ProbeOptions {
  std::size_t steps = 500;
  double learning_rate = 0.1;
  double train_fraction = 0.8;
};

// Logistic regression by full-batch gradient descent on a seeded 4:1 split;
// returns validation accuracy. `features` is row-major [n x dim].
double probe_validation_accuracy(std::span<const float> features, std::size_t dim, std::span<const int> labels,
                                 std::uint64_t seed, const ProbeOptions& options = {});

// Requires at least 5 pairs.
HeadScoreTable rank_iti_probe(const ModelParams& params, const TaskDataset& ds, const LocalizeOptions& options = {},
                              const ProbeOptions& probe = {});

HeadScoreTable rank_random(const ModelConfig& cfg, std::uint64_t seed);

HeadScoreTable localize(LocalizerMethod method, const ModelParams& params, const TaskDataset& ds,
                        const LocalizeOptions& options = {});

// ceil(k * heads) highest-scoring heads, ties by (layer, head). Throws
// InputError unless 0 < k <= 1.
HeadSelection select_top_k(const HeadScoreTable& table, double k);
std::size_t top_k_count(std::size_t total_heads, double k);

// CSV: method,layer,head,score,seed,dataset_fingerprint
std::string to_csv(const HeadScoreTable& table);
HeadScoreTable score_table_from_csv(const std::string& text);

}  // namespace gcm
