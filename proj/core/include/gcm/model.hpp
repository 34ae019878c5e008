#pragma once

// Decoder-only transformer with per-head intervention hooks.
//
// Architecture: learned token + position embeddings, pre-layernorm blocks of
// causal multi-head attention and a GELU MLP, final layernorm, untied
// unembedding without bias. The per-head intervention site is, by default,
// the head output z (attention-weighted value mix) before the output
// projection.

#include <compare>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcm/tensor.hpp"

namespace gcm {

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_model = 64;
  std::uint32_t d_head = 16;
  std::uint32_t d_mlp = 256;
  std::uint32_t vocab_size = 52;
  std::uint32_t max_seq_len = 24;

  // Throws InputError on inconsistent or zero dimensions.
  void validate() const;
  std::size_t total_heads() const { return std::size_t{n_layers} * n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  auto operator<=>(const HeadId&) const = default;
};

std::string to_string(HeadId id);
// Flat index layer * n_heads + head.
std::size_t head_index(const ModelConfig& cfg, HeadId id);
HeadId head_from_index(const ModelConfig& cfg, std::size_t index);
std::vector<HeadId> all_heads(const ModelConfig& cfg);

// Where per-head reads and writes happen.
enum class InterventionSite {
  kHeadOutput,      // z_h in R^{d_head}, before the output projection (default)
  kHeadProjection,  // z_h * Wo_h in R^{d_model}, the head's slice of the attention output
};
std::size_t site_dim(const ModelConfig& cfg, InterventionSite site);

// --- parameters --------------------------------------------------------------

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct LayerBlocks {
  std::size_t ln1_gain, ln1_bias;
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t ln2_gain, ln2_bias;
  std::size_t mlp_in, mlp_in_bias, mlp_out, mlp_out_bias;
};

// Block indices into ParamLayout::blocks, in checkpoint declaration order.
struct ParamLayout {
  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<LayerBlocks> layers;
  std::size_t final_gain = 0;
  std::size_t final_bias = 0;
  std::size_t unembedding = 0;
  std::vector<ParamBlock> blocks;
  std::size_t total = 0;

  static ParamLayout for_config(const ModelConfig& cfg);
};

// All weights as one flat float buffer with named block views. Gradients use
// the same type.
class ModelParams {
 public:
  explicit ModelParams(const ModelConfig& cfg);  // zero-initialized
  ModelParams(const ModelConfig& cfg, std::vector<float> flat);

  // N(0, stddev) matrices, unit layernorm gains, zero biases.
  static ModelParams random_init(const ModelConfig& cfg, std::uint64_t seed, float stddev = 0.02f);

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return *layout_; }

  std::span<float> flat() noexcept { return data_; }
  std::span<const float> flat() const noexcept { return data_; }
  std::span<float> block(std::size_t id);
  std::span<const float> block(std::size_t id) const;
  MatrixView matrix(std::size_t id) const;

  bool all_finite() const;
  void set_zero();
  bool operator==(const ModelParams& other) const { return cfg_ == other.cfg_ && data_ == other.data_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<float> data_;
};

// --- interventions -----------------------------------------------------------

enum class PatchMode { kReplace, kAdd };

// replace: s <- scale * vector; add: s <- s + scale * vector.
struct Patch {
  HeadId head;
  std::size_t position = 0;
  std::vector<float> vector;
  PatchMode mode = PatchMode::kReplace;
  float scale = 1.0f;
};

// Low-rank read/write edit: s <- s + R^T (W s + b - R s), R and W rank x dim.
struct LowRankEdit {
  std::size_t rank = 0;
  std::size_t dim = 0;
  std::vector<float> r;
  std::vector<float> w;
  std::vector<float> b;

  // e = R^T (W s + b - R s), in double.
  std::vector<double> edit_vector(std::span<const float> s) const;
};

struct EditApplication {
  HeadId head;
  std::size_t position = 0;
  const LowRankEdit* edit = nullptr;
  // Gradient slot in Gradients::edits.
  std::size_t slot = 0;
  // When set the edit vector is rescaled to unit L2 norm before scaling.
  bool normalized = false;
  float scale = 1.0f;
};

struct InterventionSpec {
  InterventionSite site = InterventionSite::kHeadOutput;
  std::vector<Patch> patches;
  std::vector<EditApplication> edits;

  bool empty() const { return patches.empty() && edits.empty(); }
  // Highest position referenced + 1 (0 when empty).
  std::size_t position_extent() const;
};

// --- forward / backward --------------------------------------------------------

// Counts model passes. A batch call counts as one pass.
struct PassCounter {
  std::size_t forward = 0;
  std::size_t backward = 0;
};

struct RunOptions {
  bool record_tape = false;  // keep intermediates for backward
  bool keep_cache = true;    // keep per-head site activations
  PassCounter* counter = nullptr;
};

// Post-intervention site activations: layers[l](h, t, :).
struct ActivationCache {
  InterventionSite site = InterventionSite::kHeadOutput;
  std::vector<Tensor3D> layers;

  std::span<const float> at(HeadId id, std::size_t position) const { return layers[id.layer].at(id.head, position); }
  std::size_t positions() const { return layers.empty() ? 0 : layers.front().dim1(); }
  bool all_finite() const;
};

struct Tape;

struct Trace {
  std::vector<int> tokens;
  Tensor2D logits;  // [T x V]
  ActivationCache cache;
  std::shared_ptr<const Tape> tape;  // null unless RunOptions::record_tape
};

// Throws InputError on empty input, out-of-range tokens, length > max_seq_len
// or intervention positions beyond the sequence.
Trace forward_with_cache(const ModelParams& params, std::span<const int> tokens,
                         const InterventionSpec& interventions = {}, const RunOptions& options = {});

// One pass over several sequences that share the intervention spec.
std::vector<Trace> forward_batch(const ModelParams& params, std::span<const std::vector<int>> sequences,
                                 const InterventionSpec& interventions = {}, const RunOptions& options = {});

struct LowRankEditGrad {
  std::vector<double> r;
  std::vector<double> w;
  std::vector<double> b;
};

struct BackwardOptions {
  bool param_grads = true;
  bool site_grads = false;
  PassCounter* counter = nullptr;
};

struct Gradients {
  std::optional<ModelParams> params;
  // d loss / d (post-intervention site value), layers[l](h, t, :).
  std::vector<Tensor3D> sites;
  // Indexed by EditApplication::slot.
  std::vector<LowRankEditGrad> edits;
};

// Reverse pass for upstream gradient d loss / d logits. Throws UsageError when
// the trace was produced without record_tape, or when it contains normalized
// edits.
Gradients backward(const ModelParams& params, const Trace& trace, const Tensor2D& dlogits,
                   const BackwardOptions& options = {});

// Sum of per-sequence gradients, counted as one backward pass.
Gradients backward_batch(const ModelParams& params, std::span<const Trace> traces,
                         std::span<const Tensor2D> dlogits, const BackwardOptions& options = {});

// --- scoring and decoding ----------------------------------------------------------

// Teacher-forced sum of log-probabilities of `response` after `prompt`.
// Interventions must reference prompt positions only.
double logprob_response(const ModelParams& params, std::span<const int> prompt, std::span<const int> response,
                        const InterventionSpec& interventions = {}, PassCounter* counter = nullptr);

// Per-token log-probabilities read off a forward trace on prompt ++ response[:-1].
std::vector<double> response_token_logprobs(const Trace& trace, std::size_t prompt_len, std::span<const int> response);

// Index of the largest value, lowest index on ties.
std::size_t argmax_lowest(std::span<const float> values);

// Argmax decoding until `stop_token` (included in the output) or max_new
// tokens. Interventions stay at their prompt positions.
std::vector<int> greedy_generate(const ModelParams& params, std::span<const int> prompt,
                                 const InterventionSpec& interventions, std::size_t max_new,
                                 std::optional<int> stop_token);

// --- training ------------------------------------------------------------------------

struct Example {
  std::vector<int> prompt;
  std::vector<int> response;
};

struct TrainHyperparams {
  std::uint64_t seed = 1;
  std::size_t max_epochs = 60;
  std::size_t min_epochs = 4;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double grad_clip = 1.0;
  double init_stddev = 0.05;
  double target_accuracy = 0.99;
  std::size_t warmup_steps = 50;
  // Learning rate at max_epochs relative to learning_rate (cosine schedule).
  double final_lr_fraction = 0.1;
  std::optional<int> stop_token;
  std::size_t jobs = 1;
};

struct TrainReport {
  ModelParams params;
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;          // mean per-token loss over each epoch
  std::vector<double> validation_accuracy;  // greedy exact match after each epoch
};

// Mean per-token cross-entropy on response positions.
double mean_response_loss(const ModelParams& params, std::span<const Example> examples);

// Fraction of examples whose greedy continuation equals the response exactly.
double greedy_exact_match(const ModelParams& params, std::span<const Example> examples,
                          std::optional<int> stop_token, const InterventionSpec& interventions = {});

// Adam on response-token cross-entropy. Stops once validation exact match
// reaches target_accuracy (after min_epochs); throws TrainingError if it never
// does within max_epochs.
TrainReport train_toy(const ModelConfig& cfg, std::span<const Example> train, std::span<const Example> validation,
                      const TrainHyperparams& hp);

}  // namespace gcm
