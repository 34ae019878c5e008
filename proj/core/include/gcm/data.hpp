#pragma once

// Synthetic mode-switch task. A prompt is
//
//   [MODE_m, SEP, q_1 .. q_k, SEP]
//
// with content tokens q_i. Under MODE_A the gold response maps each query
// token to its a-alphabet twin in order; under MODE_B it maps to the
// b-alphabet twin and reverses the order. Both end with EOS. A pair therefore
// differs only at prompt index 0.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gcm/model.hpp"

namespace gcm {

using Tokens = std::vector<int>;

// Token ids follow declaration order.
struct Vocab {
  static constexpr int kModeA = 0;
  static constexpr int kModeB = 1;
  static constexpr int kSep = 2;
  static constexpr int kEos = 3;
  static constexpr int kAlphabetSize = 16;
  static constexpr int kContentBase = 4;
  static constexpr int kAlphaABase = kContentBase + kAlphabetSize;
  static constexpr int kAlphaBBase = kAlphaABase + kAlphabetSize;
  static constexpr int kSize = kAlphaBBase + kAlphabetSize;  // 52

  static constexpr int content(int i) { return kContentBase + i; }
  static constexpr int a_of(int content_token) { return content_token - kContentBase + kAlphaABase; }
  static constexpr int b_of(int content_token) { return content_token - kContentBase + kAlphaBBase; }

  static constexpr bool is_control(int t) { return t >= 0 && t < kContentBase; }
  static constexpr bool is_content(int t) { return t >= kContentBase && t < kAlphaABase; }
  static constexpr bool is_alpha_a(int t) { return t >= kAlphaABase && t < kAlphaBBase; }
  static constexpr bool is_alpha_b(int t) { return t >= kAlphaBBase && t < kSize; }

  // Content token that `t` stands for under any alphabet.
  static std::optional<int> content_of(int t);
  static std::string name(int t);
};

enum class Split { kHeldIn, kHeldOut };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ContrastivePair {
  Tokens p_orig;
  Tokens r_orig;
  Tokens p_contrast;
  Tokens r_contrast;
  bool operator==(const ContrastivePair&) const = default;
};

// Throws ValidationError unless the prompts have equal length and differ at
// exactly one index, the responses differ, and both responses end with EOS.
void validate_pair(const ContrastivePair& pair);

struct TaskDataset {
  std::vector<ContrastivePair> pairs;
  Split split = Split::kHeldIn;
  bool operator==(const TaskDataset&) const = default;
};

inline constexpr std::size_t kDefaultPairs = 50;

// Query shape of a split: which content tokens and how many.
struct QueryShape {
  int content_lo = 0;  // inclusive content index
  int content_hi = 0;  // exclusive
  int len_lo = 0;      // inclusive
  int len_hi = 0;      // inclusive
};
QueryShape shape_for(Split split);
// Every content token and every length the two splits use.
QueryShape full_shape();

Tokens make_prompt(int mode_token, const Tokens& query);
Tokens gold_response(int mode_token, const Tokens& query);
// Query tokens of a mode-switch prompt (between the two SEPs).
std::optional<Tokens> query_of(const Tokens& prompt);

ContrastivePair make_pair(const Tokens& query);
TaskDataset gen_mode_switch(std::size_t n, std::uint64_t seed, Split split);
TaskDataset gen_mode_switch(std::size_t n, std::uint64_t seed, Split split, const QueryShape& shape);

// Echo prompts [SEP, SEP, q.., SEP] -> [q.., EOS]: the capability probe.
Tokens make_echo_prompt(const Tokens& query);
std::vector<Example> gen_echo_probes(std::size_t n, std::uint64_t seed);

// Both members of every pair as (prompt, response) examples.
std::vector<Example> to_examples(const TaskDataset& ds);

// Training corpus for the toy: mode pairs over the full shape plus echo
// examples.
std::vector<Example> gen_training_corpus(std::size_t n_pairs, std::size_t n_echo, std::uint64_t seed);

// --- persistence ------------------------------------------------------------

std::string to_jsonl(const TaskDataset& ds);
TaskDataset from_jsonl(const std::string& text);
void save_jsonl(const TaskDataset& ds, const std::filesystem::path& path);
// Malformed lines raise ParseError with the line number; invariant
// violations raise ValidationError. An empty file yields an empty dataset and
// a warning.
TaskDataset load_jsonl(const std::filesystem::path& path);

// FNV-1a of the canonical JSONL text.
std::string fingerprint(const TaskDataset& ds);

}  // namespace gcm
