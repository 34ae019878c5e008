#pragma once

// Deterministic verdicts for mode-switch responses. A response succeeds only
// when all three predicates pass.

#include <span>
#include <string>
#include <vector>

#include "gcm/data.hpp"

namespace gcm {

// Minimum fraction of positions that must match the target mapping, and of
// content tokens that must refer back to the query.
inline constexpr double kJudgeMatchThreshold = 0.8;

struct JudgeVerdict {
  bool concept_pass = false;
  bool relevance_pass = false;
  bool fluency_pass = false;
  bool success = false;
  bool operator==(const JudgeVerdict&) const = default;
};

// Target concept: the B-mode response (b-alphabet, reversed). MODE_A judges
// the forward a-alphabet mapping instead.
bool concept_holds(const Tokens& query, const Tokens& response, int target_mode = Vocab::kModeB);
bool relevance_holds(const Tokens& query, const Tokens& response);
bool fluency_holds(const Tokens& query, const Tokens& response);

// Throws InputError if `prompt` has no parsable query. `baseline` is carried
// for reporting only.
JudgeVerdict judge_response(const Tokens& prompt, const Tokens& steered, const Tokens& baseline,
                            int target_mode = Vocab::kModeB);

// Throws InputError on an empty list.
double success_rate(std::span<const JudgeVerdict> verdicts);

// One results-JSONL line: prompt, steered, baseline, concept, relevance,
// fluency, success.
std::string verdict_record(const Tokens& prompt, const Tokens& steered, const Tokens& baseline,
                           const JudgeVerdict& v);

}  // namespace gcm
