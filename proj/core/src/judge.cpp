#include "gcm/judge.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "gcm/errors.hpp"

namespace gcm {

namespace {

// Response without its trailing EOS, or nullopt if it does not end in EOS.
std::optional<Tokens> body_of(const Tokens& response) {
  if (response.empty() || response.back() != Vocab::kEos) return std::nullopt;
  return Tokens(response.begin(), response.end() - 1);
}

}  // namespace

bool concept_holds(const Tokens& query, const Tokens& response, int target_mode) {
  const auto body = body_of(response);
  if (!body || body->empty()) return false;
  const bool want_b = target_mode == Vocab::kModeB;
  const auto in_alphabet = want_b ? Vocab::is_alpha_b : Vocab::is_alpha_a;
  if (!std::all_of(body->begin(), body->end(), in_alphabet)) return false;
  Tokens expected = gold_response(target_mode, query);
  expected.pop_back();
  const std::size_t common = std::min(expected.size(), body->size());
  std::size_t matches = 0;
  for (std::size_t i = 0; i < common; ++i) matches += (*body)[i] == expected[i];
  const std::size_t denom = std::max(expected.size(), body->size());
  return static_cast<double>(matches) >= kJudgeMatchThreshold * static_cast<double>(denom);
}

bool relevance_holds(const Tokens& query, const Tokens& response) {
  const std::set<int> wanted(query.begin(), query.end());
  std::size_t content = 0;
  std::size_t relevant = 0;
  for (int t : response) {
    const auto c = Vocab::content_of(t);
    if (!c) continue;
    ++content;
    relevant += wanted.count(*c);
  }
  if (content == 0) return false;
  return static_cast<double>(relevant) >= kJudgeMatchThreshold * static_cast<double>(content);
}

bool fluency_holds(const Tokens& query, const Tokens& response) {
  const auto body = body_of(response);
  if (!body || body->empty()) return false;
  if (response.size() > 2 * query.size()) return false;
  return std::none_of(body->begin(), body->end(), Vocab::is_control);
}

JudgeVerdict judge_response(const Tokens& prompt, const Tokens& steered, const Tokens& /*baseline*/,
                            int target_mode) {
  const auto query = query_of(prompt);
  if (!query) throw InputError("judge: prompt is not a mode-switch prompt");
  JudgeVerdict v;
  if (steered.empty()) return v;
  v.concept_pass = concept_holds(*query, steered, target_mode);
  v.relevance_pass = relevance_holds(*query, steered);
  v.fluency_pass = fluency_holds(*query, steered);
  v.success = v.concept_pass && v.relevance_pass && v.fluency_pass;
  return v;
}

double success_rate(std::span<const JudgeVerdict> verdicts) {
  if (verdicts.empty()) throw InputError("success_rate: no verdicts");
  const auto hits = std::count_if(verdicts.begin(), verdicts.end(), [](const JudgeVerdict& v) { return v.success; });
  return static_cast<double>(hits) / static_cast<double>(verdicts.size());
}

std::string verdict_record(const Tokens& prompt, const Tokens& steered, const Tokens& baseline,
                           const JudgeVerdict& v) {
  nlohmann::ordered_json j;
  j["prompt"] = prompt;
  j["steered"] = steered;
  j["baseline"] = baseline;
  j["concept"] = v.concept_pass;
  j["relevance"] = v.relevance_pass;
  j["fluency"] = v.fluency_pass;
  j["success"] = v.success;
  return j.dump();
}

}  // namespace gcm
