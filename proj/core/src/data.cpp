#include "gcm/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "gcm/errors.hpp"
#include "gcm/hash.hpp"

namespace gcm {

std::optional<int> Vocab::content_of(int t) {
  if (is_content(t)) return t;
  if (is_alpha_a(t)) return t - kAlphaABase + kContentBase;
  if (is_alpha_b(t)) return t - kAlphaBBase + kContentBase;
  return std::nullopt;
}

std::string Vocab::name(int t) {
  switch (t) {
    case kModeA:
      return "MODE_A";
    case kModeB:
      return "MODE_B";
    case kSep:
      return "SEP";
    case kEos:
      return "EOS";
    default:
      break;
  }
  if (is_content(t)) return "c_" + std::to_string(t - kContentBase + 1);
  if (is_alpha_a(t)) return "a_" + std::to_string(t - kAlphaABase + 1);
  if (is_alpha_b(t)) return "b_" + std::to_string(t - kAlphaBBase + 1);
  return "<" + std::to_string(t) + ">";
}

std::string to_string(Split s) { return s == Split::kHeldIn ? "held_in" : "held_out"; }

Split parse_split(const std::string& s) {
  if (s == "held_in") return Split::kHeldIn;
  if (s == "held_out") return Split::kHeldOut;
  throw InputError("unknown split '" + s + "' (expected held_in or held_out)");
}

void validate_pair(const ContrastivePair& pair) {
  if (pair.p_orig.size() != pair.p_contrast.size()) throw ValidationError("pair: prompts differ in length");
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < pair.p_orig.size(); ++i) diffs += pair.p_orig[i] != pair.p_contrast[i];
  if (diffs != 1) {
    throw ValidationError("pair: prompts must differ at exactly one index (found " + std::to_string(diffs) + ")");
  }
  if (pair.r_orig == pair.r_contrast) throw ValidationError("pair: responses are identical");
  if (pair.r_orig.empty() || pair.r_orig.back() != Vocab::kEos || pair.r_contrast.empty() ||
      pair.r_contrast.back() != Vocab::kEos) {
    throw ValidationError("pair: responses must end with EOS");
  }
  auto check_ids = [](const Tokens& t) {
    for (int v : t) {
      if (v < 0 || v >= Vocab::kSize) throw ValidationError("pair: token id out of range");
    }
  };
  check_ids(pair.p_orig);
  check_ids(pair.p_contrast);
  check_ids(pair.r_orig);
  check_ids(pair.r_contrast);
}

QueryShape shape_for(Split split) {
  if (split == Split::kHeldIn) return {0, 10, 3, 6};
  return {10, 16, 7, 8};
}

QueryShape full_shape() { return {0, Vocab::kAlphabetSize, 3, 8}; }

Tokens make_prompt(int mode_token, const Tokens& query) {
  Tokens p{mode_token, Vocab::kSep};
  p.insert(p.end(), query.begin(), query.end());
  p.push_back(Vocab::kSep);
  return p;
}

Tokens gold_response(int mode_token, const Tokens& query) {
  Tokens r;
  if (mode_token == Vocab::kModeA) {
    for (int q : query) r.push_back(Vocab::a_of(q));
  } else if (mode_token == Vocab::kModeB) {
    for (auto it = query.rbegin(); it != query.rend(); ++it) r.push_back(Vocab::b_of(*it));
  } else {
    throw InputError("gold_response: not a mode token");
  }
  r.push_back(Vocab::kEos);
  return r;
}

std::optional<Tokens> query_of(const Tokens& prompt) {
  if (prompt.size() < 4 || prompt[1] != Vocab::kSep || prompt.back() != Vocab::kSep) return std::nullopt;
  Tokens q(prompt.begin() + 2, prompt.end() - 1);
  if (!std::all_of(q.begin(), q.end(), Vocab::is_content)) return std::nullopt;
  return q;
}

ContrastivePair make_pair(const Tokens& query) {
  return {make_prompt(Vocab::kModeA, query), gold_response(Vocab::kModeA, query),
          make_prompt(Vocab::kModeB, query), gold_response(Vocab::kModeB, query)};
}

namespace {

Tokens sample_query(std::mt19937_64& rng, const QueryShape& shape) {
  std::uniform_int_distribution<int> len(shape.len_lo, shape.len_hi);
  std::uniform_int_distribution<int> tok(shape.content_lo, shape.content_hi - 1);
  const int k = len(rng);
  Tokens q;
  q.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) q.push_back(Vocab::content(tok(rng)));
  return q;
}

}  // namespace

TaskDataset gen_mode_switch(std::size_t n, std::uint64_t seed, Split split) {
  return gen_mode_switch(n, seed, split, shape_for(split));
}

TaskDataset gen_mode_switch(std::size_t n, std::uint64_t seed, Split split, const QueryShape& shape) {
  if (n < 1) throw InputError("gen_mode_switch: n must be at least 1");
  std::mt19937_64 rng(seed);
  TaskDataset ds;
  ds.split = split;
  ds.pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.pairs.push_back(make_pair(sample_query(rng, shape)));
  return ds;
}

Tokens make_echo_prompt(const Tokens& query) {
  Tokens p{Vocab::kSep, Vocab::kSep};
  p.insert(p.end(), query.begin(), query.end());
  p.push_back(Vocab::kSep);
  return p;
}

std::vector<Example> gen_echo_probes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const QueryShape shape{0, Vocab::kAlphabetSize, 3, 6};
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tokens q = sample_query(rng, shape);
    Tokens r = q;
    r.push_back(Vocab::kEos);
    out.push_back({make_echo_prompt(q), std::move(r)});
  }
  return out;
}

std::vector<Example> to_examples(const TaskDataset& ds) {
  std::vector<Example> out;
  out.reserve(ds.pairs.size() * 2);
  for (const auto& p : ds.pairs) {
    out.push_back({p.p_orig, p.r_orig});
    out.push_back({p.p_contrast, p.r_contrast});
  }
  return out;
}

std::vector<Example> gen_training_corpus(std::size_t n_pairs, std::size_t n_echo, std::uint64_t seed) {
  auto pairs = gen_mode_switch(std::max<std::size_t>(n_pairs, 1), derive_seed(seed, "pairs"), Split::kHeldIn,
                               full_shape());
  std::vector<Example> out = to_examples(pairs);
  if (n_pairs == 0) out.clear();
  auto echo = gen_echo_probes(n_echo, derive_seed(seed, "echo"));
  out.insert(out.end(), echo.begin(), echo.end());
  std::mt19937_64 rng(derive_seed(seed, "order"));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

std::string to_jsonl(const TaskDataset& ds) {
  std::string out;
  for (const auto& p : ds.pairs) {
    nlohmann::ordered_json j;
    j["p_orig"] = p.p_orig;
    j["r_orig"] = p.r_orig;
    j["p_contrast"] = p.p_contrast;
    j["r_contrast"] = p.r_contrast;
    j["split"] = to_string(ds.split);
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

Tokens token_array(const nlohmann::json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError(std::string("missing key '") + key + "'", line);
  if (!it->is_array()) throw ParseError(std::string("key '") + key + "' is not an array", line);
  Tokens out;
  for (const auto& v : *it) {
    if (!v.is_number_integer()) throw ParseError(std::string("key '") + key + "' holds a non-integer", line);
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace

TaskDataset from_jsonl(const std::string& text) {
  TaskDataset ds;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::optional<Split> split;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", line_no);
    ContrastivePair p{token_array(j, "p_orig", line_no), token_array(j, "r_orig", line_no),
                      token_array(j, "p_contrast", line_no), token_array(j, "r_contrast", line_no)};
    const auto sit = j.find("split");
    if (sit == j.end() || !sit->is_string()) throw ParseError("missing string key 'split'", line_no);
    Split s;
    try {
      s = parse_split(sit->get<std::string>());
    } catch (const InputError& e) {
      throw ParseError(e.what(), line_no);
    }
    if (split && *split != s) throw ValidationError("line " + std::to_string(line_no) + ": mixed splits in one file");
    split = s;
    try {
      validate_pair(p);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    ds.pairs.push_back(std::move(p));
  }
  if (split) ds.split = *split;
  return ds;
}

void save_jsonl(const TaskDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << to_jsonl(ds);
  if (!out) throw Error("write failed: " + path.string());
}

TaskDataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  TaskDataset ds = from_jsonl(buf.str());
  if (ds.pairs.empty()) spdlog::warn("dataset {} is empty", path.string());
  return ds;
}

std::string fingerprint(const TaskDataset& ds) { return hex64(fnv1a64(to_jsonl(ds))); }

}  // namespace gcm
