#include "gcm/localize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "gcm/errors.hpp"
#include "gcm/hash.hpp"
#include "gcm/parallel.hpp"

namespace gcm {

std::string to_string(LocalizerMethod m) {
  switch (m) {
    case LocalizerMethod::kActPatch:
      return "act_patch";
    case LocalizerMethod::kAttribPatch:
      return "attrib_patch";
    case LocalizerMethod::kKnockout:
      return "knockout";
    case LocalizerMethod::kItiProbe:
      return "iti_probe";
    case LocalizerMethod::kRandom:
      return "random";
  }
  return "?";
}

LocalizerMethod parse_localizer(const std::string& s) {
  if (s == "act_patch" || s == "actpatch") return LocalizerMethod::kActPatch;
  if (s == "attrib_patch" || s == "attribpatch" || s == "attrib") return LocalizerMethod::kAttribPatch;
  if (s == "knockout") return LocalizerMethod::kKnockout;
  if (s == "iti_probe" || s == "iti") return LocalizerMethod::kItiProbe;
  if (s == "random") return LocalizerMethod::kRandom;
  throw InputError("unknown localizer '" + s + "'");
}

namespace {

std::vector<int> continuation(const Tokens& prompt, const Tokens& response) {
  std::vector<int> t(prompt.begin(), prompt.end());
  t.insert(t.end(), response.begin(), response.end() - 1);
  return t;
}

double sum_logprob(const Trace& trace, std::size_t prompt_len, const Tokens& response) {
  const auto lps = response_token_logprobs(trace, prompt_len, response);
  return std::accumulate(lps.begin(), lps.end(), 0.0);
}

// Log-ratio of the two responses after p_orig under `spec`, one batched pass.
double patched_log_ratio(const ModelParams& params, const ContrastivePair& pair, const InterventionSpec& spec,
                         PassCounter* counter = nullptr) {
  const std::vector<std::vector<int>> seqs{continuation(pair.p_orig, pair.r_contrast),
                                           continuation(pair.p_orig, pair.r_orig)};
  RunOptions ro;
  ro.keep_cache = false;
  ro.counter = counter;
  const auto traces = forward_batch(params, seqs, spec, ro);
  return sum_logprob(traces[0], pair.p_orig.size(), pair.r_contrast) -
         sum_logprob(traces[1], pair.p_orig.size(), pair.r_orig);
}

InterventionSpec replace_prompt_positions(HeadId head, const ActivationCache* source, std::size_t positions,
                                          std::size_t dim, InterventionSite site) {
  InterventionSpec spec;
  spec.site = site;
  for (std::size_t t = 0; t < positions; ++t) {
    Patch p;
    p.head = head;
    p.position = t;
    p.mode = PatchMode::kReplace;
    if (source) {
      const auto v = source->at(head, t);
      p.vector.assign(v.begin(), v.end());
    } else {
      p.vector.assign(dim, 0.0f);
    }
    spec.patches.push_back(std::move(p));
  }
  return spec;
}

ActivationCache prompt_cache(const ModelParams& params, const Tokens& prompt, InterventionSite site,
                             PassCounter* counter = nullptr) {
  InterventionSpec none;
  none.site = site;
  RunOptions ro;
  ro.counter = counter;
  return forward_with_cache(params, prompt, none, ro).cache;
}

HeadScoreTable empty_table(LocalizerMethod method, const ModelConfig& cfg, const TaskDataset& ds,
                           std::uint64_t seed) {
  HeadScoreTable t;
  t.method = method;
  t.n_layers = cfg.n_layers;
  t.n_heads = cfg.n_heads;
  t.scores.assign(cfg.total_heads(), 0.0);
  t.dataset_fingerprint = fingerprint(ds);
  t.seed = seed;
  return t;
}

// Mean over pairs of a per-pair score vector, reduced in pair order.
template <typename PerPair>
HeadScoreTable mean_over_pairs(LocalizerMethod method, const ModelParams& params, const TaskDataset& ds,
                               const LocalizeOptions& options, PerPair&& per_pair) {
  if (ds.pairs.empty()) throw InputError(to_string(method) + ": empty dataset");
  for (const auto& p : ds.pairs) validate_pair(p);
  const ModelConfig& cfg = params.config();
  std::vector<std::vector<double>> rows(ds.pairs.size());
  parallel_for(ds.pairs.size(), options.jobs, [&](std::size_t i) { rows[i] = per_pair(ds.pairs[i]); });
  HeadScoreTable t = empty_table(method, cfg, ds, options.seed);
  for (std::size_t h = 0; h < cfg.total_heads(); ++h) {
    double acc = 0.0;
    for (const auto& r : rows) acc += r[h];
    t.scores[h] = acc / static_cast<double>(rows.size());
  }
  return t;
}

}  // namespace

double unpatched_log_ratio(const ModelParams& params, const ContrastivePair& pair) {
  return patched_log_ratio(params, pair, {});
}

double ie_activation_patch(const ModelParams& params, const ContrastivePair& pair, HeadId head,
                           InterventionSite site) {
  const ActivationCache contrast = prompt_cache(params, pair.p_contrast, site);
  const auto spec =
      replace_prompt_positions(head, &contrast, pair.p_orig.size(), site_dim(params.config(), site), site);
  return patched_log_ratio(params, pair, spec);
}

double ie_knockout(const ModelParams& params, const ContrastivePair& pair, HeadId head, InterventionSite site) {
  const auto spec =
      replace_prompt_positions(head, nullptr, pair.p_orig.size(), site_dim(params.config(), site), site);
  return patched_log_ratio(params, pair, spec);
}

AttributionResult ie_attribution_all_heads(const ModelParams& params, const ContrastivePair& pair,
                                           const LocalizeOptions& options) {
  const ModelConfig& cfg = params.config();
  AttributionResult out;
  out.scores.assign(cfg.total_heads(), 0.0);

  // Pass 1: contrast prompt.
  const ActivationCache contrast = prompt_cache(params, pair.p_contrast, options.site, &out.passes);

  // Pass 2: both continuations of the original prompt, then one backward of
  // log pi(r_contrast) - log pi(r_orig).
  const std::vector<std::vector<int>> seqs{continuation(pair.p_orig, pair.r_contrast),
                                           continuation(pair.p_orig, pair.r_orig)};
  InterventionSpec none;
  none.site = options.site;
  RunOptions ro;
  ro.record_tape = true;
  ro.counter = &out.passes;
  const auto traces = forward_batch(params, seqs, none, ro);

  const std::size_t P = pair.p_orig.size();
  std::vector<Tensor2D> dlogits;
  const std::array<const Tokens*, 2> responses{&pair.r_contrast, &pair.r_orig};
  for (std::size_t s = 0; s < 2; ++s) {
    // softmax - onehot is d(-log p)/d logits: flip it for r_contrast and keep
    // it for r_orig, giving the gradient of the log ratio.
    const float sign = s == 0 ? -1.0f : 1.0f;
    Tensor2D d(traces[s].tokens.size(), cfg.vocab_size);
    const Tokens& resp = *responses[s];
    for (std::size_t i = 0; i < resp.size(); ++i) {
      const auto g = softmax_cross_entropy_backward(traces[s].logits.row(P - 1 + i), static_cast<std::size_t>(resp[i]));
      auto row = d.row(P - 1 + i);
      for (std::size_t j = 0; j < g.size(); ++j) row[j] = sign * g[j];
    }
    dlogits.push_back(std::move(d));
  }
  BackwardOptions bo;
  bo.param_grads = false;
  bo.site_grads = true;
  bo.counter = &out.passes;
  const Gradients grads = backward_batch(params, traces, dlogits, bo);

  const ActivationCache& orig = traces[0].cache;
  const double direction = options.sign == AttributionSign::kContrastMinusOrig ? 1.0 : -1.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const HeadId id{static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h)};
      double acc = 0.0;
      for (std::size_t t = 0; t < P; ++t) {
        const auto g = grads.sites[l].at(h, t);
        const auto zo = orig.at(id, t);
        const auto zc = contrast.at(id, t);
        for (std::size_t c = 0; c < g.size(); ++c) acc += static_cast<double>(g[c]) * (zc[c] - zo[c]);
      }
      out.scores[head_index(cfg, id)] = direction * acc;
    }
  }
  return out;
}

HeadScoreTable rank_activation_patching(const ModelParams& params, const TaskDataset& ds,
                                        const LocalizeOptions& options) {
  const ModelConfig& cfg = params.config();
  return mean_over_pairs(LocalizerMethod::kActPatch, params, ds, options, [&](const ContrastivePair& pair) {
    const ActivationCache contrast = prompt_cache(params, pair.p_contrast, options.site);
    std::vector<double> row(cfg.total_heads());
    for (const HeadId id : all_heads(cfg)) {
      const auto spec = replace_prompt_positions(id, &contrast, pair.p_orig.size(), site_dim(cfg, options.site),
                                                 options.site);
      row[head_index(cfg, id)] = patched_log_ratio(params, pair, spec);
    }
    return row;
  });
}

HeadScoreTable rank_attribution_patching(const ModelParams& params, const TaskDataset& ds,
                                         const LocalizeOptions& options) {
  return mean_over_pairs(LocalizerMethod::kAttribPatch, params, ds, options, [&](const ContrastivePair& pair) {
    return ie_attribution_all_heads(params, pair, options).scores;
  });
}

HeadScoreTable rank_knockout(const ModelParams& params, const TaskDataset& ds, const LocalizeOptions& options) {
  const ModelConfig& cfg = params.config();
  return mean_over_pairs(LocalizerMethod::kKnockout, params, ds, options, [&](const ContrastivePair& pair) {
    std::vector<double> row(cfg.total_heads());
    for (const HeadId id : all_heads(cfg)) row[head_index(cfg, id)] = ie_knockout(params, pair, id, options.site);
    return row;
  });
}

double probe_validation_accuracy(std::span<const float> features, std::size_t dim, std::span<const int> labels,
                                 std::uint64_t seed, const ProbeOptions& options) {
  const std::size_t n = labels.size();
  if (dim == 0 || features.size() != n * dim) throw ShapeError("probe: feature matrix does not match labels");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(options.train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) throw InputError("probe: split leaves an empty side");

  std::vector<double> w(dim, 0.0);
  double bias = 0.0;
  std::vector<double> gw(dim);
  auto logit = [&](std::size_t row) {
    double z = bias;
    const float* x = features.data() + row * dim;
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
    return z;
  };
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) {
      const std::size_t row = order[i];
      const double p = 1.0 / (1.0 + std::exp(-logit(row)));
      const double err = p - labels[row];
      const float* x = features.data() + row * dim;
      for (std::size_t j = 0; j < dim; ++j) gw[j] += err * x[j];
      gb += err;
    }
    const double inv = 1.0 / static_cast<double>(n_train);
    for (std::size_t j = 0; j < dim; ++j) w[j] -= options.learning_rate * gw[j] * inv;
    bias -= options.learning_rate * gb * inv;
  }
  std::size_t correct = 0;
  for (std::size_t i = n_train; i < n; ++i) {
    const std::size_t row = order[i];
    const int predicted = logit(row) >= 0.0 ? 1 : 0;
    correct += predicted == labels[row];
  }
  return static_cast<double>(correct) / static_cast<double>(n - n_train);
}

HeadScoreTable rank_iti_probe(const ModelParams& params, const TaskDataset& ds, const LocalizeOptions& options,
                              const ProbeOptions& probe) {
  if (ds.pairs.size() < 5) throw InputError("iti_probe: need at least 5 pairs for a 4:1 split");
  for (const auto& p : ds.pairs) validate_pair(p);
  const ModelConfig& cfg = params.config();
  const std::size_t dim = site_dim(cfg, options.site);
  const std::size_t n = ds.pairs.size() * 2;

  // Final-token site activations of each concatenated (prompt, response).
  std::vector<ActivationCache> caches(n);
  std::vector<int> labels(n);
  parallel_for(n, options.jobs, [&](std::size_t i) {
    const auto& pair = ds.pairs[i / 2];
    const bool contrast = i % 2 == 1;
    std::vector<int> seq = contrast ? pair.p_contrast : pair.p_orig;
    const Tokens& resp = contrast ? pair.r_contrast : pair.r_orig;
    seq.insert(seq.end(), resp.begin(), resp.end());
    InterventionSpec none;
    none.site = options.site;
    caches[i] = forward_with_cache(params, seq, none).cache;
    labels[i] = contrast ? 1 : 0;
  });

  HeadScoreTable t = empty_table(LocalizerMethod::kItiProbe, cfg, ds, options.seed);
  std::vector<double> acc(cfg.total_heads());
  parallel_for(cfg.total_heads(), options.jobs, [&](std::size_t h) {
    const HeadId id = head_from_index(cfg, h);
    std::vector<float> features(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = caches[i].at(id, caches[i].positions() - 1);
      std::copy(v.begin(), v.end(), features.begin() + i * dim);
    }
    acc[h] = probe_validation_accuracy(features, dim, labels, options.seed, probe);
  });
  t.scores = std::move(acc);
  return t;
}

HeadScoreTable rank_random(const ModelConfig& cfg, std::uint64_t seed) {
  HeadScoreTable t;
  t.method = LocalizerMethod::kRandom;
  t.n_layers = cfg.n_layers;
  t.n_heads = cfg.n_heads;
  t.seed = seed;
  const std::size_t n = cfg.total_heads();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  t.scores.assign(n, 0.0);
  for (std::size_t rank = 0; rank < n; ++rank) t.scores[perm[rank]] = static_cast<double>(n - rank);
  return t;
}

HeadScoreTable localize(LocalizerMethod method, const ModelParams& params, const TaskDataset& ds,
                        const LocalizeOptions& options) {
  switch (method) {
    case LocalizerMethod::kActPatch:
      return rank_activation_patching(params, ds, options);
    case LocalizerMethod::kAttribPatch:
      return rank_attribution_patching(params, ds, options);
    case LocalizerMethod::kKnockout:
      return rank_knockout(params, ds, options);
    case LocalizerMethod::kItiProbe:
      return rank_iti_probe(params, ds, options);
    case LocalizerMethod::kRandom: {
      HeadScoreTable t = rank_random(params.config(), options.seed);
      t.dataset_fingerprint = fingerprint(ds);
      return t;
    }
  }
  throw InputError("localize: unknown method");
}

std::size_t top_k_count(std::size_t total_heads, double k) {
  if (!(k > 0.0 && k <= 1.0)) throw InputError("select_top_k: k must be in (0, 1]");
  // Guard against products like 0.07 * 100 = 7.000000000000001.
  const double raw = k * static_cast<double>(total_heads);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(raw - 1e-9)), 1, total_heads);
}

HeadSelection select_top_k(const HeadScoreTable& table, double k) {
  const std::size_t total = table.scores.size();
  const std::size_t count = top_k_count(total, k);
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return table.scores[a] > table.scores[b]; });
  HeadSelection sel;
  sel.k = k;
  for (std::size_t i = 0; i < count; ++i) {
    sel.heads.push_back({static_cast<std::uint32_t>(idx[i] / table.n_heads),
                         static_cast<std::uint32_t>(idx[i] % table.n_heads)});
  }
  return sel;
}

std::string to_csv(const HeadScoreTable& table) {
  std::string out = "method,layer,head,score,seed,dataset_fingerprint\n";
  char buf[64];
  for (std::size_t i = 0; i < table.scores.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f", table.scores[i]);
    out += to_string(table.method) + "," + std::to_string(i / table.n_heads) + "," +
           std::to_string(i % table.n_heads) + "," + buf + "," + std::to_string(table.seed) + "," +
           table.dataset_fingerprint + "\n";
  }
  return out;
}

HeadScoreTable score_table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line.rfind("method,layer,head,score", 0) != 0) {
    throw ParseError("score table: missing header", 1);
  }
  ++line_no;
  HeadScoreTable t;
  struct Row {
    std::uint32_t layer, head;
    double score;
  };
  std::vector<Row> rows;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() == 5 && !line.empty() && line.back() == ',') cols.emplace_back();
    if (cols.size() != 6) throw ParseError("score table: expected 6 columns", line_no);
    try {
      const LocalizerMethod m = parse_localizer(cols[0]);
      Row r{static_cast<std::uint32_t>(std::stoul(cols[1])), static_cast<std::uint32_t>(std::stoul(cols[2])),
            std::stod(cols[3])};
      if (first) {
        t.method = m;
        t.seed = std::stoull(cols[4]);
        t.dataset_fingerprint = cols[5];
        first = false;
      } else if (m != t.method) {
        throw ParseError("score table: mixed methods", line_no);
      }
      rows.push_back(r);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(std::string("score table: ") + e.what(), line_no);
    }
  }
  if (rows.empty()) throw ParseError("score table: no rows", line_no);
  for (const auto& r : rows) {
    t.n_layers = std::max(t.n_layers, r.layer + 1);
    t.n_heads = std::max(t.n_heads, r.head + 1);
  }
  if (rows.size() != std::size_t{t.n_layers} * t.n_heads) {
    throw ValidationError("score table: expected one row per head");
  }
  t.scores.assign(rows.size(), std::nan(""));
  for (const auto& r : rows) {
    double& slot = t.scores[std::size_t{r.layer} * t.n_heads + r.head];
    if (!std::isnan(slot)) throw ValidationError("score table: duplicate head row");
    if (!std::isfinite(r.score)) throw ValidationError("score table: non-finite score");
    slot = r.score;
  }
  return t;
}

}  // namespace gcm
