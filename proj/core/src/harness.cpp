#include "gcm/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "gcm/errors.hpp"
#include "gcm/hash.hpp"
#include "gcm/judge.hpp"
#include "gcm/parallel.hpp"

namespace gcm {

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<double> default_alphas() {
  std::vector<double> a;
  for (int i = 1; i <= 10; ++i) a.push_back(i);
  return a;
}

std::vector<double> default_ks() {
  return {0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.5, 1.0};
}

SweepConfig default_sweep_config() {
  SweepConfig c;
  c.alphas = default_alphas();
  c.ks = default_ks();
  c.localizers = {LocalizerMethod::kActPatch, LocalizerMethod::kAttribPatch, LocalizerMethod::kRandom};
  c.steerers = {SteerMethod::kMean, SteerMethod::kDiffMeans, SteerMethod::kReft};
  return c;
}

void SweepConfig::validate() const {
  if (alphas.empty() || ks.empty() || localizers.empty() || steerers.empty() || seeds.empty()) {
    throw InputError("sweep config: alpha, k, localizer, steerer and seed lists must be nonempty");
  }
  for (double a : alphas) {
    if (!std::isfinite(a) || a <= 0.0) throw InputError("sweep config: alpha values must be positive");
  }
  for (double k : ks) {
    if (!(k > 0.0 && k <= 1.0)) throw InputError("sweep config: k values must lie in (0, 1]");
  }
}

std::string pairing_key(const GridCellResult& c) {
  return to_string(c.steerer) + "|" + format_number(c.alpha) + "|" + format_number(c.k) + "|" + to_string(c.split) +
         "|" + std::to_string(c.seed);
}

std::string table_key(LocalizerMethod m, std::uint64_t seed) { return to_string(m) + "/" + std::to_string(seed); }

// ---------------------------------------------------------------------------
// evaluation

namespace {

std::size_t judge_budget(const Tokens& prompt) {
  const auto q = query_of(prompt);
  if (!q) throw InputError("evaluation prompt has no parsable query");
  return 2 * q->size();
}

}  // namespace

Baselines compute_baselines(const ModelParams& params, const TaskDataset& ds, std::size_t jobs) {
  Baselines b;
  b.responses.resize(ds.pairs.size());
  parallel_for(ds.pairs.size(), jobs, [&](std::size_t i) {
    const Tokens& p = ds.pairs[i].p_orig;
    b.responses[i] = generate_unsteered(params, p, judge_budget(p));
  });
  return b;
}

GridCellResult evaluate_plan(const ModelParams& params, const SteeringPlan& plan, const TaskDataset& ds,
                             const Baselines* baselines, std::size_t jobs) {
  if (ds.pairs.empty()) throw InputError("evaluate_plan: empty dataset");
  Baselines local;
  if (!baselines) {
    local = compute_baselines(params, ds, jobs);
    baselines = &local;
  }
  std::vector<JudgeVerdict> verdicts(ds.pairs.size());
  parallel_for(ds.pairs.size(), jobs, [&](std::size_t i) {
    const Tokens& p = ds.pairs[i].p_orig;
    const Tokens steered = apply_plan(params, p, plan, judge_budget(p));
    verdicts[i] = judge_response(p, steered, baselines->responses[i]);
  });
  GridCellResult r;
  r.steerer = plan.method;
  r.alpha = plan.alpha;
  r.k = plan.k;
  r.split = ds.split;
  r.n = verdicts.size();
  r.success_rate = success_rate(verdicts);
  return r;
}

GridCellResult eval_held_out(const ModelParams& params, const SteeringPlan& plan, const TaskDataset& held_out,
                             std::size_t jobs) {
  GridCellResult r = evaluate_plan(params, plan, held_out, nullptr, jobs);
  r.split = Split::kHeldOut;
  return r;
}

double capability_retention(const ModelParams& params, const SteeringPlan* plan, std::span<const Example> probes,
                            std::size_t jobs) {
  if (probes.empty()) throw InputError("capability_retention: empty probe set");
  std::vector<char> hit(probes.size(), 0);
  parallel_for(probes.size(), jobs, [&](std::size_t i) {
    const Example& ex = probes[i];
    const Tokens out = plan ? apply_plan(params, ex.prompt, *plan, ex.response.size())
                            : generate_unsteered(params, ex.prompt, ex.response.size());
    hit[i] = out == ex.response;
  });
  const auto hits = std::count(hit.begin(), hit.end(), 1);
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

ActivationStats compute_activation_stats(const ModelParams& params, const TaskDataset& ds,
                                         const PlanOptions& options) {
  if (ds.pairs.empty()) throw InputError("activation stats: empty dataset");
  const ModelConfig& cfg = params.config();
  ActivationStats s;
  s.site = options.site;
  s.dim = site_dim(cfg, options.site);
  s.n_heads_total = cfg.total_heads();
  std::size_t lo = ds.pairs.front().p_orig.size();
  for (const auto& p : ds.pairs) {
    validate_pair(p);
    s.positions = std::max(s.positions, p.p_orig.size());
    lo = std::min(lo, p.p_orig.size());
  }
  if (options.strict_template_length && lo != s.positions) {
    throw InputError("activation stats: prompts have unequal lengths");
  }
  const std::size_t n = ds.pairs.size();
  std::vector<ActivationCache> orig(n), contrast(n);
  parallel_for(2 * n, options.jobs, [&](std::size_t i) {
    InterventionSpec none;
    none.site = options.site;
    const auto& pair = ds.pairs[i / 2];
    if (i % 2 == 0) {
      orig[i / 2] = forward_with_cache(params, pair.p_orig, none).cache;
    } else {
      contrast[i / 2] = forward_with_cache(params, pair.p_contrast, none).cache;
    }
  });
  auto reduce = [&](const std::vector<ActivationCache>& caches, std::vector<std::vector<double>>& out) {
    out.assign(s.n_heads_total * s.positions, std::vector<double>(s.dim, 0.0));
    std::vector<std::size_t> counts(s.positions, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = caches[i].positions();
      for (std::size_t t = 0; t < len; ++t) {
        ++counts[t];
        for (std::size_t h = 0; h < s.n_heads_total; ++h) {
          const auto z = caches[i].at(head_from_index(cfg, h), t);
          auto& acc = out[h * s.positions + t];
          for (std::size_t c = 0; c < s.dim; ++c) acc[c] += z[c];
        }
      }
    }
    for (std::size_t h = 0; h < s.n_heads_total; ++h) {
      for (std::size_t t = 0; t < s.positions; ++t) {
        for (auto& v : out[h * s.positions + t]) v /= static_cast<double>(counts[t]);
      }
    }
  };
  reduce(orig, s.mean_orig);
  reduce(contrast, s.mean_contrast);
  return s;
}

SteeringPlan plan_from_stats(const ModelConfig& cfg, const ActivationStats& stats, SteerMethod method,
                             const HeadSelection& heads, double alpha) {
  if (method == SteerMethod::kReft) throw InputError("plan_from_stats: ReFT plans need a trained module");
  if (!std::isfinite(alpha) || alpha <= 0.0) throw InputError("steering plan: alpha must be positive and finite");
  SteeringPlan plan;
  plan.method = method;
  plan.alpha = alpha;
  plan.k = heads.k;
  plan.heads = heads.heads;
  plan.site = stats.site;
  plan.positions = stats.positions;
  for (const HeadId id : heads.heads) {
    const std::size_t h = head_index(cfg, id);
    for (std::size_t t = 0; t < stats.positions; ++t) {
      const auto& mc = stats.mean_contrast[h * stats.positions + t];
      const auto& mo = stats.mean_orig[h * stats.positions + t];
      std::vector<float> v(stats.dim);
      for (std::size_t c = 0; c < stats.dim; ++c) {
        v[c] = static_cast<float>(method == SteerMethod::kMean ? mc[c] : mc[c] - mo[c]);
      }
      plan.vectors.push_back(std::move(v));
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// sweep

namespace {

std::string heads_key(const std::vector<HeadId>& heads) {
  std::string k;
  for (const auto& h : heads) k += to_string(h) + ",";
  return k;
}

LocalizeOptions localize_options(const SweepConfig& config, LocalizerMethod m, std::uint64_t seed) {
  LocalizeOptions o;
  o.site = config.site;
  o.sign = config.attribution_sign;
  o.jobs = config.jobs;
  o.seed = derive_seed(seed, "localize/" + to_string(m));
  return o;
}

ReftHyperparams reft_options(const SweepConfig& config, std::uint64_t seed) {
  ReftHyperparams hp = config.reft;
  hp.site = config.site;
  hp.seed = derive_seed(seed, "reft");
  return hp;
}

}  // namespace

SteeringPlan build_cell_plan(const ModelParams& params, const TaskDataset& ds, const HeadScoreTable& table,
                             SteerMethod steerer, double alpha, double k, const SweepConfig& config) {
  const HeadSelection sel = select_top_k(table, k);
  PlanOptions po;
  po.site = config.site;
  po.jobs = config.jobs;
  switch (steerer) {
    case SteerMethod::kMean:
      return build_mean_plan(params, ds, sel, alpha, po);
    case SteerMethod::kDiffMeans:
      return build_diff_means_plan(params, ds, sel, alpha, po);
    case SteerMethod::kReft: {
      const ReftReport rep = train_reft(params, ds, sel.heads, reft_options(config, table.seed));
      return build_reft_plan(rep.module, sel, alpha, config.normalize_reft, config.reft_extraction);
    }
  }
  throw InputError("unknown steerer");
}

SweepResult run_sweep(const ModelParams& params, const TaskDataset& ds, const SweepConfig& config,
                      const std::map<std::string, HeadScoreTable>& tables) {
  config.validate();
  if (ds.pairs.empty()) throw InputError("run_sweep: empty dataset");
  const ModelConfig& cfg = params.config();
  SweepResult result;

  for (const std::uint64_t seed : config.seeds) {
    for (const LocalizerMethod m : config.localizers) {
      const std::string key = table_key(m, seed);
      if (const auto it = tables.find(key); it != tables.end()) {
        if (it->second.scores.size() != cfg.total_heads()) throw InputError("run_sweep: score table " + key + " has the wrong size");
        result.tables[key] = it->second;
      } else {
        spdlog::info("localizing with {} (seed {})", to_string(m), seed);
        result.tables[key] = localize(m, params, ds, localize_options(config, m, seed));
      }
    }
  }

  PlanOptions po;
  po.site = config.site;
  po.jobs = config.jobs;
  const bool need_stats = std::any_of(config.steerers.begin(), config.steerers.end(),
                                      [](SteerMethod s) { return s != SteerMethod::kReft; });
  ActivationStats stats;
  if (need_stats) stats = compute_activation_stats(params, ds, po);
  const Baselines baselines = compute_baselines(params, ds, config.jobs);

  // ReFT modules depend only on the head set (and seed); alpha scales at apply time.
  std::map<std::string, std::shared_ptr<const ReftModule>> modules;
  std::map<std::string, std::string> module_errors;
  if (std::find(config.steerers.begin(), config.steerers.end(), SteerMethod::kReft) != config.steerers.end()) {
    struct Job {
      std::string key;
      std::vector<HeadId> heads;
      std::uint64_t seed;
    };
    std::vector<Job> jobs;
    std::set<std::string> seen;
    for (const std::uint64_t seed : config.seeds) {
      for (const LocalizerMethod m : config.localizers) {
        for (const double k : config.ks) {
          const auto sel = select_top_k(result.tables.at(table_key(m, seed)), k);
          const std::string key = std::to_string(seed) + ":" + heads_key(sel.heads);
          if (seen.insert(key).second) jobs.push_back({key, sel.heads, seed});
        }
      }
    }
    spdlog::info("training {} ReFT modules", jobs.size());
    std::vector<std::shared_ptr<const ReftModule>> trained(jobs.size());
    std::vector<std::string> errors(jobs.size());
    parallel_for(jobs.size(), config.jobs, [&](std::size_t i) {
      try {
        trained[i] = train_reft(params, ds, jobs[i].heads, reft_options(config, jobs[i].seed)).module;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (trained[i]) {
        modules[jobs[i].key] = trained[i];
      } else {
        module_errors[jobs[i].key] = errors[i];
      }
    }
  }

  struct CellKey {
    std::uint64_t seed;
    LocalizerMethod localizer;
    SteerMethod steerer;
    double alpha, k;
  };
  std::vector<CellKey> keys;
  for (const std::uint64_t seed : config.seeds) {
    for (const LocalizerMethod m : config.localizers) {
      for (const SteerMethod s : config.steerers) {
        for (const double a : config.alphas) {
          for (const double k : config.ks) keys.push_back({seed, m, s, a, k});
        }
      }
    }
  }
  spdlog::info("evaluating {} grid cells", keys.size());
  result.cells.resize(keys.size());
  parallel_for(keys.size(), config.jobs, [&](std::size_t i) {
    const CellKey& key = keys[i];
    GridCellResult& cell = result.cells[i];
    cell.localizer = key.localizer;
    cell.steerer = key.steerer;
    cell.alpha = key.alpha;
    cell.k = key.k;
    cell.split = ds.split;
    cell.seed = key.seed;
    try {
      const HeadSelection sel = select_top_k(result.tables.at(table_key(key.localizer, key.seed)), key.k);
      SteeringPlan plan;
      if (key.steerer == SteerMethod::kReft) {
        const std::string mkey = std::to_string(key.seed) + ":" + heads_key(sel.heads);
        if (const auto err = module_errors.find(mkey); err != module_errors.end()) throw TrainingError(err->second);
        plan = build_reft_plan(modules.at(mkey), sel, key.alpha, config.normalize_reft, config.reft_extraction);
      } else {
        plan = plan_from_stats(cfg, stats, key.steerer, sel, key.alpha);
      }
      const GridCellResult r = evaluate_plan(params, plan, ds, &baselines, 1);
      cell.n = r.n;
      cell.success_rate = r.success_rate;
    } catch (const std::exception& e) {
      cell.error = e.what();
      spdlog::warn("cell {}/{}/{}/{} failed: {}", to_string(key.localizer), to_string(key.steerer),
                   format_number(key.alpha), format_number(key.k), e.what());
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// statistics

namespace {

std::vector<double> nonzero(std::span<const double> deltas) {
  std::vector<double> out;
  for (double d : deltas) {
    if (!std::isfinite(d)) throw InputError("wilcoxon: non-finite delta");
    if (d != 0.0) out.push_back(d);
  }
  return out;
}

// Average ranks (1-based) of |d|, doubled so they stay integral.
std::vector<long> doubled_ranks(const std::vector<double>& d, std::vector<std::size_t>* tie_sizes = nullptr) {
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::fabs(d[a]) < std::fabs(d[b]); });
  std::vector<long> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(d[idx[j + 1]]) == std::fabs(d[idx[i]])) ++j;
    const long twice_avg = static_cast<long>(i + 1 + j + 1);
    for (std::size_t q = i; q <= j; ++q) r[idx[q]] = twice_avg;
    if (tie_sizes) tie_sizes->push_back(j - i + 1);
    i = j + 1;
  }
  return r;
}

void require_sample(const std::vector<double>& d) {
  if (d.empty()) throw InputError("wilcoxon: all deltas are zero (degenerate comparison)");
  if (d.size() < 5) throw InputError("wilcoxon: need at least 5 nonzero deltas, got " + std::to_string(d.size()));
}

}  // namespace

double wilcoxon_exact(std::span<const double> deltas) {
  const std::vector<double> d = nonzero(deltas);
  require_sample(d);
  if (d.size() > 24) throw InputError("wilcoxon_exact: n too large for enumeration");
  const std::vector<long> r = doubled_ranks(d);
  long observed = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) observed += r[i];
  }
  const std::uint64_t total = std::uint64_t{1} << d.size();
  std::uint64_t at_least = 0;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    long w = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (mask >> i & 1u) w += r[i];
    }
    at_least += w >= observed;
  }
  return static_cast<double>(at_least) / static_cast<double>(total);
}

double wilcoxon_normal(std::span<const double> deltas) {
  const std::vector<double> d = nonzero(deltas);
  require_sample(d);
  std::vector<std::size_t> ties;
  const std::vector<long> r = doubled_ranks(d, &ties);
  double w = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) w += r[i] / 2.0;
  }
  const double n = static_cast<double>(d.size());
  const double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (std::size_t t : ties) {
    const double tt = static_cast<double>(t);
    var -= (tt * tt * tt - tt) / 48.0;
  }
  if (var <= 0.0) throw InputError("wilcoxon: zero variance");
  const double z = (w - mean - 0.5) / std::sqrt(var);
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double wilcoxon_one_sided(std::span<const double> deltas) {
  const std::vector<double> d = nonzero(deltas);
  require_sample(d);
  return d.size() <= 12 ? wilcoxon_exact(d) : wilcoxon_normal(d);
}

BhResult bh_fdr(std::span<const double> p, double q) {
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("bh_fdr: p-values must lie in [0, 1]");
  }
  const std::size_t n = p.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  BhResult out;
  out.adjusted.assign(n, 0.0);
  out.reject.assign(n, false);
  double running = 1.0;
  for (std::size_t rank = n; rank-- > 0;) {
    const std::size_t i = idx[rank];
    running = std::min(running, p[i] * static_cast<double>(n) / static_cast<double>(rank + 1));
    out.adjusted[i] = std::min(running, 1.0);
  }
  for (std::size_t i = 0; i < n; ++i) out.reject[i] = out.adjusted[i] <= q;
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t q = i; q <= j; ++q) r[idx[q]] = (static_cast<double>(i + j) / 2.0) + 1.0;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("spearman: need two equal-length samples (n >= 2)");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

std::vector<ComparisonResult> compare_methods(const std::vector<ComparisonRequest>& requests, double q) {
  std::vector<ComparisonResult> out;
  std::vector<double> raw;
  std::vector<std::size_t> testable;
  for (const auto& req : requests) {
    std::map<std::string, double> a, b;
    for (const auto& c : req.a) {
      if (c.ok()) a[pairing_key(c)] = c.success_rate;
    }
    for (const auto& c : req.b) {
      if (c.ok()) b[pairing_key(c)] = c.success_rate;
    }
    if (a.size() != b.size() || !std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) {
          return x.first == y.first;
        })) {
      throw InputError("compare_methods: '" + req.name + "' sides do not share the same cell keys");
    }
    if (a.empty()) throw InputError("compare_methods: '" + req.name + "' has no cells");
    ComparisonResult r;
    r.name = req.name;
    r.n_pairs = a.size();
    std::vector<double> deltas;
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) deltas.push_back(ia->second - ib->second);
    r.mean_delta = std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size());
    try {
      r.raw_p = wilcoxon_one_sided(deltas);
      raw.push_back(r.raw_p);
      testable.push_back(out.size());
    } catch (const InputError& e) {
      r.degenerate = true;
      r.raw_p = std::numeric_limits<double>::quiet_NaN();
      r.fdr_p = std::numeric_limits<double>::quiet_NaN();
      spdlog::info("comparison {} is degenerate: {}", req.name, e.what());
    }
    out.push_back(r);
  }
  const BhResult bh = bh_fdr(raw, q);
  for (std::size_t i = 0; i < testable.size(); ++i) {
    out[testable[i]].fdr_p = bh.adjusted[i];
    out[testable[i]].reject = bh.reject[i];
  }
  return out;
}

ComparisonRequest comparison_from_grid(const std::vector<GridCellResult>& grid, const std::string& spec,
                                       std::optional<Split> split) {
  const auto gt = spec.find('>');
  const auto at = spec.find('@');
  if (gt == std::string::npos || at == std::string::npos || at < gt) {
    throw InputError("comparison '" + spec + "' is not of the form A>B@steerer");
  }
  const LocalizerMethod a = parse_localizer(spec.substr(0, gt));
  const LocalizerMethod b = parse_localizer(spec.substr(gt + 1, at - gt - 1));
  const SteerMethod s = parse_steer_method(spec.substr(at + 1));
  ComparisonRequest req;
  req.name = to_string(a) + ">" + to_string(b) + "@" + to_string(s);
  for (const auto& c : grid) {
    if (c.steerer != s || (split && c.split != *split)) continue;
    if (c.localizer == a) req.a.push_back(c);
    if (c.localizer == b) req.b.push_back(c);
  }
  return req;
}

// ---------------------------------------------------------------------------
// output

std::string grid_to_csv(const std::vector<GridCellResult>& cells) {
  std::string out = "localizer,steerer,alpha,k,split,seed,n,success_rate\n";
  char buf[32];
  for (const auto& c : cells) {
    if (!c.ok()) continue;
    std::snprintf(buf, sizeof buf, "%.4f", c.success_rate);
    out += to_string(c.localizer) + "," + to_string(c.steerer) + "," + format_number(c.alpha) + "," +
           format_number(c.k) + "," + to_string(c.split) + "," + std::to_string(c.seed) + "," + std::to_string(c.n) +
           "," + buf + "\n";
  }
  return out;
}

std::vector<GridCellResult> grid_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("localizer,steerer,alpha,k,split,seed,n,success_rate", 0) != 0) {
    throw ParseError("grid: missing header", 1);
  }
  std::vector<GridCellResult> cells;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() != 8) throw ParseError("grid: expected 8 columns", line_no);
    GridCellResult r;
    try {
      r.localizer = parse_localizer(cols[0]);
      r.steerer = parse_steer_method(cols[1]);
      r.alpha = std::stod(cols[2]);
      r.k = std::stod(cols[3]);
      r.split = parse_split(cols[4]);
      r.seed = std::stoull(cols[5]);
      r.n = std::stoul(cols[6]);
      r.success_rate = std::stod(cols[7]);
    } catch (const std::exception& e) {
      throw ParseError(std::string("grid: ") + e.what(), line_no);
    }
    if (r.n == 0 || !(r.success_rate >= 0.0 && r.success_rate <= 1.0)) {
      throw ValidationError("grid line " + std::to_string(line_no) + ": n must be positive and success_rate in [0,1]");
    }
    cells.push_back(r);
  }
  return cells;
}

std::string stats_to_json(const std::vector<ComparisonResult>& results) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  for (const auto& r : results) {
    nlohmann::ordered_json j;
    j["comparison"] = r.name;
    j["n_pairs"] = r.n_pairs;
    j["raw_p"] = num(r.raw_p);
    j["fdr_p"] = num(r.fdr_p);
    j["reject"] = r.reject;
    j["degenerate"] = r.degenerate;
    j["mean_delta"] = r.mean_delta;
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

std::string grid_to_svg(const std::vector<GridCellResult>& cells) {
  // Panels in first-seen order of (localizer, steerer); axes from the data.
  std::vector<std::pair<LocalizerMethod, SteerMethod>> panels;
  std::set<double> ks, alphas;
  std::map<std::string, double> value;
  std::map<std::string, std::size_t> count;
  for (const auto& c : cells) {
    if (!c.ok()) continue;
    const std::pair<LocalizerMethod, SteerMethod> p{c.localizer, c.steerer};
    if (std::find(panels.begin(), panels.end(), p) == panels.end()) panels.push_back(p);
    ks.insert(c.k);
    alphas.insert(c.alpha);
    const std::string key = to_string(c.localizer) + "|" + to_string(c.steerer) + "|" + format_number(c.alpha) + "|" +
                            format_number(c.k);
    value[key] += c.success_rate;
    ++count[key];
  }
  constexpr int cell = 26, margin_left = 44, margin_top = 36, gap = 30;
  const int pw = margin_left + cell * static_cast<int>(ks.size()) + 10;
  const int ph = margin_top + cell * static_cast<int>(alphas.size()) + 34;
  const int cols = std::max<int>(1, std::min<int>(3, static_cast<int>(panels.size())));
  const int rows = (static_cast<int>(panels.size()) + cols - 1) / cols;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * (pw + gap) << "\" height=\""
      << std::max(1, rows) * (ph + gap) << "\" font-family=\"sans-serif\" font-size=\"9\">\n";
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const int ox = static_cast<int>(pi % cols) * (pw + gap);
    const int oy = static_cast<int>(pi / cols) * (ph + gap);
    const auto [loc, st] = panels[pi];
    svg << "<g transform=\"translate(" << ox << "," << oy << ")\">\n";
    svg << "<text x=\"" << margin_left << "\" y=\"14\" font-size=\"12\">" << to_string(loc) << " / " << to_string(st)
        << "</text>\n";
    int yi = 0;
    for (auto a = alphas.rbegin(); a != alphas.rend(); ++a, ++yi) {
      const int y = margin_top + yi * cell;
      svg << "<text x=\"" << margin_left - 4 << "\" y=\"" << y + cell / 2 + 3 << "\" text-anchor=\"end\">"
          << format_number(*a) << "</text>\n";
      int xi = 0;
      for (const double k : ks) {
        const int x = margin_left + xi++ * cell;
        const std::string key = to_string(loc) + "|" + to_string(st) + "|" + format_number(*a) + "|" + format_number(k);
        const auto it = value.find(key);
        if (it == value.end()) {
          svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
              << "\" fill=\"#dddddd\"/>\n";
          continue;
        }
        const double v = it->second / static_cast<double>(count.at(key));
        const int r = static_cast<int>(std::lround(255 - v * (255 - 8)));
        const int g = static_cast<int>(std::lround(255 - v * (255 - 81)));
        const int b = static_cast<int>(std::lround(255 - v * (255 - 156)));
        char fill[8];
        std::snprintf(fill, sizeof fill, "#%02x%02x%02x", r, g, b);
        svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
            << fill << "\" stroke=\"#ffffff\"><title>alpha=" << format_number(*a) << " k=" << format_number(k)
            << " success=" << format_number(v) << "</title></rect>\n";
        char label[16];
        std::snprintf(label, sizeof label, "%.0f", v * 100.0);
        svg << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 3 << "\" text-anchor=\"middle\" fill=\""
            << (v > 0.55 ? "#ffffff" : "#000000") << "\">" << label << "</text>\n";
      }
    }
    int xi = 0;
    const int ylab = margin_top + cell * static_cast<int>(alphas.size()) + 12;
    for (const double k : ks) {
      svg << "<text x=\"" << margin_left + xi++ * cell + cell / 2 << "\" y=\"" << ylab << "\" text-anchor=\"middle\">"
          << format_number(k) << "</text>\n";
    }
    svg << "<text x=\"" << margin_left << "\" y=\"" << ylab + 16 << "\">k (fraction of heads) vs alpha</text>\n";
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace gcm
