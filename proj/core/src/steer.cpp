#include "gcm/steer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "gcm/errors.hpp"
#include "gcm/hash.hpp"
#include "gcm/parallel.hpp"

namespace gcm {

std::string to_string(SteerMethod m) {
  switch (m) {
    case SteerMethod::kMean:
      return "mean";
    case SteerMethod::kDiffMeans:
      return "diff_means";
    case SteerMethod::kReft:
      return "reft";
  }
  return "?";
}

SteerMethod parse_steer_method(const std::string& s) {
  if (s == "mean") return SteerMethod::kMean;
  if (s == "diff_means" || s == "diffmeans") return SteerMethod::kDiffMeans;
  if (s == "reft") return SteerMethod::kReft;
  throw InputError("unknown steering method '" + s + "'");
}

std::string to_string(ReftExtraction e) { return e == ReftExtraction::kEdit ? "edit" : "down_projection"; }

ReftExtraction parse_reft_extraction(const std::string& s) {
  if (s == "edit") return ReftExtraction::kEdit;
  if (s == "down_projection") return ReftExtraction::kDownProjection;
  throw InputError("unknown ReFT extraction '" + s + "'");
}

double orthonormality_error(std::span<const float> r, std::size_t rank, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t a = 0; a < rank; ++a) {
    for (std::size_t b = 0; b < rank; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += static_cast<double>(r[a * dim + j]) * r[b * dim + j];
      const double d = dot - (a == b ? 1.0 : 0.0);
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

double ReftModule::orthonormality_error() const {
  double worst = 0.0;
  for (const auto& e : edits) worst = std::max(worst, gcm::orthonormality_error(e.r, e.rank, e.dim));
  return worst;
}

void orthonormalize_rows(std::vector<double>& r, std::size_t rank, std::size_t dim) {
  Eigen::MatrixXd m(dim, rank);
  for (std::size_t a = 0; a < rank; ++a) {
    for (std::size_t j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(a)) = r[a * dim + j];
  }
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dim),
                                                                    static_cast<Eigen::Index>(rank));
  const Eigen::MatrixXd& packed = qr.matrixQR();
  for (std::size_t a = 0; a < rank; ++a) {
    const auto ia = static_cast<Eigen::Index>(a);
    const double sign = packed(ia, ia) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < dim; ++j) r[a * dim + j] = sign * q(static_cast<Eigen::Index>(j), ia);
  }
}

// ---------------------------------------------------------------------------
// ReFT training

namespace {

struct HeadState {
  std::vector<double> r, w, b;
  std::vector<double> mr, vr, mw, vw, mb, vb;
};

void sync(const HeadState& s, LowRankEdit& e) {
  for (std::size_t i = 0; i < s.r.size(); ++i) e.r[i] = static_cast<float>(s.r[i]);
  for (std::size_t i = 0; i < s.w.size(); ++i) e.w[i] = static_cast<float>(s.w[i]);
  for (std::size_t i = 0; i < s.b.size(); ++i) e.b[i] = static_cast<float>(s.b[i]);
}

InterventionSpec edit_spec(const ReftModule& m, std::size_t prompt_len, bool normalized, double scale) {
  InterventionSpec spec;
  spec.site = m.site;
  for (std::size_t i = 0; i < m.heads.size(); ++i) {
    for (std::size_t t = 0; t < prompt_len; ++t) {
      EditApplication a;
      a.head = m.heads[i];
      a.position = t;
      a.edit = &m.edits[i];
      a.slot = i;
      a.normalized = normalized;
      a.scale = static_cast<float>(scale);
      spec.edits.push_back(a);
    }
  }
  return spec;
}

std::vector<int> teacher_input(const Example& ex) {
  std::vector<int> seq(ex.prompt.begin(), ex.prompt.end());
  seq.insert(seq.end(), ex.response.begin(), ex.response.end() - 1);
  return seq;
}

double total_nll(const ModelParams& params, const Example& ex, const InterventionSpec& spec) {
  return -logprob_response(params, ex.prompt, ex.response, spec);
}

double mean_nll(const ModelParams& params, std::span<const Example> examples, const ReftModule* m) {
  double loss = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    const InterventionSpec spec = m ? edit_spec(*m, ex.prompt.size(), false, 1.0) : InterventionSpec{};
    loss += total_nll(params, ex, spec);
    tokens += ex.response.size();
  }
  return loss / static_cast<double>(tokens);
}

void adam_update(std::vector<double>& x, std::vector<double>& m, std::vector<double>& v, const std::vector<double>& g,
                 const ReftHyperparams& hp, double bc1, double bc2) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    x[i] -= hp.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
  }
}

}  // namespace

ReftReport train_reft(const ModelParams& params, std::span<const Example> examples, const std::vector<HeadId>& heads,
                      const ReftHyperparams& hp) {
  const ModelConfig& cfg = params.config();
  const std::size_t dim = site_dim(cfg, hp.site);
  if (hp.rank == 0 || hp.rank > dim) throw InputError("train_reft: rank must be in [1, d]");
  if (examples.empty()) throw InputError("train_reft: no training examples");
  if (heads.empty()) throw InputError("train_reft: empty head selection");
  if (hp.batch_size == 0) throw InputError("train_reft: batch size must be positive");
  for (const auto& ex : examples) {
    if (ex.response.empty()) throw InputError("train_reft: empty response");
  }

  auto module = std::make_shared<ReftModule>();
  module->rank = hp.rank;
  module->dim = dim;
  module->site = hp.site;
  module->heads = heads;

  std::mt19937_64 rng(derive_seed(hp.seed, "reft-init"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<HeadState> state(heads.size());
  for (auto& s : state) {
    s.r.resize(hp.rank * dim);
    for (auto& x : s.r) x = normal(rng);
    orthonormalize_rows(s.r, hp.rank, dim);
    s.w.assign(hp.rank * dim, 0.0);
    s.b.assign(hp.rank, 0.0);
    s.mr.assign(s.r.size(), 0.0);
    s.vr = s.mr;
    s.mw.assign(s.w.size(), 0.0);
    s.vw = s.mw;
    s.mb.assign(s.b.size(), 0.0);
    s.vb = s.mb;
    LowRankEdit e;
    e.rank = hp.rank;
    e.dim = dim;
    e.r.resize(s.r.size());
    e.w.resize(s.w.size());
    e.b.resize(s.b.size());
    sync(s, e);
    module->edits.push_back(std::move(e));
  }

  ReftReport report;
  report.frozen_nll = mean_nll(params, examples, nullptr);
  report.loss_curve.push_back(mean_nll(params, examples, module.get()));
  if (!std::isfinite(report.loss_curve.back())) throw TrainingError("train_reft: initial loss is not finite");

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(derive_seed(hp.seed, "reft-order"));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < end; ++i) batch_tokens += examples[order[i]].response.size();
      const float weight = 1.0f / static_cast<float>(batch_tokens);

      std::vector<LowRankEditGrad> grads(heads.size());
      for (auto& g : grads) {
        g.r.assign(hp.rank * dim, 0.0);
        g.w.assign(hp.rank * dim, 0.0);
        g.b.assign(hp.rank, 0.0);
      }
      for (std::size_t i = start; i < end; ++i) {
        const Example& ex = examples[order[i]];
        const InterventionSpec spec = edit_spec(*module, ex.prompt.size(), false, 1.0);
        RunOptions ro;
        ro.record_tape = true;
        ro.keep_cache = false;
        const Trace trace = forward_with_cache(params, teacher_input(ex), spec, ro);
        Tensor2D dlogits(trace.tokens.size(), cfg.vocab_size);
        const std::size_t P = ex.prompt.size();
        for (std::size_t j = 0; j < ex.response.size(); ++j) {
          const auto g = softmax_cross_entropy_backward(trace.logits.row(P - 1 + j),
                                                        static_cast<std::size_t>(ex.response[j]));
          auto row = dlogits.row(P - 1 + j);
          for (std::size_t c = 0; c < g.size(); ++c) row[c] = weight * g[c];
        }
        BackwardOptions bo;
        bo.param_grads = false;
        const Gradients gr = backward(params, trace, dlogits, bo);
        for (std::size_t h = 0; h < heads.size() && h < gr.edits.size(); ++h) {
          if (gr.edits[h].r.empty()) continue;
          for (std::size_t q = 0; q < grads[h].r.size(); ++q) grads[h].r[q] += gr.edits[h].r[q];
          for (std::size_t q = 0; q < grads[h].w.size(); ++q) grads[h].w[q] += gr.edits[h].w[q];
          for (std::size_t q = 0; q < grads[h].b.size(); ++q) grads[h].b[q] += gr.edits[h].b[q];
        }
      }

      ++step;
      const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
      double worst = 0.0;
      for (std::size_t h = 0; h < heads.size(); ++h) {
        HeadState& s = state[h];
        adam_update(s.r, s.mr, s.vr, grads[h].r, hp, bc1, bc2);
        adam_update(s.w, s.mw, s.vw, grads[h].w, hp, bc1, bc2);
        adam_update(s.b, s.mb, s.vb, grads[h].b, hp, bc1, bc2);
        orthonormalize_rows(s.r, hp.rank, dim);
        sync(s, module->edits[h]);
        worst = std::max(worst, orthonormality_error(module->edits[h].r, hp.rank, dim));
      }
      report.orthonormality_error.push_back(worst);
    }
    const double loss = mean_nll(params, examples, module.get());
    if (!std::isfinite(loss)) {
      throw TrainingError("train_reft: loss became non-finite at epoch " + std::to_string(epoch + 1));
    }
    report.loss_curve.push_back(loss);
    spdlog::debug("reft epoch {} loss {:.5f}", epoch + 1, loss);
  }
  report.module = std::move(module);
  return report;
}

ReftReport train_reft(const ModelParams& params, const TaskDataset& ds, const std::vector<HeadId>& heads,
                      const ReftHyperparams& hp) {
  std::vector<Example> examples;
  examples.reserve(ds.pairs.size());
  for (const auto& p : ds.pairs) examples.push_back({p.p_orig, p.r_contrast});
  return train_reft(params, examples, heads, hp);
}

// ---------------------------------------------------------------------------
// plans

std::span<const float> SteeringPlan::vector(std::size_t head_slot, std::size_t position) const {
  if (positions == 0) throw UsageError("steering plan has no vectors");
  return vectors.at(head_slot * positions + std::min(position, positions - 1));
}

namespace {

// Per-position mean of site activations over a family of prompts.
struct PositionMeans {
  std::size_t positions = 0;
  std::vector<std::vector<double>> sums;  // [head_slot * positions + t][dim]
  std::vector<std::size_t> counts;        // [t]
};

PositionMeans position_means(const ModelParams& params, const std::vector<const Tokens*>& prompts,
                             const std::vector<HeadId>& heads, const PlanOptions& options, std::size_t positions) {
  const std::size_t dim = site_dim(params.config(), options.site);
  std::vector<ActivationCache> caches(prompts.size());
  parallel_for(prompts.size(), options.jobs, [&](std::size_t i) {
    InterventionSpec none;
    none.site = options.site;
    caches[i] = forward_with_cache(params, *prompts[i], none).cache;
  });
  PositionMeans m;
  m.positions = positions;
  m.sums.assign(heads.size() * positions, std::vector<double>(dim, 0.0));
  m.counts.assign(positions, 0);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::size_t len = prompts[i]->size();
    for (std::size_t t = 0; t < len; ++t) {
      ++m.counts[t];
      for (std::size_t h = 0; h < heads.size(); ++h) {
        const auto z = caches[i].at(heads[h], t);
        auto& acc = m.sums[h * positions + t];
        for (std::size_t c = 0; c < dim; ++c) acc[c] += z[c];
      }
    }
  }
  for (std::size_t t = 0; t < positions; ++t) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      for (auto& v : m.sums[h * positions + t]) v /= static_cast<double>(m.counts[t]);
    }
  }
  return m;
}

std::size_t template_length(const TaskDataset& ds, const PlanOptions& options) {
  if (ds.pairs.empty()) throw InputError("steering plan: empty dataset");
  std::size_t lo = ds.pairs.front().p_orig.size();
  std::size_t hi = lo;
  for (const auto& p : ds.pairs) {
    validate_pair(p);
    lo = std::min(lo, p.p_orig.size());
    hi = std::max(hi, p.p_orig.size());
  }
  if (options.strict_template_length && lo != hi) {
    throw InputError("steering plan: prompts have unequal lengths (" + std::to_string(lo) + " to " +
                     std::to_string(hi) + ")");
  }
  return hi;
}

SteeringPlan plan_shell(SteerMethod method, const HeadSelection& heads, double alpha, InterventionSite site) {
  if (!std::isfinite(alpha) || alpha <= 0.0) throw InputError("steering plan: alpha must be positive and finite");
  SteeringPlan plan;
  plan.method = method;
  plan.alpha = alpha;
  plan.k = heads.k;
  plan.heads = heads.heads;
  plan.site = site;
  return plan;
}

}  // namespace

SteeringPlan build_mean_plan(const ModelParams& params, const TaskDataset& ds, const HeadSelection& heads,
                             double alpha, const PlanOptions& options) {
  SteeringPlan plan = plan_shell(SteerMethod::kMean, heads, alpha, options.site);
  plan.positions = template_length(ds, options);
  std::vector<const Tokens*> prompts;
  for (const auto& p : ds.pairs) prompts.push_back(&p.p_contrast);
  const PositionMeans m = position_means(params, prompts, heads.heads, options, plan.positions);
  for (const auto& v : m.sums) plan.vectors.emplace_back(v.begin(), v.end());
  return plan;
}

SteeringPlan build_diff_means_plan(const ModelParams& params, const TaskDataset& ds, const HeadSelection& heads,
                                   double alpha, const PlanOptions& options) {
  SteeringPlan plan = plan_shell(SteerMethod::kDiffMeans, heads, alpha, options.site);
  plan.positions = template_length(ds, options);
  std::vector<const Tokens*> contrast, orig;
  for (const auto& p : ds.pairs) {
    contrast.push_back(&p.p_contrast);
    orig.push_back(&p.p_orig);
  }
  const PositionMeans mc = position_means(params, contrast, heads.heads, options, plan.positions);
  const PositionMeans mo = position_means(params, orig, heads.heads, options, plan.positions);
  for (std::size_t i = 0; i < mc.sums.size(); ++i) {
    std::vector<float> v(mc.sums[i].size());
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = static_cast<float>(mc.sums[i][c] - mo.sums[i][c]);
    plan.vectors.push_back(std::move(v));
  }
  return plan;
}

SteeringPlan build_reft_plan(std::shared_ptr<const ReftModule> module, const HeadSelection& heads, double alpha,
                             bool normalized, ReftExtraction extraction) {
  if (!module) throw InputError("reft plan: no module");
  if (module->heads != heads.heads) throw InputError("reft plan: module was trained on a different head set");
  SteeringPlan plan = plan_shell(SteerMethod::kReft, heads, alpha, module->site);
  plan.normalized = normalized;
  plan.extraction = extraction;
  if (extraction == ReftExtraction::kDownProjection) {
    // Mean over rows i of (R^T W)[i, :] = sum_a R[a, i] W[a, :].
    plan.positions = 1;
    for (const auto& e : module->edits) {
      std::vector<double> acc(e.dim, 0.0);
      for (std::size_t a = 0; a < e.rank; ++a) {
        double rsum = 0.0;
        for (std::size_t i = 0; i < e.dim; ++i) rsum += e.r[a * e.dim + i];
        for (std::size_t j = 0; j < e.dim; ++j) acc[j] += rsum * e.w[a * e.dim + j];
      }
      std::vector<float> v(e.dim);
      for (std::size_t j = 0; j < e.dim; ++j) v[j] = static_cast<float>(acc[j] / static_cast<double>(e.dim));
      plan.vectors.push_back(std::move(v));
    }
  }
  plan.reft = std::move(module);
  return plan;
}

SteeringPlan with_alpha(SteeringPlan plan, double alpha) {
  if (!std::isfinite(alpha) || alpha <= 0.0) throw InputError("steering plan: alpha must be positive and finite");
  plan.alpha = alpha;
  return plan;
}

SteeringPlan normalize_plan(SteeringPlan plan) {
  if (plan.method != SteerMethod::kReft) {
    spdlog::warn("normalizing a {} plan; normalization is meant for ReFT edits", to_string(plan.method));
  }
  plan.normalized = true;
  return plan;
}

std::vector<double> normalize_edit(std::span<const double> v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) return {};
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
  return out;
}

InterventionSpec compile_plan(const SteeringPlan& plan, std::size_t prompt_len) {
  InterventionSpec spec;
  spec.site = plan.site;
  const bool edit_mode = plan.method == SteerMethod::kReft && plan.extraction == ReftExtraction::kEdit;
  if (edit_mode) {
    if (!plan.reft) throw UsageError("reft plan without a module");
    for (std::size_t h = 0; h < plan.heads.size(); ++h) {
      for (std::size_t t = 0; t < prompt_len; ++t) {
        EditApplication a;
        a.head = plan.heads[h];
        a.position = t;
        a.edit = &plan.reft->edits.at(h);
        a.slot = h;
        a.normalized = plan.normalized;
        a.scale = static_cast<float>(plan.alpha);
        spec.edits.push_back(a);
      }
    }
    return spec;
  }
  const PatchMode mode = plan.method == SteerMethod::kMean ? PatchMode::kReplace : PatchMode::kAdd;
  for (std::size_t h = 0; h < plan.heads.size(); ++h) {
    for (std::size_t t = 0; t < prompt_len; ++t) {
      const auto v = plan.vector(h, t);
      Patch p;
      p.head = plan.heads[h];
      p.position = t;
      p.mode = mode;
      p.scale = static_cast<float>(plan.alpha);
      p.vector.assign(v.begin(), v.end());
      if (plan.normalized) {
        const std::vector<double> d(v.begin(), v.end());
        const auto unit = normalize_edit(d);
        if (unit.empty()) {
          spdlog::warn("zero-norm steering vector at {} position {}; skipped", to_string(p.head), t);
          continue;
        }
        for (std::size_t c = 0; c < unit.size(); ++c) p.vector[c] = static_cast<float>(unit[c]);
      }
      spec.patches.push_back(std::move(p));
    }
  }
  return spec;
}

namespace {

std::size_t default_budget(const ModelParams& params, std::size_t prompt_len, std::optional<std::size_t> max_new) {
  const std::size_t room = params.config().max_seq_len > prompt_len ? params.config().max_seq_len - prompt_len : 0;
  if (room == 0) throw InputError("prompt fills the whole context");
  return max_new ? std::min(*max_new, room) : room;
}

}  // namespace

std::vector<int> apply_plan(const ModelParams& params, std::span<const int> prompt, const SteeringPlan& plan,
                            std::optional<std::size_t> max_new) {
  return greedy_generate(params, prompt, compile_plan(plan, prompt.size()),
                         default_budget(params, prompt.size(), max_new), Vocab::kEos);
}

std::vector<int> generate_unsteered(const ModelParams& params, std::span<const int> prompt,
                                    std::optional<std::size_t> max_new) {
  return greedy_generate(params, prompt, {}, default_budget(params, prompt.size(), max_new), Vocab::kEos);
}

// ---------------------------------------------------------------------------
// plan files

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

}  // namespace

std::string base64_encode_floats(std::span<const float> values) {
  std::vector<unsigned char> bytes;
  bytes.reserve(values.size() * 4);
  for (float f : values) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xffu));
  }
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t n = (std::uint32_t{bytes[i]} << 16) |
                            (i + 1 < bytes.size() ? std::uint32_t{bytes[i + 1]} << 8 : 0u) |
                            (i + 2 < bytes.size() ? std::uint32_t{bytes[i + 2]} : 0u);
    out += kB64[(n >> 18) & 63];
    out += kB64[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(n >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kB64[n & 63] : '=';
  }
  return out;
}

std::vector<float> base64_decode_floats(const std::string& text) {
  if (text.size() % 4 != 0) throw ParseError("base64 block length is not a multiple of 4", 0);
  std::vector<unsigned char> bytes;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        v[j] = 0;
        ++pad;
      } else {
        v[j] = b64_value(c);
        if (v[j] < 0 || pad > 0) throw ParseError("invalid base64 character", 0);
      }
    }
    const std::uint32_t n = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                            (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
    bytes.push_back(static_cast<unsigned char>((n >> 16) & 0xffu));
    if (pad < 2) bytes.push_back(static_cast<unsigned char>((n >> 8) & 0xffu));
    if (pad < 1) bytes.push_back(static_cast<unsigned char>(n & 0xffu));
  }
  if (bytes.size() % 4 != 0) throw ParseError("base64 block is not a whole number of float32 values", 0);
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t{bytes[i * 4 + b]} << (8 * b);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

namespace {

std::string site_name(InterventionSite s) { return s == InterventionSite::kHeadOutput ? "head_output" : "head_projection"; }

InterventionSite parse_site(const std::string& s) {
  if (s == "head_output") return InterventionSite::kHeadOutput;
  if (s == "head_projection") return InterventionSite::kHeadProjection;
  throw ParseError("unknown intervention site '" + s + "'", 0);
}

std::vector<float> concat(const std::vector<std::vector<float>>& parts) {
  std::vector<float> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

HeadId parse_head(const std::string& s) {
  unsigned layer = 0, head = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "L%uH%u%c", &layer, &head, &tail) != 2) throw ParseError("bad head id '" + s + "'", 0);
  return {layer, head};
}

}  // namespace

std::string plan_to_json(const SteeringPlan& plan) {
  nlohmann::ordered_json j;
  j["format"] = "gcm-plan/1";
  j["method"] = to_string(plan.method);
  j["alpha"] = plan.alpha;
  j["k"] = plan.k;
  std::vector<std::string> heads;
  for (const auto& h : plan.heads) heads.push_back(to_string(h));
  j["heads"] = heads;
  j["normalized"] = plan.normalized;
  j["site"] = site_name(plan.site);
  j["positions"] = plan.positions;
  j["rank"] = plan.reft ? plan.reft->rank : 0;
  j["extraction"] = to_string(plan.extraction);
  nlohmann::ordered_json blocks;
  if (!plan.vectors.empty()) {
    blocks["vectors"] = base64_encode_floats(concat(plan.vectors));
    blocks["vector_dim"] = plan.vectors.front().size();
  }
  if (plan.reft) {
    std::vector<std::vector<float>> r, w, b;
    for (const auto& e : plan.reft->edits) {
      r.push_back(e.r);
      w.push_back(e.w);
      b.push_back(e.b);
    }
    blocks["reft_dim"] = plan.reft->dim;
    blocks["reft_r"] = base64_encode_floats(concat(r));
    blocks["reft_w"] = base64_encode_floats(concat(w));
    blocks["reft_b"] = base64_encode_floats(concat(b));
  }
  j["blocks"] = blocks;
  return j.dump(2) + "\n";
}

SteeringPlan plan_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("plan: malformed JSON: ") + e.what(), 0);
  }
  SteeringPlan plan;
  try {
    if (j.at("format").get<std::string>() != "gcm-plan/1") throw ParseError("plan: unknown format", 0);
    plan.method = parse_steer_method(j.at("method").get<std::string>());
    plan.alpha = j.at("alpha").get<double>();
    plan.k = j.at("k").get<double>();
    for (const auto& h : j.at("heads")) plan.heads.push_back(parse_head(h.get<std::string>()));
    plan.normalized = j.at("normalized").get<bool>();
    plan.site = parse_site(j.at("site").get<std::string>());
    plan.positions = j.at("positions").get<std::size_t>();
    plan.extraction = parse_reft_extraction(j.at("extraction").get<std::string>());
    const std::size_t rank = j.at("rank").get<std::size_t>();
    const auto& blocks = j.at("blocks");
    if (blocks.contains("vectors")) {
      const std::size_t dim = blocks.at("vector_dim").get<std::size_t>();
      const auto flat = base64_decode_floats(blocks.at("vectors").get<std::string>());
      if (dim == 0 || flat.size() != dim * plan.heads.size() * plan.positions) {
        throw ValidationError("plan: vector block does not match heads x positions x dim");
      }
      for (std::size_t i = 0; i < flat.size(); i += dim) plan.vectors.emplace_back(flat.begin() + i, flat.begin() + i + dim);
    }
    if (plan.method == SteerMethod::kReft) {
      const std::size_t dim = blocks.at("reft_dim").get<std::size_t>();
      const auto r = base64_decode_floats(blocks.at("reft_r").get<std::string>());
      const auto w = base64_decode_floats(blocks.at("reft_w").get<std::string>());
      const auto b = base64_decode_floats(blocks.at("reft_b").get<std::string>());
      const std::size_t n = plan.heads.size();
      if (rank == 0 || r.size() != n * rank * dim || w.size() != r.size() || b.size() != n * rank) {
        throw ValidationError("plan: ReFT blocks do not match heads x rank x dim");
      }
      auto m = std::make_shared<ReftModule>();
      m->rank = rank;
      m->dim = dim;
      m->site = plan.site;
      m->heads = plan.heads;
      for (std::size_t h = 0; h < n; ++h) {
        LowRankEdit e;
        e.rank = rank;
        e.dim = dim;
        e.r.assign(r.begin() + h * rank * dim, r.begin() + (h + 1) * rank * dim);
        e.w.assign(w.begin() + h * rank * dim, w.begin() + (h + 1) * rank * dim);
        e.b.assign(b.begin() + h * rank, b.begin() + (h + 1) * rank);
        m->edits.push_back(std::move(e));
      }
      plan.reft = std::move(m);
    } else if (plan.vectors.empty() && !plan.heads.empty()) {
      throw ValidationError("plan: missing vector block");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("plan: ") + e.what(), 0);
  }
  if (!std::isfinite(plan.alpha) || plan.alpha <= 0.0) throw ValidationError("plan: alpha must be positive");
  return plan;
}

void save_plan(const SteeringPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << plan_to_json(plan);
  if (!out) throw Error("write failed: " + path.string());
}

SteeringPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return plan_from_json(buf.str());
}

}  // namespace gcm
