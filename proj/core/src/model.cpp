#include "gcm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "gcm/errors.hpp"
#include "gcm/parallel.hpp"

namespace gcm {

// ---------------------------------------------------------------------------
// config / ids

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_head == 0 || d_mlp == 0 || vocab_size == 0 ||
      max_seq_len == 0) {
    throw InputError("model config: all dimensions must be positive");
  }
  if (d_model != n_heads * d_head) {
    throw InputError("model config: d_model must equal n_heads * d_head");
  }
}

std::string to_string(HeadId id) { return "L" + std::to_string(id.layer) + "H" + std::to_string(id.head); }

std::size_t head_index(const ModelConfig& cfg, HeadId id) { return std::size_t{id.layer} * cfg.n_heads + id.head; }

HeadId head_from_index(const ModelConfig& cfg, std::size_t index) {
  return {static_cast<std::uint32_t>(index / cfg.n_heads), static_cast<std::uint32_t>(index % cfg.n_heads)};
}

std::vector<HeadId> all_heads(const ModelConfig& cfg) {
  std::vector<HeadId> out;
  out.reserve(cfg.total_heads());
  for (std::size_t i = 0; i < cfg.total_heads(); ++i) out.push_back(head_from_index(cfg, i));
  return out;
}

std::size_t site_dim(const ModelConfig& cfg, InterventionSite site) {
  return site == InterventionSite::kHeadOutput ? cfg.d_head : cfg.d_model;
}

// ---------------------------------------------------------------------------
// parameters

ParamLayout ParamLayout::for_config(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout lay;
  auto add = [&lay](std::string name, std::size_t rows, std::size_t cols) {
    lay.blocks.push_back({std::move(name), lay.total, rows, cols});
    lay.total += rows * cols;
    return lay.blocks.size() - 1;
  };
  const std::size_t d = cfg.d_model;
  lay.token_embedding = add("token_embedding", cfg.vocab_size, d);
  lay.position_embedding = add("position_embedding", cfg.max_seq_len, d);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerBlocks b{};
    b.ln1_gain = add(p + "ln1_gain", 1, d);
    b.ln1_bias = add(p + "ln1_bias", 1, d);
    b.wq = add(p + "wq", d, d);
    b.bq = add(p + "bq", 1, d);
    b.wk = add(p + "wk", d, d);
    b.bk = add(p + "bk", 1, d);
    b.wv = add(p + "wv", d, d);
    b.bv = add(p + "bv", 1, d);
    b.wo = add(p + "wo", d, d);
    b.bo = add(p + "bo", 1, d);
    b.ln2_gain = add(p + "ln2_gain", 1, d);
    b.ln2_bias = add(p + "ln2_bias", 1, d);
    b.mlp_in = add(p + "mlp_in", d, cfg.d_mlp);
    b.mlp_in_bias = add(p + "mlp_in_bias", 1, cfg.d_mlp);
    b.mlp_out = add(p + "mlp_out", cfg.d_mlp, d);
    b.mlp_out_bias = add(p + "mlp_out_bias", 1, d);
    lay.layers.push_back(b);
  }
  lay.final_gain = add("final_gain", 1, d);
  lay.final_bias = add("final_bias", 1, d);
  lay.unembedding = add("unembedding", d, cfg.vocab_size);
  return lay;
}

ModelParams::ModelParams(const ModelConfig& cfg)
    : cfg_(cfg), layout_(std::make_shared<const ParamLayout>(ParamLayout::for_config(cfg))), data_(layout_->total) {}

ModelParams::ModelParams(const ModelConfig& cfg, std::vector<float> flat)
    : cfg_(cfg), layout_(std::make_shared<const ParamLayout>(ParamLayout::for_config(cfg))), data_(std::move(flat)) {
  if (data_.size() != layout_->total) throw ShapeError("model params: flat buffer has wrong length");
}

ModelParams ModelParams::random_init(const ModelConfig& cfg, std::uint64_t seed, float stddev) {
  ModelParams p(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, stddev);
  const auto& lay = p.layout();
  std::vector<bool> is_gain(lay.blocks.size(), false);
  std::vector<bool> is_bias(lay.blocks.size(), false);
  for (const auto& b : lay.layers) {
    is_gain[b.ln1_gain] = is_gain[b.ln2_gain] = true;
    for (auto id : {b.ln1_bias, b.bq, b.bk, b.bv, b.bo, b.ln2_bias, b.mlp_in_bias, b.mlp_out_bias}) is_bias[id] = true;
  }
  is_gain[lay.final_gain] = true;
  is_bias[lay.final_bias] = true;
  for (std::size_t id = 0; id < lay.blocks.size(); ++id) {
    auto blk = p.block(id);
    if (is_gain[id]) {
      std::fill(blk.begin(), blk.end(), 1.0f);
    } else if (!is_bias[id]) {
      for (auto& v : blk) v = normal(rng);
    }
  }
  return p;
}

std::span<float> ModelParams::block(std::size_t id) {
  const auto& b = layout_->blocks.at(id);
  return std::span<float>(data_).subspan(b.offset, b.size());
}

std::span<const float> ModelParams::block(std::size_t id) const {
  const auto& b = layout_->blocks.at(id);
  return std::span<const float>(data_).subspan(b.offset, b.size());
}

MatrixView ModelParams::matrix(std::size_t id) const {
  const auto& b = layout_->blocks.at(id);
  return MatrixView(block(id), b.rows, b.cols);
}

bool ModelParams::all_finite() const { return gcm::all_finite(data_); }

void ModelParams::set_zero() { std::fill(data_.begin(), data_.end(), 0.0f); }

// ---------------------------------------------------------------------------
// interventions

std::vector<double> LowRankEdit::edit_vector(std::span<const float> s) const {
  std::vector<double> u(rank);
  for (std::size_t a = 0; a < rank; ++a) {
    double acc = b[a];
    for (std::size_t j = 0; j < dim; ++j) acc += (static_cast<double>(w[a * dim + j]) - r[a * dim + j]) * s[j];
    u[a] = acc;
  }
  std::vector<double> e(dim, 0.0);
  for (std::size_t a = 0; a < rank; ++a) {
    for (std::size_t j = 0; j < dim; ++j) e[j] += static_cast<double>(r[a * dim + j]) * u[a];
  }
  return e;
}

std::size_t InterventionSpec::position_extent() const {
  std::size_t extent = 0;
  for (const auto& p : patches) extent = std::max(extent, p.position + 1);
  for (const auto& e : edits) extent = std::max(extent, e.position + 1);
  return extent;
}

bool ActivationCache::all_finite() const {
  return std::all_of(layers.begin(), layers.end(), [](const Tensor3D& t) { return t.all_finite(); });
}

namespace {

// Per (layer, head, position) pointers into a spec.
struct ResolvedSpec {
  std::size_t heads = 0;
  std::size_t positions = 0;
  std::vector<std::vector<const Patch*>> patches;
  std::vector<std::vector<const EditApplication*>> edits;
  std::vector<bool> layer_touched;

  std::size_t slot(HeadId id, std::size_t pos) const { return (id.layer * heads + id.head) * positions + pos; }
};

ResolvedSpec resolve(const ModelConfig& cfg, const InterventionSpec& spec, std::size_t seq_len) {
  ResolvedSpec r;
  r.heads = cfg.n_heads;
  r.positions = seq_len;
  r.patches.resize(cfg.total_heads() * seq_len);
  r.edits.resize(cfg.total_heads() * seq_len);
  r.layer_touched.assign(cfg.n_layers, false);
  const std::size_t dim = site_dim(cfg, spec.site);
  auto check_head = [&](HeadId h, std::size_t pos) {
    if (h.layer >= cfg.n_layers || h.head >= cfg.n_heads) throw InputError("intervention: head out of range");
    if (pos >= seq_len) throw InputError("intervention: position beyond sequence");
  };
  for (const auto& p : spec.patches) {
    check_head(p.head, p.position);
    if (p.vector.size() != dim) throw ShapeError("intervention: patch vector has wrong length");
    r.patches[r.slot(p.head, p.position)].push_back(&p);
    r.layer_touched[p.head.layer] = true;
  }
  for (const auto& e : spec.edits) {
    check_head(e.head, e.position);
    if (!e.edit || e.edit->dim != dim || e.edit->r.size() != e.edit->rank * dim ||
        e.edit->w.size() != e.edit->rank * dim || e.edit->b.size() != e.edit->rank) {
      throw ShapeError("intervention: low-rank edit has wrong shape");
    }
    r.edits[r.slot(e.head, e.position)].push_back(&e);
    r.layer_touched[e.head.layer] = true;
  }
  return r;
}

void apply_patch(const Patch& p, std::span<float> s) {
  if (p.mode == PatchMode::kReplace) {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = p.scale * p.vector[i];
  } else {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = s[i] + p.scale * p.vector[i];
  }
}

void apply_edit(const EditApplication& a, std::span<float> s) {
  const std::vector<double> e = a.edit->edit_vector(s);
  double factor = a.scale;
  if (a.normalized) {
    double norm = 0.0;
    for (double v : e) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) return;  // nothing to normalize; leave the site untouched
    factor /= norm;
  }
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(s[i] + factor * e[i]);
}

void apply_site_ops(const ResolvedSpec& r, HeadId id, std::size_t pos, std::span<float> s) {
  const std::size_t k = r.slot(id, pos);
  for (const Patch* p : r.patches[k]) apply_patch(*p, s);
  for (const EditApplication* e : r.edits[k]) apply_edit(*e, s);
}

bool site_has_ops(const ResolvedSpec& r, HeadId id, std::size_t pos) {
  const std::size_t k = r.slot(id, pos);
  return !r.patches[k].empty() || !r.edits[k].empty();
}

}  // namespace

// ---------------------------------------------------------------------------
// forward

struct LayerTape {
  Tensor2D x_in;
  Tensor2D h1;
  Tensor2D q, k, v;
  std::vector<Tensor2D> probs;  // per head [T x T], zero above the diagonal
  Tensor3D z;                   // raw head outputs [H][T][d_head]
  Tensor3D site_raw;            // pre-intervention site values (projection site only)
  Tensor3D site_post;           // post-intervention site values
  Tensor2D x_mid;
  Tensor2D h2;
  Tensor2D u;
  Tensor2D g;
};

struct Tape {
  InterventionSpec spec;
  std::vector<LayerTape> layers;
  Tensor2D x_final;
  Tensor2D hf;
};

namespace {

void validate_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) throw InputError("forward: sequence longer than max_seq_len");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::uint32_t>(t) >= cfg.vocab_size) throw InputError("forward: token id out of range");
  }
}

MatrixView head_rows(const MatrixView& wo, std::size_t head, std::size_t d_head) {
  return MatrixView(wo.data.subspan(head * d_head * wo.cols, d_head * wo.cols), d_head, wo.cols);
}

Trace run_forward(const ModelParams& params, std::span<const int> tokens, const InterventionSpec& spec,
                  const RunOptions& opts) {
  const ModelConfig& cfg = params.config();
  validate_tokens(cfg, tokens);
  const std::size_t T = tokens.size();
  const std::size_t D = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.d_head;
  const std::size_t sd = site_dim(cfg, spec.site);
  const bool projection = spec.site == InterventionSite::kHeadProjection;
  const ResolvedSpec resolved = resolve(cfg, spec, T);
  const auto& lay = params.layout();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::shared_ptr<Tape> tape;
  if (opts.record_tape) {
    tape = std::make_shared<Tape>();
    tape->spec = spec;
    tape->layers.resize(cfg.n_layers);
  }

  Trace trace;
  trace.tokens.assign(tokens.begin(), tokens.end());
  trace.cache.site = spec.site;

  Tensor2D x(T, D);
  {
    const MatrixView tok = params.matrix(lay.token_embedding);
    const MatrixView pos = params.matrix(lay.position_embedding);
    for (std::size_t t = 0; t < T; ++t) {
      auto xr = x.row(t);
      const auto er = tok.row(static_cast<std::size_t>(tokens[t]));
      const auto pr = pos.row(t);
      for (std::size_t j = 0; j < D; ++j) xr[j] = er[j] + pr[j];
    }
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerBlocks& b = lay.layers[l];
    Tensor2D h1 = layernorm_rows(x, params.block(b.ln1_gain), params.block(b.ln1_bias));
    Tensor2D q = matmul(h1, params.matrix(b.wq));
    add_row_bias(q, params.block(b.bq));
    Tensor2D k = matmul(h1, params.matrix(b.wk));
    add_row_bias(k, params.block(b.bk));
    Tensor2D v = matmul(h1, params.matrix(b.wv));
    add_row_bias(v, params.block(b.bv));

    std::vector<Tensor2D> probs;
    if (tape) probs.reserve(H);
    Tensor3D z(H, T, dh);
    std::vector<double> scores(T);
    for (std::size_t h = 0; h < H; ++h) {
      Tensor2D p(T, T);
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < T; ++i) {
        const float* qi = q.row(i).data() + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const float* kj = k.row(j).data() + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(qi[c]) * kj[c];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          total += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p(i, j) = static_cast<float>(scores[j] / total);
        auto zi = z.at(h, i);
        std::vector<double> acc(dh, 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = p(i, j);
          const float* vj = v.row(j).data() + off;
          for (std::size_t c = 0; c < dh; ++c) acc[c] += pij * vj[c];
        }
        for (std::size_t c = 0; c < dh; ++c) zi[c] = static_cast<float>(acc[c]);
      }
      if (tape) probs.push_back(std::move(p));
    }

    // Site values, then interventions.
    const MatrixView wo = params.matrix(b.wo);
    Tensor3D site(H, T, sd);
    if (projection) {
      for (std::size_t h = 0; h < H; ++h) {
        const Tensor2D proj = matmul(MatrixView(z.values().subspan(h * T * dh, T * dh), T, dh), head_rows(wo, h, dh));
        std::copy(proj.values().begin(), proj.values().end(), site.values().begin() + h * T * sd);
      }
    } else {
      site = z;
    }
    Tensor3D site_raw;
    if (tape && projection) site_raw = site;
    if (resolved.layer_touched[l]) {
      for (std::size_t h = 0; h < H; ++h) {
        const HeadId id{static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h)};
        for (std::size_t t = 0; t < T; ++t) {
          if (site_has_ops(resolved, id, t)) apply_site_ops(resolved, id, t, site.at(h, t));
        }
      }
    }

    Tensor2D attn_out;
    if (projection) {
      attn_out = Tensor2D(T, D);
      for (std::size_t t = 0; t < T; ++t) {
        auto o = attn_out.row(t);
        for (std::size_t j = 0; j < D; ++j) {
          double acc = 0.0;
          for (std::size_t h = 0; h < H; ++h) acc += site(h, t, j);
          o[j] = static_cast<float>(acc);
        }
      }
    } else {
      Tensor2D concat(T, D);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) std::copy_n(site.at(h, t).data(), dh, concat.row(t).data() + h * dh);
      attn_out = matmul(concat, wo);
    }
    add_row_bias(attn_out, params.block(b.bo));

    Tensor2D x_mid(T, D);
    for (std::size_t i = 0; i < x.size(); ++i) x_mid.values()[i] = x.values()[i] + attn_out.values()[i];

    Tensor2D h2 = layernorm_rows(x_mid, params.block(b.ln2_gain), params.block(b.ln2_bias));
    Tensor2D u = matmul(h2, params.matrix(b.mlp_in));
    add_row_bias(u, params.block(b.mlp_in_bias));
    Tensor2D g = gelu(u);
    Tensor2D m = matmul(g, params.matrix(b.mlp_out));
    add_row_bias(m, params.block(b.mlp_out_bias));

    Tensor2D x_out(T, D);
    for (std::size_t i = 0; i < x.size(); ++i) x_out.values()[i] = x_mid.values()[i] + m.values()[i];

    if (opts.keep_cache || tape) trace.cache.layers.push_back(site);
    if (tape) {
      LayerTape& lt = tape->layers[l];
      lt.x_in = std::move(x);
      lt.h1 = std::move(h1);
      lt.q = std::move(q);
      lt.k = std::move(k);
      lt.v = std::move(v);
      lt.probs = std::move(probs);
      lt.z = std::move(z);
      lt.site_raw = std::move(site_raw);
      lt.site_post = std::move(site);
      lt.x_mid = std::move(x_mid);
      lt.h2 = std::move(h2);
      lt.u = std::move(u);
      lt.g = std::move(g);
    }
    x = std::move(x_out);
  }

  Tensor2D hf = layernorm_rows(x, params.block(lay.final_gain), params.block(lay.final_bias));
  trace.logits = matmul(hf, params.matrix(lay.unembedding));
  if (tape) {
    tape->x_final = std::move(x);
    tape->hf = std::move(hf);
    trace.tape = std::move(tape);
  }
  if (!opts.keep_cache) trace.cache.layers.clear();
  return trace;
}

}  // namespace

Trace forward_with_cache(const ModelParams& params, std::span<const int> tokens, const InterventionSpec& interventions,
                         const RunOptions& options) {
  Trace t = run_forward(params, tokens, interventions, options);
  if (options.counter) ++options.counter->forward;
  return t;
}

std::vector<Trace> forward_batch(const ModelParams& params, std::span<const std::vector<int>> sequences,
                                 const InterventionSpec& interventions, const RunOptions& options) {
  std::vector<Trace> out;
  out.reserve(sequences.size());
  for (const auto& s : sequences) out.push_back(run_forward(params, s, interventions, options));
  if (options.counter) ++options.counter->forward;
  return out;
}

// ---------------------------------------------------------------------------
// backward

namespace {

// d(site) -> d(site before ops), accumulating low-rank edit gradients.
void site_ops_backward(const ResolvedSpec& r, HeadId id, std::size_t pos, std::span<const float> raw,
                       std::span<float> ds, std::vector<LowRankEditGrad>& edit_grads) {
  const std::size_t k = r.slot(id, pos);
  const auto& patches = r.patches[k];
  const auto& edits = r.edits[k];
  const std::size_t n = raw.size();

  // Recompute the inputs of each op.
  std::vector<std::vector<float>> inputs;
  std::vector<float> cur(raw.begin(), raw.end());
  for (const Patch* p : patches) {
    inputs.push_back(cur);
    apply_patch(*p, cur);
  }
  for (const EditApplication* e : edits) {
    inputs.push_back(cur);
    apply_edit(*e, cur);
  }

  for (std::size_t idx = edits.size(); idx-- > 0;) {
    const EditApplication& a = *edits[idx];
    if (a.normalized) throw UsageError("backward through a normalized edit is not supported");
    const LowRankEdit& e = *a.edit;
    const std::vector<float>& s = inputs[patches.size() + idx];
    if (edit_grads.size() <= a.slot) edit_grads.resize(a.slot + 1);
    LowRankEditGrad& g = edit_grads[a.slot];
    if (g.r.empty()) {
      g.r.assign(e.rank * n, 0.0);
      g.w.assign(e.rank * n, 0.0);
      g.b.assign(e.rank, 0.0);
    }
    // s' = s + scale * R^T u,  u = W s + b - R s
    std::vector<double> rds(e.rank, 0.0);
    std::vector<double> u(e.rank, 0.0);
    for (std::size_t q = 0; q < e.rank; ++q) {
      double acc_r = 0.0;
      double acc_u = e.b[q];
      for (std::size_t j = 0; j < n; ++j) {
        acc_r += static_cast<double>(e.r[q * n + j]) * ds[j];
        acc_u += (static_cast<double>(e.w[q * n + j]) - e.r[q * n + j]) * s[j];
      }
      rds[q] = a.scale * acc_r;
      u[q] = acc_u;
    }
    std::vector<double> din(ds.begin(), ds.end());
    for (std::size_t q = 0; q < e.rank; ++q) {
      g.b[q] += rds[q];
      for (std::size_t j = 0; j < n; ++j) {
        g.w[q * n + j] += rds[q] * s[j];
        g.r[q * n + j] += a.scale * u[q] * ds[j] - rds[q] * s[j];
        din[j] += rds[q] * (static_cast<double>(e.w[q * n + j]) - e.r[q * n + j]);
      }
    }
    for (std::size_t j = 0; j < n; ++j) ds[j] = static_cast<float>(din[j]);
  }
  for (std::size_t idx = patches.size(); idx-- > 0;) {
    if (patches[idx]->mode == PatchMode::kReplace) std::fill(ds.begin(), ds.end(), 0.0f);
  }
}

void add_into(std::span<float> dst, std::span<const float> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void backward_into(const ModelParams& params, const Trace& trace, const Tensor2D& dlogits,
                   const BackwardOptions& opts, Gradients& out) {
  if (!trace.tape) throw UsageError("backward: trace has no recorded forward (set RunOptions::record_tape)");
  const Tape& tape = *trace.tape;
  const ModelConfig& cfg = params.config();
  const auto& lay = params.layout();
  const std::size_t T = trace.tokens.size();
  const std::size_t D = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.d_head;
  const std::size_t sd = site_dim(cfg, tape.spec.site);
  const bool projection = tape.spec.site == InterventionSite::kHeadProjection;
  if (dlogits.rows() != T || dlogits.cols() != cfg.vocab_size) throw ShapeError("backward: dlogits shape mismatch");
  const ResolvedSpec resolved = resolve(cfg, tape.spec, T);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ModelParams* grads = nullptr;
  if (opts.param_grads) {
    if (!out.params) out.params.emplace(cfg);
    grads = &*out.params;
  }
  if (opts.site_grads && out.sites.empty()) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) out.sites.emplace_back(H, T, sd);
  }

  // Unembedding and final layernorm.
  if (grads) add_into(grads->block(lay.unembedding), matmul_at(tape.hf, dlogits).values());
  Tensor2D dhf = matmul_bt(dlogits, params.matrix(lay.unembedding));
  std::vector<float> scratch_g(D, 0.0f), scratch_b(D, 0.0f);
  auto gain_sink = [&](std::size_t id) { return grads ? grads->block(id) : std::span<float>(scratch_g); };
  auto bias_sink = [&](std::size_t id) { return grads ? grads->block(id) : std::span<float>(scratch_b); };
  Tensor2D dx = layernorm_rows_backward(tape.x_final, params.block(lay.final_gain), dhf, gain_sink(lay.final_gain),
                                        bias_sink(lay.final_bias));

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const LayerBlocks& b = lay.layers[l];
    const LayerTape& lt = tape.layers[l];

    // MLP: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2
    if (grads) {
      add_into(grads->block(b.mlp_out), matmul_at(lt.g, dx).values());
      accumulate_column_sums(dx, grads->block(b.mlp_out_bias));
    }
    Tensor2D dg = matmul_bt(dx, params.matrix(b.mlp_out));
    Tensor2D du = gelu_backward(lt.u, dg);
    if (grads) {
      add_into(grads->block(b.mlp_in), matmul_at(lt.h2, du).values());
      accumulate_column_sums(du, grads->block(b.mlp_in_bias));
    }
    Tensor2D dh2 = matmul_bt(du, params.matrix(b.mlp_in));
    std::vector<float> sg2(D, 0.0f), sb2(D, 0.0f);
    Tensor2D dx_mid = layernorm_rows_backward(lt.x_mid, params.block(b.ln2_gain), dh2,
                                              grads ? grads->block(b.ln2_gain) : std::span<float>(sg2),
                                              grads ? grads->block(b.ln2_bias) : std::span<float>(sb2));
    add_into(dx_mid.values(), dx.values());

    // Attention output.
    if (grads) accumulate_column_sums(dx_mid, grads->block(b.bo));
    const MatrixView wo = params.matrix(b.wo);
    Tensor3D dsite(H, T, sd);
    if (projection) {
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) std::copy_n(dx_mid.row(t).data(), D, dsite.at(h, t).data());
    } else {
      Tensor2D concat(T, D);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) std::copy_n(lt.site_post.at(h, t).data(), dh, concat.row(t).data() + h * dh);
      if (grads) add_into(grads->block(b.wo), matmul_at(concat, dx_mid).values());
      const Tensor2D dconcat = matmul_bt(dx_mid, wo);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) std::copy_n(dconcat.row(t).data() + h * dh, dh, dsite.at(h, t).data());
    }
    if (opts.site_grads) {
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) add_into(out.sites[l].at(h, t), dsite.at(h, t));
    }

    // Through interventions to raw site values.
    if (resolved.layer_touched[l]) {
      const Tensor3D& raw = projection ? lt.site_raw : lt.z;
      for (std::size_t h = 0; h < H; ++h) {
        const HeadId id{static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h)};
        for (std::size_t t = 0; t < T; ++t) {
          if (site_has_ops(resolved, id, t)) site_ops_backward(resolved, id, t, raw.at(h, t), dsite.at(h, t), out.edits);
        }
      }
    }

    // Site -> z.
    Tensor3D dz(H, T, dh);
    if (projection) {
      for (std::size_t h = 0; h < H; ++h) {
        const MatrixView ds_h(dsite.values().subspan(h * T * sd, T * sd), T, sd);
        const MatrixView z_h(lt.z.values().subspan(h * T * dh, T * dh), T, dh);
        const MatrixView wo_h = head_rows(wo, h, dh);
        if (grads) {
          const Tensor2D dwo_h = matmul_at(z_h, ds_h);
          add_into(grads->block(b.wo).subspan(h * dh * D, dh * D), dwo_h.values());
        }
        const Tensor2D dz_h = matmul_bt(ds_h, wo_h);
        std::copy(dz_h.values().begin(), dz_h.values().end(), dz.values().begin() + h * T * dh);
      }
    } else {
      dz = std::move(dsite);
    }

    // Attention heads.
    Tensor2D dq(T, D), dk(T, D), dv(T, D);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const Tensor2D& p = lt.probs[h];
      Tensor2D dp(T, T);
      for (std::size_t i = 0; i < T; ++i) {
        const auto dzi = dz.at(h, i);
        for (std::size_t j = 0; j <= i; ++j) {
          const float* vj = lt.v.row(j).data() + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(dzi[c]) * vj[c];
          dp(i, j) = static_cast<float>(s);
        }
      }
      for (std::size_t j = 0; j < T; ++j) {
        float* dvj = dv.row(j).data() + off;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t i = j; i < T; ++i) acc += static_cast<double>(p(i, j)) * dz(h, i, c);
          dvj[c] = static_cast<float>(acc);
        }
      }
      const Tensor2D ds = softmax_rows_backward(p, dp);
      for (std::size_t i = 0; i < T; ++i) {
        float* dqi = dq.row(i).data() + off;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += static_cast<double>(ds(i, j)) * lt.k(j, off + c);
          dqi[c] = static_cast<float>(acc * scale);
        }
      }
      for (std::size_t j = 0; j < T; ++j) {
        float* dkj = dk.row(j).data() + off;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t i = j; i < T; ++i) acc += static_cast<double>(ds(i, j)) * lt.q(i, off + c);
          dkj[c] = static_cast<float>(acc * scale);
        }
      }
    }

    if (grads) {
      add_into(grads->block(b.wq), matmul_at(lt.h1, dq).values());
      add_into(grads->block(b.wk), matmul_at(lt.h1, dk).values());
      add_into(grads->block(b.wv), matmul_at(lt.h1, dv).values());
      accumulate_column_sums(dq, grads->block(b.bq));
      accumulate_column_sums(dk, grads->block(b.bk));
      accumulate_column_sums(dv, grads->block(b.bv));
    }
    Tensor2D dh1 = matmul_bt(dq, params.matrix(b.wq));
    add_into(dh1.values(), matmul_bt(dk, params.matrix(b.wk)).values());
    add_into(dh1.values(), matmul_bt(dv, params.matrix(b.wv)).values());
    std::vector<float> sg1(D, 0.0f), sb1(D, 0.0f);
    Tensor2D dx_in = layernorm_rows_backward(lt.x_in, params.block(b.ln1_gain), dh1,
                                             grads ? grads->block(b.ln1_gain) : std::span<float>(sg1),
                                             grads ? grads->block(b.ln1_bias) : std::span<float>(sb1));
    add_into(dx_in.values(), dx_mid.values());
    dx = std::move(dx_in);
  }

  if (grads) {
    auto tok = grads->block(lay.token_embedding);
    auto pos = grads->block(lay.position_embedding);
    for (std::size_t t = 0; t < T; ++t) {
      const auto r = dx.row(t);
      add_into(tok.subspan(static_cast<std::size_t>(trace.tokens[t]) * D, D), r);
      add_into(pos.subspan(t * D, D), r);
    }
  }
}

}  // namespace

Gradients backward(const ModelParams& params, const Trace& trace, const Tensor2D& dlogits,
                   const BackwardOptions& options) {
  Gradients g;
  backward_into(params, trace, dlogits, options, g);
  if (options.counter) ++options.counter->backward;
  return g;
}

Gradients backward_batch(const ModelParams& params, std::span<const Trace> traces, std::span<const Tensor2D> dlogits,
                         const BackwardOptions& options) {
  if (traces.size() != dlogits.size()) throw ShapeError("backward_batch: traces and gradients differ in count");
  Gradients g;
  if (options.site_grads) {
    // Site gradients of ragged traces are summed over each trace's own positions.
    std::size_t longest = 0;
    for (const auto& t : traces) longest = std::max(longest, t.tokens.size());
    if (!traces.empty() && traces.front().tape) {
      const std::size_t sd = site_dim(params.config(), traces.front().tape->spec.site);
      for (std::size_t l = 0; l < params.config().n_layers; ++l) g.sites.emplace_back(params.config().n_heads, longest, sd);
    }
  }
  for (std::size_t i = 0; i < traces.size(); ++i) backward_into(params, traces[i], dlogits[i], options, g);
  if (options.counter) ++options.counter->backward;
  return g;
}

// ---------------------------------------------------------------------------
// scoring / decoding

std::vector<double> response_token_logprobs(const Trace& trace, std::size_t prompt_len,
                                            std::span<const int> response) {
  if (prompt_len == 0) throw InputError("logprob: empty prompt");
  if (trace.logits.rows() + 1 < prompt_len + response.size()) throw InputError("logprob: trace too short");
  std::vector<double> out;
  out.reserve(response.size());
  for (std::size_t i = 0; i < response.size(); ++i) {
    out.push_back(log_softmax_at(trace.logits.row(prompt_len - 1 + i), static_cast<std::size_t>(response[i])));
  }
  return out;
}

double logprob_response(const ModelParams& params, std::span<const int> prompt, std::span<const int> response,
                        const InterventionSpec& interventions, PassCounter* counter) {
  if (response.empty()) throw InputError("logprob: empty response");
  if (prompt.empty()) throw InputError("logprob: empty prompt");
  if (prompt.size() + response.size() > params.config().max_seq_len) {
    throw InputError("logprob: prompt + response longer than max_seq_len");
  }
  if (interventions.position_extent() > prompt.size()) throw InputError("logprob: intervention beyond the prompt");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  tokens.insert(tokens.end(), response.begin(), response.end() - 1);
  RunOptions opts;
  opts.keep_cache = false;
  opts.counter = counter;
  const Trace trace = forward_with_cache(params, tokens, interventions, opts);
  const auto lps = response_token_logprobs(trace, prompt.size(), response);
  return std::accumulate(lps.begin(), lps.end(), 0.0);
}

std::size_t argmax_lowest(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<int> greedy_generate(const ModelParams& params, std::span<const int> prompt,
                                 const InterventionSpec& interventions, std::size_t max_new,
                                 std::optional<int> stop_token) {
  if (prompt.size() + max_new > params.config().max_seq_len) {
    throw InputError("generate: prompt + max_new exceeds max_seq_len");
  }
  if (interventions.position_extent() > prompt.size()) throw InputError("generate: intervention beyond the prompt");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  RunOptions opts;
  opts.keep_cache = false;
  for (std::size_t step = 0; step < max_new; ++step) {
    const Trace t = forward_with_cache(params, seq, interventions, opts);
    const int next = static_cast<int>(argmax_lowest(t.logits.row(seq.size() - 1)));
    out.push_back(next);
    seq.push_back(next);
    if (stop_token && next == *stop_token) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

namespace {

std::vector<int> teacher_forced_input(const Example& ex) {
  std::vector<int> tokens(ex.prompt.begin(), ex.prompt.end());
  tokens.insert(tokens.end(), ex.response.begin(), ex.response.end() - 1);
  return tokens;
}

void validate_example(const ModelConfig& cfg, const Example& ex) {
  if (ex.prompt.empty() || ex.response.empty()) throw InputError("training example with empty prompt or response");
  if (ex.prompt.size() + ex.response.size() > cfg.max_seq_len) throw InputError("training example too long");
}

// Summed response-token NLL and its parameter gradient scaled by `weight`.
double example_loss_grad(const ModelParams& params, const Example& ex, double weight, Gradients& acc) {
  const std::vector<int> tokens = teacher_forced_input(ex);
  RunOptions ro;
  ro.record_tape = true;
  ro.keep_cache = false;
  const Trace trace = forward_with_cache(params, tokens, {}, ro);
  Tensor2D dlogits(tokens.size(), params.config().vocab_size);
  double loss = 0.0;
  const std::size_t p = ex.prompt.size();
  for (std::size_t i = 0; i < ex.response.size(); ++i) {
    const auto row = trace.logits.row(p - 1 + i);
    const auto target = static_cast<std::size_t>(ex.response[i]);
    loss -= log_softmax_at(row, target);
    const auto g = softmax_cross_entropy_backward(row, target);
    auto drow = dlogits.row(p - 1 + i);
    for (std::size_t j = 0; j < g.size(); ++j) drow[j] = static_cast<float>(g[j] * weight);
  }
  BackwardOptions bo;
  bo.param_grads = true;
  backward_into(params, trace, dlogits, bo, acc);
  return loss;
}

}  // namespace

double mean_response_loss(const ModelParams& params, std::span<const Example> examples) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    total -= logprob_response(params, ex.prompt, ex.response);
    tokens += ex.response.size();
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

double greedy_exact_match(const ModelParams& params, std::span<const Example> examples, std::optional<int> stop_token,
                          const InterventionSpec& interventions) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : examples) {
    const std::size_t room = params.config().max_seq_len - ex.prompt.size();
    const auto out = greedy_generate(params, ex.prompt, interventions, std::min(ex.response.size(), room), stop_token);
    hits += out == ex.response;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

TrainReport train_toy(const ModelConfig& cfg, std::span<const Example> train, std::span<const Example> validation,
                      const TrainHyperparams& hp) {
  cfg.validate();
  if (train.empty()) throw InputError("train_toy: empty training set");
  for (const auto& ex : train) validate_example(cfg, ex);
  for (const auto& ex : validation) validate_example(cfg, ex);

  ModelParams params = ModelParams::random_init(cfg, hp.seed, static_cast<float>(hp.init_stddev));
  TrainReport report{params, 0.0, {}, {}};
  report.initial_loss = mean_response_loss(params, train);

  const std::size_t n_params = params.flat().size();
  std::vector<double> m1(n_params, 0.0), m2(n_params, 0.0);
  std::mt19937_64 rng(hp.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  // Fixed shard count keeps the reduction order independent of `jobs`.
  constexpr std::size_t kShards = 8;
  std::size_t step = 0;
  double best_acc = 0.0;
  const std::size_t total_steps = hp.max_epochs * ((train.size() + hp.batch_size - 1) / hp.batch_size);

  for (std::size_t epoch = 0; epoch < hp.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < end; ++i) batch_tokens += train[order[i]].response.size();
      const double weight = 1.0 / static_cast<double>(batch_tokens);

      std::vector<Gradients> shard_grads(kShards);
      std::vector<double> shard_loss(kShards, 0.0);
      const std::size_t count = end - start;
      parallel_for(kShards, hp.jobs, [&](std::size_t s) {
        const std::size_t lo = start + count * s / kShards;
        const std::size_t hi = start + count * (s + 1) / kShards;
        for (std::size_t i = lo; i < hi; ++i) {
          shard_loss[s] += example_loss_grad(params, train[order[i]], weight, shard_grads[s]);
        }
      });
      std::vector<double> grad(n_params, 0.0);
      for (std::size_t s = 0; s < kShards; ++s) {
        epoch_loss += shard_loss[s];
        if (!shard_grads[s].params) continue;
        const auto g = shard_grads[s].params->flat();
        for (std::size_t i = 0; i < n_params; ++i) grad[i] += g[i];
      }
      epoch_tokens += batch_tokens;

      double norm = 0.0;
      for (double g : grad) norm += g * g;
      norm = std::sqrt(norm);
      if (!std::isfinite(norm)) throw TrainingError("train_toy: non-finite gradient at step " + std::to_string(step));
      const double clip = (hp.grad_clip > 0.0 && norm > hp.grad_clip) ? hp.grad_clip / norm : 1.0;

      ++step;
      const double warm = hp.warmup_steps ? std::min(1.0, static_cast<double>(step) / hp.warmup_steps) : 1.0;
      // Cosine decay to final_lr_fraction of the base rate at max_epochs.
      const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
      const double decay = hp.final_lr_fraction + (1.0 - hp.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress));
      const double lr = hp.learning_rate * warm * decay;
      const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
      auto w = params.flat();
      for (std::size_t i = 0; i < n_params; ++i) {
        const double g = grad[i] * clip;
        m1[i] = hp.beta1 * m1[i] + (1.0 - hp.beta1) * g;
        m2[i] = hp.beta2 * m2[i] + (1.0 - hp.beta2) * g * g;
        const double update = (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + 1e-8) + hp.weight_decay * w[i];
        w[i] = static_cast<float>(w[i] - lr * update);
      }
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(epoch_tokens));
    const double acc = validation.empty() ? 1.0 : greedy_exact_match(params, validation, hp.stop_token);
    report.validation_accuracy.push_back(acc);
    spdlog::info("epoch {} loss {:.4f} validation exact match {:.3f}", epoch + 1, report.epoch_loss.back(), acc);
    best_acc = std::max(best_acc, acc);
    if (epoch + 1 >= hp.min_epochs && acc >= hp.target_accuracy) {
      report.params = std::move(params);
      return report;
    }
  }
  throw TrainingError("train_toy: validation exact match " + std::to_string(report.validation_accuracy.back()) +
                      " (best " + std::to_string(best_acc) + ") below target " +
                      std::to_string(hp.target_accuracy) + " after " + std::to_string(hp.max_epochs) +
                      " epochs; last epoch loss " + std::to_string(report.epoch_loss.back()));
}

}  // namespace gcm
