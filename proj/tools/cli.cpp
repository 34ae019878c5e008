#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "gcm/checkpoint.hpp"
#include "gcm/data.hpp"
#include "gcm/errors.hpp"
#include "gcm/harness.hpp"
#include "gcm/hash.hpp"
#include "gcm/judge.hpp"
#include "gcm/localize.hpp"
#include "gcm/parallel.hpp"
#include "gcm/steer.hpp"

#ifndef GCM_VERSION
#define GCM_VERSION "0.0.0"
#endif

namespace gcm::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + p.string());
}

std::string file_fingerprint(const fs::path& p) { return hex64(fnv1a64(read_file(p))); }

// Everything a subcommand needs besides its parsed flags.
struct Run {
  CLI::App* app = nullptr;
  std::string name;
  std::string config;
  ordered_json inputs = ordered_json::object();
  ordered_json outputs = ordered_json::array();
  ordered_json fingerprints = ordered_json::object();
  ordered_json seeds = ordered_json::object();
  ordered_json extra = ordered_json::object();

  void input(const std::string& key, const std::string& path) {
    if (!fs::is_regular_file(path)) throw InputError("cannot open " + path);
    inputs[key] = path;
    fingerprints[key] = file_fingerprint(path);
  }
};

// Flag values after config merging, keyed by long name without dashes.
ordered_json flag_values(const CLI::App* app) {
  ordered_json flags = ordered_json::object();
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    std::vector<std::string> values = opt->results();
    if (values.empty()) {
      const std::string def = opt->get_default_str();
      if (def.empty()) continue;
      values = {def};
    }
    if (opt->get_items_expected_max() > 1) {
      flags[name] = values;
    } else {
      flags[name] = values.back();
    }
  }
  return flags;
}

void write_manifest(const Run& run, const fs::path& where) {
  ordered_json m;
  m["tool"] = "gcm";
  m["version"] = GCM_VERSION;
  m["command"] = run.name;
  m["flags"] = flag_values(run.app);
  m["seeds"] = run.seeds;
  m["inputs"] = run.inputs;
  m["outputs"] = run.outputs;
  m["fingerprints"] = run.fingerprints;
  if (!run.extra.empty()) m["results"] = run.extra;
  write_file(where, m.dump(2) + "\n");
}

fs::path manifest_next_to(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

// Applies a flat JSON config (or a manifest's "flags" object) to options not
// given on the command line.
void merge_config(CLI::App* app, const std::string& command, const std::string& path) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(path));
  } catch (const ordered_json::parse_error& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError("config " + path + ": expected a JSON object");
  if (j.contains("flags") && j.contains("command")) {
    if (j["command"] != command) {
      throw UsageError("config " + path + " is a manifest for '" + j["command"].get<std::string>() + "'");
    }
    j = j["flags"];
  }
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = app->get_option_no_throw("--" + key);
    if (!opt) throw UsageError("config " + path + ": unknown key '" + key + "' for " + command);
    if (opt->count() > 0) continue;  // command line wins
    std::vector<std::string> in;
    auto text = [](const ordered_json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_array()) {
      for (const auto& v : value) in.push_back(text(v));
    } else {
      in.push_back(text(value));
    }
    opt->add_result(in);
    opt->run_callback();
  }
}

void require(const CLI::App* app, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    const CLI::Option* opt = app->get_option(std::string("--") + n);
    if (opt->count() == 0) throw CLI::RequiredError(std::string("--") + n);
  }
}

InterventionSite parse_site(const std::string& s) {
  if (s == "head_output") return InterventionSite::kHeadOutput;
  if (s == "head_projection") return InterventionSite::kHeadProjection;
  throw InputError("unknown site '" + s + "' (head_output or head_projection)");
}

AttributionSign parse_sign(const std::string& s) {
  if (s == "contrast_minus_orig") return AttributionSign::kContrastMinusOrig;
  if (s == "orig_minus_contrast") return AttributionSign::kOrigMinusContrast;
  throw InputError("unknown attribution sign '" + s + "'");
}

std::size_t resolve_jobs(int jobs) { return jobs > 0 ? static_cast<std::size_t>(jobs) : default_jobs(); }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string task = "mode_switch";
  std::size_t n = kDefaultPairs;
  std::uint64_t seed = 7;
  std::string split = "held_in";
  std::string out;
};

void gen_data(Run& run, const GenDataArgs& a) {
  require(run.app, {"out"});
  if (a.task != "mode_switch") throw InputError("unknown task '" + a.task + "' (only mode_switch)");
  const TaskDataset ds = gen_mode_switch(a.n, a.seed, parse_split(a.split));
  save_jsonl(ds, a.out);
  run.seeds["data"] = a.seed;
  run.outputs.push_back(a.out);
  run.fingerprints["out"] = fingerprint(ds);
  write_manifest(run, manifest_next_to(a.out));
  spdlog::info("wrote {} pairs to {}", ds.pairs.size(), a.out);
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::uint64_t seed = 1;
  std::size_t pairs = 3000;
  std::size_t echo = 1000;
  std::size_t validation = 200;
  std::size_t epochs = 40;
  std::size_t batch = 32;
  double lr = 3e-3;
  int jobs = 0;
  std::uint32_t layers = 4, heads = 4, d_model = 64, d_head = 16, d_mlp = 256, max_seq_len = 24;
};

void train(Run& run, const TrainArgs& a) {
  require(run.app, {"out"});
  ModelConfig cfg;
  cfg.n_layers = a.layers;
  cfg.n_heads = a.heads;
  cfg.d_model = a.d_model;
  cfg.d_head = a.d_head;
  cfg.d_mlp = a.d_mlp;
  cfg.max_seq_len = a.max_seq_len;
  cfg.validate();
  std::vector<Example> corpus = gen_training_corpus(a.pairs, a.echo, derive_seed(a.seed, "corpus"));
  if (!a.data.empty()) {
    run.input("data", a.data);
    const auto extra = to_examples(load_jsonl(a.data));
    corpus.insert(corpus.end(), extra.begin(), extra.end());
  }
  const auto validation = gen_training_corpus(a.validation * 3 / 4, a.validation / 4, derive_seed(a.seed, "validation"));
  TrainHyperparams hp;
  hp.seed = a.seed;
  hp.max_epochs = a.epochs;
  hp.batch_size = a.batch;
  hp.learning_rate = a.lr;
  hp.stop_token = Vocab::kEos;
  hp.jobs = resolve_jobs(a.jobs);
  const TrainReport rep = train_toy(cfg, corpus, validation, hp);
  save_checkpoint(rep.params, a.out);
  run.seeds["train"] = a.seed;
  run.outputs.push_back(a.out);
  run.fingerprints["out"] = file_fingerprint(a.out);
  run.extra["epochs"] = rep.epoch_loss.size();
  run.extra["final_loss"] = rep.epoch_loss.back();
  run.extra["validation_exact_match"] = rep.validation_accuracy.back();
  write_manifest(run, manifest_next_to(a.out));
}

struct LocalizeArgs {
  std::string method;
  std::string ckpt, data, out;
  std::uint64_t seed = 0;
  std::string site = "head_output";
  std::string sign = "contrast_minus_orig";
  int jobs = 0;
};

void localize_cmd(Run& run, const LocalizeArgs& a) {
  require(run.app, {"method", "ckpt", "data", "out"});
  run.input("ckpt", a.ckpt);
  run.input("data", a.data);
  const ModelParams params = load_checkpoint(a.ckpt);
  const TaskDataset ds = load_jsonl(a.data);
  LocalizeOptions o;
  o.site = parse_site(a.site);
  o.sign = parse_sign(a.sign);
  o.seed = a.seed;
  o.jobs = resolve_jobs(a.jobs);
  const HeadScoreTable t = localize(parse_localizer(a.method), params, ds, o);
  write_file(a.out, to_csv(t));
  run.seeds["localize"] = a.seed;
  run.outputs.push_back(a.out);
  write_manifest(run, manifest_next_to(a.out));
}

struct SteerArgs {
  std::string ckpt, scores, method, data, eval, out;
  double alpha = 1.0;
  double topk = 0.05;
  std::string site = "head_output";
  std::size_t rank = 4;
  std::size_t reft_epochs = 30;
  std::uint64_t seed = 0;
  bool raw = false;
  std::string extraction = "edit";
  int jobs = 0;
};

void steer_cmd(Run& run, const SteerArgs& a) {
  require(run.app, {"ckpt", "scores", "method", "data", "out"});
  run.input("ckpt", a.ckpt);
  run.input("scores", a.scores);
  run.input("data", a.data);
  const ModelParams params = load_checkpoint(a.ckpt);
  const HeadScoreTable table = score_table_from_csv(read_file(a.scores));
  const TaskDataset ds = load_jsonl(a.data);
  const SteerMethod method = parse_steer_method(a.method);
  const HeadSelection sel = select_top_k(table, a.topk);
  PlanOptions po;
  po.site = parse_site(a.site);
  po.jobs = resolve_jobs(a.jobs);
  SteeringPlan plan;
  if (method == SteerMethod::kMean) {
    plan = build_mean_plan(params, ds, sel, a.alpha, po);
  } else if (method == SteerMethod::kDiffMeans) {
    plan = build_diff_means_plan(params, ds, sel, a.alpha, po);
  } else {
    ReftHyperparams hp;
    hp.rank = a.rank;
    hp.epochs = a.reft_epochs;
    hp.seed = a.seed;
    hp.site = po.site;
    const ReftReport rep = train_reft(params, ds, sel.heads, hp);
    run.extra["reft_loss_curve"] = rep.loss_curve;
    run.extra["reft_max_orthonormality_error"] =
        rep.orthonormality_error.empty()
            ? 0.0
            : *std::max_element(rep.orthonormality_error.begin(), rep.orthonormality_error.end());
    plan = build_reft_plan(rep.module, sel, a.alpha, !a.raw, parse_reft_extraction(a.extraction));
  }
  save_plan(plan, a.out);
  run.seeds["steer"] = a.seed;
  run.outputs.push_back(a.out);

  if (!a.eval.empty()) {
    run.input("eval", a.eval);
    const TaskDataset eval_ds = load_jsonl(a.eval);
    const Baselines base = compute_baselines(params, eval_ds, po.jobs);
    std::string lines;
    std::vector<JudgeVerdict> verdicts;
    for (std::size_t i = 0; i < eval_ds.pairs.size(); ++i) {
      const Tokens& p = eval_ds.pairs[i].p_orig;
      const auto q = query_of(p);
      const Tokens steered = apply_plan(params, p, plan, q ? 2 * q->size() : std::optional<std::size_t>{});
      const JudgeVerdict v = judge_response(p, steered, base.responses[i]);
      verdicts.push_back(v);
      lines += verdict_record(p, steered, base.responses[i], v) + "\n";
    }
    const std::string results = a.out + ".results.jsonl";
    write_file(results, lines);
    run.outputs.push_back(results);
    const double rate = success_rate(verdicts);
    run.extra["split"] = to_string(eval_ds.split);
    run.extra["n"] = verdicts.size();
    run.extra["success_rate"] = rate;
    std::cout << "success_rate " << format_number(rate) << " (" << to_string(eval_ds.split) << ", n=" << verdicts.size()
              << ")\n";
  }
  write_manifest(run, manifest_next_to(a.out));
}

struct SweepArgs {
  std::string ckpt, data, out;
  std::vector<double> alphas = default_alphas();
  std::vector<double> ks = default_ks();
  std::vector<std::string> localizers{"act_patch", "attrib_patch", "random"};
  std::vector<std::string> steerers{"mean", "diff_means", "reft"};
  std::vector<std::uint64_t> seeds{0};
  std::string site = "head_output";
  std::string sign = "contrast_minus_orig";
  std::size_t rank = 4;
  std::size_t reft_epochs = 30;
  int jobs = 0;
};

void sweep_cmd(Run& run, const SweepArgs& a) {
  require(run.app, {"ckpt", "data", "out"});
  run.input("ckpt", a.ckpt);
  run.input("data", a.data);
  const ModelParams params = load_checkpoint(a.ckpt);
  const TaskDataset ds = load_jsonl(a.data);
  SweepConfig c;
  c.alphas = a.alphas;
  c.ks = a.ks;
  for (const auto& l : a.localizers) c.localizers.push_back(parse_localizer(l));
  for (const auto& s : a.steerers) c.steerers.push_back(parse_steer_method(s));
  c.seeds = a.seeds;
  c.site = parse_site(a.site);
  c.attribution_sign = parse_sign(a.sign);
  c.reft.rank = a.rank;
  c.reft.epochs = a.reft_epochs;
  c.jobs = resolve_jobs(a.jobs);
  const SweepResult res = run_sweep(params, ds, c);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_file(dir / "grid.csv", grid_to_csv(res.cells));
  write_file(dir / "heatmap.svg", grid_to_svg(res.cells));
  run.outputs.push_back((dir / "grid.csv").string());
  run.outputs.push_back((dir / "heatmap.svg").string());
  for (const auto& [key, table] : res.tables) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '/', '_');
    const fs::path p = dir / ("scores_" + name + ".csv");
    write_file(p, to_csv(table));
    run.outputs.push_back(p.string());
  }
  std::string errors;
  std::size_t failed = 0;
  for (const auto& cell : res.cells) {
    if (cell.ok()) continue;
    ++failed;
    errors += to_string(cell.localizer) + "," + to_string(cell.steerer) + "," + format_number(cell.alpha) + "," +
              format_number(cell.k) + "," + std::to_string(cell.seed) + ": " + cell.error + "\n";
  }
  if (failed) {
    write_file(dir / "errors.txt", errors);
    run.outputs.push_back((dir / "errors.txt").string());
  }
  run.seeds["sweep"] = a.seeds;
  run.extra["cells"] = res.cells.size();
  run.extra["failed_cells"] = failed;
  write_manifest(run, dir / "manifest.json");
  spdlog::info("{} cells ({} failed) written to {}", res.cells.size(), failed, dir.string());
}

struct StatsArgs {
  std::vector<std::string> grids;
  std::vector<std::string> comparisons;
  double q = 0.05;
  std::string split;
  std::string out;
};

void stats_cmd(Run& run, const StatsArgs& a) {
  require(run.app, {"grids"});
  std::vector<GridCellResult> cells;
  for (const auto& g : a.grids) {
    run.input("grid:" + g, g);
    const auto part = grid_from_csv(read_file(g));
    cells.insert(cells.end(), part.begin(), part.end());
  }
  std::vector<std::string> specs = a.comparisons;
  if (specs.empty()) {
    // Every localizer against random, per steerer present in the grid.
    std::vector<LocalizerMethod> locs;
    std::vector<SteerMethod> steers;
    for (const auto& c : cells) {
      if (std::find(locs.begin(), locs.end(), c.localizer) == locs.end()) locs.push_back(c.localizer);
      if (std::find(steers.begin(), steers.end(), c.steerer) == steers.end()) steers.push_back(c.steerer);
    }
    const bool has_random = std::find(locs.begin(), locs.end(), LocalizerMethod::kRandom) != locs.end();
    if (!has_random) throw InputError("stats: no --comparison given and the grid has no random baseline");
    for (const auto s : steers) {
      for (const auto l : locs) {
        if (l != LocalizerMethod::kRandom) specs.push_back(to_string(l) + ">random@" + to_string(s));
      }
    }
  }
  const std::optional<Split> split = a.split.empty() ? std::nullopt : std::optional<Split>(parse_split(a.split));
  std::vector<ComparisonRequest> reqs;
  for (const auto& s : specs) reqs.push_back(comparison_from_grid(cells, s, split));
  const auto results = compare_methods(reqs, a.q);
  const std::string json = stats_to_json(results);
  if (a.out.empty()) {
    std::cout << json;
  } else {
    write_file(a.out, json);
    run.outputs.push_back(a.out);
    write_manifest(run, manifest_next_to(a.out));
  }
}

struct ReportArgs {
  std::string grid;
  std::string format = "svg";
  std::string out;
};

void report_cmd(Run& run, const ReportArgs& a) {
  require(run.app, {"grid"});
  run.input("grid", a.grid);
  const auto cells = grid_from_csv(read_file(a.grid));
  std::string text;
  if (a.format == "csv") {
    text = grid_to_csv(cells);
  } else if (a.format == "svg") {
    text = grid_to_svg(cells);
  } else if (a.format == "json") {
    ordered_json arr = ordered_json::array();
    for (const auto& c : cells) {
      ordered_json j;
      j["localizer"] = to_string(c.localizer);
      j["steerer"] = to_string(c.steerer);
      j["alpha"] = c.alpha;
      j["k"] = c.k;
      j["split"] = to_string(c.split);
      j["seed"] = c.seed;
      j["n"] = c.n;
      j["success_rate"] = c.success_rate;
      arr.push_back(j);
    }
    text = arr.dump(2) + "\n";
  } else {
    throw InputError("unknown report format '" + a.format + "' (csv, json or svg)");
  }
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_file(a.out, text);
    run.outputs.push_back(a.out);
    write_manifest(run, manifest_next_to(a.out));
  }
}

const CLI::IsMember kSplits({"held_in", "held_out"});
const CLI::IsMember kSites({"head_output", "head_projection"});
const CLI::IsMember kSigns({"contrast_minus_orig", "orig_minus_contrast"});
const CLI::IsMember kLocalizers({"act_patch", "actpatch", "attrib_patch", "attribpatch", "attrib", "knockout",
                                 "iti_probe", "iti", "random"});
const CLI::IsMember kSteerers({"mean", "diff_means", "diffmeans", "reft"});

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app("Locate steerable attention heads by causal mediation and steer them.", "gcm");
  app.set_version_flag("--version", GCM_VERSION);
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.option_defaults()->always_capture_default();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  std::vector<Run> runs;
  runs.reserve(8);
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    Run& r = runs.emplace_back();
    r.app = s;
    r.name = name;
    s->add_option("--config", r.config, "JSON file of flag values (or a manifest); flags override it");
    return std::pair<CLI::App*, Run*>{s, &r};
  };

  GenDataArgs gd;
  auto [gd_app, gd_run] = sub("gen-data", "Generate a contrastive mode-switch dataset (JSONL)");
  gd_app->add_option("--task", gd.task, "Task name")->check(CLI::IsMember({"mode_switch"}));
  gd_app->add_option("--n", gd.n, "Number of pairs")->check(CLI::PositiveNumber);
  gd_app->add_option("--seed", gd.seed, "Generator seed");
  gd_app->add_option("--split", gd.split, "held_in or held_out")->check(kSplits);
  gd_app->add_option("--out", gd.out, "Output JSONL path");

  TrainArgs tr;
  auto [tr_app, tr_run] = sub("train", "Train the toy transformer and write a checkpoint");
  tr_app->add_option("--data", tr.data, "Extra contrastive pairs (JSONL) to train on");
  tr_app->add_option("--out", tr.out, "Checkpoint path");
  tr_app->add_option("--seed", tr.seed, "Training seed");
  tr_app->add_option("--pairs", tr.pairs, "Generated mode-switch pairs in the corpus");
  tr_app->add_option("--echo", tr.echo, "Generated echo examples in the corpus");
  tr_app->add_option("--validation", tr.validation, "Validation examples");
  tr_app->add_option("--epochs", tr.epochs, "Maximum epochs");
  tr_app->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  tr_app->add_option("--lr", tr.lr, "Adam learning rate");
  tr_app->add_option("--layers", tr.layers);
  tr_app->add_option("--heads", tr.heads);
  tr_app->add_option("--d-model", tr.d_model);
  tr_app->add_option("--d-head", tr.d_head);
  tr_app->add_option("--d-mlp", tr.d_mlp);
  tr_app->add_option("--max-seq-len", tr.max_seq_len);
  tr_app->add_option("--jobs", tr.jobs, "Worker threads (0: GCM_JOBS or all cores)");

  LocalizeArgs lo;
  auto [lo_app, lo_run] = sub("localize", "Score every attention head and write a score table (CSV)");
  lo_app->add_option("--method", lo.method, "actpatch, attrib, knockout, iti or random")->check(kLocalizers);
  lo_app->add_option("--ckpt", lo.ckpt, "Checkpoint");
  lo_app->add_option("--data", lo.data, "Dataset (JSONL)");
  lo_app->add_option("--out", lo.out, "Score table CSV");
  lo_app->add_option("--seed", lo.seed, "Seed for probes and random order");
  lo_app->add_option("--site", lo.site, "head_output or head_projection")->check(kSites);
  lo_app->add_option("--sign", lo.sign, "Attribution factor: contrast_minus_orig or orig_minus_contrast")
      ->check(kSigns);
  lo_app->add_option("--jobs", lo.jobs, "Worker threads (0: GCM_JOBS or all cores)");

  SteerArgs st;
  auto [st_app, st_run] = sub("steer", "Build a steering plan from a score table; optionally evaluate it");
  st_app->add_option("--ckpt", st.ckpt, "Checkpoint");
  st_app->add_option("--scores", st.scores, "Score table CSV");
  st_app->add_option("--method", st.method, "mean, diff_means or reft")->check(kSteerers);
  st_app->add_option("--alpha", st.alpha, "Steering factor")->check(CLI::PositiveNumber);
  st_app->add_option("--topk", st.topk, "Fraction of heads in (0, 1]");
  st_app->add_option("--data", st.data, "Held-in dataset the plan is built from");
  st_app->add_option("--eval", st.eval, "Dataset to steer and judge");
  st_app->add_option("--out", st.out, "Plan file (JSON)");
  st_app->add_option("--site", st.site, "head_output or head_projection")->check(kSites);
  st_app->add_option("--rank", st.rank, "ReFT rank");
  st_app->add_option("--reft-epochs", st.reft_epochs, "ReFT training epochs");
  st_app->add_option("--seed", st.seed, "ReFT seed");
  st_app->add_flag("--raw", st.raw, "Apply ReFT edits without unit normalization");
  st_app->add_option("--extraction", st.extraction, "ReFT: edit or down_projection")
      ->check(CLI::IsMember({"edit", "down_projection"}));
  st_app->add_option("--jobs", st.jobs, "Worker threads (0: GCM_JOBS or all cores)");

  SweepArgs sw;
  auto [sw_app, sw_run] = sub("sweep", "Run the (localizer, steerer, alpha, k) grid");
  sw_app->add_option("--ckpt", sw.ckpt, "Checkpoint");
  sw_app->add_option("--data", sw.data, "Held-in dataset");
  sw_app->add_option("--out", sw.out, "Output directory");
  sw_app->add_option("--alphas", sw.alphas, "Steering factors");
  sw_app->add_option("--ks", sw.ks, "Head fractions");
  sw_app->add_option("--localizers", sw.localizers, "Localizers")->check(kLocalizers);
  sw_app->add_option("--steerers", sw.steerers, "Steering methods")->check(kSteerers);
  sw_app->add_option("--seeds", sw.seeds, "Sweep seeds");
  sw_app->add_option("--site", sw.site, "head_output or head_projection")->check(kSites);
  sw_app->add_option("--sign", sw.sign, "Attribution factor")->check(kSigns);
  sw_app->add_option("--rank", sw.rank, "ReFT rank");
  sw_app->add_option("--reft-epochs", sw.reft_epochs, "ReFT training epochs");
  sw_app->add_option("--jobs", sw.jobs, "Worker threads (0: GCM_JOBS or all cores)");

  StatsArgs sa;
  auto [sa_app, sa_run] = sub("stats", "Paired Wilcoxon tests with BH correction over grid cells");
  sa_app->add_option("--grids", sa.grids, "Grid CSV files");
  sa_app->add_option("--comparison", sa.comparisons, "A>B@steerer (repeatable)");
  sa_app->add_option("--q", sa.q, "FDR level");
  sa_app->add_option("--split", sa.split, "Restrict to one split")->check(kSplits);
  sa_app->add_option("--out", sa.out, "Stats JSON (stdout if omitted)");

  ReportArgs ra;
  auto [ra_app, ra_run] = sub("report", "Render a grid as csv, json or svg");
  ra_app->add_option("--grid", ra.grid, "Grid CSV");
  ra_app->add_option("--format", ra.format, "csv, json or svg")->check(CLI::IsMember({"csv", "json", "svg"}));
  ra_app->add_option("--out", ra.out, "Output file (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const auto previous = spdlog::default_logger();
  auto logger = spdlog::stderr_color_mt("gcm-" + std::to_string(reinterpret_cast<std::uintptr_t>(&app)));
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(log_level));

  int code = kOk;
  try {
    for (Run& r : runs) {
      if (!r.app->parsed()) continue;
      if (!r.config.empty()) merge_config(r.app, r.name, r.config);
      if (r.name == "gen-data") gen_data(r, gd);
      if (r.name == "train") train(r, tr);
      if (r.name == "localize") localize_cmd(r, lo);
      if (r.name == "steer") steer_cmd(r, st);
      if (r.name == "sweep") sweep_cmd(r, sw);
      if (r.name == "stats") stats_cmd(r, sa);
      if (r.name == "report") report_cmd(r, ra);
    }
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\nRun with --help for more information.\n";
    code = kUsage;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    code = kUsage;
  } catch (const InputError& e) {
    spdlog::error("{}", e.what());
    code = kValidation;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    code = kValidation;
  } catch (const ParseError& e) {
    spdlog::error("{}", e.what());
    code = kValidation;
  } catch (const ShapeError& e) {
    spdlog::error("{}", e.what());
    code = kValidation;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    code = kRuntime;
  }
  // drop() would also clear the default logger; put the caller's back first.
  spdlog::set_default_logger(previous);
  spdlog::drop(logger->name());
  return code;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("gcm");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace gcm::cli
