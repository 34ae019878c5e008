#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

#include "gcm/data.hpp"
#include "gcm/errors.hpp"
#include "gcm/harness.hpp"
#include "gcm/judge.hpp"
#include "helpers.hpp"

using namespace gcm;

namespace {

// P(W+ >= observed) by enumerating every sign assignment of the average ranks.
double enumerate_wilcoxon(std::vector<double> d) {
  d.erase(std::remove(d.begin(), d.end(), 0.0), d.end());
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
    for (std::size_t q = i; q <= j; ++q) rank[idx[q]] = (i + j) / 2.0 + 1.0;
    i = j + 1;
  }
  double observed = 0.0;
  for (std::size_t i = 0; i < n; ++i) observed += d[i] > 0 ? rank[i] : 0.0;
  std::size_t hits = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) w += (mask >> i & 1) ? rank[i] : 0.0;
    hits += w >= observed - 1e-9;
  }
  return static_cast<double>(hits) / static_cast<double>(std::size_t{1} << n);
}

GridCellResult cell(double alpha, double k, double rate, LocalizerMethod loc = LocalizerMethod::kActPatch) {
  GridCellResult c;
  c.localizer = loc;
  c.steerer = SteerMethod::kDiffMeans;
  c.alpha = alpha;
  c.k = k;
  c.n = 10;
  c.success_rate = rate;
  return c;
}

SweepConfig small_config() {
  SweepConfig c;
  c.alphas = {1.0, 4.0};
  c.ks = {0.25, 1.0};
  c.localizers = {LocalizerMethod::kActPatch, LocalizerMethod::kRandom};
  c.steerers = {SteerMethod::kMean, SteerMethod::kDiffMeans, SteerMethod::kReft};
  c.reft.epochs = 2;
  return c;
}

}  // namespace

TEST(Wilcoxon, Examples) {
  const std::vector<double> pos{0.1, 0.2, 0.3, 0.4, 0.5};
  EXPECT_DOUBLE_EQ(wilcoxon_one_sided(pos), 0.03125);
  EXPECT_DOUBLE_EQ(enumerate_wilcoxon(pos), 0.03125);
  const std::vector<double> flipped{-0.1, 0.2, 0.3, 0.4, 0.5};
  EXPECT_DOUBLE_EQ(wilcoxon_one_sided(flipped), 0.0625);
  const std::vector<double> symmetric{0.3, -0.3, 0.7, -0.7, 0.2, -0.2};
  EXPECT_GE(wilcoxon_one_sided(symmetric), 0.5);
  // Zeros are dropped before ranking.
  const std::vector<double> with_zeros{0.0, 0.1, 0.2, 0.0, 0.3, 0.4, 0.5};
  EXPECT_DOUBLE_EQ(wilcoxon_one_sided(with_zeros), 0.03125);
}

TEST(Wilcoxon, MatchesEnumeration) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> val(-6, 8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + trial % 8;
    std::vector<double> d;
    while (d.size() < n) {
      const int v = val(rng);
      if (v != 0) d.push_back(v * 0.05);
    }
    ASSERT_NEAR(wilcoxon_exact(d), enumerate_wilcoxon(d), 1e-12) << trial;
    ASSERT_EQ(wilcoxon_one_sided(d), wilcoxon_exact(d));
  }
}

TEST(Wilcoxon, NormalBranchAgreesAtTwelve) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> d(0.3, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(12);
    for (auto& v : x) v = d(rng);
    worst = std::max(worst, std::abs(wilcoxon_exact(x) - wilcoxon_normal(x)));
  }
  EXPECT_LE(worst, 0.02);
  // Above twelve the normal branch is used.
  std::vector<double> x(13);
  for (auto& v : x) v = d(rng);
  EXPECT_EQ(wilcoxon_one_sided(x), wilcoxon_normal(x));
  EXPECT_NEAR(wilcoxon_normal(x), enumerate_wilcoxon(x), 0.02);
}

TEST(Wilcoxon, TooFewNonzero) {
  EXPECT_THROW(wilcoxon_one_sided(std::vector<double>{0, 0, 0, 0, 0, 0}), InputError);
  EXPECT_THROW(wilcoxon_one_sided(std::vector<double>{1, 2, 3, 4, 0}), InputError);
  EXPECT_THROW(wilcoxon_one_sided(std::vector<double>{}), InputError);
}

TEST(Bh, Examples) {
  const std::vector<double> p{0.01, 0.04, 0.03, 0.20};
  const auto r = bh_fdr(p, 0.05);
  const std::vector<double> want{0.04, 0.04 * 4 / 3, 0.04 * 4 / 3, 0.20};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.adjusted[i], want[i], 1e-12);
  EXPECT_NEAR(r.adjusted[1], 0.0533, 1e-4);
  EXPECT_EQ(r.reject, (std::vector<bool>{true, false, false, false}));
  const auto eq = bh_fdr(std::vector<double>{0.3, 0.3, 0.3});
  for (double a : eq.adjusted) EXPECT_DOUBLE_EQ(a, 0.3);
  EXPECT_DOUBLE_EQ(bh_fdr(std::vector<double>{0.07}).adjusted[0], 0.07);
  EXPECT_DOUBLE_EQ(bh_fdr(std::vector<double>{0.9, 0.95}).adjusted[0], 0.95);
  EXPECT_TRUE(bh_fdr(std::vector<double>{}).adjusted.empty());
  EXPECT_THROW(bh_fdr(std::vector<double>{0.1, 1.5}), InputError);
  EXPECT_THROW(bh_fdr(std::vector<double>{-0.01}), InputError);
}

TEST(Bh, MonotoneAndPermutationInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 0.2);
  std::vector<double> p(15);
  for (auto& v : p) v = u(rng);
  const auto r = bh_fdr(p);
  std::vector<std::size_t> order(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  for (std::size_t i = 1; i < order.size(); ++i) EXPECT_LE(r.adjusted[order[i - 1]], r.adjusted[order[i]]);
  // Step-up formula evaluated directly.
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::size_t rank = std::find(order.begin(), order.end(), i) - order.begin();
    double best = 1.0;
    for (std::size_t j = rank; j < order.size(); ++j) best = std::min(best, p[order[j]] * p.size() / (j + 1.0));
    EXPECT_NEAR(r.adjusted[i], best, 1e-12);
  }
  auto shuffled = p;
  std::vector<std::size_t> perm(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < p.size(); ++i) shuffled[i] = p[perm[i]];
  const auto s = bh_fdr(shuffled);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_DOUBLE_EQ(s.adjusted[i], r.adjusted[perm[i]]);
    EXPECT_EQ(s.reject[i], r.reject[perm[i]]);
  }
}

TEST(Spearman, Examples) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{10, 20, 30, 40, 50}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{1, 4, 9, 16, 25}), 1.0);
  // Ties use average ranks: Pearson of [1,2,3,4] with [1.5,1.5,3,4].
  const double r = spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{7, 7, 8, 9});
  const double mx = 2.5, my = 2.5;
  const std::vector<double> a{1, 2, 3, 4}, b{1.5, 1.5, 3, 4};
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 4; ++i) {
    sab += (a[i] - mx) * (b[i] - my);
    saa += (a[i] - mx) * (a[i] - mx);
    sbb += (b[i] - my) * (b[i] - my);
  }
  EXPECT_NEAR(r, sab / std::sqrt(saa * sbb), 1e-12);
  EXPECT_THROW(spearman(x, std::vector<double>{1, 2}), InputError);
}

TEST(Compare, IdenticalGridsAreDegenerate) {
  std::vector<GridCellResult> a;
  for (double alpha : {1.0, 2.0, 3.0}) {
    for (double k : {0.1, 0.5}) a.push_back(cell(alpha, k, 0.1 * alpha));
  }
  auto b = a;
  for (auto& c : b) c.localizer = LocalizerMethod::kRandom;
  const auto r = compare_methods({{"same", a, b}});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_TRUE(r[0].degenerate);
  EXPECT_TRUE(std::isnan(r[0].raw_p));
  EXPECT_FALSE(r[0].reject);
  EXPECT_EQ(r[0].n_pairs, 6u);
}

TEST(Compare, UniformImprovementGivesExactMinimum) {
  std::vector<GridCellResult> a, b;
  for (double alpha : {1.0, 2.0, 3.0, 4.0, 5.0}) {
    for (double k : {0.1, 0.5}) {
      b.push_back(cell(alpha, k, 0.05 * alpha, LocalizerMethod::kRandom));
      a.push_back(cell(alpha, k, 0.05 * alpha + 0.1));
    }
  }
  // Shuffled order must not matter; pairing is by key.
  std::reverse(b.begin(), b.end());
  const auto r = compare_methods({{"a>b", a, b}, {"b>a", b, a}});
  EXPECT_NEAR(r[0].raw_p, 1.0 / 1024.0, 1e-15);
  EXPECT_NEAR(r[0].mean_delta, 0.1, 1e-12);
  EXPECT_TRUE(r[0].reject);
  EXPECT_DOUBLE_EQ(r[1].raw_p, 1.0);
  EXPECT_FALSE(r[1].reject);
  EXPECT_NEAR(r[0].fdr_p, 2.0 / 1024.0, 1e-15);
}

TEST(Compare, KeyMismatch) {
  std::vector<GridCellResult> a{cell(1, 0.1, 0.5), cell(2, 0.1, 0.5), cell(3, 0.1, 0.5), cell(4, 0.1, 0.5),
                                cell(5, 0.1, 0.5)};
  auto b = a;
  b.back().alpha = 6;
  EXPECT_THROW(compare_methods({{"x", a, b}}), InputError);
  b = a;
  b.pop_back();
  EXPECT_THROW(compare_methods({{"x", a, b}}), InputError);
}

TEST(Compare, FromGrid) {
  std::vector<GridCellResult> grid;
  for (double alpha : {1.0, 2.0, 3.0, 4.0, 5.0, 6.0}) {
    grid.push_back(cell(alpha, 0.1, 0.6));
    grid.push_back(cell(alpha, 0.1, 0.2, LocalizerMethod::kRandom));
  }
  const auto req = comparison_from_grid(grid, "act_patch>random@diff_means");
  EXPECT_EQ(req.a.size(), 6u);
  EXPECT_EQ(req.b.size(), 6u);
  const auto r = compare_methods({req});
  EXPECT_NEAR(r[0].raw_p, 1.0 / 64.0, 1e-15);
  EXPECT_THROW(comparison_from_grid(grid, "act_patch>random"), Error);
}

TEST(SweepConfig, Defaults) {
  const auto c = default_sweep_config();
  EXPECT_EQ(c.alphas, (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
  const std::vector<double> ks{0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.5, 1.0};
  ASSERT_EQ(c.ks.size(), ks.size());
  for (std::size_t i = 0; i < ks.size(); ++i) EXPECT_NEAR(c.ks[i], ks[i], 1e-15);
  EXPECT_EQ(c.localizers.size(), 3u);
  EXPECT_EQ(c.steerers.size(), 3u);
  EXPECT_EQ(c.alphas.size() * c.ks.size(), 120u);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.alphas.clear();
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.ks = {1.5};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Sweep, SingleCell) {
  const auto params = testutil::tiny_params();
  const auto ds = gen_mode_switch(5, 2, Split::kHeldIn);
  SweepConfig c;
  c.alphas = {2.0};
  c.ks = {0.5};
  c.localizers = {LocalizerMethod::kRandom};
  c.steerers = {SteerMethod::kDiffMeans};
  const auto r = run_sweep(params, ds, c);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_TRUE(r.cells[0].ok()) << r.cells[0].error;
  EXPECT_EQ(r.cells[0].n, 5u);
  EXPECT_EQ(r.tables.size(), 1u);
  // The same cell built by hand.
  const auto plan = build_cell_plan(params, ds, r.tables.begin()->second, SteerMethod::kDiffMeans, 2.0, 0.5, c);
  EXPECT_EQ(plan.heads.size(), 2u);
  EXPECT_DOUBLE_EQ(evaluate_plan(params, plan, ds).success_rate, r.cells[0].success_rate);
}

TEST(Sweep, DefaultGridCardinality) {
  const auto params = testutil::tiny_params();
  const auto ds = gen_mode_switch(5, 2, Split::kHeldIn);
  auto c = default_sweep_config();
  c.reft.epochs = 1;
  c.jobs = 2;
  const auto r = run_sweep(params, ds, c);
  EXPECT_EQ(r.cells.size(), 1080u);
  std::map<std::pair<LocalizerMethod, SteerMethod>, std::size_t> per;
  for (const auto& cell : r.cells) {
    EXPECT_TRUE(cell.ok()) << cell.error;
    EXPECT_GE(cell.success_rate, 0.0);
    EXPECT_LE(cell.success_rate, 1.0);
    ++per[{cell.localizer, cell.steerer}];
  }
  EXPECT_EQ(per.size(), 9u);
  for (const auto& [key, n] : per) EXPECT_EQ(n, 120u);
}

TEST(Sweep, DeterministicAndOrderFree) {
  const auto params = testutil::tiny_params();
  const auto ds = gen_mode_switch(6, 2, Split::kHeldIn);
  auto c = small_config();
  const auto a = grid_to_csv(run_sweep(params, ds, c).cells);
  c.jobs = 3;
  const auto b = grid_to_csv(run_sweep(params, ds, c).cells);
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 1 + 2 * 3 * 2 * 2);
}

TEST(Sweep, SuppliedTablesAreUsed) {
  const auto params = testutil::tiny_params();
  const auto ds = gen_mode_switch(6, 2, Split::kHeldIn);
  auto c = small_config();
  c.localizers = {LocalizerMethod::kActPatch};
  const auto first = run_sweep(params, ds, c);
  const auto again = run_sweep(params, ds, c, first.tables);
  EXPECT_EQ(grid_to_csv(first.cells), grid_to_csv(again.cells));
}

TEST(Eval, EmptyPlanIsBaseRate) {
  const auto params = testutil::tiny_params();
  const auto held_in = gen_mode_switch(5, 2, Split::kHeldIn);
  const auto held_out = gen_mode_switch(6, 3, Split::kHeldOut);
  const auto plan = build_diff_means_plan(params, held_in, HeadSelection{{}, 0.0}, 3.0);
  const auto r = eval_held_out(params, plan, held_out);
  EXPECT_EQ(r.split, Split::kHeldOut);
  EXPECT_EQ(r.n, 6u);
  std::vector<JudgeVerdict> v;
  for (const auto& p : held_out.pairs) {
    v.push_back(judge_response(p.p_orig, generate_unsteered(params, p.p_orig), generate_unsteered(params, p.p_orig)));
  }
  EXPECT_DOUBLE_EQ(r.success_rate, success_rate(v));
  const auto again = eval_held_out(params, plan, held_out);
  EXPECT_EQ(grid_to_csv({again}), grid_to_csv({r}));
}

TEST(Eval, CapabilityRetention) {
  const auto params = testutil::tiny_params();
  const auto probes = gen_echo_probes(20, 1);
  const auto ds = gen_mode_switch(5, 2, Split::kHeldIn);
  const double base = capability_retention(params, nullptr, probes);
  const auto empty = build_diff_means_plan(params, ds, HeadSelection{{}, 0.0}, 1.0);
  EXPECT_DOUBLE_EQ(capability_retention(params, &empty, probes), base);
  EXPECT_DOUBLE_EQ(base, greedy_exact_match(params, probes, Vocab::kEos));
  const auto strong = build_diff_means_plan(params, ds, HeadSelection{all_heads(params.config()), 1.0}, 10.0);
  const double r = capability_retention(params, &strong, probes);
  EXPECT_GE(r, 0.0);
  EXPECT_LE(r, 1.0);
}

TEST(ActivationStats, PlansMatchDirectBuild) {
  const auto params = testutil::tiny_params();
  const auto ds = gen_mode_switch(8, 2, Split::kHeldIn);
  const auto stats = compute_activation_stats(params, ds, {});
  const HeadSelection h{{{1, 1}, {0, 0}}, 0.5};
  for (const auto m : {SteerMethod::kMean, SteerMethod::kDiffMeans}) {
    const auto a = plan_from_stats(params.config(), stats, m, h, 3.0);
    const auto b = m == SteerMethod::kMean ? build_mean_plan(params, ds, h, 3.0) : build_diff_means_plan(params, ds, h, 3.0);
    EXPECT_EQ(a.positions, b.positions);
    EXPECT_EQ(a.heads, b.heads);
    EXPECT_EQ(a.vectors, b.vectors);
  }
}

TEST(Output, GridCsvRoundTrip) {
  std::vector<GridCellResult> cells{cell(1, 0.01, 0.5), cell(10, 1.0, 0.0, LocalizerMethod::kRandom)};
  cells[1].steerer = SteerMethod::kReft;
  cells[1].split = Split::kHeldOut;
  cells[1].seed = 2;
  auto failed = cell(3, 0.5, 0.0);
  failed.error = "boom";
  cells.push_back(failed);
  const auto text = grid_to_csv(cells);
  EXPECT_EQ(text.substr(0, text.find('\n')), "localizer,steerer,alpha,k,split,seed,n,success_rate");
  const auto back = grid_from_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(grid_to_csv(back), text);
  EXPECT_EQ(back[1].split, Split::kHeldOut);
  EXPECT_EQ(back[1].steerer, SteerMethod::kReft);
  EXPECT_DOUBLE_EQ(back[0].k, 0.01);
  EXPECT_THROW(grid_from_csv("localizer,steerer\nx,y\n"), ParseError);
  EXPECT_EQ(format_number(0.01), "0.01");
  EXPECT_EQ(format_number(10.0), "10");
}

TEST(Output, StatsJsonAndSvg) {
  ComparisonResult r;
  r.name = "act_patch>random@diff_means";
  r.n_pairs = 120;
  r.raw_p = 1e-6;
  r.fdr_p = 2e-6;
  r.reject = true;
  ComparisonResult d;
  d.name = "x>y@mean";
  d.degenerate = true;
  d.raw_p = d.fdr_p = std::nan("");
  const auto j = nlohmann::json::parse(stats_to_json({r, d}));
  ASSERT_TRUE(j.is_array());
  EXPECT_EQ(j[0]["comparison"], r.name);
  EXPECT_EQ(j[0]["n_pairs"], 120);
  EXPECT_DOUBLE_EQ(j[0]["raw_p"].get<double>(), 1e-6);
  EXPECT_TRUE(j[0]["reject"].get<bool>());
  EXPECT_TRUE(j[1]["raw_p"].is_null());
  EXPECT_FALSE(j[1]["reject"].get<bool>());

  std::vector<GridCellResult> cells{cell(1, 0.01, 0.5), cell(2, 0.01, 1.0), cell(1, 0.01, 0.2, LocalizerMethod::kRandom)};
  const auto svg = grid_to_svg(cells);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("act_patch / diff_means"), std::string::npos);
  EXPECT_NE(svg.find("random / diff_means"), std::string::npos);
}
