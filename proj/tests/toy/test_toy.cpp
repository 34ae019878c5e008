// Checks on the trained toy checkpoint (path in GCM_TOY).

#include <gtest/gtest.h>

#include <cstdlib>

#include "gcm/checkpoint.hpp"
#include "gcm/data.hpp"
#include "gcm/hash.hpp"
#include "gcm/judge.hpp"
#include "gcm/localize.hpp"
#include "gcm/steer.hpp"
#include "helpers.hpp"

using namespace gcm;

namespace {

const ModelParams& toy() {
  static const ModelParams p = [] {
    const char* path = std::getenv("GCM_TOY");
    if (!path) throw std::runtime_error("GCM_TOY is not set");
    return load_checkpoint(path);
  }();
  return p;
}

const TaskDataset& held_in() {
  static const TaskDataset ds = gen_mode_switch(50, 1, Split::kHeldIn);
  return ds;
}

}  // namespace

// Same validation slice `gcm train` stops on (default seed 1, 200 examples).
TEST(Toy, ValidationExactMatch) {
  const auto validation = gen_training_corpus(150, 50, derive_seed(1, "validation"));
  EXPECT_GE(greedy_exact_match(toy(), validation, Vocab::kEos), 0.99);
}

TEST(Toy, ModeAPromptsFollowModeA) {
  std::size_t ok = 0, ok_b = 0;
  for (const auto& p : held_in().pairs) {
    ok += judge_response(p.p_orig, generate_unsteered(toy(), p.p_orig), {}, Vocab::kModeA).success;
    ok_b += judge_response(p.p_contrast, generate_unsteered(toy(), p.p_contrast), {}, Vocab::kModeB).success;
  }
  EXPECT_GE(ok, 48u);  // 95% of 50
  EXPECT_GE(ok_b, 48u);
}

TEST(Toy, ActivationPatchingMatchesOracle) {
  const auto m = testutil::to_ref(toy());
  double worst = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& pair = held_in().pairs[i];
    for (const HeadId id : all_heads(toy().config())) {
      const double want = ref::indirect_effect(m, testutil::to_ref(pair), id.layer, id.head, false);
      worst = std::max(worst, std::abs(ie_activation_patch(toy(), pair, id) - want));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Toy, TopHeadsPatchedJointlyFlipOutput) {
  const auto table = rank_activation_patching(toy(), held_in());
  const auto sel = select_top_k(table, 0.05);
  std::size_t flipped = 0;
  for (const auto& p : held_in().pairs) {
    const Trace c = forward_with_cache(toy(), p.p_contrast);
    InterventionSpec spec;
    for (const HeadId id : sel.heads) {
      for (std::size_t t = 0; t < p.p_orig.size(); ++t) {
        const auto z = c.cache.at(id, t);
        spec.patches.push_back({id, t, std::vector<float>(z.begin(), z.end()), PatchMode::kReplace, 1.0f});
      }
    }
    const auto r = greedy_generate(toy(), p.p_orig, spec, toy().config().max_seq_len - p.p_orig.size(), Vocab::kEos);
    flipped += judge_response(p.p_orig, r, {}).concept_pass;
  }
  EXPECT_GE(flipped, 40u) << "heads " << sel.heads.size();
}

TEST(Toy, ReftControlRunStaysNearFrozenLoss) {
  // Targets equal to r_orig: the edit has nothing to change.
  std::vector<Example> examples;
  for (const auto& p : held_in().pairs) examples.push_back({p.p_orig, p.r_orig});
  const auto table = rank_activation_patching(toy(), held_in());
  const auto rep = train_reft(toy(), examples, select_top_k(table, 0.25).heads);
  EXPECT_NEAR(rep.loss_curve.back(), rep.frozen_nll, 0.05 * rep.frozen_nll)
      << "initial " << rep.loss_curve.front();
}
