#include <gtest/gtest.h>

#include <random>

#include "steerscope/ablation.hpp"
#include "steerscope/svv.hpp"

using namespace steerscope;

namespace {

ModelConfig cfg(int layers = 3) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab = 16;
  c.max_seq = 20;
  return c;
}

SteeringVector vec(int layer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 2.0);
  SteeringVector v;
  v.values = Tensor(Shape{8});
  for (auto& x : v.values.values()) x = dist(rng);
  v.layer = layer;
  return v;
}

const std::vector<int> kPrompt{1, 5, 9, 3, 7};

}  // namespace

TEST(Ablation, ZeroAlphaMatchesUnsteered) {
  Model m = Model::init(cfg(), 1);
  auto v = vec(1, 2);
  auto plain = generate_greedy(m, kPrompt, {}, 8, -1);
  std::vector<int> gen(plain.begin() + static_cast<long>(kPrompt.size()), plain.end());
  for (auto k : all_ablations()) EXPECT_EQ(generate_ablated(m, kPrompt, v, 0.0, {k, -1}, 8, -1).tokens, gen);
}

TEST(Ablation, NoneMatchesSteered) {
  Model m = Model::init(cfg(), 1);
  auto v = vec(1, 2);
  auto plain = generate_greedy(m, kPrompt, v.intervention(3.0), 8, -1);
  std::vector<int> gen(plain.begin() + static_cast<long>(kPrompt.size()), plain.end());
  EXPECT_EQ(generate_ablated(m, kPrompt, v, 3.0, {AblationKind::none, -1}, 8, -1).tokens, gen);
}

TEST(Ablation, FreezesMatchBaseBitwise) {
  Model m = Model::init(cfg(), 3);
  auto v = vec(1, 4);
  for (auto kind : {AblationKind::qk_freeze, AblationKind::ov_freeze}) {
    auto g = generate_ablated(m, kPrompt, v, 3.0, {kind, -1}, 5, -1, true);
    ASSERT_EQ(g.base_steps.size(), g.steered_steps.size());
    for (std::size_t step = 0; step < g.base_steps.size(); ++step) {
      const auto& b = g.base_steps[step];
      const auto& s = g.steered_steps[step];
      EXPECT_TRUE(b.embed == s.embed);
      for (std::size_t l = 1; l < 3; ++l)
        for (std::size_t h = 0; h < 2; ++h) {
          if (kind == AblationKind::qk_freeze) {
            EXPECT_TRUE(b.probs[l][h] == s.probs[l][h]);
          } else {
            EXPECT_TRUE(b.values[l][h] == s.values[l][h]);
            EXPECT_FALSE(b.probs[l][h] == s.probs[l][h]);
          }
        }
    }
  }
}

TEST(Ablation, SvvSubtractOnlyTouchesValueInputs) {
  Model m = Model::init(cfg(), 5);
  auto v = vec(0, 6);
  AblationSpec spec{AblationKind::svv_subtract, -1};
  auto base = run(m, kPrompt);
  auto iv = ablated_interventions(m, v, 2.0, spec, base.cache);
  auto sub = run(m, kPrompt, iv);
  auto steered = run(m, kPrompt, v.intervention(2.0));
  // The first layer sees identical q/k inputs; its values lose the steering term.
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_TRUE(sub.cache.attn_in[0][h][0] == steered.cache.attn_in[0][h][0]);
    EXPECT_TRUE(sub.cache.attn_in[0][h][1] == steered.cache.attn_in[0][h][1]);
    EXPECT_LT(max_abs_diff(sub.cache.probs[0][h], steered.cache.probs[0][h]), 1e-15);
  }
}

TEST(Ablation, SvvSubtractLeavesContextTermOnly) {
  Model m = Model::init(cfg(1), 7);
  auto v = vec(0, 8);
  const double alpha = 2.5;
  auto d = decompose_attention(m, kPrompt, 0, v.values, alpha);
  auto base = run(m, kPrompt);
  auto sub = run(m, kPrompt, ablated_interventions(m, v, alpha, {AblationKind::svv_subtract, -1}, base.cache));
  Tensor attn = sub.cache.head_out[0][0] + sub.cache.head_out[0][1];
  EXPECT_LT(max_abs_diff(attn, d.context), 1e-6);
}

TEST(Ablation, LayerBeyondDepthRejected) {
  Model m = Model::init(cfg(), 1);
  auto v = vec(1, 2);
  EXPECT_THROW(generate_ablated(m, kPrompt, v, 1.0, {AblationKind::qk_freeze, 3}, 2), ContractError);
}

TEST(Ablation, ParseNames) {
  for (auto k : all_ablations()) EXPECT_EQ(parse_ablation(to_string(k)), k);
  EXPECT_THROW(parse_ablation("qk"), InputError);
}

TEST(Report, NoneRowMatchesBehavior) {
  ModelConfig c = cfg();
  c.vocab = 64;
  c.max_seq = 48;
  Model m = Model::init(c, 9);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> dist(0.0, 3.0);
  SteeringVector v;
  v.values = Tensor(Shape{8});
  for (auto& x : v.values.values()) x = dist(rng);
  v.layer = 1;
  Corpus corpus = generate_corpus(2, SplitCounts{6, 2, 6});
  auto harm = corpus.select(Split::test, Label::harmful);
  auto safe = corpus.select(Split::test, Label::harmless);
  std::vector<std::vector<int>> hp, sp;
  for (auto* r : harm) hp.push_back(r->prompt);
  for (auto* r : safe) sp.push_back(r->prompt);
  auto kinds = all_ablations();
  auto rows = ablation_report(m, hp, sp, v, 2.0, kinds);
  ASSERT_EQ(rows.size(), kinds.size());
  EXPECT_EQ(rows[0].kind, AblationKind::none);
  EXPECT_EQ(rows[0].induce_change, 0.0);
  EXPECT_EQ(rows[0].bypass_change, 0.0);
  auto induce = evaluate_behavior(m, safe, v.intervention(2.0));
  auto bypass = evaluate_behavior(m, harm, v.intervention(-2.0));
  EXPECT_DOUBLE_EQ(rows[0].induce, 1.0 - induce.harmless);
  EXPECT_DOUBLE_EQ(rows[0].bypass, bypass.harmful);
}
