#include <gtest/gtest.h>

#include <random>

#include "steerscope/svv.hpp"

using namespace steerscope;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab = 16;
  c.max_seq = 16;
  return c;
}

Tensor randn(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t(Shape{n});
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

std::vector<int> rand_tokens(std::mt19937_64& rng, int vocab, int max_len) {
  std::uniform_int_distribution<int> len(1, max_len), tok(0, vocab - 1);
  std::vector<int> t(static_cast<std::size_t>(len(rng)));
  for (auto& x : t) x = tok(rng);
  return t;
}

}  // namespace

TEST(Svv, ZeroVector) {
  Model m = Model::init(small(), 1);
  auto s = compute_svv(m, Tensor(Shape{8}, 0.0), 1, 0);
  for (double x : s.values.values()) EXPECT_EQ(x, 0.0);
}

TEST(Svv, HandProduct) {
  HeadWeights h;
  h.w_v = Tensor::matrix(2, 1, {1.0, 0.0});
  h.w_o = Tensor::matrix(2, 1, {0.0, 1.0});
  h.w_q = h.w_k = h.w_v;
  auto svv = compute_svv(Tensor::vector({1.0, 2.0}), Tensor::vector({1.0, 1.0}), h);
  EXPECT_DOUBLE_EQ(svv[0], 0.0);
  EXPECT_DOUBLE_EQ(svv[1], 1.0);
  EXPECT_THROW(compute_svv(Tensor::vector({1.0}), Tensor::vector({1.0, 1.0}), h), DimensionError);
}

TEST(Svv, BilinearInGammaAndSteering) {
  Model m = Model::init(small(), 2);
  std::mt19937_64 rng(3);
  const auto& head = m.layers[1].heads[1];
  const Tensor g = m.layers[1].attn_gamma;
  Tensor s1 = randn(8, rng), s2 = randn(8, rng);
  Tensor base = compute_svv(s1, g, head);
  Tensor scaled = compute_svv(s1, g * 2.5, head);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(scaled[i], 2.5 * base[i], 1e-12);
  Tensor combo = compute_svv(s1 * 0.7 + s2 * -1.3, g, head);
  Tensor expect = compute_svv(s1, g, head) * 0.7 + compute_svv(s2, g, head) * -1.3;
  EXPECT_LT(max_abs_diff(combo, expect), 1e-10);
}

TEST(Decomposition, ExactOnRandomDraws) {
  Model m = Model::init(small(), 4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> alpha(-4.0, 4.0);
  for (int layer = 0; layer < 3; ++layer)
    for (int draw = 0; draw < 100; ++draw) {
      auto toks = rand_tokens(rng, 16, 16);
      EXPECT_LT(verify_decomposition(m, toks, layer, randn(8, rng, 2.0), alpha(rng)), 1e-6);
    }
}

TEST(Decomposition, ZeroAlphaHasNoSteeringTerm) {
  Model m = Model::init(small(), 4);
  std::mt19937_64 rng(6);
  auto toks = rand_tokens(rng, 16, 10);
  auto d = decompose_attention(m, toks, 1, randn(8, rng), 0.0);
  for (double x : d.steering.values()) EXPECT_EQ(x, 0.0);
  auto base = run(m, toks);
  Tensor attn = base.cache.head_out[1][0] + base.cache.head_out[1][1];
  EXPECT_LT(max_abs_diff(d.context, attn), 1e-10);
  EXPECT_LT(d.residual, 1e-10);
}

TEST(Decomposition, SinglePositionHand) {
  Model m = Model::init(small(), 7);
  std::mt19937_64 rng(8);
  Tensor s = randn(8, rng);
  const double alpha = 1.7;
  const std::vector<int> toks{5};
  auto d = decompose_attention(m, toks, 0, s, alpha);
  const auto& lw = m.layers[0];
  std::vector<double> x(8);
  double ss = 0.0;
  for (std::size_t j = 0; j < 8; ++j) {
    x[j] = m.embed.at(5, j) + m.pos.at(0, j) + alpha * s[j];
    ss += x[j] * x[j];
  }
  const double c = 1.0 / std::sqrt(ss / 8.0 + m.config.norm_eps);
  Tensor expect(Shape{1, 8}, 0.0);
  for (const auto& h : lw.heads) {
    Tensor ov = ov_matrix(h);
    for (std::size_t k = 0; k < 8; ++k)
      for (std::size_t j = 0; j < 8; ++j) expect[k] += c * x[j] * lw.attn_gamma[j] * ov.at(j, k);
  }
  EXPECT_LT(max_abs_diff(d.direct, expect), 1e-10);
  EXPECT_LT(max_abs_diff(d.context + d.steering, expect), 1e-10);
}

TEST(Lens, ZeroAndScaling) {
  Model m = Model::init(small(), 9);
  auto z = lens_logits(m, Tensor(Shape{8}, 0.0));
  for (double x : z.values()) EXPECT_EQ(x, 0.0);
  std::mt19937_64 rng(10);
  Tensor v = randn(8, rng);
  auto a = logit_lens(m, v, 16), b = logit_lens(m, v * 3.5, 16);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(a.top[i].token, b.top[i].token);
  for (std::size_t i = 1; i < a.top.size(); ++i) EXPECT_GE(a.top[i - 1].logit, a.top[i].logit);
  EXPECT_EQ(logit_lens(m, v, 3).top.size(), 3u);
  EXPECT_THROW(logit_lens(m, v, 0), ContractError);
}

TEST(Lens, UnembeddingColumnSelectsItsToken) {
  Model m = Model::init(ModelConfig{}, 11);
  const Tensor u = m.unembedding();
  const std::size_t d = u.rows(), V = u.cols();
  int checked = 0;
  for (std::size_t t = 0; t < V; ++t) {
    Tensor col(Shape{d});
    for (std::size_t j = 0; j < d; ++j) col[j] = u.at(j, t);
    // Gram check: the column's own inner product dominates.
    const Tensor logits = lens_logits(m, col);
    bool dominant = true;
    for (std::size_t o = 0; o < V; ++o) dominant = dominant && (o == t || logits[o] < logits[t]);
    if (!dominant) continue;
    ++checked;
    EXPECT_EQ(logit_lens(m, col, 1).top[0].token, static_cast<int>(t));
  }
  EXPECT_GT(checked, 0);
}

TEST(Report, SumAndNegationRows) {
  Model m = Model::init(small(), 12);
  std::mt19937_64 rng(13);
  Tensor s = randn(8, rng);
  std::vector<std::pair<int, int>> heads{{1, 0}, {2, 1}};
  auto rows = svv_report(m, s, 1, heads, 16);
  ASSERT_EQ(rows.size(), 1u + 2 * heads.size() + 1u);
  EXPECT_EQ(rows.front().source, "vector");
  EXPECT_EQ(rows[1].source, "a1.0");
  EXPECT_EQ(rows[2].source, "(-)a1.0");
  EXPECT_EQ(rows.back().source, "SUM");
  Tensor sum(Shape{8}, 0.0);
  for (int l = 1; l < 3; ++l)
    for (int h = 0; h < 2; ++h) sum += compute_svv(m, s, l, h).values;
  auto lens = logit_lens(m, sum, 16);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(rows.back().top[i].token, lens.top[i].token);
    EXPECT_DOUBLE_EQ(rows.back().top[i].logit, lens.top[i].logit);
  }
  auto pos = lens_logits(m, compute_svv(m, s, 1, 0).values);
  auto neg = lens_logits(m, compute_svv(m, s, 1, 0).values * -1.0);
  for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_EQ(neg[i], -pos[i]);
  EXPECT_THROW(svv_report(m, s, 1, std::vector<std::pair<int, int>>{}, 5), ContractError);
}

TEST(Report, TopHeadsByNodeScore) {
  IEStore store;
  store.node_scores[NodeId::attn(1, 0)] = 0.5;
  store.node_scores[NodeId::attn(1, 1)] = -2.0;
  store.node_scores[NodeId::attn(2, 0)] = 1.0;
  store.node_scores[NodeId::mlp(1)] = 9.0;
  auto h = top_heads(store, 2);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0], std::make_pair(1, 1));
  EXPECT_EQ(h[1], std::make_pair(2, 0));
}
