#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "steerscope/ops.hpp"
#include "steerscope/steering.hpp"

using namespace steerscope;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab = 24;
  c.max_seq = 32;
  return c;
}

Tensor random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  Tensor t(Shape{n});
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

std::vector<std::vector<int>> prompts_a() { return {{0, 14, 15, 3, 16, 1}, {0, 17, 3, 18, 19, 1}}; }
std::vector<std::vector<int>> prompts_b() { return {{0, 14, 15, 16, 17, 1}, {0, 20, 21, 22, 1}, {0, 23, 14, 1}}; }

}  // namespace

TEST(Dim, HandMeans) {
  std::vector<Tensor> harm{Tensor::vector({1, 2}), Tensor::vector({3, 4})};
  std::vector<Tensor> safe{Tensor::vector({0, 0}), Tensor::vector({2, 2})};
  EXPECT_EQ(mean_difference(harm, safe), Tensor::vector({1, 2}));
  std::vector<Tensor> one_a{Tensor::vector({5, -1})}, one_b{Tensor::vector({2, 2})};
  EXPECT_EQ(mean_difference(one_a, one_b), Tensor::vector({3, -3}));
  EXPECT_THROW(mean_difference(std::vector<Tensor>{}, safe), ContractError);
}

TEST(Dim, IdenticalDatasetsGiveZero) {
  Model m = Model::init(small_config(), 1);
  auto a = prompts_a();
  auto v = dim_vector(m, a, a, 1, -1);
  for (double x : v.values.values()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(v.method, Method::DIM);
  EXPECT_EQ(v.layer, 1);
}

TEST(Dim, Antisymmetric) {
  Model m = Model::init(small_config(), 2);
  auto a = prompts_a(), b = prompts_b();
  for (int pos : {-1, -2, -4}) {
    auto ab = dim_vector(m, a, b, 1, pos);
    auto ba = dim_vector(m, b, a, 1, pos);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(ab.values[i], -ba.values[i]);
  }
}

TEST(Dim, MatchesCachedResidual) {
  Model m = Model::init(small_config(), 3);
  auto a = prompts_a();
  auto rows = residuals_at(m, a, 1, -2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto r = run(m, a[i]);
    auto expect = r.cache.resid_in[1].row(a[i].size() - 2);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(rows[i][j], expect[j], 1e-12);
  }
}

TEST(Dim, PositionOutOfRangeRejected) {
  Model m = Model::init(small_config(), 4);
  auto a = prompts_a(), b = prompts_b();
  EXPECT_THROW(dim_vector(m, a, b, 0, -5), ContractError);
  EXPECT_THROW(dim_vector(m, a, std::vector<std::vector<int>>{}, 0, -1), ContractError);
}

TEST(RefusalMetric, Examples) {
  std::vector<double> half{0.5, 0.5};
  EXPECT_NEAR(refusal_metric(half, std::vector<int>{0}), 0.0, 1e-15);
  std::vector<double> p{0.8, 0.2};
  EXPECT_NEAR(refusal_metric(p, std::vector<int>{0}), std::log(4.0), 1e-12);
  EXPECT_NEAR(refusal_metric(p, std::vector<int>{0}), 1.3863, 1e-4);
  EXPECT_NEAR(refusal_metric(p, std::vector<int>{0, 1}), std::log((1 - 1e-12) / 1e-12), 1e-3);
}

TEST(RefusalMetric, StrictlyIncreasing) {
  double prev = -INFINITY;
  for (double x = 0.01; x < 1.0; x += 0.01) {
    std::vector<double> p{x, 1 - x};
    const double v = refusal_metric(p, std::vector<int>{0});
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(DirectionalAblation, Examples) {
  EXPECT_EQ(directional_ablation(Tensor::vector({1, 1}), Tensor::vector({1, 0})), Tensor::vector({0, 1}));
  auto orth = directional_ablation(Tensor::vector({0, 3}), Tensor::vector({2, 0}));
  EXPECT_EQ(orth, Tensor::vector({0, 3}));
  auto par = directional_ablation(Tensor::vector({2, 4}), Tensor::vector({1, 2}));
  for (double v : par.values()) EXPECT_NEAR(v, 0.0, 1e-15);
  EXPECT_THROW(directional_ablation(Tensor::vector({1, 1}), Tensor::vector({0, 0})), ContractError);
}

TEST(DirectionalAblation, OrthogonalProperty) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor h = random_vector(16, seed), s = random_vector(16, seed + 1000);
    Tensor out = directional_ablation(h, s);
    const double hn = std::sqrt(dot(h.values(), h.values()));
    const double sn = std::sqrt(dot(s.values(), s.values()));
    EXPECT_LT(std::abs(dot(out.values(), s.values())) / sn, 1e-10 * hn);
  }
}

TEST(Selection, LayerConstraintAndArgmin) {
  SelectionConfig cfg;
  std::vector<SelectionScores> table(3);
  table[0] = {0, -1, -2.0, 1.0, 0.01};
  table[1] = {1, -1, -3.0, 2.0, 0.01};
  table[2] = {4, -1, -9.0, 9.0, 0.0};  // ℓ = 4 ≥ 0.8·5
  const auto best = choose_candidate(table, 5, cfg);
  EXPECT_EQ(best, 1u);
  EXPECT_FALSE(table[2].feasible);
}

TEST(Selection, ObjectiveArgmin) {
  SelectionConfig cfg;
  auto logit = [](double p) { return std::log(p / (1 - p)); };
  std::vector<SelectionScores> table(2);
  table[0] = {0, -1, logit(0.9), logit(0.6), 0.0};   // objective 0.30
  table[1] = {1, -2, logit(0.95), logit(0.6), 0.0};  // objective 0.35
  EXPECT_EQ(choose_candidate(table, 4, cfg), 0u);
  EXPECT_NEAR(table[0].objective, 0.3, 1e-12);
  EXPECT_NEAR(table[1].objective, 0.35, 1e-12);
}

TEST(Selection, AllFilteredThrowsWithTable) {
  SelectionConfig cfg;
  std::vector<SelectionScores> table(2);
  table[0] = {0, -1, 0.0, -1.0, 0.0};  // induce ≤ 0
  table[1] = {0, -2, 0.0, 1.0, 0.5};   // kl too large
  try {
    choose_candidate(table, 4, cfg);
    FAIL();
  } catch (const SelectionError& e) {
    EXPECT_EQ(e.table().size(), 2u);
    EXPECT_EQ(e.kind(), ErrorKind::selection);
  }
}

TEST(Steering, OppositeCoefficientsDifferByTwoAlphaS) {
  Model m = Model::init(small_config(), 5);
  Tensor s = random_vector(8, 6);
  std::vector<int> toks{0, 14, 15, 16, 1};
  const double alpha = 0.7;
  auto plus = run(m, toks, InterventionSet::steer(1, s, alpha));
  auto minus = run(m, toks, InterventionSet::steer(1, s, -alpha));
  for (std::size_t i = 0; i < toks.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(plus.cache.resid_in[1].at(i, j) - minus.cache.resid_in[1].at(i, j), 2 * alpha * s[j], 1e-12);
}

TEST(Po, HandExample) {
  const double beta = po_beta(-1.0, -2.0, 0.02);
  EXPECT_EQ(beta, 1.0);
  const double loss = po_pair_loss(-1.0, -2.0, 1, 1, beta);
  EXPECT_NEAR(loss, -std::log(1.0 / (1.0 + std::exp(-1.0))), 1e-12);
  EXPECT_NEAR(loss, 0.3133, 1e-4);
  // Large positive reference gap engages the φ scaling.
  EXPECT_NEAR(po_beta(-200.0, -10.0, 0.02), 3.8, 1e-12);
  EXPECT_NEAR(po_beta(-10.0, -200.0, 0.02), 1.0, 1e-12);
  EXPECT_THROW(po_beta(0, 0, 0.0), ContractError);
}

TEST(Po, DegeneratePairIsLogTwo) {
  Model m = Model::init(small_config(), 7);
  std::vector<PoExample> data{{{0, 14, 15, 1}, {4, 6, 2}, {4, 6, 2}}};
  const double l = po_loss(m, data, 0, 1.0, random_vector(8, 8), 0.02);
  // β⁺ = 1 since the reference gap is zero.
  EXPECT_NEAR(l, std::log(2.0), 1e-12);
}

TEST(Ntp, SingleTokenLossMatchesForward) {
  Model m = Model::init(small_config(), 9);
  std::vector<int> prompt{0, 14, 15, 16, 1};
  std::vector<NtpExample> data{{prompt, {4}}};
  Tensor v = random_vector(8, 10);
  const double loss = ntp_loss(m, data, 1, 1.0, v);
  Tensor logits = run_logits(m, prompt, InterventionSet::steer(1, v, 1.0));
  auto row = logits.row(prompt.size() - 1);
  double mx = row[0];
  for (double x : row) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : row) z += std::exp(x - mx);
  EXPECT_NEAR(loss, -(row[4] - mx - std::log(z)), 1e-12);
}

TEST(Ntp, ZeroEpochsReturnZeros) {
  Model m = Model::init(small_config(), 11);
  std::vector<NtpExample> data{{{0, 14, 15, 1}, {4, 6, 2}}};
  auto r = train_ntp(m, data, data, 1, 1.0, {1e-2, 0, 4, 1});
  for (double x : r.vector.values.values()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(r.vector.method, Method::NTP);
  std::vector<PoExample> po{{{0, 14, 15, 1}, {4, 6, 2}, {5, 14, 2}}};
  auto p = train_po(m, po, po, 1, 1.0, {1e-2, 0, 4, 1});
  for (double x : p.vector.values.values()) EXPECT_EQ(x, 0.0);
}

TEST(Ntp, TrainingReducesLossAndLeavesModelUntouched) {
  Model m = Model::init(small_config(), 12);
  const auto before = m.checksum();
  std::vector<NtpExample> data{{{0, 14, 15, 1}, {4, 6, 2}}, {{0, 16, 17, 18, 1}, {4, 6, 2}}};
  auto r = train_ntp(m, data, data, 0, 1.0, {5e-2, 30, 2, 3});
  EXPECT_LT(r.val_loss[static_cast<std::size_t>(r.best_epoch)], r.val_loss[0]);
  EXPECT_NEAR(ntp_loss(m, data, 0, 1.0, r.vector.values), r.val_loss[static_cast<std::size_t>(r.best_epoch)], 1e-12);
  std::vector<PoExample> po{{{0, 14, 15, 1}, {4, 6, 2}, {5, 14, 2}}, {{0, 16, 17, 18, 1}, {4, 6, 2}, {5, 17, 2}}};
  auto p = train_po(m, po, po, 0, 1.0, {5e-2, 30, 2, 3, 0.02});
  EXPECT_LT(p.val_loss[static_cast<std::size_t>(p.best_epoch)], p.val_loss[0]);
  EXPECT_EQ(m.checksum(), before);
}

TEST(Ntp, GradientMatchesFiniteDifference) {
  Model m = Model::init(small_config(), 13);
  std::vector<NtpExample> data{{{0, 14, 15, 1}, {4, 6, 2}}};
  Tensor v = random_vector(8, 14);
  const double h = 1e-6;
  Tape tape;
  Var vv = tape.leaf(v, true);
  std::vector<std::vector<int>> seqs{{0, 14, 15, 1, 4, 6}};
  std::vector<int> targets{-1, -1, -1, 4, 6, 2};
  auto b = bind(tape, m, false);
  ForwardOptions opt;
  opt.steer_direction = vv;
  auto iv = InterventionSet::steer(1, Tensor(Shape{8}), 1.0);
  Var loss = ops::cross_entropy_rows(forward(tape, b, seqs, iv, opt).logits, targets);
  tape.backward(loss);
  EXPECT_NEAR(loss.value().item(), ntp_loss(m, data, 1, 1.0, v), 1e-12);
  for (std::size_t j = 0; j < 8; ++j) {
    Tensor vp = v, vm = v;
    vp[j] += h;
    vm[j] -= h;
    const double fd = (ntp_loss(m, data, 1, 1.0, vp) - ntp_loss(m, data, 1, 1.0, vm)) / (2 * h);
    EXPECT_NEAR(vv.grad()[j], fd, 1e-6 * (1 + std::abs(fd)));
  }
}
