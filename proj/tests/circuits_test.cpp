#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "steerscope/circuits.hpp"

using namespace steerscope;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab = 16;
  c.max_seq = 16;
  return c;
}

SteeringVector vec(int layer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  SteeringVector v;
  v.values = Tensor(Shape{8});
  for (auto& x : v.values.values()) x = dist(rng);
  v.layer = layer;
  return v;
}

std::vector<FaithSample> fsamples(const Model& m, const SteeringVector& v, double alpha) {
  std::vector<FaithSample> out;
  const std::vector<std::vector<int>> prompts{{1, 5, 9, 3}, {2, 8, 6}, {4, 4, 13, 10, 1}};
  for (const auto& p : prompts) {
    auto resp = generate_greedy_batch(m, std::vector<std::vector<int>>{p}, v.intervention(alpha), 6, -1)[0];
    out.push_back(prepare_faith_sample(m, p, resp, v, alpha));
  }
  return out;
}

bool reachability_closed(const Circuit& c) {
  auto pruned = prune_unreachable(c.edges, c.steer_layer);
  return pruned.size() == c.edges.size();
}

const EdgeId e_rl{NodeId::steer_resid(0), NodeId::logits(), Channel::in};
const EdgeId e_rq{NodeId::steer_resid(0), NodeId::attn(0, 0), Channel::q};
const EdgeId e_al{NodeId::attn(1, 0), NodeId::logits(), Channel::in};
const EdgeId e_a0l{NodeId::attn(0, 0), NodeId::logits(), Channel::in};

}  // namespace

TEST(Build, DanglingThirdEdgeIsSkipped) {
  auto g = enumerate_graph(2, 1, 0);
  std::vector<double> scores(g.steered_edges.size(), 0.0);
  auto set = [&](const EdgeId& e, double s) { scores[g.steered_index(e)] = s; };
  set(e_rl, 4.0);
  set(e_rq, -3.0);
  set(e_al, 2.0);
  set(e_a0l, 1.0);
  auto c = build_circuit(g.steered_edges, scores, 0, 3);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.edges[0], e_rl);
  EXPECT_EQ(c.edges[1], e_rq);
  EXPECT_EQ(c.edges[2], e_a0l);
  EXPECT_FALSE(c.contains(e_al));
}

TEST(Build, Endpoints) {
  auto g = enumerate_graph(2, 2, 0);
  std::vector<double> scores(g.steered_edges.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = std::sin(static_cast<double>(i));
  EXPECT_EQ(build_circuit(g.steered_edges, scores, 0, 0).size(), 0u);
  auto full = build_circuit(g.steered_edges, scores, 0, g.steered_edges.size());
  EXPECT_EQ(full.edge_set(), std::set<EdgeId>(g.steered_edges.begin(), g.steered_edges.end()));
  EXPECT_THROW(build_circuit(g.steered_edges, scores, 0, g.steered_edges.size() + 1), CircuitError);
}

TEST(Build, ClosedAndNested) {
  auto g = enumerate_graph(3, 2, 1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Circuit prev;
    for (std::size_t n = 1; n <= g.steered_edges.size(); n += 3) {
      auto c = random_circuit(g, n, seed);
      EXPECT_GE(c.size(), n);
      EXPECT_TRUE(reachability_closed(c));
      for (const auto& e : prev.edges) EXPECT_TRUE(c.contains(e));
      prev = c;
    }
  }
}

TEST(Build, TieBreakByEdgeName) {
  auto g = enumerate_graph(1, 1, 0);
  std::vector<double> scores(g.steered_edges.size(), 1.0);
  auto order = rank_edges(g.steered_edges, scores);
  for (std::size_t i = 1; i < order.size(); ++i)
    EXPECT_LT(g.steered_edges[order[i - 1]].str(), g.steered_edges[order[i]].str());
  scores[3] = -2.0;
  EXPECT_EQ(rank_edges(g.steered_edges, scores)[0], 3u);
  EXPECT_NE(rank_edges(g.steered_edges, scores, {.signed_rank = true})[0], 3u);
}

TEST(Build, PruningCanExhaustCandidates) {
  // Only edges into a head that never reaches the logits.
  std::vector<EdgeId> edges{e_rq, {NodeId::steer_resid(0), NodeId::attn(0, 0), Channel::k}};
  std::vector<double> scores{1.0, 0.5};
  try {
    build_circuit(edges, scores, 0, 1);
    FAIL();
  } catch (const CircuitError& e) {
    EXPECT_EQ(e.max_attainable(), 0u);
  }
}

TEST(Faithfulness, Endpoints) {
  Model m = Model::init(tiny(), 5);
  for (int layer : {0, 1}) {
    auto v = vec(layer, 3);
    auto samples = fsamples(m, v, 4.0);
    auto g = enumerate_graph(m.config, layer);
    Circuit full;
    full.steer_layer = layer;
    full.edges = g.steered_edges;
    Circuit empty;
    empty.steer_layer = layer;
    auto f1 = faithfulness(m, full, samples, v);
    ASSERT_FALSE(f1.missing);
    EXPECT_NEAR(f1.value, 1.0, 1e-8);
    EXPECT_NEAR(faithfulness(m, empty, samples, v).value, 0.0, 1e-8);
    EXPECT_NEAR(faithfulness(m, complement(empty, g), samples, v).value, 1.0, 1e-8);
    EXPECT_NEAR(interchange_faithfulness(m, empty, v, samples).value, 0.0, 1e-8);
  }
}

TEST(Faithfulness, MissingWhenNothingFlips) {
  Model m = Model::init(tiny(), 5);
  auto v = vec(0, 3);
  auto samples = fsamples(m, v, 0.0);
  Circuit empty;
  auto r = faithfulness(m, empty, samples, v);
  EXPECT_TRUE(r.missing);
  EXPECT_EQ(r.positions, 0);
}

TEST(Faithfulness, InterchangeWithSelfMatches) {
  Model m = Model::init(tiny(), 5);
  auto v = vec(0, 3);
  auto samples = fsamples(m, v, 4.0);
  auto g = enumerate_graph(m.config, 0);
  auto c = random_circuit(g, 20, 1);
  EXPECT_EQ(interchange_faithfulness(m, c, v, samples).value, faithfulness(m, c, samples, v).value);
}

TEST(Faithfulness, MinFaithfulThresholds) {
  Model m = Model::init(tiny(), 5);
  auto v = vec(0, 3);
  auto samples = fsamples(m, v, 4.0);
  IEStore store;
  store.steer_layer = 0;
  store.edges = enumerate_graph(m.config, 0).steered_edges;
  for (std::size_t i = 0; i < store.edges.size(); ++i) store.edge_scores.push_back(std::cos(1.0 + i));
  const std::vector<double> grid{0.1, 0.5, 1.0};
  auto any = min_faithful_size(m, store, samples, v, grid, 0.0);
  // Threshold 0 accepts the smallest size unless its faithfulness is negative.
  ASSERT_EQ(any.curve.size(), 3u);
  if (any.curve[0].faith.value >= 0.0) EXPECT_EQ(any.index, 0u);
  auto none = min_faithful_size(m, store, samples, v, grid, 1.5);
  EXPECT_FALSE(none.index.has_value());
  EXPECT_NEAR(none.curve.back().faith.value, 1.0, 1e-8);
  const std::vector<double> bad{0.5, 0.1};
  EXPECT_THROW(min_faithful_size(m, store, samples, v, bad), ContractError);
}

TEST(Overlap, HandCases) {
  Circuit a, b, c;
  a.edges = {e_rl, e_rq, e_al};
  b.edges = {e_rq, e_al, e_a0l};
  c.edges = {e_a0l};
  EXPECT_DOUBLE_EQ(overlap(a, a), 1.0);
  EXPECT_DOUBLE_EQ(overlap(a, b), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(overlap(a, b), overlap(b, a));
  Circuit d;
  d.edges = {e_rl};
  EXPECT_DOUBLE_EQ(overlap(c, d), 0.0);
  EXPECT_THROW(overlap(a, Circuit{}), ContractError);
}

TEST(Distribution, SingleEdge) {
  Circuit c;
  c.edges = {e_rl};
  auto d = edge_distribution(c);
  EXPECT_DOUBLE_EQ(d.upstream_pct(0), 100.0);
  EXPECT_DOUBLE_EQ(d.downstream_pct(4), 100.0);
}

TEST(Distribution, HandTally) {
  Circuit c;
  c.edges = {e_rq, e_a0l, {NodeId::attn(0, 1), NodeId::mlp(0), Channel::in},
             {NodeId::mlp(0), NodeId::attn(1, 0), Channel::v}};
  auto d = edge_distribution(c);
  EXPECT_EQ(d.upstream, (std::array<std::size_t, 3>{1, 2, 1}));
  EXPECT_EQ(d.downstream, (std::array<std::size_t, 5>{1, 0, 1, 1, 1}));
  double su = 0, sd = 0;
  for (std::size_t i = 0; i < 3; ++i) su += d.upstream_pct(i);
  for (std::size_t i = 0; i < 5; ++i) sd += d.downstream_pct(i);
  EXPECT_NEAR(su, 100.0, 1e-12);
  EXPECT_NEAR(sd, 100.0, 1e-12);
  auto top = edge_distribution(c, 2);
  EXPECT_EQ(top.total, 2u);
  EXPECT_EQ(top.upstream[1], 1u);
  EXPECT_THROW(edge_distribution(c, 5), ContractError);
}

TEST(Serialization, CsvRoundTripAndDot) {
  auto g = enumerate_graph(2, 2, 0);
  auto c = random_circuit(g, 10, 4);
  const auto path = (std::filesystem::temp_directory_path() / "steerscope_circuit.csv").string();
  write_circuit_csv(path, c, 0.85);
  auto back = read_circuit_csv(path);
  EXPECT_EQ(back.edges, c.edges);
  EXPECT_EQ(back.requested, c.requested);
  EXPECT_EQ(back.source, c.source);
  std::filesystem::remove(path);
  auto dot = circuit_dot(c);
  EXPECT_EQ(dot.rfind("digraph", 0), 0u);
  EXPECT_NE(dot.find("\"resid0\""), std::string::npos);
}
