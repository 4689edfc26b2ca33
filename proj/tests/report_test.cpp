#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "steerscope/checkpoint.hpp"
#include "steerscope/pipeline.hpp"

using namespace steerscope;
namespace fs = std::filesystem;

namespace {

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunConfig tiny() {
  RunConfig c;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_model = 16;
  c.model.d_head = 8;
  c.model.d_ff = 32;
  c.corpus = {16, 4, 8};
  c.patch_samples = 2;
  return c;
}

}  // namespace

TEST(RunConfig, DefaultsRoundTrip) {
  RunConfig c;
  const auto text = serialize(c);
  EXPECT_EQ(serialize(parse_run_config(text)), text);
  EXPECT_EQ(parse_run_config("").taus.size(), default_tau_grid().size());
}

TEST(RunConfig, EditedValuesRoundTrip) {
  RunConfig c;
  c.seed = 18446744073709551615ULL;
  c.model.n_layers = 3;
  c.alpha = -0.1;
  c.fit_lr = 1.0 / 3.0;
  c.metric = MetricKind::dir_kl;
  c.taus = {kNegInf, 0.0, 0.2};
  c.ablations = {AblationKind::qk_freeze, AblationKind::mlp_subtract};
  c.size_grid = {0.1, 1.0};
  c.dim_positions = {-1};
  c.out_dir = "results/run 1";
  const auto text = serialize(c);
  const auto back = parse_run_config(text);
  EXPECT_EQ(serialize(back), text);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.fit_lr, c.fit_lr);
  EXPECT_EQ(back.alpha, -0.1);
  EXPECT_TRUE(std::isinf(back.taus[0]) && back.taus[0] < 0);
  EXPECT_EQ(back.metric, MetricKind::dir_kl);
  EXPECT_EQ(back.ablations.size(), 2u);
  EXPECT_EQ(back.out_dir, "results/run 1");
}

TEST(RunConfig, CommentsAndWhitespace) {
  auto c = parse_run_config("# header\n\n  seed=7   # trailing\nmodel.n_layers =  2\r\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.model.n_layers, 2);
}

TEST(RunConfig, Errors) {
  EXPECT_THROW(parse_run_config("nope = 1"), ConfigError);
  EXPECT_THROW(parse_run_config("seed = 1\nseed = 2"), ConfigError);
  EXPECT_THROW(parse_run_config("seed = x"), ConfigError);
  EXPECT_THROW(parse_run_config("seed"), ConfigError);
  EXPECT_THROW(parse_run_config("train.lr = 0.1.2"), ConfigError);
  EXPECT_THROW(parse_run_config("sparsify.taus = 0,abc"), ConfigError);
  EXPECT_THROW(parse_run_config("ablation.kinds = none,qk"), ConfigError);
  EXPECT_THROW(parse_run_config("patch.metric = l2"), ConfigError);
  EXPECT_THROW(parse_run_config("model.tie_embeddings = yes"), ConfigError);
  EXPECT_THROW(parse_run_config("steer.layer = 4"), ConfigError);
  EXPECT_THROW(parse_run_config("model.d_head = 3"), ConfigError);
  EXPECT_THROW(parse_run_config("circuit.size_grid = 0.5,0.1"), ConfigError);
  try {
    parse_run_config("seed = x");
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(RunConfig, KeysAreUnique) {
  auto keys = config_keys();
  std::set<std::string> uniq(keys.begin(), keys.end());
  EXPECT_EQ(uniq.size(), keys.size());
}

TEST(FormatDouble, RoundTrips) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> e(-300.0, 300.0);
  for (int i = 0; i < 2000; ++i) {
    const double x = std::pow(10.0, e(rng)) * (i % 2 ? -1.0 : 1.0);
    EXPECT_EQ(std::stod(format_double(x)), x);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
  EXPECT_EQ(format_double(kNegInf), "-inf");
}

TEST(Csv, QuotingAndWidth) {
  CsvTable t{{"a", "b"}, {}};
  t.add({"x,y", "say \"hi\""});
  EXPECT_EQ(t.str(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
  EXPECT_THROW(t.add({"only one"}), ContractError);
}

TEST(Csv, EmptySweepIsHeaderOnly) {
  SweepResult empty;
  EXPECT_EQ(sparsity_table(empty).str(), "vector,method,tau,k,sparsity_pct,class,seed,asr\n");
  EXPECT_EQ(iou_table(empty).str(), "tau,pair,support_a,support_b,overlap,iou,pvalue,defined\n");
}

TEST(Csv, SchemaColumnOrder) {
  EXPECT_EQ(first_line(train_loss_table({}, {}).str()), "step,loss,smoothed_loss");
  EXPECT_EQ(first_line(selection_table({}).str()), "layer,position,bypass,induce,kl,feasible,objective,selected");
  EXPECT_EQ(first_line(ie_edge_table("x", {}).str()), "vector,upstream,downstream,channel,score");
  EXPECT_EQ(first_line(faith_curve_table("x", {}).str()), "vector,fraction,requested,size,faithfulness,positions");
  EXPECT_EQ(first_line(circuits_table({}, 0).str()),
            "vector,size,total,fraction,faithfulness,complement_faithfulness");
  EXPECT_EQ(first_line(interchange_table({}).str()), "circuit,vector,kind,seed,size,faithfulness");
  EXPECT_EQ(first_line(ablation_table("x", {}).str()),
            "vector,ablation,induce,bypass,induce_change,bypass_change,avg_drop");
  EXPECT_EQ(first_line(svv_table("x", {}, {}).str()), "vector,source,rank,token,text,logit");
  EXPECT_EQ(first_line(distribution_table("x", {}).str()), "vector,side,category,count,pct");
}

TEST(Csv, DistributionRowsCoverEveryCategory) {
  Circuit c;
  c.edges.push_back({NodeId::steer_resid(0), NodeId::logits(), Channel::in});
  auto t = distribution_table("dim", edge_distribution(c));
  EXPECT_EQ(t.rows.size(), 8u);
}

TEST(Svg, StructureAndEscaping) {
  std::vector<Series> s{{"a<b", {0.0, 1.0}, {0.2, 0.9}}, {"c&d", {0.0, 1.0}, {0.5, std::nan("")}}};
  auto line = svg_line_chart(s, {"t\"1'", "x", "y", 0.0, 1.0, false});
  EXPECT_EQ(line.rfind("<?xml", 0), 0u);
  EXPECT_NE(line.find("</svg>"), std::string::npos);
  EXPECT_NE(line.find("a&lt;b"), std::string::npos);
  EXPECT_NE(line.find("c&amp;d"), std::string::npos);
  EXPECT_EQ(line.find("a<b"), std::string::npos);
  EXPECT_EQ(line.find("nan"), std::string::npos);
  EXPECT_EQ(line.find("href"), std::string::npos);
  auto heat = svg_heatmap({"r"}, {"c1", "c2"}, {{1.0, std::nan("")}}, {}, "h");
  EXPECT_NE(heat.find("</svg>"), std::string::npos);
  EXPECT_THROW(svg_heatmap({"r"}, {"c1"}, {{1.0, 2.0}}, {}, "h"), DimensionError);
  auto bars = svg_bar_chart({"a", "b"}, {{"s", {}, {0.5, -0.2}}}, {"t", "x", "y", 0.0, 1.0, true});
  EXPECT_NE(bars.find("<rect"), std::string::npos);
  EXPECT_THROW(svg_bar_chart({"a"}, {{"s", {}, {0.5, 0.1}}}, {}), DimensionError);
}

TEST(Checkpoint, IEStoreRoundTripBytes) {
  Model m = Model::init(tiny().model, 3);
  auto graph = enumerate_graph(m.config, 1);
  IEStore s;
  s.steer_layer = 1;
  s.edges = graph.steered_edges;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d;
  for (std::size_t i = 0; i < s.edges.size(); ++i) s.edge_scores.push_back(d(rng));
  for (const auto& n : graph.steered_nodes) s.node_scores[n] = d(rng);
  s.dims = Tensor(Shape{16});
  for (auto& x : s.dims.values()) x = d(rng);
  s.samples = 5;
  s.skipped = 1;
  s.positions_evaluated = 17;
  const auto bytes = encode(iestore_checkpoint(s));
  const auto back = iestore_from_checkpoint(decode(bytes));
  EXPECT_EQ(encode(iestore_checkpoint(back)), bytes);
  EXPECT_EQ(back.edges, s.edges);
  EXPECT_EQ(back.edge_scores, s.edge_scores);
  EXPECT_EQ(back.node_scores, s.node_scores);
  EXPECT_EQ(back.samples, 5);
  EXPECT_THROW(vector_from_checkpoint(decode(bytes)), InputError);
}

TEST(Stages, ZeroAlphaPatchIsZero) {
  RunConfig c = tiny();
  c.alpha = 0.0;
  Model m = Model::init(c.model, 1);
  Corpus corpus = make_corpus(c);
  SteeringVector v;
  v.values = Tensor(Shape{16}, 1.0);
  v.layer = 0;
  auto groups = patch_groups(c, m, corpus, v);
  EXPECT_EQ(groups.size(), 0u);
  for (bool oracle : {false, true}) {
    auto s = patch_scores(c, m, groups, v, oracle);
    EXPECT_EQ(s.samples, 0);
    EXPECT_EQ(s.edges.size(), enumerate_graph(c.model, 0).steered_edges.size());
    for (double x : s.edge_scores) EXPECT_EQ(x, 0.0);
    for (double x : s.dims.values()) EXPECT_EQ(x, 0.0);
  }
}

TEST(Stages, RandomCircuitSeedsFollowGlobalSeed) {
  RunConfig a = tiny(), b = tiny();
  b.seed = 1;
  EXPECT_EQ(random_circuit_seeds(a), random_circuit_seeds(a));
  EXPECT_NE(random_circuit_seeds(a), random_circuit_seeds(b));
  EXPECT_EQ(random_circuit_seeds(a).size(), 3u);
}

TEST(Stages, FixedLayerSelection) {
  RunConfig c = tiny();
  c.steer_layer = 1;
  Model m = Model::init(c.model, 2);
  auto sel = select_dim(c, m, make_corpus(c));
  EXPECT_EQ(sel.best.layer, 1);
  EXPECT_EQ(sel.best.method, Method::DIM);
}
