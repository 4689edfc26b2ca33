#include "steerscope/circuits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "steerscope/parallel.hpp"
#include "steerscope/rng.hpp"

namespace steerscope {

bool Circuit::contains(const EdgeId& e) const { return std::find(edges.begin(), edges.end(), e) != edges.end(); }

std::vector<EdgeId> prune_unreachable(std::span<const EdgeId> edges, int steer_layer) {
  const NodeId source = NodeId::steer_resid(steer_layer), sink = NodeId::logits();
  std::map<NodeId, std::vector<NodeId>> fwd, bwd;
  for (const auto& e : edges) {
    fwd[e.upstream].push_back(e.downstream);
    bwd[e.downstream].push_back(e.upstream);
  }
  auto reach = [](const NodeId& start, std::map<NodeId, std::vector<NodeId>>& adj) {
    std::set<NodeId> seen{start};
    std::vector<NodeId> stack{start};
    while (!stack.empty()) {
      NodeId n = stack.back();
      stack.pop_back();
      for (const auto& m : adj[n])
        if (seen.insert(m).second) stack.push_back(m);
    }
    return seen;
  };
  const auto from_src = reach(source, fwd);
  const auto to_sink = reach(sink, bwd);
  std::vector<EdgeId> out;
  for (const auto& e : edges)
    if (from_src.count(e.upstream) && to_sink.count(e.downstream)) out.push_back(e);
  return out;
}

std::vector<std::size_t> rank_edges(std::span<const EdgeId> edges, std::span<const double> scores,
                                    const BuildOptions& opt) {
  if (edges.size() != scores.size()) throw DimensionError("rank_edges: edge and score counts differ");
  std::vector<std::string> names;
  for (const auto& e : edges) names.push_back(e.str());
  std::vector<std::size_t> idx(edges.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto key = [&](std::size_t i) { return opt.signed_rank ? scores[i] : std::abs(scores[i]); };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double ka = key(a), kb = key(b);
    if (ka != kb) return ka > kb;
    return names[a] < names[b];
  });
  return idx;
}

Circuit build_circuit(std::span<const EdgeId> edges, std::span<const double> scores, int steer_layer,
                      std::size_t n, const BuildOptions& opt) {
  if (n > edges.size())
    throw CircuitError("requested " + std::to_string(n) + " edges from a graph of " + std::to_string(edges.size()),
                       edges.size());
  const auto order = rank_edges(edges, scores, opt);
  Circuit c;
  c.steer_layer = steer_layer;
  c.requested = n;
  if (n == 0) return c;
  std::vector<EdgeId> top;
  std::size_t best = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    top.push_back(edges[order[k]]);
    if (k + 1 < n) continue;
    auto pruned = prune_unreachable(top, steer_layer);
    best = std::max(best, pruned.size());
    if (pruned.size() >= n) {
      c.edges = std::move(pruned);
      return c;
    }
  }
  throw CircuitError("pruning leaves at most " + std::to_string(best) + " of " + std::to_string(n) + " edges", best);
}

Circuit build_circuit(const IEStore& scores, std::size_t n, const BuildOptions& opt) {
  return build_circuit(scores.edges, scores.edge_scores, scores.steer_layer, n, opt);
}

Circuit random_circuit(const ModelGraph& graph, std::size_t n, std::uint64_t seed) {
  auto rng = substream(seed, "random-circuit");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scores(graph.steered_edges.size());
  for (auto& s : scores) s = u(rng);
  Circuit c = build_circuit(graph.steered_edges, scores, graph.steer_layer, n);
  c.source = "random/" + std::to_string(seed);
  return c;
}

Circuit complement(const Circuit& c, const ModelGraph& graph) {
  Circuit out;
  out.steer_layer = c.steer_layer;
  out.source = c.source + "/complement";
  const auto in = c.edge_set();
  for (const auto& e : graph.steered_edges)
    if (!in.count(e)) out.edges.push_back(e);
  out.requested = out.edges.size();
  return out;
}

FaithSample prepare_faith_sample(const Model& model, std::span<const int> prompt,
                                 std::span<const int> steered_response, const SteeringVector& v, double alpha) {
  if (prompt.empty() || steered_response.empty()) throw ContractError("faithfulness sample has no response");
  FaithSample s;
  auto tf = teacher_forced({prompt.begin(), prompt.end()}, {steered_response.begin(), steered_response.end()});
  s.tokens = std::move(tf.tokens);
  s.first_row = prompt.size() - 1;
  s.alpha = alpha;
  auto base = run(model, s.tokens);
  Tensor steered = run_logits(model, s.tokens, v.intervention(alpha));
  for (std::size_t j = 0; j < steered_response.size(); ++j) {
    const std::size_t r = s.first_row + j;
    const int y = static_cast<int>(argmax(steered.row(r)));
    const int ys = static_cast<int>(argmax(base.logits.row(r)));
    if (y == ys) continue;
    s.rows.push_back(r);
    s.y.push_back(y);
    s.y_star.push_back(ys);
    s.m_full.push_back(metric_logit_diff(steered.row(r), y, ys));
    s.m_empty.push_back(metric_logit_diff(base.logits.row(r), y, ys));
  }
  s.base = std::move(base.cache);
  return s;
}

std::vector<FaithSample> faith_samples(const Model& model, std::span<const PatchSample> samples,
                                       const SteeringVector& v) {
  std::vector<FaithSample> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto& p = samples[i];
    const auto& steered = p.orientation == Orientation::steered_as_clean ? p.clean_response : p.corrupt_response;
    out[i] = prepare_faith_sample(model, p.prompt, steered, v, p.alpha);
  });
  return out;
}

FaithResult faithfulness(const Model& model, const Circuit& circuit, std::span<const FaithSample> samples,
                         const SteeringVector& v) {
  if (circuit.steer_layer != v.layer) throw ContractError("circuit and vector use different steering layers");
  const auto graph = enumerate_graph(model.config, v.layer);
  const auto in = circuit.edge_set();
  for (const auto& e : in)
    if (!graph.contains_steered(e)) throw ContractError("edge " + e.str() + " is not in the steered graph");
  std::vector<double> sums(samples.size(), 0.0);
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto& s = samples[i];
    if (s.rows.empty()) return;
    InterventionSet iv = v.intervention(s.alpha);
    for (const auto& e : graph.steered_edges)
      if (!in.count(e)) iv.edge_substitutions[e] = edge_activation(s.base, e);
    Tensor logits = run_logits(model, s.tokens, iv);
    for (std::size_t j = 0; j < s.rows.size(); ++j) {
      const double m = metric_logit_diff(logits.row(s.rows[j]), s.y[j], s.y_star[j]);
      sums[i] += (m - s.m_empty[j]) / (s.m_full[j] - s.m_empty[j]);
    }
  });
  FaithResult r;
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    total += sums[i];
    r.positions += static_cast<long>(samples[i].rows.size());
  }
  if (r.positions > 0) {
    r.missing = false;
    r.value = total / static_cast<double>(r.positions);
  }
  return r;
}

std::vector<double> default_size_grid() {
  return {0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0};
}

MinFaithful min_faithful_size(const Model& model, const IEStore& scores, std::span<const FaithSample> samples,
                              const SteeringVector& v, std::span<const double> fractions, double threshold,
                              const BuildOptions& opt) {
  if (!std::is_sorted(fractions.begin(), fractions.end())) throw ContractError("size grid must be ascending");
  MinFaithful out;
  const auto total = scores.edges.size();
  for (double f : fractions) {
    if (f < 0.0 || f > 1.0) throw ContractError("size fraction outside [0, 1]");
    SizePoint p;
    p.fraction = f;
    p.requested = static_cast<std::size_t>(std::ceil(f * static_cast<double>(total) - 1e-9));
    Circuit c = build_circuit(scores, p.requested, opt);
    p.size = c.size();
    p.faith = faithfulness(model, c, samples, v);
    out.curve.push_back(p);
    if (!out.index && !p.faith.missing && p.faith.value >= threshold) {
      out.index = out.curve.size() - 1;
      out.circuit = std::move(c);
    }
  }
  return out;
}

double overlap(const Circuit& a, const Circuit& b) {
  if (a.edges.empty() || b.edges.empty()) throw ContractError("overlap of an empty circuit is undefined");
  const auto sa = a.edge_set();
  std::size_t common = 0;
  for (const auto& e : b.edge_set()) common += sa.count(e);
  return static_cast<double>(common) / static_cast<double>(std::min(sa.size(), b.edge_set().size()));
}

FaithResult interchange_faithfulness(const Model& model, const Circuit& circuit_a, const SteeringVector& b,
                                     std::span<const FaithSample> samples_b) {
  return faithfulness(model, circuit_a, samples_b, b);
}

double EdgeDistribution::upstream_pct(std::size_t i) const {
  return total ? 100.0 * static_cast<double>(upstream[i]) / static_cast<double>(total) : 0.0;
}

double EdgeDistribution::downstream_pct(std::size_t i) const {
  return total ? 100.0 * static_cast<double>(downstream[i]) / static_cast<double>(total) : 0.0;
}

EdgeDistribution edge_distribution(const Circuit& c, std::optional<std::size_t> top_k) {
  if (top_k && *top_k > c.size()) throw ContractError("top_k exceeds circuit size");
  const std::size_t n = top_k ? *top_k : c.size();
  EdgeDistribution d;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = c.edges[i];
    switch (e.upstream.kind) {
      case NodeKind::SteerResid: ++d.upstream[0]; break;
      case NodeKind::AttnHead: ++d.upstream[1]; break;
      case NodeKind::Mlp: ++d.upstream[2]; break;
      default: throw ContractError("edge " + e.str() + " has no steered-graph source");
    }
    if (e.downstream.kind == NodeKind::AttnHead) ++d.downstream[static_cast<std::size_t>(e.channel)];
    else if (e.downstream.kind == NodeKind::Mlp) ++d.downstream[3];
    else ++d.downstream[4];
    ++d.total;
  }
  return d;
}

void write_circuit_csv(const std::string& path, const Circuit& c, double threshold) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  nlohmann::ordered_json header{{"size", c.size()}, {"requested", c.requested}, {"steer_layer", c.steer_layer},
                                {"source", c.source}, {"threshold", threshold}};
  out << "# " << header.dump() << "\n";
  out << "upstream,downstream,channel\n";
  for (const auto& e : c.edges) out << e.upstream.str() << ',' << e.downstream.str() << ',' << to_string(e.channel) << '\n';
}

Circuit read_circuit_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw InputError(path + ": missing circuit header");
  Circuit c;
  try {
    auto h = nlohmann::json::parse(line.substr(2));
    c.steer_layer = h.at("steer_layer").get<int>();
    c.requested = h.at("requested").get<std::size_t>();
    c.source = h.at("source").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": bad circuit header: " + e.what());
  }
  if (!std::getline(in, line) || line != "upstream,downstream,channel") throw InputError(path + ": bad column header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string u, d, ch;
    if (!std::getline(ss, u, ',') || !std::getline(ss, d, ',') || !std::getline(ss, ch))
      throw InputError(path + ": malformed row '" + line + "'");
    c.edges.push_back({NodeId::parse(u), NodeId::parse(d), parse_channel(ch)});
  }
  return c;
}

std::string circuit_dot(const Circuit& c) {
  std::ostringstream out;
  out << "digraph circuit {\n  rankdir=BT;\n";
  std::set<NodeId> nodes;
  for (const auto& e : c.edges) {
    nodes.insert(e.upstream);
    nodes.insert(e.downstream);
  }
  for (const auto& n : nodes) {
    const char* shape = n.kind == NodeKind::Mlp ? "box" : n.kind == NodeKind::AttnHead ? "ellipse" : "doublecircle";
    out << "  \"" << n.str() << "\" [shape=" << shape << "];\n";
  }
  for (const auto& e : c.edges)
    out << "  \"" << e.upstream.str() << "\" -> \"" << e.downstream.str() << "\" [label=\"" << to_string(e.channel)
        << "\"];\n";
  out << "}\n";
  return out.str();
}

}  // namespace steerscope
