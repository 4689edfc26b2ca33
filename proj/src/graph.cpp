#include "steerscope/graph.hpp"

#include <algorithm>

#include "steerscope/errors.hpp"
#include "steerscope/model.hpp"

namespace steerscope {

std::pair<int, int> NodeId::order_key(int n_layers) const {
  switch (kind) {
    case NodeKind::Embed: return {-1, 0};
    case NodeKind::SteerResid: return {layer, -1};
    case NodeKind::AttnHead: return {layer, 0};
    case NodeKind::Mlp: return {layer, 1};
    case NodeKind::Logits: return {n_layers, 0};
  }
  return {0, 0};
}

std::string NodeId::str() const {
  switch (kind) {
    case NodeKind::Embed: return "embed";
    case NodeKind::SteerResid: return "resid" + std::to_string(layer);
    case NodeKind::AttnHead: return "a" + std::to_string(layer) + "." + std::to_string(head);
    case NodeKind::Mlp: return "m" + std::to_string(layer);
    case NodeKind::Logits: return "logits";
  }
  return "?";
}

NodeId NodeId::parse(const std::string& text) {
  try {
    if (text == "embed") return embed();
    if (text == "logits") return logits();
    if (text.rfind("resid", 0) == 0) return steer_resid(std::stoi(text.substr(5)));
    if (!text.empty() && text[0] == 'm') return mlp(std::stoi(text.substr(1)));
    if (!text.empty() && text[0] == 'a') {
      const auto dot = text.find('.');
      if (dot != std::string::npos)
        return attn(std::stoi(text.substr(1, dot - 1)), std::stoi(text.substr(dot + 1)));
    }
  } catch (const std::exception&) {
  }
  throw InputError("unrecognised node id '" + text + "'");
}

const char* to_string(Channel c) noexcept {
  switch (c) {
    case Channel::q: return "q";
    case Channel::k: return "k";
    case Channel::v: return "v";
    case Channel::in: return "in";
  }
  return "?";
}

Channel parse_channel(const std::string& text) {
  if (text == "q") return Channel::q;
  if (text == "k") return Channel::k;
  if (text == "v") return Channel::v;
  if (text == "in") return Channel::in;
  throw InputError("unrecognised channel '" + text + "'");
}

std::string EdgeId::str() const {
  return upstream.str() + "->" + downstream.str() + ":" + to_string(channel);
}

int node_layer(const NodeId& n, int n_layers) {
  switch (n.kind) {
    case NodeKind::Embed: return -1;
    case NodeKind::Logits: return n_layers;
    default: return n.layer;
  }
}

std::vector<std::pair<NodeId, Channel>> downstream_channels(int n_layers, int n_heads, int from_layer) {
  std::vector<std::pair<NodeId, Channel>> out;
  for (int l = from_layer; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h)
      for (Channel c : {Channel::q, Channel::k, Channel::v}) out.emplace_back(NodeId::attn(l, h), c);
    out.emplace_back(NodeId::mlp(l), Channel::in);
  }
  out.emplace_back(NodeId::logits(), Channel::in);
  return out;
}

std::vector<NodeId> upstream_nodes(const NodeId& downstream, const NodeId& source, int n_layers,
                                   int n_heads) {
  if (downstream.kind == NodeKind::Embed || downstream.kind == NodeKind::SteerResid)
    throw ContractError("node " + downstream.str() + " has no input channels");
  const int from = source.kind == NodeKind::Embed ? 0 : source.layer;
  std::vector<NodeId> ups{source};
  const int top = downstream.kind == NodeKind::Logits ? n_layers : downstream.layer;
  for (int l = from; l < top; ++l) {
    for (int h = 0; h < n_heads; ++h) ups.push_back(NodeId::attn(l, h));
    ups.push_back(NodeId::mlp(l));
  }
  if (downstream.kind == NodeKind::Mlp)
    for (int h = 0; h < n_heads; ++h) ups.push_back(NodeId::attn(downstream.layer, h));
  return ups;
}

namespace {

void append_edges(int n_layers, int n_heads, const NodeId& source, std::vector<EdgeId>& edges) {
  const int from = source.kind == NodeKind::Embed ? 0 : source.layer;
  for (const auto& [down, ch] : downstream_channels(n_layers, n_heads, from))
    for (const auto& u : upstream_nodes(down, source, n_layers, n_heads))
      edges.push_back(EdgeId{u, down, ch});
}

}  // namespace

ModelGraph enumerate_graph(int n_layers, int n_heads, int steer_layer) {
  if (n_layers <= 0 || n_heads <= 0) throw ContractError("graph extents must be positive");
  if (steer_layer < 0 || steer_layer >= n_layers)
    throw ContractError("steering layer " + std::to_string(steer_layer) + " outside [0, " +
                        std::to_string(n_layers) + ")");
  ModelGraph g;
  g.n_layers = n_layers;
  g.n_heads = n_heads;
  g.steer_layer = steer_layer;
  g.nodes.push_back(NodeId::embed());
  for (int l = 0; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h) g.nodes.push_back(NodeId::attn(l, h));
    g.nodes.push_back(NodeId::mlp(l));
  }
  g.nodes.push_back(NodeId::logits());
  append_edges(n_layers, n_heads, NodeId::embed(), g.edges);

  g.steered_nodes.push_back(NodeId::steer_resid(steer_layer));
  for (int l = steer_layer; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h) g.steered_nodes.push_back(NodeId::attn(l, h));
    g.steered_nodes.push_back(NodeId::mlp(l));
  }
  g.steered_nodes.push_back(NodeId::logits());
  append_edges(n_layers, n_heads, NodeId::steer_resid(steer_layer), g.steered_edges);
  std::sort(g.steered_edges.begin(), g.steered_edges.end());
  return g;
}

ModelGraph enumerate_graph(const ModelConfig& config, int steer_layer) {
  return enumerate_graph(config.n_layers, config.n_heads, steer_layer);
}

bool ModelGraph::contains_steered(const EdgeId& e) const {
  return std::binary_search(steered_edges.begin(), steered_edges.end(), e);
}

std::size_t ModelGraph::steered_index(const EdgeId& e) const {
  auto it = std::lower_bound(steered_edges.begin(), steered_edges.end(), e);
  if (it == steered_edges.end() || !(*it == e)) throw ContractError("edge " + e.str() + " not in steered graph");
  return static_cast<std::size_t>(it - steered_edges.begin());
}

std::size_t full_edge_count(int n_layers, int n_heads) {
  // Heads at layer l read 1 + l(H+1) sources on three channels; Mlp(l) also reads
  // its own layer's heads; Logits reads everything.
  const std::size_t H = static_cast<std::size_t>(n_heads);
  std::size_t total = 0;
  for (std::size_t l = 0; l < static_cast<std::size_t>(n_layers); ++l) {
    const std::size_t sources = 1 + l * (H + 1);
    total += 3 * H * sources + sources + H;
  }
  total += 1 + static_cast<std::size_t>(n_layers) * (H + 1);
  return total;
}

}  // namespace steerscope
