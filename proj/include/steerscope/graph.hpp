#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

namespace steerscope {

struct ModelConfig;

enum class NodeKind { Embed = 0, SteerResid = 1, AttnHead = 2, Mlp = 3, Logits = 4 };

/// A node of the computational graph. Heads carry (layer, head); Mlp and
/// SteerResid carry a layer; Embed and Logits carry neither.
struct NodeId {
  NodeKind kind = NodeKind::Embed;
  int layer = -1;
  int head = -1;

  static NodeId embed() { return {NodeKind::Embed, -1, -1}; }
  static NodeId steer_resid(int layer) { return {NodeKind::SteerResid, layer, -1}; }
  static NodeId attn(int layer, int head) { return {NodeKind::AttnHead, layer, head}; }
  static NodeId mlp(int layer) { return {NodeKind::Mlp, layer, -1}; }
  static NodeId logits() { return {NodeKind::Logits, -1, -1}; }

  /// Position in residual order: (layer, stage) with attention before MLP.
  std::pair<int, int> order_key(int n_layers) const;

  std::string str() const;
  static NodeId parse(const std::string& text);

  friend auto operator<=>(const NodeId&, const NodeId&) = default;
  friend bool operator==(const NodeId&, const NodeId&) = default;
};

enum class Channel { q = 0, k = 1, v = 2, in = 3 };

const char* to_string(Channel c) noexcept;
Channel parse_channel(const std::string& text);

/// Output of `upstream` as read by one input channel of `downstream`.
struct EdgeId {
  NodeId upstream;
  NodeId downstream;
  Channel channel = Channel::in;

  std::string str() const;
  friend auto operator<=>(const EdgeId&, const EdgeId&) = default;
  friend bool operator==(const EdgeId&, const EdgeId&) = default;
};

/// Node/edge view of a model. `edges` is the full DAG rooted at Embed;
/// `steered_edges` is the subgraph from the steering layer up, where all
/// earlier sources collapse into SteerResid(steer_layer).
struct ModelGraph {
  int n_layers = 0;
  int n_heads = 0;
  int steer_layer = 0;
  std::vector<NodeId> nodes;
  std::vector<EdgeId> edges;
  std::vector<NodeId> steered_nodes;
  std::vector<EdgeId> steered_edges;

  bool contains_steered(const EdgeId& e) const;
  std::size_t steered_index(const EdgeId& e) const;
};

ModelGraph enumerate_graph(const ModelConfig& config, int steer_layer);
ModelGraph enumerate_graph(int n_layers, int n_heads, int steer_layer);

/// |edges| of the full ordered DAG, computed in closed form.
std::size_t full_edge_count(int n_layers, int n_heads);

/// Downstream input channels of the graph rooted at layer `from_layer`.
std::vector<std::pair<NodeId, Channel>> downstream_channels(int n_layers, int n_heads, int from_layer);

/// Upstream nodes that write into `downstream` when the graph is rooted at
/// `source` (Embed, or SteerResid(l) for a steered graph).
std::vector<NodeId> upstream_nodes(const NodeId& downstream, const NodeId& source, int n_layers,
                                   int n_heads);

/// Layer of a downstream node for "at or above the steering layer" tests. Logits → n_layers.
int node_layer(const NodeId& n, int n_layers);

}  // namespace steerscope
