#include "steerscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "steerscope/errors.hpp"
#include "steerscope/ops.hpp"

namespace steerscope {

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || d_ff <= 0 || vocab <= 0 ||
      max_seq <= 0)
    throw ContractError("model extents must be positive");
  if (n_heads * d_head != d_model)
    throw ContractError("n_heads * d_head must equal d_model");
  if (norm_eps < 0.0) throw ContractError("norm_eps must be nonnegative");
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  auto normal = [&](Shape shape, double std) {
    std::normal_distribution<double> dist(0.0, std);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
  };
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * config.n_layers);

  Model m;
  m.config = config;
  m.embed = normal({static_cast<std::size_t>(config.vocab), d}, 1.0);
  m.pos = normal({static_cast<std::size_t>(config.max_seq), d}, 0.5);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_gamma = Tensor(Shape{d}, 1.0);
    for (int h = 0; h < config.n_heads; ++h) {
      HeadWeights hw;
      hw.w_q = normal({d, dh}, proj_std);
      hw.w_k = normal({d, dh}, proj_std);
      hw.w_v = normal({d, dh}, proj_std);
      hw.w_o = normal({d, dh}, resid_std);
      lw.heads.push_back(std::move(hw));
    }
    lw.mlp_gamma = Tensor(Shape{d}, 1.0);
    lw.w_in = normal({d, ff}, proj_std);
    lw.w_out = normal({ff, d}, 1.0 / std::sqrt(static_cast<double>(ff)) / std::sqrt(2.0 * config.n_layers));
    m.layers.push_back(std::move(lw));
  }
  m.final_gamma = Tensor(Shape{d}, 1.0);
  m.unembed = config.tie_embeddings ? Tensor(Shape{1}, 0.0)
                                    : normal({d, static_cast<std::size_t>(config.vocab)}, proj_std);
  return m;
}

std::vector<std::pair<std::string, Tensor*>> Model::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embed", &embed);
  out.emplace_back("pos", &pos);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto& lw = layers[l];
    out.emplace_back(p + "attn_gamma", &lw.attn_gamma);
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      out.emplace_back(hp + "w_q", &lw.heads[h].w_q);
      out.emplace_back(hp + "w_k", &lw.heads[h].w_k);
      out.emplace_back(hp + "w_v", &lw.heads[h].w_v);
      out.emplace_back(hp + "w_o", &lw.heads[h].w_o);
    }
    out.emplace_back(p + "mlp_gamma", &lw.mlp_gamma);
    out.emplace_back(p + "w_in", &lw.w_in);
    out.emplace_back(p + "w_out", &lw.w_out);
  }
  out.emplace_back("final_gamma", &final_gamma);
  if (!config.tie_embeddings) out.emplace_back("unembed", &unembed);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->parameters()) out.emplace_back(name, t);
  return out;
}

Tensor Model::unembedding() const {
  return config.tie_embeddings ? steerscope::transpose(embed) : unembed;
}

std::uint64_t Model::checksum() const {
  // FNV-1a over the raw bytes of every parameter.
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : parameters()) {
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t->data());
    for (std::size_t i = 0; i < t->size() * sizeof(double); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
  }
  return h;
}

InterventionSet InterventionSet::steer(int layer, Tensor direction, double coefficient) {
  InterventionSet iv;
  iv.steering = Steering{layer, std::move(direction), coefficient};
  return iv;
}

BoundModel bind(Tape& tape, const Model& model, bool requires_grad) {
  BoundModel b;
  b.model = &model;
  b.embed = tape.leaf(model.embed, requires_grad);
  b.pos = tape.leaf(model.pos, requires_grad);
  for (const auto& lw : model.layers) {
    BoundModel::Layer bl;
    bl.attn_gamma = tape.leaf(lw.attn_gamma, requires_grad);
    for (const auto& hw : lw.heads)
      bl.heads.push_back({tape.leaf(hw.w_q, requires_grad), tape.leaf(hw.w_k, requires_grad),
                          tape.leaf(hw.w_v, requires_grad), tape.leaf(hw.w_o, requires_grad)});
    bl.mlp_gamma = tape.leaf(lw.mlp_gamma, requires_grad);
    bl.w_in = tape.leaf(lw.w_in, requires_grad);
    bl.w_out = tape.leaf(lw.w_out, requires_grad);
    b.layers.push_back(std::move(bl));
  }
  b.final_gamma = tape.leaf(model.final_gamma, requires_grad);
  b.unembed = model.config.tie_embeddings ? Var{} : tape.leaf(model.unembed, requires_grad);
  return b;
}

namespace {

struct ChannelKey {
  NodeId node;
  Channel channel;
  friend auto operator<=>(const ChannelKey&, const ChannelKey&) = default;
};

bool precedes(const NodeId& up, const NodeId& down, int n_layers) {
  if (up.kind == NodeKind::Logits) return false;
  if (down.kind == NodeKind::Embed || down.kind == NodeKind::SteerResid) return false;
  if (up.kind == NodeKind::Embed) return true;
  if (up.kind == NodeKind::SteerResid) return up.layer <= node_layer(down, n_layers);
  return up.order_key(n_layers) < down.order_key(n_layers);
}

void validate_substitutions(const InterventionSet& iv, const ModelConfig& cfg, std::size_t rows) {
  bool uses_steer_resid = false;
  int steer_layer = -1;
  bool uses_low = false;
  for (const auto& [edge, repl] : iv.edge_substitutions) {
    const auto& up = edge.upstream;
    const auto& down = edge.downstream;
    auto in_range = [&](const NodeId& n) {
      switch (n.kind) {
        case NodeKind::Embed:
        case NodeKind::Logits: return true;
        case NodeKind::AttnHead:
          return n.layer >= 0 && n.layer < cfg.n_layers && n.head >= 0 && n.head < cfg.n_heads;
        default: return n.layer >= 0 && n.layer < cfg.n_layers;
      }
    };
    if (!in_range(up) || !in_range(down) || !precedes(up, down, cfg.n_layers))
      throw ContractError("substitution references absent edge " + edge.str());
    const bool head_channel = edge.channel != Channel::in;
    if ((down.kind == NodeKind::AttnHead) != head_channel)
      throw ContractError("substitution channel does not match node kind: " + edge.str());
    if (repl.rank() != 2 || repl.rows() != rows || repl.cols() != static_cast<std::size_t>(cfg.d_model))
      throw DimensionError("substitution for " + edge.str() + " has shape " + shape_string(repl.shape()));
    if (up.kind == NodeKind::SteerResid) {
      if (uses_steer_resid && steer_layer != up.layer)
        throw ContractError("substitutions mix two steering-layer sources");
      uses_steer_resid = true;
      steer_layer = up.layer;
    } else if (up.kind == NodeKind::Embed) {
      uses_low = true;
    }
  }
  if (uses_steer_resid) {
    for (const auto& [edge, repl] : iv.edge_substitutions) {
      const auto& up = edge.upstream;
      if ((up.kind == NodeKind::AttnHead || up.kind == NodeKind::Mlp) && up.layer < steer_layer)
        uses_low = true;
    }
    if (uses_low) throw ContractError("substitutions mix the full graph with a steered graph");
  }
}

Var project_out(Var x, const Tensor& unit) {
  Tape& t = x.tape();
  const std::size_t d = unit.size();
  Var col = t.constant(unit.reshaped({d, 1}));
  Var coeff = ops::matmul(x, col);                    // [rows, 1]
  Var proj = ops::matmul_nt(coeff, col);              // [rows, d]
  return ops::sub(x, proj);
}

}  // namespace

Trace forward(Tape& tape, const BoundModel& bound, std::span<const std::vector<int>> sequences,
              const InterventionSet& iv, const ForwardOptions& options) {
  const Model& model = *bound.model;
  const ModelConfig& cfg = model.config;
  const int L = cfg.n_layers, H = cfg.n_heads;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  if (sequences.empty()) throw ContractError("forward: no sequences");

  std::vector<int> tokens, positions;
  std::vector<std::pair<std::size_t, std::size_t>> segments;
  for (const auto& seq : sequences) {
    if (seq.empty()) throw InputError("forward: empty sequence");
    if (seq.size() > static_cast<std::size_t>(cfg.max_seq))
      throw InputError("forward: sequence length " + std::to_string(seq.size()) + " exceeds max_seq");
    segments.emplace_back(tokens.size(), seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] < 0 || seq[i] >= cfg.vocab) throw InputError("forward: unknown token " + std::to_string(seq[i]));
      tokens.push_back(seq[i]);
      positions.push_back(static_cast<int>(i));
    }
  }
  const std::size_t rows = tokens.size();
  const bool single = segments.size() == 1;

  validate_substitutions(iv, cfg, rows);
  if (!single && (!iv.edge_substitutions.empty() || !iv.frozen_probs.empty() || !iv.frozen_values.empty()))
    throw ContractError("per-row interventions require a single sequence");
  if (iv.steering) {
    if (iv.steering->layer < 0 || iv.steering->layer >= L)
      throw ContractError("steering layer out of range");
    if (!options.steer_direction && iv.steering->direction.size() != d)
      throw DimensionError("steering direction length mismatch");
  }
  Tensor ablate_unit;
  if (iv.ablate_direction) {
    ablate_unit = *iv.ablate_direction;
    double n2 = 0.0;
    for (double v : ablate_unit.values()) n2 += v * v;
    if (!(n2 > 0.0)) throw ContractError("ablation direction must be nonzero");
    ablate_unit *= 1.0 / std::sqrt(n2);
  }

  std::map<ChannelKey, std::vector<std::pair<NodeId, const Tensor*>>> subs;
  for (const auto& [edge, repl] : iv.edge_substitutions)
    subs[ChannelKey{edge.downstream, edge.channel}].emplace_back(edge.upstream, &repl);

  Trace tr;
  tr.resid_in.resize(static_cast<std::size_t>(L));
  tr.attn_in.assign(static_cast<std::size_t>(L), std::vector<std::array<Var, 3>>(static_cast<std::size_t>(H)));
  tr.probs.assign(static_cast<std::size_t>(L), std::vector<Var>(static_cast<std::size_t>(H)));
  tr.values = tr.probs;
  tr.head_out = tr.probs;
  tr.mlp_in.resize(static_cast<std::size_t>(L));
  tr.mlp_out.resize(static_cast<std::size_t>(L));

  auto live_output = [&](const NodeId& n) -> Var {
    switch (n.kind) {
      case NodeKind::Embed: return tr.embed;
      case NodeKind::SteerResid: return tr.resid_in[static_cast<std::size_t>(n.layer)];
      case NodeKind::AttnHead:
        return tr.head_out[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(n.head)];
      case NodeKind::Mlp: return tr.mlp_out[static_cast<std::size_t>(n.layer)];
      default: throw ContractError("logits has no output edge");
    }
  };
  // Raw input of one channel: the residual plus, for each substituted edge,
  // (replacement - live contribution).
  auto channel_input = [&](Var resid, const NodeId& node, Channel ch) -> Var {
    Var in = resid;
    auto it = subs.find(ChannelKey{node, ch});
    if (it != subs.end()) {
      std::vector<Var> terms{resid};
      for (const auto& [up, repl] : it->second)
        terms.push_back(ops::sub(tape.constant(*repl), live_output(up)));
      in = ops::add_n(terms);
    }
    if (options.capture) in = tape.watch(in);
    return in;
  };
  auto normalize = [&](Var x, Var gamma) {
    return cfg.linear ? ops::mul_row(x, gamma) : ops::rmsnorm(x, gamma, cfg.norm_eps);
  };
  auto subtract_normalized = [&](Var normed, Var raw, const Tensor& gamma, const Tensor& dir) {
    Tensor scaled(Shape{d});
    for (std::size_t j = 0; j < d; ++j) scaled[j] = dir[j] * gamma[j];
    Tensor c = cfg.linear ? Tensor(Shape{raw.value().rows()}, 1.0) : ops::rms_inverse(raw.value(), cfg.norm_eps);
    return ops::sub_scaled_rows(normed, c, scaled);
  };

  Var x = ops::add(ops::gather_rows(bound.embed, tokens), ops::gather_rows(bound.pos, positions));
  if (options.capture) x = tape.watch(x);
  tr.embed = x;
  Var resid = x;

  Var steer_vec;
  if (iv.steering) {
    steer_vec = options.steer_direction ? ops::scale(*options.steer_direction, iv.steering->coefficient)
                                        : tape.constant(iv.steering->direction * iv.steering->coefficient);
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  for (int l = 0; l < L; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    const auto& lw = model.layers[lu];
    const auto& bl = bound.layers[lu];
    if (iv.steering && iv.steering->layer == l) resid = ops::add_row(resid, steer_vec);
    if (iv.ablate_direction) resid = project_out(resid, ablate_unit);
    if (options.capture) resid = tape.watch(resid);
    tr.resid_in[lu] = resid;

    const bool subtract_v = iv.value_input_subtract && l >= iv.subtract_from_layer;
    const bool subtract_m = iv.mlp_input_subtract && l >= iv.subtract_from_layer;
    const bool shared = !options.capture && subs.empty();
    Var shared_norm;
    if (shared) shared_norm = normalize(resid, bl.attn_gamma);

    std::vector<Var> layer_terms{resid};
    for (int h = 0; h < H; ++h) {
      const auto hu = static_cast<std::size_t>(h);
      std::array<Var, 3> proj;
      for (int c = 0; c < 3; ++c) {
        const auto ch = static_cast<Channel>(c);
        Var in = shared ? resid : channel_input(resid, NodeId::attn(l, h), ch);
        tr.attn_in[lu][hu][static_cast<std::size_t>(c)] = in;
        Var normed = shared ? shared_norm : normalize(in, bl.attn_gamma);
        if (c == 2 && subtract_v) normed = subtract_normalized(normed, in, lw.attn_gamma, *iv.value_input_subtract);
        proj[static_cast<std::size_t>(c)] = ops::matmul(normed, bl.heads[hu][static_cast<std::size_t>(c)]);
      }
      Var values = proj[2];
      if (hu < (iv.frozen_values.empty() ? 0 : iv.frozen_values[lu].size()) && !iv.frozen_values[lu][hu].empty()) {
        const Tensor& fv = iv.frozen_values[lu][hu];
        if (!fv.same_shape(values.value())) throw DimensionError("frozen values shape mismatch");
        values = tape.constant(fv);
      }
      tr.values[lu][hu] = values;

      std::vector<Var> outs;
      for (const auto& [off, len] : segments) {
        Var q = single ? proj[0] : ops::slice_rows(proj[0], off, len);
        Var k = single ? proj[1] : ops::slice_rows(proj[1], off, len);
        Var v = single ? values : ops::slice_rows(values, off, len);
        Var probs;
        if (cfg.linear) {
          Tensor uniform(Shape{len, len}, 0.0);
          for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j <= i; ++j) uniform.at(i, j) = 1.0 / static_cast<double>(i + 1);
          probs = tape.constant(std::move(uniform));
        } else {
          probs = ops::causal_softmax(ops::scale(ops::matmul_nt(q, k), inv_sqrt_dh));
        }
        if (single && !iv.frozen_probs.empty() && hu < iv.frozen_probs[lu].size() &&
            !iv.frozen_probs[lu][hu].empty()) {
          const Tensor& fp = iv.frozen_probs[lu][hu];
          if (!fp.same_shape(probs.value())) throw DimensionError("frozen probabilities shape mismatch");
          probs = tape.constant(fp);
        }
        if (single) tr.probs[lu][hu] = probs;
        outs.push_back(ops::matmul(probs, v));
      }
      Var z = ops::concat_rows(outs);
      Var out = ops::matmul_nt(z, bl.heads[hu][3]);
      if (options.capture) out = tape.watch(out);
      tr.head_out[lu][hu] = out;
      layer_terms.push_back(out);
    }
    Var mid = ops::add_n(layer_terms);
    if (iv.ablate_direction) mid = project_out(mid, ablate_unit);

    Var min = channel_input(mid, NodeId::mlp(l), Channel::in);
    tr.mlp_in[lu] = min;
    Var mnorm = normalize(min, bl.mlp_gamma);
    if (subtract_m) mnorm = subtract_normalized(mnorm, min, lw.mlp_gamma, *iv.mlp_input_subtract);
    Var hidden = ops::matmul(mnorm, bl.w_in);
    if (!cfg.linear) hidden = ops::gelu(hidden);
    Var mout = ops::matmul(hidden, bl.w_out);
    if (options.capture) mout = tape.watch(mout);
    tr.mlp_out[lu] = mout;
    resid = ops::add(mid, mout);
  }
  if (iv.ablate_direction) resid = project_out(resid, ablate_unit);
  Var lin = channel_input(resid, NodeId::logits(), Channel::in);
  tr.logits_in = lin;
  Var fnorm = normalize(lin, bound.final_gamma);
  tr.logits = cfg.tie_embeddings ? ops::matmul_nt(fnorm, bound.embed) : ops::matmul(fnorm, bound.unembed);
  return tr;
}

ActivationCache make_cache(const Trace& tr, const ModelConfig& cfg) {
  ActivationCache c;
  c.embed = tr.embed.value();
  c.logits_in = tr.logits_in.value();
  c.logits = tr.logits.value();
  const auto L = tr.resid_in.size();
  c.resid_in.resize(L);
  c.attn_in.resize(L);
  c.attn_scale.resize(L);
  c.probs.resize(L);
  c.values.resize(L);
  c.head_out.resize(L);
  c.mlp_in.resize(L);
  c.mlp_scale.resize(L);
  c.mlp_out.resize(L);
  auto scale_of = [&](const Tensor& x) {
    return cfg.linear ? Tensor(Shape{x.rows()}, 1.0) : ops::rms_inverse(x, cfg.norm_eps);
  };
  for (std::size_t l = 0; l < L; ++l) {
    c.resid_in[l] = tr.resid_in[l].value();
    const auto H = tr.head_out[l].size();
    c.attn_in[l].resize(H);
    c.attn_scale[l].resize(H);
    c.probs[l].resize(H);
    c.values[l].resize(H);
    c.head_out[l].resize(H);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        c.attn_in[l][h][ch] = tr.attn_in[l][h][ch].value();
        c.attn_scale[l][h][ch] = scale_of(c.attn_in[l][h][ch]);
      }
      if (tr.probs[l][h].valid()) c.probs[l][h] = tr.probs[l][h].value();
      c.values[l][h] = tr.values[l][h].value();
      c.head_out[l][h] = tr.head_out[l][h].value();
    }
    c.mlp_in[l] = tr.mlp_in[l].value();
    c.mlp_scale[l] = scale_of(c.mlp_in[l]);
    c.mlp_out[l] = tr.mlp_out[l].value();
  }
  return c;
}

const Tensor& ActivationCache::node_output(const NodeId& node) const {
  switch (node.kind) {
    case NodeKind::Embed: return embed;
    case NodeKind::SteerResid:
      if (node.layer < 0 || static_cast<std::size_t>(node.layer) >= resid_in.size()) break;
      return resid_in[static_cast<std::size_t>(node.layer)];
    case NodeKind::AttnHead:
      if (node.layer < 0 || static_cast<std::size_t>(node.layer) >= head_out.size() || node.head < 0 ||
          static_cast<std::size_t>(node.head) >= head_out[static_cast<std::size_t>(node.layer)].size())
        break;
      return head_out[static_cast<std::size_t>(node.layer)][static_cast<std::size_t>(node.head)];
    case NodeKind::Mlp:
      if (node.layer < 0 || static_cast<std::size_t>(node.layer) >= mlp_out.size()) break;
      return mlp_out[static_cast<std::size_t>(node.layer)];
    case NodeKind::Logits: break;
  }
  throw ContractError("cache has no output for node " + node.str());
}

const Tensor& ActivationCache::channel_input(const NodeId& node, Channel ch) const {
  if (node.kind == NodeKind::Logits && ch == Channel::in) return logits_in;
  if (node.kind == NodeKind::Mlp && ch == Channel::in && node.layer >= 0 &&
      static_cast<std::size_t>(node.layer) < mlp_in.size())
    return mlp_in[static_cast<std::size_t>(node.layer)];
  if (node.kind == NodeKind::AttnHead && ch != Channel::in && node.layer >= 0 &&
      static_cast<std::size_t>(node.layer) < attn_in.size() && node.head >= 0 &&
      static_cast<std::size_t>(node.head) < attn_in[static_cast<std::size_t>(node.layer)].size())
    return attn_in[static_cast<std::size_t>(node.layer)][static_cast<std::size_t>(node.head)]
                  [static_cast<std::size_t>(ch)];
  throw ContractError("cache has no channel " + node.str() + ":" + to_string(ch));
}

const Tensor& edge_activation(const ActivationCache& cache, const EdgeId& edge) {
  (void)cache.channel_input(edge.downstream, edge.channel);
  return cache.node_output(edge.upstream);
}

ForwardResult run(const Model& model, std::span<const int> tokens, const InterventionSet& iv) {
  Tape tape(false);
  BoundModel b = bind(tape, model, false);
  std::vector<std::vector<int>> seqs{std::vector<int>(tokens.begin(), tokens.end())};
  Trace tr = forward(tape, b, seqs, iv);
  ForwardResult r;
  r.cache = make_cache(tr, model.config);
  r.logits = r.cache.logits;
  return r;
}

Tensor run_logits(const Model& model, std::span<const int> tokens, const InterventionSet& iv) {
  Tape tape(false);
  BoundModel b = bind(tape, model, false);
  std::vector<std::vector<int>> seqs{std::vector<int>(tokens.begin(), tokens.end())};
  return forward(tape, b, seqs, iv).logits.value();
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

std::vector<int> generate_greedy(const Model& model, std::span<const int> prompt, const InterventionSet& iv,
                                 int max_new, int end_token) {
  if (prompt.empty()) throw ContractError("generate_greedy: empty prompt");
  if (!iv.edge_substitutions.empty() || !iv.frozen_probs.empty() || !iv.frozen_values.empty())
    throw ContractError("generate_greedy: per-row interventions cannot follow a growing sequence");
  std::vector<int> seq(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new; ++step) {
    if (seq.size() >= static_cast<std::size_t>(model.config.max_seq)) break;
    Tensor logits = run_logits(model, seq, iv);
    const int next = static_cast<int>(argmax(logits.row(logits.rows() - 1)));
    seq.push_back(next);
    if (next == end_token) break;
  }
  return seq;
}

std::vector<std::vector<int>> generate_greedy_batch(const Model& model, std::span<const std::vector<int>> prompts,
                                                    const InterventionSet& iv, int max_new, int end_token) {
  if (!iv.edge_substitutions.empty() || !iv.frozen_probs.empty() || !iv.frozen_values.empty())
    throw ContractError("generate_greedy_batch: per-row interventions cannot follow a growing sequence");
  std::vector<std::vector<int>> seqs(prompts.begin(), prompts.end());
  std::vector<std::vector<int>> out(seqs.size());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].empty()) throw ContractError("generate_greedy_batch: empty prompt");
    active.push_back(i);
  }
  for (int step = 0; step < max_new && !active.empty(); ++step) {
    std::vector<std::vector<int>> batch;
    std::vector<std::size_t> live;
    for (std::size_t i : active)
      if (seqs[i].size() < static_cast<std::size_t>(model.config.max_seq)) {
        batch.push_back(seqs[i]);
        live.push_back(i);
      }
    if (live.empty()) break;
    Tape tape(false);
    BoundModel b = bind(tape, model, false);
    Tensor logits = forward(tape, b, batch, iv).logits.value();
    std::vector<std::size_t> next_active;
    std::size_t row = 0;
    for (std::size_t j = 0; j < live.size(); ++j) {
      row += batch[j].size();
      const int next = static_cast<int>(argmax(logits.row(row - 1)));
      seqs[live[j]].push_back(next);
      out[live[j]].push_back(next);
      if (next != end_token) next_active.push_back(live[j]);
    }
    active = std::move(next_active);
  }
  return out;
}

}  // namespace steerscope
