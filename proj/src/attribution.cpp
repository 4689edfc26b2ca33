#include "steerscope/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "steerscope/ops.hpp"
#include "steerscope/parallel.hpp"

namespace steerscope {

const char* to_string(Orientation o) noexcept {
  return o == Orientation::steered_as_clean ? "steered-as-clean" : "base-as-clean";
}

const char* to_string(MetricKind m) noexcept { return m == MetricKind::logit_diff ? "logit-diff" : "dir-kl"; }

MetricKind parse_metric(const std::string& s) {
  if (s == "logit-diff") return MetricKind::logit_diff;
  if (s == "dir-kl") return MetricKind::dir_kl;
  throw InputError("unknown metric '" + s + "'");
}

double metric_logit_diff(std::span<const double> logits, int y, int y_star) {
  if (y == y_star) return 0.0;
  return logits[static_cast<std::size_t>(y)] - logits[static_cast<std::size_t>(y_star)];
}

double metric_dirkl(std::span<const double> p_corrupt, std::span<const double> p_clean,
                    std::span<const double> p_patched) {
  return kl_divergence(p_corrupt, p_patched) - kl_divergence(p_clean, p_patched);
}

std::vector<PatchSample> make_patch_samples(const Model& model, std::span<const PromptRecord* const> records,
                                            const SteeringVector& v, double alpha, Orientation orientation,
                                            std::size_t max_samples) {
  std::vector<std::vector<int>> prompts;
  for (const auto* r : records) prompts.push_back(r->prompt);
  if (prompts.empty()) return {};
  auto base = generate_greedy_batch(model, prompts, {}, kResponseLength, tok::END);
  auto steered = generate_greedy_batch(model, prompts, v.intervention(alpha), kResponseLength, tok::END);
  std::vector<PatchSample> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (is_refusal(base[i]) == is_refusal(steered[i])) continue;
    PatchSample s;
    s.prompt = prompts[i];
    s.label = records[i]->label;
    s.alpha = alpha;
    s.orientation = orientation;
    if (orientation == Orientation::steered_as_clean) {
      s.clean_response = steered[i];
      s.corrupt_response = base[i];
    } else {
      s.clean_response = base[i];
      s.corrupt_response = steered[i];
    }
    out.push_back(std::move(s));
    if (max_samples && out.size() == max_samples) break;
  }
  return out;
}

std::size_t PreparedSample::kept() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }

namespace {

Tensor softmax_row(std::span<const double> row) {
  Tensor p(Shape{row.size()});
  double mx = row[0];
  for (double x : row) mx = std::max(mx, x);
  double z = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) z += (p[i] = std::exp(row[i] - mx));
  p *= 1.0 / z;
  return p;
}

Tensor log_softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < row.size(); ++c) out.at(r, c) = row[c] - lz;
  }
  return out;
}

ActivationCache cache_for(const Model& model, std::span<const int> tokens, const SteeringVector& v, double coef,
                          Tensor& logits) {
  auto r = run(model, tokens, v.intervention(coef));
  logits = r.logits;
  return std::move(r.cache);
}

}  // namespace

double metric_value(const PreparedSample& prep, const Tensor& logits, MetricKind kind) {
  const Tensor x = kind == MetricKind::logit_diff ? logits : log_softmax_rows(logits);
  double m = prep.constant;
  for (std::size_t i = 0; i < prep.weights.size(); ++i) m += prep.weights[i] * x[i];
  return m;
}

PreparedSample prepare_sample(const Model& model, const PatchSample& sample, const SteeringVector& v,
                              const MetricSpec& metric, bool normalize_by_positions) {
  if (sample.prompt.empty() || sample.corrupt_response.empty()) throw ContractError("patch sample has no response");
  if (metric.kl_threshold < 0.0) throw ContractError("kl threshold must be nonnegative");
  PreparedSample p;
  auto tf = teacher_forced(sample.prompt, sample.corrupt_response);
  p.tokens = std::move(tf.tokens);
  p.first_row = sample.prompt.size() - 1;
  p.rows = sample.corrupt_response.size();
  p.clean_coefficient = sample.clean_coefficient();
  p.corrupt_coefficient = sample.corrupt_coefficient();
  Tensor lc, lx;
  p.clean = cache_for(model, p.tokens, v, p.clean_coefficient, lc);
  p.corrupt = cache_for(model, p.tokens, v, p.corrupt_coefficient, lx);
  const auto V = lc.cols();
  p.weights = Tensor(lc.shape(), 0.0);
  const bool steered_clean = sample.orientation == Orientation::steered_as_clean;
  for (std::size_t j = 0; j < p.rows; ++j) {
    const std::size_t r = p.first_row + j;
    const int y = static_cast<int>(argmax(lc.row(r)));
    const int ys = static_cast<int>(argmax(lx.row(r)));
    p.y.push_back(y);
    p.y_star.push_back(ys);
    if (metric.kind == MetricKind::logit_diff) {
      p.mask.push_back(y != ys);
    } else {
      Tensor pc = softmax_row(lc.row(r)), px = softmax_row(lx.row(r));
      const double kl = steered_clean ? kl_divergence(pc.values(), px.values()) : kl_divergence(px.values(), pc.values());
      p.mask.push_back(kl > metric.kl_threshold);
    }
  }
  const double scale = normalize_by_positions && p.kept() > 0 ? 1.0 / static_cast<double>(p.kept()) : 1.0;
  for (std::size_t j = 0; j < p.rows; ++j) {
    if (!p.mask[j]) continue;
    const std::size_t r = p.first_row + j;
    if (metric.kind == MetricKind::logit_diff) {
      p.weights.at(r, static_cast<std::size_t>(p.y[j])) += scale;
      p.weights.at(r, static_cast<std::size_t>(p.y_star[j])) -= scale;
    } else {
      Tensor pc = softmax_row(lc.row(r)), px = softmax_row(lx.row(r));
      for (std::size_t c = 0; c < V; ++c) {
        p.weights.at(r, c) += scale * (pc[c] - px[c]);
        const double a = std::max(px[c], 1e-12), b = std::max(pc[c], 1e-12);
        p.constant += scale * (px[c] * std::log(a) - pc[c] * std::log(b));
      }
    }
  }
  p.m_clean = metric_value(p, lc, metric.kind);
  p.m_corrupt = metric_value(p, lx, metric.kind);
  return p;
}

std::vector<bool> position_mask(const Model& model, const PatchSample& sample, const SteeringVector& v,
                                const MetricSpec& metric) {
  return prepare_sample(model, sample, v, metric).mask;
}

double IEStore::score(const EdgeId& e) const {
  auto it = std::find(edges.begin(), edges.end(), e);
  if (it == edges.end()) throw ContractError("edge " + e.str() + " not in IE store");
  return edge_scores[static_cast<std::size_t>(it - edges.begin())];
}

namespace {

IEStore empty_store(const Model& model, int layer) {
  IEStore s;
  s.steer_layer = layer;
  s.edges = enumerate_graph(model.config, layer).steered_edges;
  s.edge_scores.assign(s.edges.size(), 0.0);
  s.node_scores[NodeId::steer_resid(layer)] = 0.0;
  for (int l = layer; l < model.config.n_layers; ++l) {
    for (int h = 0; h < model.config.n_heads; ++h) s.node_scores[NodeId::attn(l, h)] = 0.0;
    s.node_scores[NodeId::mlp(l)] = 0.0;
  }
  s.dims = Tensor(Shape{static_cast<std::size_t>(model.config.d_model)}, 0.0);
  return s;
}

double frob(const Tensor& a, const Tensor& b) { return dot(a.values(), b.values()); }

Tensor concat(const std::vector<const Tensor*>& parts) {
  std::size_t rows = 0;
  for (const auto* t : parts) rows += t->rows();
  Tensor out(Shape{rows, parts.front()->cols()});
  std::size_t off = 0;
  for (const auto* t : parts) {
    std::copy(t->values().begin(), t->values().end(), out.values().begin() + static_cast<long>(off));
    off += t->size();
  }
  return out;
}

/// Accumulates EAP-IG contributions of a group of samples sharing coefficients.
void eap_group(const Model& model, std::span<const PreparedSample* const> group, const SteeringVector& v,
               const EapOptions& opt, IEStore& acc) {
  const auto& cfg = model.config;
  const int L = cfg.n_layers, H = cfg.n_heads, ell = v.layer;
  const double a_clean = group.front()->clean_coefficient, a_corrupt = group.front()->corrupt_coefficient;
  std::vector<std::vector<int>> seqs;
  std::vector<const Tensor*> wparts;
  for (const auto* p : group) {
    seqs.push_back(p->tokens);
    wparts.push_back(&p->weights);
  }
  const Tensor weights = concat(wparts);

  // Node-output differences, packed in the same row order.
  auto packed_diff = [&](auto get) {
    std::vector<Tensor> diffs;
    std::vector<const Tensor*> ptrs;
    for (const auto* p : group) diffs.push_back(get(p->clean) - get(p->corrupt));
    for (const auto& d : diffs) ptrs.push_back(&d);
    return concat(ptrs);
  };
  std::map<NodeId, Tensor> diff;
  diff[NodeId::steer_resid(ell)] = packed_diff([&](const ActivationCache& c) -> const Tensor& {
    return c.resid_in[static_cast<std::size_t>(ell)];
  });
  for (int l = ell; l < L; ++l) {
    for (int h = 0; h < H; ++h)
      diff[NodeId::attn(l, h)] = packed_diff([&](const ActivationCache& c) -> const Tensor& {
        return c.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
      });
    diff[NodeId::mlp(l)] = packed_diff([&](const ActivationCache& c) -> const Tensor& {
      return c.mlp_out[static_cast<std::size_t>(l)];
    });
  }

  const auto channels = downstream_channels(L, H, ell);
  std::vector<Tensor> chan_grad(channels.size());
  std::map<NodeId, Tensor> node_grad;
  for (int j = 1; j <= opt.steps; ++j) {
    const double coef = a_corrupt + (static_cast<double>(j) - 0.5) / opt.steps * (a_clean - a_corrupt);
    Tape tape;
    auto b = bind(tape, model, false);
    ForwardOptions fo;
    fo.capture = true;
    Trace tr = forward(tape, b, seqs, v.intervention(coef), fo);
    Var x = opt.metric.kind == MetricKind::logit_diff ? tr.logits : ops::log_softmax_rows(tr.logits);
    tape.backward(ops::weighted_sum(x, weights));
    auto add = [](Tensor& dst, const Tensor& g) {
      if (dst.empty()) dst = g;
      else dst += g;
    };
    for (std::size_t c = 0; c < channels.size(); ++c) {
      const auto& [node, ch] = channels[c];
      Var in;
      if (node.kind == NodeKind::Logits) in = tr.logits_in;
      else if (node.kind == NodeKind::Mlp) in = tr.mlp_in[static_cast<std::size_t>(node.layer)];
      else in = tr.attn_in[static_cast<std::size_t>(node.layer)][static_cast<std::size_t>(node.head)][static_cast<std::size_t>(ch)];
      add(chan_grad[c], in.grad());
    }
    add(node_grad[NodeId::steer_resid(ell)], tr.resid_in[static_cast<std::size_t>(ell)].grad());
    for (int l = ell; l < L; ++l) {
      for (int h = 0; h < H; ++h)
        add(node_grad[NodeId::attn(l, h)], tr.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].grad());
      add(node_grad[NodeId::mlp(l)], tr.mlp_out[static_cast<std::size_t>(l)].grad());
    }
  }
  const double inv_t = 1.0 / opt.steps;
  std::map<std::pair<NodeId, Channel>, std::size_t> chan_index;
  for (std::size_t c = 0; c < channels.size(); ++c) chan_index[channels[c]] = c;
  for (std::size_t e = 0; e < acc.edges.size(); ++e) {
    const auto& edge = acc.edges[e];
    acc.edge_scores[e] += inv_t * frob(diff.at(edge.upstream), chan_grad[chan_index.at({edge.downstream, edge.channel})]);
  }
  for (auto& [node, score] : acc.node_scores) score += inv_t * frob(diff.at(node), node_grad.at(node));
  const Tensor& rd = diff.at(NodeId::steer_resid(ell));
  const Tensor& rg = node_grad.at(NodeId::steer_resid(ell));
  for (std::size_t r = 0; r < rd.rows(); ++r)
    for (std::size_t c = 0; c < rd.cols(); ++c) acc.dims[c] += inv_t * rd.at(r, c) * rg.at(r, c);
}

}  // namespace

IEStore eap_ig_scores(const Model& model, std::span<const PatchSample> samples, const SteeringVector& v,
                      const EapOptions& opt) {
  if (opt.steps < 1) throw ContractError("EAP-IG needs at least one interpolation step");
  IEStore store = empty_store(model, v.layer);
  std::vector<PreparedSample> all(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    all[i] = prepare_sample(model, samples[i], v, opt.metric, opt.normalize_by_positions);
  });
  std::vector<PreparedSample> prepared;
  for (auto& p : all) {
    if (p.kept() == 0) {
      ++store.skipped;
      continue;
    }
    store.positions_evaluated += static_cast<long>(p.kept());
    prepared.push_back(std::move(p));
  }
  store.samples = static_cast<int>(prepared.size());
  if (prepared.empty()) return store;
  // Group by coefficient pair, preserving sample order within each group.
  std::vector<std::pair<std::pair<double, double>, std::vector<const PreparedSample*>>> groups;
  for (const auto& p : prepared) {
    const std::pair<double, double> key{p.clean_coefficient, p.corrupt_coefficient};
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == key; });
    if (it == groups.end()) {
      groups.push_back({key, {}});
      it = groups.end() - 1;
    }
    it->second.push_back(&p);
  }
  const std::size_t pack = std::max<std::size_t>(1, opt.pack);
  std::vector<std::span<const PreparedSample* const>> chunks;
  for (const auto& g : groups)
    for (std::size_t off = 0; off < g.second.size(); off += pack)
      chunks.emplace_back(g.second.data() + off, std::min(pack, g.second.size() - off));
  std::vector<IEStore> partial(chunks.size());
  parallel_for(chunks.size(), [&](std::size_t c) {
    partial[c] = empty_store(model, v.layer);
    eap_group(model, chunks[c], v, opt, partial[c]);
  });
  for (const auto& part : partial) {
    for (std::size_t e = 0; e < store.edge_scores.size(); ++e) store.edge_scores[e] += part.edge_scores[e];
    for (auto& [n, x] : store.node_scores) x += part.node_scores.at(n);
    store.dims += part.dims;
  }
  const double inv_n = 1.0 / static_cast<double>(prepared.size());
  for (double& s : store.edge_scores) s *= inv_n;
  for (auto& [n, s] : store.node_scores) s *= inv_n;
  store.dims *= inv_n;
  return store;
}

double patched_metric(const Model& model, const PreparedSample& prep, const SteeringVector& v,
                      std::span<const EdgeId> edges, MetricKind kind) {
  InterventionSet iv = v.intervention(prep.corrupt_coefficient);
  for (const auto& e : edges) iv.edge_substitutions[e] = edge_activation(prep.clean, e);
  return metric_value(prep, run_logits(model, prep.tokens, iv), kind);
}

double direct_patch_ie(const Model& model, const PreparedSample& prep, const SteeringVector& v, const EdgeId& edge,
                       MetricKind kind) {
  const EdgeId one[] = {edge};
  return patched_metric(model, prep, v, one, kind) - prep.m_corrupt;
}

IEStore direct_patch_scores(const Model& model, std::span<const PatchSample> samples, const SteeringVector& v,
                            const MetricSpec& metric, bool normalize_by_positions) {
  IEStore store = empty_store(model, v.layer);
  std::vector<std::vector<double>> per(samples.size());
  std::vector<std::size_t> kept(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    auto p = prepare_sample(model, samples[i], v, metric, normalize_by_positions);
    kept[i] = p.kept();
    if (kept[i] == 0) return;
    per[i].resize(store.edges.size());
    for (std::size_t e = 0; e < store.edges.size(); ++e)
      per[i][e] = direct_patch_ie(model, p, v, store.edges[e], metric.kind);
  });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (kept[i] == 0) {
      ++store.skipped;
      continue;
    }
    ++store.samples;
    store.positions_evaluated += static_cast<long>(kept[i]);
    for (std::size_t e = 0; e < store.edges.size(); ++e) store.edge_scores[e] += per[i][e];
  }
  if (store.samples > 0)
    for (double& s : store.edge_scores) s /= store.samples;
  return store;
}

IEStore average(std::span<const IEStore> stores) {
  if (stores.empty()) throw ContractError("average: no stores");
  IEStore out = stores.front();
  for (std::size_t i = 1; i < stores.size(); ++i) {
    const auto& s = stores[i];
    if (s.edges != out.edges) throw ContractError("average: stores cover different graphs");
    for (std::size_t e = 0; e < out.edge_scores.size(); ++e) out.edge_scores[e] += s.edge_scores[e];
    for (auto& [n, v] : out.node_scores) v += s.node_scores.at(n);
    out.dims += s.dims;
    out.positions_evaluated += s.positions_evaluated;
    out.samples += s.samples;
    out.skipped += s.skipped;
  }
  const double inv = 1.0 / static_cast<double>(stores.size());
  for (double& v : out.edge_scores) v *= inv;
  for (auto& [n, v] : out.node_scores) v *= inv;
  out.dims *= inv;
  return out;
}

}  // namespace steerscope
