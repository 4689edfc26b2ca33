#include "steerscope/svv.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "steerscope/ops.hpp"

namespace steerscope {

Tensor ov_matrix(const HeadWeights& head) { return matmul_nt(head.w_v, head.w_o); }

Tensor compute_svv(const Tensor& s, const Tensor& gamma, const HeadWeights& head) {
  const std::size_t d = head.w_v.rows();
  if (s.size() != d || gamma.size() != d || head.w_o.rows() != d || head.w_o.cols() != head.w_v.cols())
    throw DimensionError("compute_svv: shape mismatch");
  Tensor sg(Shape{1, d});
  for (std::size_t i = 0; i < d; ++i) sg[i] = s[i] * gamma[i];
  Tensor z = matmul(sg, head.w_v);
  return matmul_nt(z, head.w_o).reshaped(Shape{d});
}

SteeringValueVector compute_svv(const Model& model, const Tensor& s, int layer, int head) {
  const auto& cfg = model.config;
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads)
    throw ContractError("compute_svv: head index out of range");
  const auto& lw = model.layers[static_cast<std::size_t>(layer)];
  SteeringValueVector out;
  out.layer = layer;
  out.head = head;
  out.values = compute_svv(s, lw.attn_gamma, lw.heads[static_cast<std::size_t>(head)]);
  return out;
}

Decomposition decompose_attention(const Model& model, std::span<const int> tokens, int layer, const Tensor& s,
                                  double alpha) {
  const auto& cfg = model.config;
  if (layer < 0 || layer >= cfg.n_layers) throw ContractError("decompose_attention: layer out of range");
  const auto lu = static_cast<std::size_t>(layer);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  if (s.size() != d) throw DimensionError("decompose_attention: steering vector length");
  auto r = run(model, tokens, InterventionSet::steer(layer, s, alpha));
  const auto& cache = r.cache;
  const std::size_t n = tokens.size();
  const auto& lw = model.layers[lu];

  Tensor htilde = cache.resid_in[lu];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) htilde.at(i, j) = (htilde.at(i, j) - alpha * s[j]) * lw.attn_gamma[j];

  Decomposition out;
  out.direct = Tensor(Shape{n, d}, 0.0);
  out.context = Tensor(Shape{n, d}, 0.0);
  out.steering = Tensor(Shape{n, d}, 0.0);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const auto hu = static_cast<std::size_t>(h);
    out.direct += cache.head_out[lu][hu];
    const Tensor& a = cache.probs[lu][hu];
    const Tensor& c = cache.attn_scale[lu][hu][static_cast<std::size_t>(Channel::v)];
    Tensor ac = a;  // A · D_c
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < n; ++t) ac.at(i, t) *= c[t];
    out.context += matmul(matmul(ac, htilde), ov_matrix(lw.heads[hu]));
    const Tensor svv = compute_svv(s, lw.attn_gamma, lw.heads[hu]);
    for (std::size_t i = 0; i < n; ++i) {
      double ch = 0.0;
      for (std::size_t t = 0; t < n; ++t) ch += ac.at(i, t);
      for (std::size_t j = 0; j < d; ++j) out.steering.at(i, j) += alpha * ch * svv[j];
    }
  }
  out.residual = max_abs_diff(out.direct, out.context + out.steering);
  return out;
}

double verify_decomposition(const Model& model, std::span<const int> tokens, int layer, const Tensor& s,
                            double alpha) {
  return decompose_attention(model, tokens, layer, s, alpha).residual;
}

Tensor lens_logits(const Model& model, const Tensor& v, bool final_norm) {
  const std::size_t d = static_cast<std::size_t>(model.config.d_model);
  if (v.size() != d) throw DimensionError("logit lens: vector length");
  Tensor x = v.reshaped(Shape{1, d});
  if (final_norm) {
    const Tensor c = model.config.linear ? Tensor(Shape{1}, 1.0) : ops::rms_inverse(x, model.config.norm_eps);
    for (std::size_t j = 0; j < d; ++j) x[j] *= c[0] * model.final_gamma[j];
  }
  return matmul(x, model.unembedding()).reshaped(Shape{static_cast<std::size_t>(model.config.vocab)});
}

LogitLensReport logit_lens(const Model& model, const Tensor& v, int top_k, const std::string& source,
                           bool final_norm) {
  if (top_k < 1) throw ContractError("logit lens needs top_k >= 1");
  const Tensor logits = lens_logits(model, v, final_norm);
  std::vector<int> ids(logits.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  LogitLensReport r;
  r.source = source;
  const std::size_t k = std::min(ids.size(), static_cast<std::size_t>(top_k));
  for (std::size_t i = 0; i < k; ++i) r.top.push_back({ids[i], logits[static_cast<std::size_t>(ids[i])]});
  return r;
}

std::vector<std::pair<int, int>> top_heads(const IEStore& scores, std::size_t n) {
  std::vector<std::pair<double, NodeId>> heads;
  for (const auto& [node, s] : scores.node_scores)
    if (node.kind == NodeKind::AttnHead) heads.push_back({std::abs(s), node});
  std::stable_sort(heads.begin(), heads.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < std::min(n, heads.size()); ++i) out.push_back({heads[i].second.layer, heads[i].second.head});
  return out;
}

std::vector<LogitLensReport> svv_report(const Model& model, const Tensor& s, int steer_layer,
                                        std::span<const std::pair<int, int>> heads, int top_k, bool final_norm) {
  if (heads.empty()) throw ContractError("svv report needs at least one head");
  std::vector<LogitLensReport> rows;
  rows.push_back(logit_lens(model, s, top_k, "vector", final_norm));
  for (const auto& [l, h] : heads) {
    if (l < steer_layer) throw ContractError("svv report: head below the steering layer");
    auto svv = compute_svv(model, s, l, h);
    const std::string name = NodeId::attn(l, h).str();
    rows.push_back(logit_lens(model, svv.values, top_k, name, final_norm));
    rows.push_back(logit_lens(model, svv.values * -1.0, top_k, "(-)" + name, final_norm));
  }
  Tensor sum(Shape{static_cast<std::size_t>(model.config.d_model)}, 0.0);
  for (int l = steer_layer; l < model.config.n_layers; ++l)
    for (int h = 0; h < model.config.n_heads; ++h) sum += compute_svv(model, s, l, h).values;
  rows.push_back(logit_lens(model, sum, top_k, "SUM", final_norm));
  return rows;
}

}  // namespace steerscope
