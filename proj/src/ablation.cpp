#include "steerscope/ablation.hpp"

#include <cmath>

#include "steerscope/parallel.hpp"

namespace steerscope {

const char* to_string(AblationKind k) noexcept {
  switch (k) {
    case AblationKind::none: return "none";
    case AblationKind::qk_freeze: return "qk-freeze";
    case AblationKind::ov_freeze: return "ov-freeze";
    case AblationKind::svv_subtract: return "svv-subtract";
    case AblationKind::mlp_subtract: return "mlp-subtract";
  }
  return "?";
}

AblationKind parse_ablation(const std::string& s) {
  for (auto k : all_ablations())
    if (s == to_string(k)) return k;
  throw InputError("unknown ablation '" + s + "'");
}

std::vector<AblationKind> all_ablations() {
  return {AblationKind::none, AblationKind::qk_freeze, AblationKind::ov_freeze, AblationKind::svv_subtract,
          AblationKind::mlp_subtract};
}

InterventionSet ablated_interventions(const Model& model, const SteeringVector& v, double alpha,
                                      const AblationSpec& spec, const ActivationCache& base) {
  const int L = model.config.n_layers, H = model.config.n_heads;
  const int from = spec.from_layer < 0 ? v.layer : spec.from_layer;
  if (from >= L) throw ContractError("ablation layer " + std::to_string(from) + " exceeds model depth");
  InterventionSet iv = v.intervention(alpha);
  auto freeze = [&](std::vector<std::vector<Tensor>>& slot, const std::vector<std::vector<Tensor>>& src) {
    slot.assign(static_cast<std::size_t>(L), std::vector<Tensor>(static_cast<std::size_t>(H)));
    for (int l = from; l < L; ++l)
      for (int h = 0; h < H; ++h)
        slot[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
            src[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
  };
  switch (spec.kind) {
    case AblationKind::none: break;
    case AblationKind::qk_freeze: freeze(iv.frozen_probs, base.probs); break;
    case AblationKind::ov_freeze: freeze(iv.frozen_values, base.values); break;
    case AblationKind::svv_subtract:
      iv.value_input_subtract = v.values * alpha;
      iv.subtract_from_layer = from;
      break;
    case AblationKind::mlp_subtract:
      iv.mlp_input_subtract = v.values * alpha;
      iv.subtract_from_layer = from;
      break;
  }
  return iv;
}

AblatedGeneration generate_ablated(const Model& model, std::span<const int> prompt, const SteeringVector& v,
                                   double alpha, const AblationSpec& spec, int max_new, int end_token,
                                   bool diagnostics) {
  if (max_new < 0) throw ContractError("max_new must be nonnegative");
  AblatedGeneration out;
  std::vector<int> seq(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new && static_cast<int>(seq.size()) < model.config.max_seq; ++step) {
    auto base = run(model, seq);
    auto iv = ablated_interventions(model, v, alpha, spec, base.cache);
    Tensor logits;
    if (diagnostics) {
      auto steered = run(model, seq, iv);
      logits = steered.logits;
      out.base_steps.push_back(std::move(base.cache));
      out.steered_steps.push_back(std::move(steered.cache));
    } else {
      logits = run_logits(model, seq, iv);
    }
    const int next = static_cast<int>(argmax(logits.row(seq.size() - 1)));
    seq.push_back(next);
    out.tokens.push_back(next);
    if (next == end_token) break;
  }
  return out;
}

namespace {

double rate(const Model& model, std::span<const std::vector<int>> prompts, const SteeringVector& v, double alpha,
            AblationKind kind, bool count_refusals) {
  std::vector<char> refused(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    auto g = generate_ablated(model, prompts[i], v, alpha, {kind, -1}, kRefusalWindow);
    refused[i] = is_refusal(g.tokens);
  });
  std::size_t n = 0;
  for (char r : refused) n += (r != 0) == count_refusals;
  return static_cast<double>(n) / static_cast<double>(prompts.size());
}

double pct_change(double x, double ref) { return ref == 0.0 ? 0.0 : 100.0 * (x - ref) / ref; }

}  // namespace

std::vector<AblationRow> ablation_report(const Model& model, std::span<const std::vector<int>> harmful,
                                         std::span<const std::vector<int>> harmless, const SteeringVector& v,
                                         double alpha, std::span<const AblationKind> kinds) {
  if (harmful.empty() || harmless.empty()) throw ContractError("ablation report needs prompts of both classes");
  const double a = std::abs(alpha);
  std::vector<AblationKind> order{AblationKind::none};
  for (auto k : kinds)
    if (k != AblationKind::none) order.push_back(k);
  std::vector<AblationRow> rows;
  for (auto k : order) {
    AblationRow r;
    r.kind = k;
    r.induce = rate(model, harmless, v, a, k, true);
    r.bypass = rate(model, harmful, v, -a, k, false);
    rows.push_back(r);
  }
  for (auto& r : rows) {
    r.induce_change = pct_change(r.induce, rows.front().induce);
    r.bypass_change = pct_change(r.bypass, rows.front().bypass);
    r.avg_drop = 0.0 - (r.induce_change + r.bypass_change) / 2.0;
  }
  return rows;
}

}  // namespace steerscope
