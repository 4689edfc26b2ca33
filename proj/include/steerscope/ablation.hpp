#pragma once

#include <span>
#include <string>
#include <vector>

#include "steerscope/steering.hpp"

namespace steerscope {

enum class AblationKind { none, qk_freeze, ov_freeze, svv_subtract, mlp_subtract };

const char* to_string(AblationKind k) noexcept;
AblationKind parse_ablation(const std::string& s);
std::vector<AblationKind> all_ablations();

struct AblationSpec {
  AblationKind kind = AblationKind::none;
  int from_layer = -1;  // -1: the steering layer
};

/// Steered forward interventions for one step, given the base run on the same prefix.
InterventionSet ablated_interventions(const Model& model, const SteeringVector& v, double alpha,
                                      const AblationSpec& spec, const ActivationCache& base);

struct AblatedGeneration {
  std::vector<int> tokens;  // generated tokens only
  std::vector<ActivationCache> base_steps, steered_steps;  // filled when diagnostics are requested
};

/// Greedy decoding where every step runs the base model on the current prefix and
/// then the steered model with the spec's activations patched in.
AblatedGeneration generate_ablated(const Model& model, std::span<const int> prompt, const SteeringVector& v,
                                   double alpha, const AblationSpec& spec, int max_new, int end_token = tok::END,
                                   bool diagnostics = false);

struct AblationRow {
  AblationKind kind = AblationKind::none;
  double induce = 0.0;        // refusal rate on harmless prompts, α = +|α|
  double bypass = 0.0;        // non-refusal rate on harmful prompts, α = −|α|
  double induce_change = 0.0;  // percent change vs none
  double bypass_change = 0.0;
  double avg_drop = 0.0;       // mean percentage drop over the two classes
};

/// Table of ASR-analogs per spec. The first row is always `none`.
std::vector<AblationRow> ablation_report(const Model& model, std::span<const std::vector<int>> harmful,
                                         std::span<const std::vector<int>> harmless, const SteeringVector& v,
                                         double alpha, std::span<const AblationKind> kinds);

}  // namespace steerscope
