#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerscope/graph.hpp"
#include "steerscope/tape.hpp"
#include "steerscope/tensor.hpp"

namespace steerscope {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_ff = 256;
  int vocab = 64;
  int max_seq = 48;
  bool tie_embeddings = false;
  // Test fixture: norms reduce to x ⊙ γ, attention is a fixed uniform causal
  // average, and the MLP activation is the identity. The network is then linear.
  bool linear = false;
  double norm_eps = 1e-6;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct HeadWeights {
  Tensor w_q, w_k, w_v, w_o;  // each [d_model, d_head]; head output = z · w_oᵀ
};

struct LayerWeights {
  Tensor attn_gamma;  // [d_model]
  std::vector<HeadWeights> heads;
  Tensor mlp_gamma;  // [d_model]
  Tensor w_in;       // [d_model, d_ff]
  Tensor w_out;      // [d_ff, d_model]
};

/// Pre-norm decoder-only transformer weights.
struct Model {
  ModelConfig config;
  Tensor embed;        // [vocab, d_model]
  Tensor pos;          // [max_seq, d_model]
  std::vector<LayerWeights> layers;
  Tensor final_gamma;  // [d_model]
  Tensor unembed;      // [d_model, vocab]; unused when tie_embeddings

  static Model init(const ModelConfig& config, std::uint64_t seed);

  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<std::pair<std::string, const Tensor*>> parameters() const;
  /// [d_model, vocab] readout matrix (the transposed embedding when tied).
  Tensor unembedding() const;
  /// Order-dependent digest of every weight, for "weights unchanged" checks.
  std::uint64_t checksum() const;
};

struct Steering {
  int layer = 0;
  Tensor direction;  // [d_model]
  double coefficient = 1.0;
};

/// Everything a forward pass can be asked to change.
struct InterventionSet {
  std::optional<Steering> steering;
  /// Edge → replacement upstream contribution [rows, d_model].
  std::map<EdgeId, Tensor> edge_substitutions;
  /// Per layer, per head: replacement attention probabilities / value tensors.
  /// An empty outer vector or an empty tensor leaves that slot live.
  std::vector<std::vector<Tensor>> frozen_probs;
  std::vector<std::vector<Tensor>> frozen_values;
  /// Direction d whose normalised contribution c_i·(d ⊙ γ) is removed from the value
  /// input (or MLP input) of every layer ≥ subtract_from_layer; c_i is the live 1/RMS.
  std::optional<Tensor> value_input_subtract;
  std::optional<Tensor> mlp_input_subtract;
  int subtract_from_layer = 0;
  /// Direction projected out of the residual before every block and the readout.
  std::optional<Tensor> ablate_direction;

  static InterventionSet steer(int layer, Tensor direction, double coefficient);
};

/// Handles into the tape for every hook point of one forward pass.
struct Trace {
  Var embed;
  std::vector<Var> resid_in;  // residual consumed by layer l (includes steering at l)
  std::vector<std::vector<std::array<Var, 3>>> attn_in;  // raw q/k/v channel inputs
  std::vector<std::vector<Var>> probs;   // [layer][head], single-sequence passes only
  std::vector<std::vector<Var>> values;  // [layer][head] post-W_V
  std::vector<std::vector<Var>> head_out;
  std::vector<Var> mlp_in;
  std::vector<Var> mlp_out;
  Var logits_in;
  Var logits;
};

/// Plain-tensor copy of a Trace.
struct ActivationCache {
  Tensor embed;
  std::vector<Tensor> resid_in;
  std::vector<std::vector<std::array<Tensor, 3>>> attn_in;
  std::vector<std::vector<std::array<Tensor, 3>>> attn_scale;  // per-row 1/RMS of each channel
  std::vector<std::vector<Tensor>> probs;
  std::vector<std::vector<Tensor>> values;
  std::vector<std::vector<Tensor>> head_out;
  std::vector<Tensor> mlp_in;
  std::vector<Tensor> mlp_scale;
  std::vector<Tensor> mlp_out;
  Tensor logits_in;
  Tensor logits;

  const Tensor& node_output(const NodeId& node) const;
  const Tensor& channel_input(const NodeId& downstream, Channel channel) const;
};

/// Model weights bound as tape leaves.
struct BoundModel {
  const Model* model = nullptr;
  Var embed, pos, final_gamma, unembed;
  struct Layer {
    Var attn_gamma, mlp_gamma, w_in, w_out;
    std::vector<std::array<Var, 4>> heads;  // q, k, v, o
  };
  std::vector<Layer> layers;
};

BoundModel bind(Tape& tape, const Model& model, bool requires_grad);

struct ForwardOptions {
  /// Mark every hook point so its gradient is retained by backward().
  bool capture = false;
  /// Steering direction as a tape variable (used when fitting a vector); overrides
  /// InterventionSet::steering's direction but keeps its layer and coefficient.
  std::optional<Var> steer_direction;
};

/// Forward over one or more sequences packed row-wise. Interventions carrying
/// per-row tensors require a single sequence.
Trace forward(Tape& tape, const BoundModel& bound, std::span<const std::vector<int>> sequences,
              const InterventionSet& interventions, const ForwardOptions& options = {});

ActivationCache make_cache(const Trace& trace, const ModelConfig& config);

struct ForwardResult {
  Tensor logits;  // [N, vocab]
  ActivationCache cache;
};

/// Inference-only single-sequence pass.
ForwardResult run(const Model& model, std::span<const int> tokens, const InterventionSet& interventions = {});
/// Logits only; skips building the cache.
Tensor run_logits(const Model& model, std::span<const int> tokens, const InterventionSet& interventions = {});

/// Output of `edge.upstream` as seen by the downstream channel.
const Tensor& edge_activation(const ActivationCache& cache, const EdgeId& edge);

/// Greedy decoding. Stops after `max_new` tokens or once `end_token` is emitted.
std::vector<int> generate_greedy(const Model& model, std::span<const int> prompt,
                                 const InterventionSet& interventions, int max_new, int end_token);

/// Greedy decoding of several prompts at once in one packed forward per step.
/// Returns only the generated tokens of each prompt. Rejects per-row interventions.
std::vector<std::vector<int>> generate_greedy_batch(const Model& model, std::span<const std::vector<int>> prompts,
                                                    const InterventionSet& interventions, int max_new,
                                                    int end_token);

std::size_t argmax(std::span<const double> row);

}  // namespace steerscope
