#pragma once

#include <span>
#include <string>
#include <vector>

#include "steerscope/attribution.hpp"
#include "steerscope/model.hpp"

namespace steerscope {

struct SteeringValueVector {
  int layer = 0;
  int head = 0;
  Tensor values;  // [d_model]
  bool negated = false;
};

/// W_OV = W_V · W_Oᵀ, [d_model, d_model].
Tensor ov_matrix(const HeadWeights& head);

/// (s ⊙ γ) · W_V · W_Oᵀ.
Tensor compute_svv(const Tensor& s, const Tensor& gamma, const HeadWeights& head);
SteeringValueVector compute_svv(const Model& model, const Tensor& s, int layer, int head);

/// The two terms of a steered attention layer, summed over heads.
struct Decomposition {
  Tensor direct;    // steered attention output from the forward pass
  Tensor context;   // Σ_h A^h D_c H̃ W_OV^h
  Tensor steering;  // Σ_h α · D_{c^h} svv^h(s)
  double residual = 0.0;  // max |direct − context − steering|
};

/// Runs `tokens` with `s` added at `layer` (coefficient α) and reassembles the
/// attention output of that layer from the cached A^h and D_c.
Decomposition decompose_attention(const Model& model, std::span<const int> tokens, int layer, const Tensor& s,
                                  double alpha);
double verify_decomposition(const Model& model, std::span<const int> tokens, int layer, const Tensor& s,
                            double alpha);

struct LensEntry {
  int token = 0;
  double logit = 0.0;
};

struct LogitLensReport {
  std::string source;
  std::vector<LensEntry> top;  // descending by logit, ties by token id
};

/// Projects v onto the unembedding (optionally through the final norm first).
Tensor lens_logits(const Model& model, const Tensor& v, bool final_norm = false);
LogitLensReport logit_lens(const Model& model, const Tensor& v, int top_k, const std::string& source = "vector",
                           bool final_norm = false);

/// The `n` heads at or above the steering layer with the largest |node IE|.
std::vector<std::pair<int, int>> top_heads(const IEStore& scores, std::size_t n = 6);

/// Rows: raw vector, each head's svv and its negation, and the SUM of all svvs
/// at or above the steering layer.
std::vector<LogitLensReport> svv_report(const Model& model, const Tensor& s, int steer_layer,
                                        std::span<const std::pair<int, int>> heads, int top_k,
                                        bool final_norm = false);

}  // namespace steerscope
