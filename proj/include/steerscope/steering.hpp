#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "steerscope/errors.hpp"
#include "steerscope/model.hpp"
#include "steerscope/toy.hpp"

namespace steerscope {

enum class Method { DIM, NTP, PO };

const char* to_string(Method m) noexcept;
Method parse_method(const std::string& s);

struct SteeringVector {
  Tensor values;        // [d_model]
  int layer = 0;
  int position = 0;     // relative to prompt end (DIM); 0 when not applicable
  double coefficient = 1.0;
  Method method = Method::DIM;

  InterventionSet intervention() const { return InterventionSet::steer(layer, values, coefficient); }
  InterventionSet intervention(double alpha) const { return InterventionSet::steer(layer, values, alpha); }
};

/// mean(harm rows) − mean(safe rows).
Tensor mean_difference(std::span<const Tensor> harm, std::span<const Tensor> safe);

/// Residual entering `layer` at `position` (−1 = last prompt token) of each prompt.
std::vector<Tensor> residuals_at(const Model& model, std::span<const std::vector<int>> prompts, int layer,
                                 int position);

SteeringVector dim_vector(const Model& model, std::span<const std::vector<int>> harm,
                          std::span<const std::vector<int>> safe, int layer, int position);

/// log(P / (1 − P)) with P the mass of `refusal_set`, clamped to [1e-12, 1 − 1e-12].
double refusal_metric(std::span<const double> probs, std::span<const int> refusal_set);

/// h minus its projection on unit(s).
Tensor directional_ablation(const Tensor& h, const Tensor& s);

/// KL(p ‖ q) with both clamped at 1e-12 before logs.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Next-token distributions at the last position of each prompt, [n, V].
Tensor last_position_probs(const Model& model, std::span<const std::vector<int>> prompts,
                           const InterventionSet& interventions = {});

struct SelectionScores {
  int layer = 0;
  int position = 0;
  double bypass = 0.0;
  double induce = 0.0;
  double kl = 0.0;
  bool feasible = false;
  double objective = 0.0;  // σ(bypass) − σ(induce)
};

struct SelectionConfig {
  double alpha = 1.0;
  double max_layer_fraction = 0.8;
  double kl_max = 0.1;
  std::vector<int> positions{-1, -2, -3, -4};
  std::vector<int> refusal_set{tok::REFUSE};
};

class SelectionError : public Error {
 public:
  SelectionError(const std::string& what, std::vector<SelectionScores> table)
      : Error(ErrorKind::selection, what), table_(std::move(table)) {}
  const std::vector<SelectionScores>& table() const noexcept { return table_; }

 private:
  std::vector<SelectionScores> table_;
};

/// Applies the constraints (induce > 0, kl < kl_max, ℓ < fraction·L) and marks the
/// argmin of the objective. Returns the index of the winner; throws SelectionError
/// when nothing is feasible.
std::size_t choose_candidate(std::vector<SelectionScores>& table, int n_layers, const SelectionConfig& cfg);

struct SelectionResult {
  SteeringVector best;
  std::vector<SelectionScores> table;
};

/// DIM over the candidate grid, scored on the validation prompts.
SelectionResult select_candidate(const Model& model, std::span<const std::vector<int>> harm_train,
                                 std::span<const std::vector<int>> safe_train,
                                 std::span<const std::vector<int>> harm_val,
                                 std::span<const std::vector<int>> safe_val, const SelectionConfig& cfg = {});

struct NtpExample {
  std::vector<int> prompt;
  std::vector<int> response;
};

struct PoExample {
  std::vector<int> prompt;
  std::vector<int> chosen;    // y^w, expresses the concept
  std::vector<int> rejected;  // y^l
};

/// Harmless prompts of a split paired with the refusal response.
std::vector<NtpExample> ntp_dataset(const Corpus& corpus, Split split);
/// Harmless prompts of a split: chosen = refusal, rejected = the compliant response.
std::vector<PoExample> po_dataset(const Corpus& corpus, Split split);

struct FitHyper {
  double lr = 1e-2;
  int epochs = 20;
  int batch = 32;
  std::uint64_t seed = 0;
  double phi = 0.02;  // PO only
};

struct FitResult {
  SteeringVector vector;
  std::vector<double> train_loss;  // per epoch, mean over minibatches
  std::vector<double> val_loss;    // index 0 is the initial (zero) vector
  int best_epoch = 0;
};

/// Σ_i log p(response_i | prompt, steered) per example, for a fixed direction.
std::vector<double> response_logprobs(const Model& model, std::span<const std::vector<int>> prompts,
                                      std::span<const std::vector<int>> responses,
                                      const InterventionSet& interventions = {});

/// Mean over examples of −Σ log p(y | x, h ← h + αv).
double ntp_loss(const Model& model, std::span<const NtpExample> data, int layer, double alpha, const Tensor& v);

/// β⁺ = max((ll − lw)·φ, 1).
double po_beta(double ref_logp_chosen, double ref_logp_rejected, double phi);
/// −log σ(Δ) with Δ = (β/|y^w|)·lw − (1/|y^l|)·ll.
double po_pair_loss(double logp_chosen, double logp_rejected, std::size_t len_chosen, std::size_t len_rejected,
                    double beta);
double po_loss(const Model& model, std::span<const PoExample> data, int layer, double alpha, const Tensor& v,
               double phi);

FitResult train_ntp(const Model& model, std::span<const NtpExample> train, std::span<const NtpExample> val,
                    int layer, double alpha, const FitHyper& hyper);
FitResult train_po(const Model& model, std::span<const PoExample> train, std::span<const PoExample> val,
                   int layer, double alpha, const FitHyper& hyper);

}  // namespace steerscope
