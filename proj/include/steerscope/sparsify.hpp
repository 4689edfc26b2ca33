#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "steerscope/steering.hpp"

namespace steerscope {

enum class SparsifyMethod { gradient, ie, bottom_k, dropout };

const char* to_string(SparsifyMethod m) noexcept;
SparsifyMethod parse_sparsify_method(const std::string& s);

struct SparsifiedVector {
  Tensor values;           // masked copy of the base vector
  std::vector<bool> kept;  // per dimension
  SparsifyMethod method = SparsifyMethod::gradient;
  double parameter = 0.0;  // τ or k
  std::uint64_t seed = 0;  // dropout only

  std::size_t support() const;
  std::size_t zeroed() const { return kept.size() - support(); }
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Keeps dimension i iff s_i ≠ 0 and ie_i / s_i ≥ τ.
SparsifiedVector gradient_sparsify(const Tensor& s, const Tensor& ie, double tau);
/// Zeroes the k dimensions of smallest |ie| (ties: lower index first).
SparsifiedVector ie_sparsify(const Tensor& s, const Tensor& ie, std::size_t k);
/// Zeroes the k dimensions of smallest |s|.
SparsifiedVector bottomk_sparsify(const Tensor& s, std::size_t k);
/// Zeroes k dimensions chosen uniformly without replacement.
SparsifiedVector dropout_sparsify(const Tensor& s, std::size_t k, std::uint64_t seed);

/// Number of dimensions gradient_sparsify zeroes at each τ.
std::vector<std::size_t> matched_k(const Tensor& s, const Tensor& ie, std::span<const double> taus);

double iou(const SparsifiedVector& a, const SparsifiedVector& b);

/// P(X ≥ overlap) for X ~ Hypergeometric(population d, a marked, b drawn).
double hypergeom_pvalue(long d, long a, long b, long overlap);

struct Rational {
  unsigned long long num = 0, den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};
/// Exact tail by integer enumeration; d ≤ 60.
Rational hypergeom_pvalue_exact(long d, long a, long b, long overlap);

std::vector<double> default_tau_grid();

struct SweepVector {
  std::string name;  // dim / ntp / po
  SteeringVector vector;
  Tensor ie;  // dimension-level IE
};

struct SweepRow {
  std::string vector;
  SparsifyMethod method = SparsifyMethod::gradient;
  double tau = 0.0;
  std::size_t k = 0;
  double sparsity_pct = 0.0;
  std::string cls;  // "harmful" (bypass, −α) or "harmless" (induce, +α)
  std::uint64_t seed = 0;
  double asr = 0.0;
};

struct IouRow {
  double tau = 0.0;
  std::string pair;
  std::size_t support_a = 0, support_b = 0, overlap = 0;
  double iou = 0.0;
  double pvalue = 1.0;
  bool defined = true;  // false when a support is empty
};

struct SweepConfig {
  std::vector<double> taus = default_tau_grid();
  std::vector<std::uint64_t> dropout_seeds{0, 1, 2};
  double alpha = 1.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<IouRow> iou;
};

/// ASR-analogs: harmful prompts count non-refusals under −α, harmless prompts count
/// refusals under +α.
SweepResult sparsity_sweep(const Model& model, std::span<const SweepVector> vectors,
                           std::span<const PromptRecord* const> harmful, std::span<const PromptRecord* const> harmless,
                           const SweepConfig& cfg = {});

/// Mean over vectors (and dropout seeds) of the ASR for one method, τ and class.
double mean_asr(const SweepResult& r, SparsifyMethod m, double tau, const std::string& cls);
/// Mean over vectors of the sparsity percentage at τ.
double mean_sparsity(const SweepResult& r, double tau);

}  // namespace steerscope
