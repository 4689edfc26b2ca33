#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "steerscope/attribution.hpp"

namespace steerscope {

struct Circuit {
  int steer_layer = 0;
  std::vector<EdgeId> edges;  // ranked order of admission
  std::size_t requested = 0;
  std::string source;         // e.g. "dim/logit-diff"

  std::size_t size() const { return edges.size(); }
  bool contains(const EdgeId& e) const;
  std::set<EdgeId> edge_set() const { return {edges.begin(), edges.end()}; }
};

class CircuitError : public Error {
 public:
  CircuitError(const std::string& what, std::size_t max_size)
      : Error(ErrorKind::contract, what), max_size_(max_size) {}
  std::size_t max_attainable() const noexcept { return max_size_; }

 private:
  std::size_t max_size_;
};

/// Edges of `edges` that lie on a SteerResid(layer) → Logits path inside the set.
std::vector<EdgeId> prune_unreachable(std::span<const EdgeId> edges, int steer_layer);

struct BuildOptions {
  bool signed_rank = false;  // rank by score instead of |score|
};

/// Indices of `edges` ordered by |score| (or score) descending, ties by edge id text.
std::vector<std::size_t> rank_edges(std::span<const EdgeId> edges, std::span<const double> scores,
                                    const BuildOptions& opt = {});

/// Greedy top-k with reachability pruning, growing k until the pruned set has at
/// least n edges. A step can admit several edges at once when one edge reconnects
/// earlier dangling ones, so the result may exceed n.
Circuit build_circuit(std::span<const EdgeId> edges, std::span<const double> scores, int steer_layer,
                      std::size_t n, const BuildOptions& opt = {});
Circuit build_circuit(const IEStore& scores, std::size_t n, const BuildOptions& opt = {});

/// Same construction driven by uniform random scores.
Circuit random_circuit(const ModelGraph& graph, std::size_t n, std::uint64_t seed);

/// Steered edges not in `c`, unpruned.
Circuit complement(const Circuit& c, const ModelGraph& graph);

/// Steered model teacher-forced on its own response, with base-run caches.
struct FaithSample {
  std::vector<int> tokens;
  std::size_t first_row = 0;
  std::vector<std::size_t> rows;  // kept rows (steered and base argmax differ)
  std::vector<int> y, y_star;     // per kept row
  double alpha = 0.0;
  ActivationCache base;
  std::vector<double> m_full, m_empty;  // per kept row
};

FaithSample prepare_faith_sample(const Model& model, std::span<const int> prompt,
                                 std::span<const int> steered_response, const SteeringVector& v, double alpha);
/// Uses the steered response of each flip pair.
std::vector<FaithSample> faith_samples(const Model& model, std::span<const PatchSample> samples,
                                       const SteeringVector& v);

struct FaithResult {
  double value = 0.0;
  long positions = 0;
  bool missing = true;  // no unmasked positions
};

/// Mean over kept positions of (m(C) − m(∅)) / (m(M) − m(∅)), where m is the
/// steered-vs-base logit difference and edges outside C carry base contributions.
FaithResult faithfulness(const Model& model, const Circuit& circuit, std::span<const FaithSample> samples,
                         const SteeringVector& v);

struct SizePoint {
  double fraction = 0.0;
  std::size_t requested = 0;
  std::size_t size = 0;
  FaithResult faith;
};

struct MinFaithful {
  std::optional<std::size_t> index;  // into curve
  std::vector<SizePoint> curve;
  std::optional<Circuit> circuit;
};

/// Evaluates circuits over a grid of edge fractions (ascending) and returns the
/// first whose faithfulness reaches `threshold`.
MinFaithful min_faithful_size(const Model& model, const IEStore& scores, std::span<const FaithSample> samples,
                              const SteeringVector& v, std::span<const double> fractions, double threshold = 0.85,
                              const BuildOptions& opt = {});

std::vector<double> default_size_grid();

/// |C1 ∩ C2| / min(|C1|, |C2|).
double overlap(const Circuit& a, const Circuit& b);

/// Faithfulness of vector B's steering through A's circuit on B's samples.
FaithResult interchange_faithfulness(const Model& model, const Circuit& circuit_a, const SteeringVector& b,
                                     std::span<const FaithSample> samples_b);

struct EdgeDistribution {
  // upstream: SteerResid, AttnHead, Mlp; downstream: q, k, v, mlp-in, logits-in
  std::array<std::size_t, 3> upstream{};
  std::array<std::size_t, 5> downstream{};
  std::size_t total = 0;

  static constexpr std::array<const char*, 3> upstream_names{"resid", "attn", "mlp"};
  static constexpr std::array<const char*, 5> downstream_names{"q", "k", "v", "mlp-in", "logits-in"};
  double upstream_pct(std::size_t i) const;
  double downstream_pct(std::size_t i) const;
};

/// Counts over the first `top_k` circuit edges in ranked order (all when absent).
EdgeDistribution edge_distribution(const Circuit& c, std::optional<std::size_t> top_k = std::nullopt);

void write_circuit_csv(const std::string& path, const Circuit& c, double threshold);
Circuit read_circuit_csv(const std::string& path);
std::string circuit_dot(const Circuit& c);

}  // namespace steerscope
