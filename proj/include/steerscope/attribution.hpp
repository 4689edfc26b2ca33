#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "steerscope/graph.hpp"
#include "steerscope/model.hpp"
#include "steerscope/steering.hpp"
#include "steerscope/toy.hpp"

namespace steerscope {

enum class Orientation { steered_as_clean, base_as_clean };
enum class MetricKind { logit_diff, dir_kl };

const char* to_string(Orientation o) noexcept;
const char* to_string(MetricKind m) noexcept;
MetricKind parse_metric(const std::string& s);

struct MetricSpec {
  MetricKind kind = MetricKind::logit_diff;
  double kl_threshold = 0.0;  // dir-kl only
};

double metric_logit_diff(std::span<const double> logits, int y, int y_star);
/// KL(P_corrupt ‖ P_patched) − KL(P_clean ‖ P_patched).
double metric_dirkl(std::span<const double> p_corrupt, std::span<const double> p_clean,
                    std::span<const double> p_patched);

/// A steered/base generation pair for one prompt.
struct PatchSample {
  std::vector<int> prompt;
  std::vector<int> clean_response;
  std::vector<int> corrupt_response;
  Orientation orientation = Orientation::steered_as_clean;
  Label label = Label::harmless;
  double alpha = 1.0;  // signed steering coefficient of the steered run

  double clean_coefficient() const { return orientation == Orientation::steered_as_clean ? alpha : 0.0; }
  double corrupt_coefficient() const { return orientation == Orientation::steered_as_clean ? 0.0 : alpha; }
};

/// Greedy steered and unsteered generations; keeps prompts where steering flips
/// refusal. At most `max_samples` are returned (0 = no limit).
std::vector<PatchSample> make_patch_samples(const Model& model, std::span<const PromptRecord* const> records,
                                            const SteeringVector& v, double alpha, Orientation orientation,
                                            std::size_t max_samples = 0);

/// Teacher-forced clean/corrupt runs of one sample over prompt ++ corrupt response.
/// The metric of a run with logits X is `constant + Σ weights ⊙ f(X)`, where f is the
/// identity (logit-diff) or log-softmax (dir-kl).
struct PreparedSample {
  std::vector<int> tokens;
  std::size_t first_row = 0;  // row predicting the first response token
  std::size_t rows = 0;       // number of response-predicting rows
  std::vector<bool> mask;     // kept positions
  std::vector<int> y, y_star;
  Tensor weights;             // [tokens, V]
  double constant = 0.0;
  double clean_coefficient = 0.0;
  double corrupt_coefficient = 0.0;
  ActivationCache clean, corrupt;
  double m_clean = 0.0, m_corrupt = 0.0;

  std::size_t kept() const;
};

PreparedSample prepare_sample(const Model& model, const PatchSample& sample, const SteeringVector& v,
                              const MetricSpec& metric, bool normalize_by_positions = false);

std::vector<bool> position_mask(const Model& model, const PatchSample& sample, const SteeringVector& v,
                                const MetricSpec& metric);

double metric_value(const PreparedSample& prep, const Tensor& logits, MetricKind kind);

struct IEStore {
  int steer_layer = 0;
  std::vector<EdgeId> edges;  // steered edges, graph order
  std::vector<double> edge_scores;
  std::map<NodeId, double> node_scores;
  Tensor dims;  // SteerResid dimension-level scores [d_model]
  long positions_evaluated = 0;
  int samples = 0;
  int skipped = 0;

  double score(const EdgeId& e) const;
};

struct EapOptions {
  int steps = 10;
  MetricSpec metric;
  bool normalize_by_positions = false;
  std::size_t pack = 16;  // samples per packed forward
};

IEStore eap_ig_scores(const Model& model, std::span<const PatchSample> samples, const SteeringVector& v,
                      const EapOptions& options = {});

/// m(corrupt | edge ← clean) − m(corrupt), summed over kept positions.
double direct_patch_ie(const Model& model, const PreparedSample& prep, const SteeringVector& v, const EdgeId& edge,
                       MetricKind kind);
/// Metric of the corrupt run with every listed edge carrying its clean contribution.
double patched_metric(const Model& model, const PreparedSample& prep, const SteeringVector& v,
                      std::span<const EdgeId> edges, MetricKind kind);

/// Exhaustive oracle: sample-mean direct IE of every steered edge (IEStore edge order).
IEStore direct_patch_scores(const Model& model, std::span<const PatchSample> samples, const SteeringVector& v,
                            const MetricSpec& metric = {}, bool normalize_by_positions = false);

/// Elementwise mean of stores over the same steered graph.
IEStore average(std::span<const IEStore> stores);

}  // namespace steerscope
