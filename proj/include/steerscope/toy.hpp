#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "steerscope/errors.hpp"
#include "steerscope/model.hpp"

namespace steerscope {

namespace tok {
inline constexpr int BOS = 0;
inline constexpr int SEP = 1;
inline constexpr int END = 2;
inline constexpr int FORBID = 3;
inline constexpr int REFUSE = 4;
inline constexpr int COMPLY = 5;
inline constexpr int REFUSE_TAIL = 6;  // 6 tokens
inline constexpr int COMPLY_TAIL = 12;  // 2 tokens
inline constexpr int CONTENT = 14;  // first content token
}  // namespace tok

inline constexpr int kResponseLength = 8;
inline constexpr int kRefusalWindow = 4;

enum class Label { harmful, harmless };
enum class Split { train, val, test };

const char* to_string(Label l) noexcept;
const char* to_string(Split s) noexcept;
Label parse_label(const std::string& s);
Split parse_split(const std::string& s);

struct PromptRecord {
  std::vector<int> prompt;
  Label label = Label::harmless;
  std::vector<int> response;
  Split split = Split::train;

  friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

struct SplitCounts {
  int train = 128;
  int val = 32;
  int test = 100;
};

struct Corpus {
  std::vector<PromptRecord> records;
  std::vector<std::string> vocab;  // id → token string
  std::uint64_t seed = 0;

  std::vector<const PromptRecord*> select(Split split, Label label) const;
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

std::vector<std::string> default_vocab(int vocab_size);

/// Harmful/harmless prompt pairs per split; responses are deterministic in the prompt.
Corpus generate_corpus(std::uint64_t seed, const SplitCounts& counts, int vocab_size = 64);

/// Response the task defines for a prompt: refusal for FORBID-marked prompts,
/// compliance (copying the last four content tokens) otherwise.
std::vector<int> refusal_response();
std::vector<int> compliant_response(std::span<const int> prompt);

void write_jsonl(const Corpus& corpus, const std::filesystem::path& records, const std::filesystem::path& vocab);
Corpus read_jsonl(const std::filesystem::path& records, const std::filesystem::path& vocab);

struct TrainHyper {
  double lr = 3e-3;
  int steps = 3000;
  int batch = 16;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  std::vector<double> loss;           // per-step mean token cross-entropy
  std::vector<double> smoothed_loss;  // running minimum of an EMA of `loss`
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& message, std::vector<double> trace)
      : NumericError(message), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

/// Teacher-forced training on response tokens of the train split.
TrainResult train_model(const ModelConfig& config, const Corpus& corpus, const TrainHyper& hyper);

/// Mean response-token cross-entropy over records.
double response_loss(const Model& model, std::span<const PromptRecord* const> records);

/// True iff REFUSE appears within the first kRefusalWindow generated tokens.
bool is_refusal(std::span<const int> generated);

struct BehaviorRates {
  double harmful = 0.0;   // fraction of harmful prompts not refused
  double harmless = 0.0;  // fraction of harmless prompts not refused
  int n_harmful = 0;
  int n_harmless = 0;
};

BehaviorRates evaluate_behavior(const Model& model, std::span<const PromptRecord* const> records,
                                const InterventionSet& interventions = {});

/// prompt ++ response[0..n-2] with the targets for rows predicting response tokens.
struct TeacherForced {
  std::vector<int> tokens;
  std::vector<int> targets;  // -1 on prompt rows
};
TeacherForced teacher_forced(std::span<const int> prompt, std::span<const int> response);

}  // namespace steerscope
