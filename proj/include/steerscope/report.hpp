#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "steerscope/ablation.hpp"
#include "steerscope/attribution.hpp"
#include "steerscope/model.hpp"
#include "steerscope/toy.hpp"

namespace steerscope {

/// Everything a pipeline run depends on. Serialized as flat `key = value` lines.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  SplitCounts corpus;
  TrainHyper train;

  int steer_layer = -1;  // -1: layer of the selected DIM candidate
  double alpha = 1.0;
  std::vector<int> dim_positions{-1, -2, -3, -4};
  double max_layer_fraction = 0.8;
  double kl_max = 0.1;
  double fit_lr = 1e-2;
  int fit_epochs = 20;
  int fit_batch = 32;
  double po_phi = 0.02;

  MetricKind metric = MetricKind::logit_diff;
  double kl_threshold = 0.0;
  int ig_steps = 10;
  int patch_samples = 16;  // per class and orientation

  std::vector<double> size_grid;
  double faith_threshold = 0.85;
  int random_circuits = 3;

  std::vector<AblationKind> ablations;
  int svv_heads = 6;
  int lens_top_k = 5;

  std::vector<double> taus;
  std::vector<std::uint64_t> dropout_seeds{0, 1, 2};

  std::string out_dir = "out";

  RunConfig();
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys, duplicates and
/// malformed values raise ConfigError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key in a fixed order; parse(serialize(c)) == c.
std::string serialize(const RunConfig& c);
/// Applies one `key=value` override.
void set_config_value(RunConfig& c, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

/// Shortest text that parses back to the same double.
std::string format_double(double x);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row);
  std::string str() const;
};

void write_text(const std::filesystem::path& path, const std::string& text);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

/// Fixed column orders of every CSV the tools write.
namespace schema {
inline const std::vector<std::string> train_loss{"step", "loss", "smoothed_loss"};
inline const std::vector<std::string> dim_selection{"layer", "position", "bypass", "induce",
                                                    "kl", "feasible", "objective", "selected"};
inline const std::vector<std::string> fit_loss{"method", "epoch", "train_loss", "val_loss", "best"};
inline const std::vector<std::string> behavior{"method", "alpha", "harmful_compliance", "harmless_compliance"};
inline const std::vector<std::string> generations{"method", "ablation", "alpha", "label", "prompt", "response",
                                                  "refusal"};
inline const std::vector<std::string> ie_edges{"vector", "upstream", "downstream", "channel", "score"};
inline const std::vector<std::string> ie_nodes{"vector", "node", "score"};
inline const std::vector<std::string> ie_dims{"vector", "dim", "value", "score"};
inline const std::vector<std::string> faith_curve{"vector", "fraction", "requested", "size", "faithfulness",
                                                  "positions"};
inline const std::vector<std::string> circuits{"vector", "size", "total", "fraction", "faithfulness",
                                               "complement_faithfulness"};
inline const std::vector<std::string> overlap{"circuit_a", "circuit_b", "overlap"};
inline const std::vector<std::string> interchange{"circuit", "vector", "kind", "seed", "size", "faithfulness"};
inline const std::vector<std::string> edge_distribution{"vector", "side", "category", "count", "pct"};
inline const std::vector<std::string> ablation{"vector", "ablation", "induce", "bypass", "induce_change",
                                               "bypass_change", "avg_drop"};
inline const std::vector<std::string> svv_lens{"vector", "source", "rank", "token", "text", "logit"};
inline const std::vector<std::string> sparsity{"vector", "method", "tau", "k", "sparsity_pct", "class", "seed",
                                               "asr"};
inline const std::vector<std::string> iou{"tau", "pair", "support_a", "support_b", "overlap", "iou", "pvalue",
                                          "defined"};
}  // namespace schema

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct ChartOptions {
  std::string title, x_label, y_label;
  double y_min = 0.0, y_max = 1.0;
  bool auto_y = false;
};

/// Standalone SVG documents: no scripts, stylesheets or external references.
std::string svg_line_chart(const std::vector<Series>& series, const ChartOptions& opt);
/// Row-major values; `cell_text` (same shape, may be empty) is printed in cells.
std::string svg_heatmap(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::vector<std::vector<double>>& values,
                        const std::vector<std::vector<std::string>>& cell_text, const std::string& title);
/// One cluster per category, one bar per series.
std::string svg_bar_chart(const std::vector<std::string>& categories, const std::vector<Series>& series,
                          const ChartOptions& opt);

std::string xml_escape(const std::string& s);

}  // namespace steerscope
