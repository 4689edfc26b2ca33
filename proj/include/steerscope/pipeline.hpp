#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "steerscope/ablation.hpp"
#include "steerscope/circuits.hpp"
#include "steerscope/report.hpp"
#include "steerscope/sparsify.hpp"
#include "steerscope/svv.hpp"

namespace steerscope {

/// Stage building blocks shared by the `steerscope` subcommands and `run_pipeline`.

Corpus make_corpus(const RunConfig& cfg);
TrainResult train(const RunConfig& cfg, const Corpus& corpus);

SelectionConfig selection_config(const RunConfig& cfg);
SelectionResult select_dim(const RunConfig& cfg, const Model& model, const Corpus& corpus);
FitHyper fit_hyper(const RunConfig& cfg);
FitResult fit_vector(const RunConfig& cfg, const Model& model, const Corpus& corpus, Method method, int layer);

/// Test-split flip pairs in four groups: harmful at −α and harmless at +α, each in
/// both orientations (steered_as_clean first).
struct PatchGroups {
  std::array<std::vector<PatchSample>, 4> groups;
  std::vector<PatchSample> steered_as_clean() const;
  std::size_t size() const;
};

PatchGroups patch_groups(const RunConfig& cfg, const Model& model, const Corpus& corpus, const SteeringVector& v);
EapOptions eap_options(const RunConfig& cfg);
/// Mean of the per-group scores over the groups that have samples. Zero scores when
/// no group has any.
IEStore patch_scores(const RunConfig& cfg, const Model& model, const PatchGroups& groups, const SteeringVector& v,
                     bool oracle = false);

/// Seeds of the size-matched random circuits, drawn from the global seed.
std::vector<std::uint64_t> random_circuit_seeds(const RunConfig& cfg);

struct VectorRun {
  std::string name;  // dim / ntp / po
  SteeringVector vector;
  std::optional<FitResult> fit;
  PatchGroups samples;
  IEStore ie;
  std::vector<FaithSample> faith;
  MinFaithful min_faithful;
  std::optional<FaithResult> complement_faith;
  std::vector<AblationRow> ablation;
  std::vector<LogitLensReport> svv;
  BehaviorRates base, induce, bypass;  // test split at 0, +α, −α
};

struct InterchangeRow {
  std::string circuit, vector, kind;  // kind: circuit | random
  std::uint64_t seed = 0;
  std::size_t size = 0;
  FaithResult faith;
};

struct PipelineResult {
  RunConfig config;
  Corpus corpus;
  Model model;
  std::vector<double> train_loss, smoothed_loss;
  SelectionResult selection;
  std::vector<VectorRun> vectors;
  std::vector<std::vector<double>> overlap;  // NaN where a circuit is missing
  std::vector<InterchangeRow> interchange;
  SweepResult sweep;
  std::vector<std::string> warnings;
};

/// Runs every stage. When `model` is given, training is skipped and the model is used as is.
PipelineResult run_pipeline(const RunConfig& cfg, const Model* model = nullptr);
/// Writes CSV, SVG, DOT and checkpoint artifacts into `dir`; returns the CSV file names.
std::vector<std::string> write_pipeline(const PipelineResult& r, const std::filesystem::path& dir);

std::string vector_name(Method m);

// Tables

CsvTable train_loss_table(const std::vector<double>& loss, const std::vector<double>& smoothed);
CsvTable selection_table(const SelectionResult& sel);
CsvTable fit_table(const std::string& name, const FitResult& fit);
CsvTable behavior_table(const std::vector<VectorRun>& runs, double alpha);
CsvTable ie_edge_table(const std::string& name, const IEStore& s);
CsvTable ie_node_table(const std::string& name, const IEStore& s);
CsvTable ie_dim_table(const std::string& name, const IEStore& s, const Tensor& vector);
CsvTable faith_curve_table(const std::string& name, const MinFaithful& mf);
CsvTable circuits_table(const std::vector<VectorRun>& runs, std::size_t total);
CsvTable overlap_table(const std::vector<std::string>& names, const std::vector<std::vector<double>>& m);
CsvTable interchange_table(const std::vector<InterchangeRow>& rows);
CsvTable distribution_table(const std::string& name, const EdgeDistribution& d);
CsvTable ablation_table(const std::string& name, const std::vector<AblationRow>& rows);
CsvTable svv_table(const std::string& name, const std::vector<LogitLensReport>& rows,
                   const std::vector<std::string>& vocab);
CsvTable sparsity_table(const SweepResult& r);
CsvTable iou_table(const SweepResult& r);

// Figures

std::string faithfulness_svg(const std::vector<VectorRun>& runs, double threshold);
std::string overlap_svg(const std::vector<std::string>& names, const std::vector<std::vector<double>>& m);
std::string svv_svg(const std::string& name, const std::vector<LogitLensReport>& rows,
                    const std::vector<std::string>& vocab);
std::string sparsity_svg(const SweepResult& r, const std::vector<double>& taus);
std::string iou_svg(const SweepResult& r, const std::vector<double>& taus);

}  // namespace steerscope
