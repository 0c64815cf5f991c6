#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefseg/collect.hpp"
#include "prefseg/losses.hpp"
#include "prefseg/metrics.hpp"
#include "prefseg/synth.hpp"
#include "prefseg/toy_model.hpp"
#include "prefseg/train.hpp"

namespace prefseg::pipeline {

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t train_samples = 200;
  std::size_t val_samples = 100;
  toy::ModelConfig model;
  toy::SceneConfig scene;
  losses::PreferenceHyper hyper;
  collect::SegCollectConfig collect;
  /// Responses fused by the ensemble.
  std::size_t k = 3;
  std::size_t sft_steps = 800;
  std::size_t preference_steps = 400;
  std::size_t ensemble_steps = 200;
  toy::TrainOptions train;
  /// false: both halves of preference finetuning use localization triples.
  bool curriculum = true;
  std::filesystem::path out_dir = "run";

  void validate() const;
};

/// Canonical document of every field that influences results. The output
/// directory is not part of it.
nlohmann::json config_to_json(const RunConfig& cfg);
/// Fields absent from doc keep the values already in base.
RunConfig config_from_json(const nlohmann::json& doc, RunConfig base = {});
std::string config_hash(const RunConfig& cfg);

/// Fixed artifact locations under out_dir.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path split(const std::string& name) const { return root / "data" / name; }
  std::filesystem::path collection(collect::Phase p) const;
  std::filesystem::path checkpoint(toy::Stage s) const;
  std::filesystem::path trace(toy::Stage s) const;
  std::filesystem::path eval(const std::string& label) const { return root / "eval" / label; }
  std::filesystem::path report() const { return root / "report"; }
};

/// Append-only record of what a run has produced.
struct ManifestEntry {
  std::string command;
  std::string detail;
  std::string config_hash;
  std::vector<std::string> files;  // relative to out_dir
  double seconds = 0.0;
};

class RunManifest {
 public:
  static RunManifest load_or_create(const std::filesystem::path& root);
  /// Throws IoError when a referenced file does not exist.
  void append(ManifestEntry entry);
  const std::vector<ManifestEntry>& entries() const { return entries_; }

 private:
  std::filesystem::path root_;
  std::vector<ManifestEntry> entries_;
  void save() const;
};

void save_split(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_split(const std::filesystem::path& dir);

/// Writes data/train and data/val.
void cmd_synth(const RunConfig& cfg);

/// Runs text and segmentation preference collection on the SFT checkpoint.
collect::PreferenceDataset cmd_collect(const RunConfig& cfg, collect::Phase phase);

/// Runs one training stage from its prerequisite checkpoint.
std::vector<toy::LossRow> cmd_train(const RunConfig& cfg, toy::Stage stage);

struct SampleRow {
  std::size_t index = 0;
  int instruction = 0;
  std::size_t targets = 0;
  std::size_t mentioned = 0;
  std::size_t hallucinated = 0;
  double mean_iou = 0.0;
  TokenSeq tokens;
};

struct EvalResult {
  metrics::MetricsReport report;
  std::vector<SampleRow> rows;
  /// (eta, per-target IoU) pairs of the K sampled responses.
  std::vector<double> eta;
  std::vector<double> eta_iou;
};

/// Evaluates a model on samples. With ensemble on, K sampled responses are
/// fused; otherwise the greedy plain forward is scored.
EvalResult evaluate(const toy::ToyModel& model, std::span<const Sample> samples,
                    bool ensemble, std::size_t k, std::uint64_t seed, bool pearson);

/// Label of an evaluation output directory.
std::string eval_label(toy::Stage stage, bool ensemble);

metrics::MetricsReport cmd_eval(const RunConfig& cfg, toy::Stage stage, bool ensemble,
                                bool pearson);

struct GradcheckSummary {
  std::string name;
  std::size_t points = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Central-difference checks of every loss and of the model gradients used
/// in training, at random points drawn from seed.
std::vector<GradcheckSummary> run_gradcheck(std::size_t points, std::uint64_t seed,
                                            double tolerance = 1e-4);

std::vector<GradcheckSummary> cmd_gradcheck(const RunConfig& cfg, std::size_t points);

/// Collects the available evaluation reports into report/metrics.csv,
/// report/plot_data.csv and report/summary.json.
nlohmann::json cmd_report(const RunConfig& cfg);

}  // namespace prefseg::pipeline
