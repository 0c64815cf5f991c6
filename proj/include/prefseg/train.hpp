#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefseg/collect.hpp"
#include "prefseg/losses.hpp"
#include "prefseg/sample.hpp"
#include "prefseg/toy_model.hpp"

namespace prefseg::toy {

enum class Stage { kSft, kPreferenceFinetune, kEnsembleTrain };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

using Trainable = std::array<bool, kParamCount>;

Trainable all_trainable();
/// Everything except the mask decoder.
Trainable preference_trainable();
/// Only the prompt embeddings.
Trainable ensemble_trainable();

struct TrainOptions {
  double lr = 3e-2;
  std::size_t batch = 8;
  double mask_weight = 1.0;
  /// Weight of the fused-input auxiliary terms during SFT.
  double fusion_weight = 0.5;
  std::size_t fusion_k = 3;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainOptions from_json(const nlohmann::json& doc);
};

/// One row of a loss trace; unused columns stay zero.
struct LossRow {
  std::size_t step = 0;
  double total = 0.0;
  double l_ce = 0.0;
  double l_t = 0.0;
  double l_s = 0.0;
  double l_ti = 0.0;
  double l_si = 0.0;
};

std::string loss_trace_csv(std::span<const LossRow> rows);

/// Plain SGD on the trainable tensors. Throws InvariantError when a frozen
/// tensor received a nonzero gradient.
void sgd_update(ModelParams& params, const ModelParams& grads, double lr,
                const Trainable& trainable);

/// Token cross-entropy plus per-pixel mask BCE of one sample under the
/// plain forward, accumulating gradients into grads. Returns the loss.
/// Gradients are scaled by weight; the returned value is not.
double supervised_loss(const ModelConfig& cfg, const ModelParams& params,
                       const Sample& sample, double mask_weight, ModelParams* grads,
                       const Trainable& trainable, double weight = 1.0);

/// Fused-input version of the supervised loss: the model reads K responses
/// and must emit the ground truth.
double fused_supervised_loss(const ModelConfig& cfg, const ModelParams& params,
                             const Sample& sample,
                             std::span<const ScoredResponse> responses,
                             double mask_weight, ModelParams* grads,
                             const Trainable& trainable, double weight = 1.0);

/// K decoded responses: response 0 is the greedy decode, response k > 0 is
/// sampled with derive_seed(seed, "response", k).
std::vector<SegmenterOutput> sample_responses(const ToyModel& model, const Image& image,
                                             int instruction, std::size_t k,
                                             std::uint64_t seed);

/// Deterministic epoch-wise shuffled batches over n items.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  void reshuffle();
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

/// One SGD step on the mean supervised (plus fused auxiliary) loss.
/// Throws NumericError with diagnostics when the loss is not finite.
double sft_step(ToyModel& model, std::span<const Sample> batch, const TrainOptions& opt,
                std::uint64_t step_seed);

std::vector<LossRow> train_sft(ToyModel& model, std::span<const Sample> data,
                               std::size_t steps, const TrainOptions& opt);

/// Reference log-probabilities and embeddings, computed once.
struct ReferenceCache {
  std::vector<TokenLogProbs> y;
  std::vector<TokenLogProbs> y_c;
};

ReferenceCache reference_scores(const ToyModel& reference,
                                std::span<const collect::TextPreferenceSample> text);

struct PreferenceInputs {
  std::span<const Sample> train;  // looked up by source index and used for L_ce
  std::span<const collect::TextPreferenceSample> text;
  /// Triples for the first and second half of the steps.
  std::span<const collect::SegPreferenceSample> first_half;
  std::span<const collect::SegPreferenceSample> second_half;
  collect::Phase first_phase = collect::Phase::kLocalization;
  collect::Phase second_phase = collect::Phase::kBoundary;
  std::optional<BandWidth> band;
};

/// Per-step loss of the preference stage for one element of each dataset.
/// l_ce is the SFT objective (plain plus fused-input terms) on a clean sample;
/// the fused terms read fusion_responses as fixed inputs.
struct PreferenceTerms {
  double l_t = 0.0;
  double l_s = 0.0;
  double l_ce = 0.0;
  std::size_t active_targets = 0;
};

PreferenceTerms preference_terms(const ModelConfig& cfg, const ModelParams& policy,
                                 const collect::TextPreferenceSample& text,
                                 const TokenLogProbs& ref_y, const TokenLogProbs& ref_yc,
                                 const collect::SegPreferenceSample& seg,
                                 const Sample& seg_source, const Sample& clean,
                                 BandWidth band, const losses::PreferenceHyper& hyper,
                                 const TrainOptions& opt,
                                 std::span<const ScoredResponse> fusion_responses,
                                 ModelParams* grads, const Trainable& trainable,
                                 double weight = 1.0);

/// Decoder frozen; L_pre + L_ce per step; first half of the steps on
/// first_half triples, the rest on second_half.
std::vector<LossRow> preference_finetune(ToyModel& model, const PreferenceInputs& in,
                                         const losses::PreferenceHyper& hyper,
                                         std::size_t steps, const TrainOptions& opt);

/// Fixed token table of the sentence embedder used by the text improvement loss.
Eigen::MatrixXd text_embedder_table(std::uint64_t seed, int dim = 8);

struct EnsembleTerms {
  double l_ti = 0.0;
  double l_si = 0.0;
};

EnsembleTerms ensemble_terms(const ModelConfig& cfg, const ModelParams& params,
                             const Sample& sample, std::span<const ScoredResponse> responses,
                             const std::vector<std::vector<Mask>>& response_masks,
                             const Eigen::MatrixXd& embedder_table,
                             const losses::PreferenceHyper& hyper, ModelParams* grads,
                             const Trainable& trainable, double weight = 1.0,
                             std::optional<double> refined_prob_override = std::nullopt);

/// Only the prompt embeddings move; L_ti + L_si through the fusion forwards.
std::vector<LossRow> ensemble_train(ToyModel& model, std::span<const Sample> data,
                                    std::size_t k, std::size_t steps,
                                    const losses::PreferenceHyper& hyper,
                                    const TrainOptions& opt);

}  // namespace prefseg::toy
