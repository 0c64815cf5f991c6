#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "prefseg/segmenter.hpp"
#include "prefseg/types.hpp"

namespace prefseg::ensemble {

/// Per-token (tau) and per-(response, target) (eta) scores in [-1, 1].
struct PreferenceScores {
  std::vector<std::vector<double>> tau;  // [k][i]
  std::vector<std::vector<double>> eta;  // [k][n]
};

/// Maps values onto [-1, 1] by min-max over the whole pool; an all-equal
/// pool maps to zeros.
void normalize_min_max(std::vector<std::vector<double>>& pool);

/// raw(k, i) = p(y_k^i) + mean p over the sentence holding token i, with
/// p = exp(logp); normalized jointly over all responses.
std::vector<std::vector<double>> token_preference_scores(
    std::span<const ScoredResponse> responses);

/// raw(k, n) = mean p over the sentence holding the n-th <seg> token.
std::vector<std::vector<double>> sentence_preference_scores(
    std::span<const ScoredResponse> responses);

PreferenceScores preference_scores(std::span<const ScoredResponse> responses);

enum class FusionMode { kTextFusion, kEmbeddingFusion };

/// E = [image, instruction, y_1..y_K, prompts] and, when refined_length is
/// set, followed by [f_1^1..f_K^N, refined tokens].
PositionLayout build_layout(std::size_t image_tokens,
                            std::size_t instruction_tokens,
                            std::span<const ScoredResponse> responses,
                            std::size_t prompt_count,
                            std::optional<std::size_t> refined_length);

/// gamma_j = sigmoid(score) - 0.5 at the biased positions of the mode, 0
/// elsewhere. Throws LayoutError on an unlabeled position and IndexError
/// when a label points outside the scores.
std::vector<double> attention_bias(const PositionLayout& layout,
                                   const PreferenceScores& scores,
                                   FusionMode mode);

struct AttentionResult {
  Eigen::MatrixXd output;   // queries x value-dim
  Eigen::MatrixXd weights;  // queries x keys, rows sum to 1
};

/// Softmax(Q K^T / sqrt(d_k) + gamma) V with gamma[j] added to key column j
/// of every query row.
AttentionResult biased_attention(const Eigen::MatrixXd& queries,
                                 const Eigen::MatrixXd& keys,
                                 const Eigen::MatrixXd& values, double d_k,
                                 std::span<const double> gamma);

/// Plain scaled dot-product attention.
AttentionResult attention(const Eigen::MatrixXd& queries,
                          const Eigen::MatrixXd& keys,
                          const Eigen::MatrixXd& values, double d_k);

struct FusionTrace {
  std::vector<double> gamma;
  std::vector<double> attention_row_sums;
  TokenSeq chosen_tokens;

  nlohmann::json to_json() const;
};

struct FusedResponse {
  TokenSeq tokens;
  TokenLogProbs logps;
  bool truncated = false;
  FusionTrace trace;
};

/// Decodes the refined response from K responses under the text-fusion bias.
FusedResponse fuse_responses(const Image& image, int instruction,
                             std::span<const ScoredResponse> responses,
                             const Eigen::MatrixXd& prompts,
                             const FusionModel& model);

struct FusedEmbeddings {
  std::vector<Embedding> embeddings;
  FusionTrace trace;
};

/// Computes one refined embedding per <seg> token of the refined response
/// under the embedding-fusion bias.
FusedEmbeddings fuse_embeddings(const Image& image, int instruction,
                                std::span<const ScoredResponse> responses,
                                const Eigen::MatrixXd& prompts,
                                const TokenSeq& refined,
                                const FusionModel& model);

}  // namespace prefseg::ensemble
