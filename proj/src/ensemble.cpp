#include "prefseg/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prefseg/error.hpp"
#include "prefseg/losses.hpp"

namespace prefseg::ensemble {

void normalize_min_max(std::vector<std::vector<double>>& pool) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& row : pool) {
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const bool degenerate = !(hi > lo);
  for (auto& row : pool) {
    for (double& v : row) {
      v = degenerate ? 0.0 : std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0);
    }
  }
}

namespace {

std::size_t span_of(const ScoredResponse& r, std::size_t position) {
  for (std::size_t s = 0; s < r.sentence_spans.size(); ++s) {
    if (r.sentence_spans[s].contains(position)) return s;
  }
  throw StructureError("token position " + std::to_string(position) +
                       " lies outside every sentence span");
}

std::vector<double> sentence_means(const ScoredResponse& r) {
  std::vector<double> means;
  for (const auto& s : r.sentence_spans) {
    double sum = 0.0;
    for (std::size_t i = s.begin; i < s.end; ++i) sum += std::exp(r.logps[i]);
    means.push_back(sum / static_cast<double>(s.end - s.begin));
  }
  return means;
}

}  // namespace

std::vector<std::vector<double>> token_preference_scores(
    std::span<const ScoredResponse> responses) {
  if (responses.empty()) throw ShapeError("token_preference_scores: no responses");
  std::vector<std::vector<double>> raw;
  for (const auto& r : responses) {
    validate_response(r);
    const auto means = sentence_means(r);
    std::vector<double> row(r.tokens.size());
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      row[i] = std::exp(r.logps[i]) + means[span_of(r, i)];
    }
    raw.push_back(std::move(row));
  }
  normalize_min_max(raw);
  return raw;
}

std::vector<std::vector<double>> sentence_preference_scores(
    std::span<const ScoredResponse> responses) {
  if (responses.empty()) {
    throw ShapeError("sentence_preference_scores: no responses");
  }
  std::vector<std::vector<double>> raw;
  for (const auto& r : responses) {
    validate_response(r);
    const auto means = sentence_means(r);
    std::vector<double> row;
    for (std::size_t p : r.seg_positions) row.push_back(means[span_of(r, p)]);
    raw.push_back(std::move(row));
  }
  normalize_min_max(raw);
  return raw;
}

PreferenceScores preference_scores(std::span<const ScoredResponse> responses) {
  return {token_preference_scores(responses), sentence_preference_scores(responses)};
}

PositionLayout build_layout(std::size_t image_tokens,
                            std::size_t instruction_tokens,
                            std::span<const ScoredResponse> responses,
                            std::size_t prompt_count,
                            std::optional<std::size_t> refined_length) {
  PositionLayout layout;
  for (std::size_t j = 0; j < image_tokens; ++j) {
    layout.push_back({PositionRole::kImage, 0, j});
  }
  for (std::size_t j = 0; j < instruction_tokens; ++j) {
    layout.push_back({PositionRole::kInstruction, 0, j});
  }
  for (std::size_t k = 0; k < responses.size(); ++k) {
    for (std::size_t i = 0; i < responses[k].tokens.size(); ++i) {
      layout.push_back({PositionRole::kResponseToken, k, i});
    }
  }
  for (std::size_t m = 0; m < prompt_count; ++m) {
    layout.push_back({PositionRole::kPrompt, 0, m});
  }
  if (refined_length) {
    for (std::size_t k = 0; k < responses.size(); ++k) {
      for (std::size_t n = 0; n < responses[k].embeddings.size(); ++n) {
        layout.push_back({PositionRole::kEmbeddingToken, k, n});
      }
    }
    for (std::size_t i = 0; i < *refined_length; ++i) {
      layout.push_back({PositionRole::kRefinedToken, 0, i});
    }
  }
  return layout;
}

std::vector<double> attention_bias(const PositionLayout& layout,
                                   const PreferenceScores& scores,
                                   FusionMode mode) {
  auto lookup = [](const std::vector<std::vector<double>>& table,
                   const PositionLabel& l) {
    if (l.response >= table.size() || l.index >= table[l.response].size()) {
      throw IndexError("layout label points outside the preference scores");
    }
    return table[l.response][l.index];
  };
  std::vector<double> gamma(layout.size(), 0.0);
  for (std::size_t j = 0; j < layout.size(); ++j) {
    const auto& label = layout[j];
    if (label.role == PositionRole::kUnlabeled) {
      throw LayoutError("position " + std::to_string(j) + " of E is unlabeled");
    }
    if (mode == FusionMode::kTextFusion &&
        label.role == PositionRole::kResponseToken) {
      gamma[j] = losses::sigmoid(lookup(scores.tau, label)) - 0.5;
    } else if (mode == FusionMode::kEmbeddingFusion &&
               label.role == PositionRole::kEmbeddingToken) {
      gamma[j] = losses::sigmoid(lookup(scores.eta, label)) - 0.5;
    }
  }
  return gamma;
}

namespace {

AttentionResult attend(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                       const Eigen::MatrixXd& v, double d_k,
                       const double* gamma) {
  if (q.cols() != k.cols()) throw ShapeError("attention: query/key width differs");
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value count differs");
  if (!(d_k > 0)) throw ShapeError("attention: d_k must be positive");
  const double scale = 1.0 / std::sqrt(d_k);
  Eigen::MatrixXd logits = (q * k.transpose()) * scale;
  AttentionResult out;
  out.weights.resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (gamma != nullptr) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c) logits(r, c) += gamma[c];
    }
    const double mx = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double e = std::exp(logits(r, c) - mx);
      out.weights(r, c) = e;
      sum += e;
    }
    out.weights.row(r) /= sum;
  }
  out.output = out.weights * v;
  return out;
}

}  // namespace

AttentionResult biased_attention(const Eigen::MatrixXd& queries,
                                 const Eigen::MatrixXd& keys,
                                 const Eigen::MatrixXd& values, double d_k,
                                 std::span<const double> gamma) {
  if (static_cast<Eigen::Index>(gamma.size()) != keys.rows()) {
    throw ShapeError("biased_attention: gamma length " +
                     std::to_string(gamma.size()) + " != key count " +
                     std::to_string(keys.rows()));
  }
  return attend(queries, keys, values, d_k, gamma.data());
}

AttentionResult attention(const Eigen::MatrixXd& queries,
                          const Eigen::MatrixXd& keys,
                          const Eigen::MatrixXd& values, double d_k) {
  return attend(queries, keys, values, d_k, nullptr);
}

nlohmann::json FusionTrace::to_json() const {
  return {{"gamma", gamma},
          {"attention_row_sums", attention_row_sums},
          {"chosen_tokens", chosen_tokens}};
}

FusedResponse fuse_responses(const Image& image, int instruction,
                             std::span<const ScoredResponse> responses,
                             const Eigen::MatrixXd& prompts,
                             const FusionModel& model) {
  if (responses.empty()) throw ShapeError("fuse_responses: K must be >= 1");
  PreferenceScores scores;
  scores.tau = token_preference_scores(responses);
  FusionContext ctx;
  ctx.image = &image;
  ctx.instruction = instruction;
  ctx.responses = responses;
  ctx.prompts = &prompts;
  ctx.layout = build_layout(model.image_token_count(),
                            model.instruction_token_count(), responses,
                            static_cast<std::size_t>(prompts.rows()), std::nullopt);
  auto gamma = attention_bias(ctx.layout, scores, FusionMode::kTextFusion);
  FusedDecode decoded = model.decode_fused(ctx, gamma);
  FusedResponse out;
  out.tokens = std::move(decoded.tokens);
  out.logps = std::move(decoded.logps);
  out.truncated = decoded.truncated;
  out.trace.gamma = std::move(gamma);
  out.trace.attention_row_sums = std::move(decoded.attention_row_sums);
  out.trace.chosen_tokens = out.tokens;
  return out;
}

FusedEmbeddings fuse_embeddings(const Image& image, int instruction,
                                std::span<const ScoredResponse> responses,
                                const Eigen::MatrixXd& prompts,
                                const TokenSeq& refined,
                                const FusionModel& model) {
  if (responses.empty()) throw ShapeError("fuse_embeddings: K must be >= 1");
  const std::size_t targets = seg_positions(refined).size();
  for (const auto& r : responses) {
    if (r.embeddings.size() != targets || r.seg_positions.size() != targets) {
      throw StructureError("fuse_embeddings: response has " +
                           std::to_string(r.embeddings.size()) +
                           " targets, refined response has " +
                           std::to_string(targets));
    }
  }
  PreferenceScores scores;
  scores.eta = sentence_preference_scores(responses);
  FusionContext ctx;
  ctx.image = &image;
  ctx.instruction = instruction;
  ctx.responses = responses;
  ctx.prompts = &prompts;
  ctx.refined = &refined;
  ctx.layout = build_layout(model.image_token_count(),
                            model.instruction_token_count(), responses,
                            static_cast<std::size_t>(prompts.rows()), refined.size());
  auto gamma = attention_bias(ctx.layout, scores, FusionMode::kEmbeddingFusion);
  FusedEmbeddings out;
  out.embeddings = model.embed_fused(ctx, gamma);
  if (out.embeddings.size() != targets) {
    throw StructureError("fuse_embeddings: model returned wrong target count");
  }
  out.trace.gamma = std::move(gamma);
  out.trace.chosen_tokens = refined;
  return out;
}

}  // namespace prefseg::ensemble
