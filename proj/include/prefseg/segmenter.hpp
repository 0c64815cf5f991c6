#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "prefseg/mask.hpp"
#include "prefseg/types.hpp"

namespace prefseg {

struct SegmenterOutput {
  ScoredResponse response;
  /// One decoded mask per <seg> token, in response order.
  std::vector<Mask> masks;
};

/// (image, instruction) -> tokens with log-probabilities, <seg> embeddings
/// and masks. Implementations must be deterministic given the decode seed;
/// a missing seed means greedy decoding.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual SegmenterOutput run(const Image& image, int instruction,
                              std::optional<std::uint64_t> decode_seed) const = 0;
};

/// What a position of the fused input sequence E holds.
enum class PositionRole {
  kUnlabeled,
  kImage,
  kInstruction,
  kResponseToken,   // (response k, token i)
  kPrompt,          // (prompt m)
  kEmbeddingToken,  // (response k, target n)
  kRefinedToken,    // (token i of the refined response)
};

struct PositionLabel {
  PositionRole role = PositionRole::kUnlabeled;
  std::size_t response = 0;
  std::size_t index = 0;
};

using PositionLayout = std::vector<PositionLabel>;

/// Everything a fusion forward needs besides the attention bias.
struct FusionContext {
  const Image* image = nullptr;
  int instruction = 0;
  std::span<const ScoredResponse> responses;
  const Eigen::MatrixXd* prompts = nullptr;  // one prompt embedding per row
  const TokenSeq* refined = nullptr;         // set for the embedding pass
  PositionLayout layout;
};

struct FusedDecode {
  TokenSeq tokens;
  TokenLogProbs logps;
  bool truncated = false;
  /// Row sums of every attention matrix evaluated during decoding.
  std::vector<double> attention_row_sums;
};

/// A segmenter that also accepts the concatenated multi-response input with
/// an additive key-axis attention bias.
class FusionModel : public Segmenter {
 public:
  virtual std::size_t image_token_count() const = 0;
  virtual std::size_t instruction_token_count() const = 0;
  /// Greedy decode of the refined response over E = [I, x, y_1..y_K, p].
  virtual FusedDecode decode_fused(const FusionContext& ctx,
                                   std::span<const double> gamma) const = 0;
  /// One refined embedding per <seg> token of ctx.refined, over
  /// E = [I, x, y_1..y_K, p, f_1..f_K, refined].
  virtual std::vector<Embedding> embed_fused(const FusionContext& ctx,
                                             std::span<const double> gamma) const = 0;
  virtual Mask decode_mask(const Image& image, const Embedding& f) const = 0;
};

}  // namespace prefseg
