#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "prefseg/error.hpp"

namespace prefseg {

using Embedding = Eigen::VectorXd;
using TokenId = int;
using TokenSeq = std::vector<TokenId>;
/// Per-token log-likelihoods log p(y^i | I, x, y^{<i}).
using TokenLogProbs = std::vector<double>;
using IndexList = std::vector<std::size_t>;

/// Toy vocabulary layout. Ids 0..3 are structural; object classes follow.
namespace vocab {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEndOfSentence = 1;
inline constexpr TokenId kSeg = 2;
inline constexpr TokenId kUnknown = 3;
inline constexpr TokenId kFirstObject = 4;
inline constexpr int kSize = 64;
inline constexpr int kMaxObjectClasses = kSize - kFirstObject;

inline constexpr bool is_object(TokenId t) {
  return t >= kFirstObject && t < kSize;
}
inline constexpr TokenId object_token(int object_class) {
  return kFirstObject + object_class;
}
inline constexpr int object_class(TokenId t) { return t - kFirstObject; }
}  // namespace vocab

/// Scalar intensity raster in [0, 1], row-major.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0);
  Image(int height, int width, std::vector<double> values);

  int height() const { return height_; }
  int width() const { return width_; }
  double at(int r, int c) const { return values_[index(r, c)]; }
  double& at(int r, int c) { return values_[index(r, c)]; }
  std::span<const double> values() const { return values_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * width_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Half-open token range [begin, end) forming one sentence.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

/// One generated response together with everything the ensemble needs.
struct ScoredResponse {
  TokenSeq tokens;
  TokenLogProbs logps;
  std::vector<Span> sentence_spans;
  std::vector<std::size_t> seg_positions;
  std::vector<Embedding> embeddings;  // one per <seg> token
};

/// Sentence spans delimited by the end-of-sentence token. A trailing
/// unterminated run forms its own span.
std::vector<Span> split_sentences(const TokenSeq& tokens);
std::vector<std::size_t> seg_positions(const TokenSeq& tokens);

/// Throws StructureError if the spans do not partition the tokens or a
/// <seg> position is not inside exactly one span.
void validate_response(const ScoredResponse& r);

}  // namespace prefseg
