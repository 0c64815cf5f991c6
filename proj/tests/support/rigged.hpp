#pragma once

// Hand-built segmenters whose output quality is a known function of the
// input image.

#include <cstdint>
#include <optional>
#include <vector>

#include "prefseg/rng.hpp"
#include "prefseg/sample.hpp"
#include "prefseg/segmenter.hpp"
#include "prefseg/types.hpp"

namespace rigged {

// 16x16 scene: target object in the top-left, a distractor in the bottom-right.
inline prefseg::Sample two_object_sample() {
  using namespace prefseg;
  Sample s;
  s.image = Image(16, 16, 0.05);
  Mask target(16, 16), distractor(16, 16);
  target.fill_rect(2, 2, 5, 5);
  distractor.fill_rect(9, 9, 5, 5);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) {
      if (target.get(r, c)) s.image.at(r, c) = 0.4;
      if (distractor.get(r, c)) s.image.at(r, c) = 0.7;
    }
  s.instruction = 1;
  s.gt_masks = {target};
  s.gt_response = {vocab::object_token(1), vocab::kSeg, vocab::kEndOfSentence};
  s.object_masks = {target, distractor};
  return s;
}

// Quality u in [0, 1) is a hash of the pixel values. Below low the
// segmenter returns the distractor (s = -1); at or above high it returns the
// ground truth (s = 1); in between it returns the target shrunk by a
// u-dependent number of rows. The embedding's first coordinate is u.
class HashQualitySegmenter : public prefseg::Segmenter {
 public:
  HashQualitySegmenter(prefseg::Sample sample, double low, double high)
      : sample_(std::move(sample)), low_(low), high_(high) {}

  double quality(const prefseg::Image& img) const {
    const auto v = img.values();
    const std::uint64_t h = prefseg::fnv1a64(v.data(), v.size() * sizeof(double));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  prefseg::SegmenterOutput run(const prefseg::Image& img, int,
                               std::optional<std::uint64_t>) const override {
    using namespace prefseg;
    const double u = quality(img);
    Mask m(16, 16);
    if (u < low_) {
      m = sample_.object_masks[1];
    } else if (u >= high_) {
      m = sample_.gt_masks[0];
    } else {
      const int rows = 1 + static_cast<int>(4.0 * (u - low_) / (high_ - low_));
      m.fill_rect(2, 2, rows, 5);
    }
    SegmenterOutput out;
    out.response.tokens = sample_.gt_response;
    out.response.logps = {-0.1, -0.01, -0.01};
    out.response.sentence_spans = split_sentences(out.response.tokens);
    out.response.seg_positions = seg_positions(out.response.tokens);
    Embedding e = Embedding::Constant(8, 0.1);
    e[0] = u;
    out.response.embeddings = {e};
    out.masks = {m};
    return out;
  }

 private:
  prefseg::Sample sample_;
  double low_;
  double high_;
};

// Always emits fixed tokens and the ground-truth masks.
class FixedSegmenter : public prefseg::Segmenter {
 public:
  FixedSegmenter(prefseg::TokenSeq tokens, std::vector<prefseg::Mask> masks)
      : tokens_(std::move(tokens)), masks_(std::move(masks)) {}

  prefseg::SegmenterOutput run(const prefseg::Image&, int,
                               std::optional<std::uint64_t>) const override {
    using namespace prefseg;
    SegmenterOutput out;
    out.response.tokens = tokens_;
    out.response.logps.assign(tokens_.size(), -0.1);
    out.response.sentence_spans = split_sentences(tokens_);
    out.response.seg_positions = seg_positions(tokens_);
    out.response.embeddings.assign(masks_.size(), Embedding::Ones(8));
    out.masks = masks_;
    return out;
  }

 private:
  prefseg::TokenSeq tokens_;
  std::vector<prefseg::Mask> masks_;
};

}  // namespace rigged
