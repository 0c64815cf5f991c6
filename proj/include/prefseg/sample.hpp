#pragma once

#include <vector>

#include "prefseg/mask.hpp"
#include "prefseg/types.hpp"

namespace prefseg {

/// One synthetic reasoning-segmentation instance.
struct Sample {
  Image image;
  int instruction = 0;
  /// One ground-truth mask per <seg> token of gt_response, in order.
  std::vector<Mask> gt_masks;
  TokenSeq gt_response;
  /// Masks of every object in the scene, the class-agnostic proposals a
  /// promptable segmenter would return for the image.
  std::vector<Mask> object_masks;

  /// Throws StructureError unless N = |gt_masks| = number of <seg> tokens >= 1.
  void validate() const;
};

}  // namespace prefseg
