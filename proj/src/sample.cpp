#include "prefseg/sample.hpp"

#include <string>

namespace prefseg {

void Sample::validate() const {
  const auto segs = seg_positions(gt_response).size();
  if (gt_masks.empty() || segs != gt_masks.size()) {
    throw StructureError("sample has " + std::to_string(gt_masks.size()) +
                         " ground-truth masks but " + std::to_string(segs) +
                         " <seg> tokens");
  }
  for (const auto& m : gt_masks) {
    if (m.height() != image.height() || m.width() != image.width()) {
      throw ShapeError("ground-truth mask raster differs from the image");
    }
  }
}

}  // namespace prefseg
