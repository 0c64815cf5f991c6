#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace prefseg {

/// Binary occupancy grid, one bit per pixel, row-major.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return static_cast<std::size_t>(height_) * width_; }

  bool get(int r, int c) const;
  void set(int r, int c, bool value = true);
  /// Sets every pixel of the half-open rectangle [top, top+h) x [left, left+w).
  void fill_rect(int top, int left, int h, int w);

  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool same_shape(const Mask& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  std::size_t intersection_count(const Mask& other) const;
  std::size_t union_count(const Mask& other) const;
  /// True when every set pixel of this mask is also set in other.
  bool subset_of(const Mask& other) const;

  bool operator==(const Mask&) const = default;

 private:
  void check_same_shape(const Mask& other) const;

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Chebyshev radius of the inner boundary band, in pixels (>= 1).
struct BandWidth {
  int w = 1;
  explicit BandWidth(int pixels);
};

/// max(1, round(0.02 * diagonal)).
BandWidth default_band_width(int height, int width);

/// |a & b| / |a | b|; 1 when both are empty.
double iou(const Mask& a, const Mask& b);

/// Set pixels whose L-inf distance to the nearest background pixel is <= w.
/// Pixels outside the grid count as background.
Mask boundary_band(const Mask& m, BandWidth w);

double boundary_iou(const Mask& a, const Mask& b, BandWidth w);

/// "H W" header then H rows of W characters from {0,1}.
void write_mask(std::ostream& out, const Mask& m);
Mask read_mask(std::istream& in);
std::string mask_to_string(const Mask& m);
Mask mask_from_string(const std::string& text);

}  // namespace prefseg
