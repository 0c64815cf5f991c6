#include "prefseg/mask.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "prefseg/error.hpp"

namespace prefseg {

Mask::Mask(int height, int width) : height_(height), width_(width) {
  if (height < 1 || width < 1) {
    throw ShapeError("mask dimensions must be positive, got " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  words_.assign((size() + 63) / 64, 0);
}

bool Mask::get(int r, int c) const {
  const std::size_t i = static_cast<std::size_t>(r) * width_ + c;
  return (words_[i >> 6] >> (i & 63)) & 1U;
}

void Mask::set(int r, int c, bool value) {
  if (r < 0 || c < 0 || r >= height_ || c >= width_) {
    throw GeometryError("pixel outside mask");
  }
  const std::size_t i = static_cast<std::size_t>(r) * width_ + c;
  const std::uint64_t bit = std::uint64_t{1} << (i & 63);
  if (value) {
    words_[i >> 6] |= bit;
  } else {
    words_[i >> 6] &= ~bit;
  }
}

void Mask::fill_rect(int top, int left, int h, int w) {
  for (int r = top; r < top + h; ++r) {
    for (int c = left; c < left + w; ++c) set(r, c);
  }
}

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

void Mask::check_same_shape(const Mask& other) const {
  if (!same_shape(other)) {
    throw ShapeError("mask shapes differ: " + std::to_string(height_) + "x" +
                     std::to_string(width_) + " vs " +
                     std::to_string(other.height_) + "x" +
                     std::to_string(other.width_));
  }
}

std::size_t Mask::intersection_count(const Mask& other) const {
  check_same_shape(other);
  std::size_t n = 0;
  for (std::size_t i = 0; i < words_.size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(words_[i] & other.words_[i]));
  }
  return n;
}

std::size_t Mask::union_count(const Mask& other) const {
  check_same_shape(other);
  std::size_t n = 0;
  for (std::size_t i = 0; i < words_.size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(words_[i] | other.words_[i]));
  }
  return n;
}

bool Mask::subset_of(const Mask& other) const {
  check_same_shape(other);
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] & ~other.words_[i]) return false;
  }
  return true;
}

BandWidth::BandWidth(int pixels) : w(pixels) {
  if (pixels < 1) throw GeometryError("band width must be >= 1");
}

BandWidth default_band_width(int height, int width) {
  const double diag = std::sqrt(static_cast<double>(height) * height +
                                static_cast<double>(width) * width);
  return BandWidth(std::max(1, static_cast<int>(std::lround(0.02 * diag))));
}

double iou(const Mask& a, const Mask& b) {
  const std::size_t u = a.union_count(b);
  if (u == 0) return 1.0;
  return static_cast<double>(a.intersection_count(b)) / static_cast<double>(u);
}

Mask boundary_band(const Mask& m, BandWidth bw) {
  const int h = m.height();
  const int w = m.width();
  const int radius = bw.w;
  // A set pixel is interior iff its whole (2r+1)^2 neighbourhood is set and
  // inside the grid; separable erosion computes that.
  std::vector<char> rows(static_cast<std::size_t>(h) * w, 0);
  for (int r = 0; r < h; ++r) {
    int run = 0;  // length of the current run of set pixels ending at c
    std::vector<int> run_end(w);
    for (int c = 0; c < w; ++c) {
      run = m.get(r, c) ? run + 1 : 0;
      run_end[c] = run;
    }
    for (int c = 0; c < w; ++c) {
      const int right = c + radius;
      const int left = c - radius;
      rows[static_cast<std::size_t>(r) * w + c] =
          left >= 0 && right < w && run_end[right] >= 2 * radius + 1;
    }
  }
  Mask band(h, w);
  for (int c = 0; c < w; ++c) {
    std::vector<int> run_end(h);
    int run = 0;
    for (int r = 0; r < h; ++r) {
      run = rows[static_cast<std::size_t>(r) * w + c] ? run + 1 : 0;
      run_end[r] = run;
    }
    for (int r = 0; r < h; ++r) {
      if (!m.get(r, c)) continue;
      const int top = r - radius;
      const int bottom = r + radius;
      const bool interior =
          top >= 0 && bottom < h && run_end[bottom] >= 2 * radius + 1;
      if (!interior) band.set(r, c);
    }
  }
  return band;
}

double boundary_iou(const Mask& a, const Mask& b, BandWidth w) {
  if (!a.same_shape(b)) throw ShapeError("boundary_iou: mask shapes differ");
  return iou(boundary_band(a, w), boundary_band(b, w));
}

void write_mask(std::ostream& out, const Mask& m) {
  out << m.height() << ' ' << m.width() << '\n';
  std::string row(static_cast<std::size_t>(m.width()), '0');
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) row[c] = m.get(r, c) ? '1' : '0';
    out << row << '\n';
  }
}

Mask read_mask(std::istream& in) {
  int h = 0;
  int w = 0;
  if (!(in >> h >> w)) throw IoError("mask header must be \"H W\"");
  Mask m(h, w);
  std::string row;
  std::getline(in, row);
  for (int r = 0; r < h; ++r) {
    if (!std::getline(in, row)) throw IoError("mask truncated");
    if (!row.empty() && row.back() == '\r') row.pop_back();
    if (row.size() != static_cast<std::size_t>(w)) {
      throw IoError("mask row " + std::to_string(r) + " has wrong length");
    }
    for (int c = 0; c < w; ++c) {
      if (row[c] == '1') {
        m.set(r, c);
      } else if (row[c] != '0') {
        throw IoError("mask characters must be 0 or 1");
      }
    }
  }
  return m;
}

std::string mask_to_string(const Mask& m) {
  std::ostringstream out;
  write_mask(out, m);
  return out.str();
}

Mask mask_from_string(const std::string& text) {
  std::istringstream in(text);
  return read_mask(in);
}

}  // namespace prefseg
