#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "prefseg/error.hpp"
#include "prefseg/mask.hpp"
#include "prefseg/rng.hpp"
#include "support/oracles.hpp"

using namespace prefseg;


TEST_CASE("iou of a 2x2 block inside a 2x4 block is one half") {
  Mask a(8, 8), b(8, 8);
  a.fill_rect(2, 2, 2, 2);
  b.fill_rect(2, 2, 2, 4);
  CHECK(iou(a, b) == 0.5);
  CHECK(iou(b, a) == 0.5);
}

TEST_CASE("iou identity, disjoint and empty cases") {
  Mask a(6, 6), b(6, 6), empty(6, 6);
  a.fill_rect(0, 0, 2, 2);
  b.fill_rect(3, 3, 2, 2);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, b) == 0.0);
  CHECK(iou(empty, empty) == 1.0);
  CHECK(iou(a, empty) == 0.0);
}

TEST_CASE("iou rejects mismatched shapes") {
  CHECK_THROWS_AS(iou(Mask(4, 4), Mask(4, 5)), ShapeError);
  CHECK_THROWS_AS(boundary_iou(Mask(4, 4), Mask(5, 4), BandWidth(1)), ShapeError);
}

TEST_CASE("band of a centered 4x4 block is its 12-pixel perimeter") {
  Mask m(8, 8);
  m.fill_rect(2, 2, 4, 4);
  const Mask band = boundary_band(m, BandWidth(1));
  CHECK(band.count() == 12);
  for (int r = 2; r < 6; ++r)
    for (int c = 2; c < 6; ++c) {
      const bool interior = r >= 3 && r <= 4 && c >= 3 && c <= 4;
      CHECK(band.get(r, c) == !interior);
    }
}

TEST_CASE("band saturates and respects the empty mask") {
  Mask full(5, 7);
  full.fill_rect(0, 0, 5, 7);
  CHECK(boundary_band(full, BandWidth(7)) == full);
  Mask empty(5, 7);
  CHECK(boundary_band(empty, BandWidth(3)).empty());
  CHECK_THROWS(BandWidth(0));
}

TEST_CASE("boundary iou of two offset blocks matches band enumeration") {
  Mask a(10, 10), b(10, 10);
  a.fill_rect(2, 2, 4, 4);
  b.fill_rect(3, 2, 4, 4);
  const double expected = oracle::boundary_iou(a, b, 1);
  CHECK(boundary_iou(a, b, BandWidth(1)) == expected);
  // Rings of 12 pixels share 2 pixels in each of rows 3, 4 and 5.
  CHECK(expected == doctest::Approx(6.0 / 18.0).epsilon(1e-15));
  CHECK(boundary_iou(a, a, BandWidth(1)) == 1.0);
}

TEST_CASE("random masks agree with brute-force band and iou oracles") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = rng.uniform_int(1, 12), w = rng.uniform_int(1, 12);
    const double density = rng.uniform();
    const Mask a = oracle::random_mask(rng, h, w, density);
    const Mask b = oracle::random_mask(rng, h, w, density);
    const int bw = rng.uniform_int(1, 4);
    CHECK(boundary_band(a, BandWidth(bw)) == oracle::band(a, bw));
    CHECK(iou(a, b) == oracle::iou(a, b));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(boundary_band(a, BandWidth(bw)).subset_of(boundary_band(a, BandWidth(bw + 1))));
    CHECK(boundary_iou(a, b, BandWidth(std::max(h, w))) == iou(a, b));
  }
}

TEST_CASE("default band width follows two percent of the diagonal") {
  CHECK(default_band_width(16, 16).w == 1);
  CHECK(default_band_width(64, 64).w == 2);
  CHECK(default_band_width(2, 2).w == 1);
}

TEST_CASE("text format round-trips bit-exactly") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask m = oracle::random_mask(rng, rng.uniform_int(1, 20), rng.uniform_int(1, 70), 0.4);
    std::stringstream ss;
    write_mask(ss, m);
    CHECK(read_mask(ss) == m);
    CHECK(mask_from_string(mask_to_string(m)) == m);
  }
  CHECK(mask_to_string(Mask(1, 3)) == "1 3\n000\n");
}
