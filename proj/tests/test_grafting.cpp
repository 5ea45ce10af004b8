#include <gtest/gtest.h>

#include "addrforge/grafting.hpp"
#include "addrforge/rng.hpp"
#include "support/oracles.hpp"
#include "support/synthetic_city.hpp"

using namespace addrforge;

TEST(GraftGeometry, LandscapeExample) {
  const auto g = compute_graft_geometry(672, 336, {GraftMode::grafted, 0.5, 336});
  EXPECT_DOUBLE_EQ(g.scale, 0.25);
  EXPECT_EQ(g.rect, (PixelRect{168, 0, 336, 84}));
  EXPECT_FALSE(g.mask(200, 10));
  EXPECT_TRUE(g.mask(167, 10));
  EXPECT_TRUE(g.mask(200, 84));
}

TEST(GraftGeometry, PortraitExample) {
  const auto g = compute_graft_geometry(336, 672, {GraftMode::grafted, 0.5, 336});
  EXPECT_EQ(g.rect, (PixelRect{252, 0, 336, 168}));
  EXPECT_EQ(g.rect.width(), 84);
  EXPECT_EQ(g.rect.height(), 168);
}

TEST(GraftGeometry, ZeroDeltaIsEmpty) {
  const auto g = compute_graft_geometry(640, 480, {GraftMode::grafted, 0.0, 336});
  EXPECT_EQ(g.rect.area(), 0);
}

TEST(GraftGeometry, HalfAwayRounding) {
  // 0.3 * 335 = 100.5 -> 101; shorter 50 * 101 / 100 = 50.5 -> 51.
  const auto g = compute_graft_geometry(100, 50, {GraftMode::grafted, 0.3, 335});
  EXPECT_EQ(g.rect.width(), 101);
  EXPECT_EQ(g.rect.height(), 51);
}

TEST(GraftGeometry, DeltaRange) {
  EXPECT_THROW(compute_graft_geometry(10, 10, {GraftMode::grafted, 0.51, 336}), std::invalid_argument);
  EXPECT_THROW(compute_graft_geometry(10, 10, {GraftMode::grafted, -0.1, 336}), std::invalid_argument);
  GraftSpec wide{GraftMode::grafted, 0.7, 336};
  wide.wide_delta = true;
  EXPECT_EQ(compute_graft_geometry(672, 336, wide).rect.width(), 235);
  EXPECT_THROW(compute_graft_geometry(0, 10, {GraftMode::grafted, 0.5, 336}), std::invalid_argument);
}

TEST(GraftGeometry, FuzzedBoundsMonotonicityAndOracle) {
  Rng rng(77);
  for (int t = 0; t < 5000; ++t) {
    const int w = 1 + static_cast<int>(rng.uniform_index(2000));
    const int h = 1 + static_cast<int>(rng.uniform_index(2000));
    const int side = 16 + static_cast<int>(rng.uniform_index(600));
    const double d = 0.5 * rng.uniform01();
    const auto g = compute_graft_geometry(w, h, {GraftMode::grafted, d, side});
    const auto o = testkit::oracle_graft_rect(w, h, d, side);
    ASSERT_EQ(g.rect, (PixelRect{o.x0, o.y0, o.x1, o.y1})) << w << "x" << h << " d=" << d;
    EXPECT_EQ(g.rect.x1, side);
    EXPECT_EQ(g.rect.y0, 0);
    const double frac = static_cast<double>(g.rect.area()) / (static_cast<double>(side) * side);
    EXPECT_LE(frac, d * d + (2.0 * side + 1) / (static_cast<double>(side) * side));
    const double d2 = std::min(0.5, d + 0.5 * rng.uniform01() * (0.5 - d));
    EXPECT_GE(compute_graft_geometry(w, h, {GraftMode::grafted, d2, side}).rect.area(),
              g.rect.area());
  }
}

TEST(ResizeArea, MatchesBruteForceReference) {
  Rng rng(5);
  for (int t = 0; t < 60; ++t) {
    const int sw = 1 + static_cast<int>(rng.uniform_index(90));
    const int sh = 1 + static_cast<int>(rng.uniform_index(90));
    const int dw = 1 + static_cast<int>(rng.uniform_index(60));
    const int dh = 1 + static_cast<int>(rng.uniform_index(60));
    const auto src = testkit::noise_image(sw, sh, rng.next());
    ASSERT_EQ(resize_area(src, dw, dh), testkit::exact_box_resize(src, dw, dh))
        << sw << "x" << sh << " -> " << dw << "x" << dh;
  }
}

TEST(ResizeArea, ExactQuarterAverages) {
  Raster src(4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      src.set(x, y, {static_cast<std::uint8_t>(10 * x), static_cast<std::uint8_t>(10 * y), 1});
    }
  }
  const auto d = resize_area(src, 1, 1);
  // mean of 0,10,20,30 = 15; blue 1.
  EXPECT_EQ(d.at(0, 0), (Rgb{15, 15, 1}));
}

TEST(Graft, GraftedMatchesMaskOracle) {
  const auto sat = testkit::noise_image(336, 336, 1);
  const auto street = testkit::noise_image(672, 336, 2);
  const auto r = graft(sat, street, {GraftMode::grafted, 0.5, 336});
  EXPECT_EQ(r.image, testkit::oracle_graft(sat, street, 0.5));
  EXPECT_FALSE(r.second.has_value());
}

TEST(Graft, ZeroDeltaIsIdentity) {
  const auto sat = testkit::noise_image(336, 336, 3);
  const auto street = testkit::noise_image(100, 60, 4);
  EXPECT_EQ(graft(sat, street, {GraftMode::grafted, 0.0, 336}).image, sat);
}

TEST(Graft, Deterministic) {
  const auto sat = testkit::noise_image(336, 336, 5);
  const auto street = testkit::noise_image(123, 77, 6);
  const GraftSpec spec{GraftMode::grafted, 0.37, 336};
  EXPECT_EQ(graft(sat, street, spec).image, graft(sat, street, spec).image);
}

TEST(Graft, StitchedLayout) {
  // Uniform colours make the composed result predictable after resizing.
  const Raster sat(336, 336, {200, 0, 0});
  const Raster street(672, 336, {0, 0, 200});
  const auto r = graft(sat, street, {GraftMode::stitched, 0.5, 336});
  ASSERT_EQ(r.image.width(), 336);
  ASSERT_EQ(r.image.height(), 336);
  // Strip is 336 + 672 = 1008 wide; satellite occupies the left third of
  // the top third, the street the right two thirds, gray below.
  EXPECT_EQ(r.image.at(10, 10), (Rgb{200, 0, 0}));
  EXPECT_EQ(r.image.at(300, 10), (Rgb{0, 0, 200}));
  EXPECT_EQ(r.image.at(10, 300), kMidGray);
  EXPECT_EQ(r.image.at(300, 300), kMidGray);
}

TEST(Graft, SeparatePair) {
  const auto sat = testkit::noise_image(336, 336, 7);
  const auto street = testkit::noise_image(640, 480, 8);
  const auto r = graft(sat, street, {GraftMode::separate, 0.5, 336});
  EXPECT_EQ(r.image, sat);
  ASSERT_TRUE(r.second.has_value());
  EXPECT_EQ(r.second->width(), 336);
  EXPECT_EQ(*r.second, resize_area(street, 336, 336));
}

TEST(Graft, RejectsWrongSatelliteShape) {
  const auto street = testkit::noise_image(64, 32, 9);
  EXPECT_THROW(graft(testkit::noise_image(320, 336, 1), street, {}), std::invalid_argument);
  EXPECT_THROW(graft(testkit::noise_image(640, 640, 1), street, {}), std::invalid_argument);
}

TEST(GraftMode, ParseRoundTrip) {
  for (auto m : {GraftMode::grafted, GraftMode::stitched, GraftMode::separate}) {
    EXPECT_EQ(parse_graft_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_graft_mode("overlay"), std::invalid_argument);
}
