#include "addrforge/grafting.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace addrforge {

const char* to_string(GraftMode mode) {
  switch (mode) {
    case GraftMode::grafted: return "grafted";
    case GraftMode::stitched: return "stitched";
    case GraftMode::separate: return "separate";
  }
  return "?";
}

GraftMode parse_graft_mode(const std::string& text) {
  if (text == "grafted") return GraftMode::grafted;
  if (text == "stitched") return GraftMode::stitched;
  if (text == "separate") return GraftMode::separate;
  throw std::invalid_argument("unknown graft mode '" + text + "'");
}

void GraftSpec::validate() const {
  const double hi = wide_delta ? 1.0 : 0.5;
  if (!(delta >= 0.0 && delta <= hi)) {
    throw std::invalid_argument("graft delta must be in [0, " + std::string(wide_delta ? "1" : "0.5") +
                                "], got " + std::to_string(delta));
  }
  if (target_side <= 0) throw std::invalid_argument("graft target_side must be > 0");
}

GraftGeometry compute_graft_geometry(int street_w, int street_h, const GraftSpec& spec) {
  spec.validate();
  if (street_w <= 0 || street_h <= 0) {
    throw std::invalid_argument("street view dimensions must be positive");
  }
  const long long longer = std::max(street_w, street_h);
  const long long shorter = std::min(street_w, street_h);
  // std::round is half away from zero.
  const auto scaled_long = static_cast<long long>(std::round(spec.delta * spec.target_side));
  // Integer half-up for the positive ratio shorter * scaled_long / longer.
  const long long scaled_short = (2 * shorter * scaled_long + longer) / (2 * longer);

  const int w = static_cast<int>(street_w >= street_h ? scaled_long : scaled_short);
  const int h = static_cast<int>(street_w >= street_h ? scaled_short : scaled_long);

  GraftGeometry g;
  g.scale = static_cast<double>(scaled_long) / static_cast<double>(longer);
  g.rect = {spec.target_side - w, 0, spec.target_side, h};
  return g;
}

namespace {

void paste(Raster& dst, const Raster& src, int x0, int y0) {
  for (int y = 0; y < src.height(); ++y) {
    for (int x = 0; x < src.width(); ++x) dst.set(x0 + x, y0 + y, src.at(x, y));
  }
}

}  // namespace

GraftResult graft(const Raster& satellite, const Raster& street, const GraftSpec& spec) {
  spec.validate();
  const int side = spec.target_side;
  if (satellite.width() != side || satellite.height() != side) {
    throw std::invalid_argument("satellite must be " + std::to_string(side) + "x" +
                                std::to_string(side) + ", got " +
                                std::to_string(satellite.width()) + "x" +
                                std::to_string(satellite.height()));
  }
  if (street.empty()) throw std::invalid_argument("street view raster is empty");

  GraftResult out;
  switch (spec.mode) {
    case GraftMode::grafted: {
      out.geometry = compute_graft_geometry(street.width(), street.height(), spec);
      out.image = satellite;
      const auto& r = out.geometry.rect;
      if (r.area() > 0) paste(out.image, resize_area(street, r.width(), r.height()), r.x0, r.y0);
      break;
    }
    case GraftMode::stitched: {
      // Street view scaled to the satellite's height, placed on its right;
      // the strip is padded below with mid-gray to a square, then resized.
      const long long sw = (2LL * street.width() * side + street.height()) / (2LL * street.height());
      const int street_w = static_cast<int>(std::max(1LL, sw));
      const int strip_w = side + street_w;
      Raster square(strip_w, strip_w, kMidGray);
      paste(square, satellite, 0, 0);
      paste(square, resize_area(street, street_w, side), side, 0);
      out.image = resize_area(square, side, side);
      break;
    }
    case GraftMode::separate:
      out.image = satellite;
      out.second = resize_area(street, side, side);
      break;
  }
  return out;
}

}  // namespace addrforge
