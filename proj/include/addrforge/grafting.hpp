#pragma once

#include <optional>
#include <string>

#include "addrforge/raster.hpp"

namespace addrforge {

enum class GraftMode { grafted, stitched, separate };

const char* to_string(GraftMode mode);
GraftMode parse_graft_mode(const std::string& text);

struct GraftSpec {
  GraftMode mode = GraftMode::grafted;
  double delta = 0.5;     // longer-side overlap ratio, [0, 0.5]
  int target_side = 336;
  bool wide_delta = false;  // ablation runs only: admit delta up to 1

  /// Throws std::invalid_argument when delta or target_side is out of range.
  void validate() const;
};

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const noexcept { return x1 - x0; }
  int height() const noexcept { return y1 - y0; }
  long long area() const noexcept { return static_cast<long long>(width()) * height(); }
  bool contains(int x, int y) const noexcept { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const PixelRect&) const = default;
};

/// Placement of the scaled street view inside the satellite square. The mask
/// is 1 (keep satellite) outside `rect` and 0 (street view) inside.
struct GraftGeometry {
  double scale = 0.0;
  PixelRect rect;

  bool mask(int x, int y) const noexcept { return !rect.contains(x, y); }
};

/// Longer side scaled to round(delta * target_side), shorter side scaled in
/// proportion; both rounded half away from zero. The rectangle sits flush in
/// the top-right corner.
GraftGeometry compute_graft_geometry(int street_w, int street_h, const GraftSpec& spec);

struct GraftResult {
  Raster image;                  // grafted / stitched output, or the satellite for separate
  std::optional<Raster> second;  // separate mode only: the street view at target_side
  GraftGeometry geometry;        // grafted mode only
};

/// Combines a target_side x target_side satellite with a street view.
/// Throws std::invalid_argument when the satellite has the wrong shape.
GraftResult graft(const Raster& satellite, const Raster& street, const GraftSpec& spec);

}  // namespace addrforge
