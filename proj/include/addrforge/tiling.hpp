#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "addrforge/geo_model.hpp"
#include "addrforge/raster.hpp"

namespace addrforge {

inline constexpr int kTileSize = 256;
inline constexpr double kMaxMercatorLat = 85.0511287798066;
inline constexpr int kMaxZoom = 30;

struct WorldPixel {
  double x = 0.0;
  double y = 0.0;
};

/// Spherical Web-Mercator, 256-px tiles, y growing southward.
/// Throws std::domain_error when |lat| exceeds the Mercator bound or lon is
/// outside [-180, 180].
WorldPixel lonlat_to_world_pixel(double lon, double lat, int zoom);

/// Inverse of lonlat_to_world_pixel. Throws std::domain_error outside the
/// world square [0, 256*2^zoom]^2.
LonLat world_pixel_to_lonlat(double px, double py, int zoom);

double world_size_px(int zoom);

/// Read-only slippy tile pyramid rooted at {root}/{z}/{x}/{y}.png.
class TileStore {
 public:
  TileStore(std::filesystem::path root, int zoom);

  const std::filesystem::path& root() const noexcept { return root_; }
  int zoom() const noexcept { return zoom_; }

  std::filesystem::path tile_path(std::int64_t x, std::int64_t y) const;

  /// The decoded tile, or nullopt when the file is absent. Throws IoError when
  /// the file exists but is not a 256x256 image.
  std::optional<Raster> load(std::int64_t x, std::int64_t y) const;

 private:
  std::filesystem::path root_;
  int zoom_;
};

struct SatelliteWindow {
  Raster image;
  LonLat center;
  int zoom = 0;
  std::int64_t origin_x = 0;  // world pixel of image (0, 0)
  std::int64_t origin_y = 0;
  std::size_t missing_tiles = 0;
  std::size_t total_tiles = 0;
};

/// World-pixel origin of a window of side `window_px` centred on `center`:
/// floor(center) - window_px / 2 on each axis.
std::pair<std::int64_t, std::int64_t> window_origin(const WorldPixel& center, int window_px);

/// Square crop of the tile mosaic around `center`. Columns wrap around the
/// antimeridian; rows outside the world and absent tiles are filled with
/// mid-gray and counted. Throws ForgeError when every tile is missing.
SatelliteWindow assemble_window(const LonLat& center, int zoom, int window_px,
                                const TileStore& store);

struct AnnotationStyle {
  bool enabled = true;
  int font_size_px = 14;
  Rgb text_color{255, 255, 255};
  Rgb halo_color{0, 0, 0};
  int halo_px = 2;
  int max_labels = 8;
};

/// Per-road clipping result in window pixel space.
struct RoadClip {
  std::size_t road = 0;           // index into the input roads
  double inside_length = 0.0;     // total clipped length, px
  double anchor_x = 0.0;          // midpoint of the longest clipped segment
  double anchor_y = 0.0;
};

/// Roads intersecting the window, longest in-window length first (ties by
/// input order).
std::vector<RoadClip> clip_roads(const SatelliteWindow& window, std::span<const Road> roads);

struct LabelBox {
  std::string text;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open, already expanded by the halo
};

struct AnnotatedWindow {
  Raster image;
  std::vector<LabelBox> labels;
};

/// Renders up to style.max_labels street names, horizontally, centred on each
/// road's anchor and shifted to stay inside the window. Pixels outside the
/// returned label boxes are untouched. Disabled style returns a copy.
AnnotatedWindow annotate_streets(const SatelliteWindow& window, std::span<const Road> roads,
                                 const AnnotationStyle& style);

}  // namespace addrforge
