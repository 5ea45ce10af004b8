#include "addrforge/tiling.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "addrforge/errors.hpp"

namespace addrforge {

double world_size_px(int zoom) {
  if (zoom < 0 || zoom > kMaxZoom) throw std::domain_error("zoom out of range");
  return std::ldexp(static_cast<double>(kTileSize), zoom);
}

WorldPixel lonlat_to_world_pixel(double lon, double lat, int zoom) {
  if (!(std::abs(lat) <= kMaxMercatorLat)) {
    throw std::domain_error("latitude outside Mercator bounds: " + std::to_string(lat));
  }
  if (!(lon >= -180.0 && lon <= 180.0)) {
    throw std::domain_error("longitude out of range: " + std::to_string(lon));
  }
  const double size = world_size_px(zoom);
  const double phi = lat * std::numbers::pi / 180.0;
  const double x = (lon + 180.0) / 360.0 * size;
  const double y = (1.0 - std::log(std::tan(phi) + 1.0 / std::cos(phi)) / std::numbers::pi) / 2.0 * size;
  return {x, y};
}

LonLat world_pixel_to_lonlat(double px, double py, int zoom) {
  const double size = world_size_px(zoom);
  // Admit rounding noise from the forward transform at the Mercator edge.
  const double slack = 1e-6;
  if (!(px >= -slack && px <= size + slack && py >= -slack && py <= size + slack)) {
    throw std::domain_error("world pixel outside world bounds");
  }
  px = std::clamp(px, 0.0, size);
  py = std::clamp(py, 0.0, size);
  const double lon = px / size * 360.0 - 180.0;
  const double n = std::numbers::pi * (1.0 - 2.0 * py / size);
  const double lat = std::atan(std::sinh(n)) * 180.0 / std::numbers::pi;
  return {lon, lat};
}

TileStore::TileStore(std::filesystem::path root, int zoom) : root_(std::move(root)), zoom_(zoom) {
  if (zoom < 0 || zoom > kMaxZoom) throw std::invalid_argument("TileStore: zoom out of range");
}

std::filesystem::path TileStore::tile_path(std::int64_t x, std::int64_t y) const {
  return root_ / std::to_string(zoom_) / std::to_string(x) / (std::to_string(y) + ".png");
}

std::optional<Raster> TileStore::load(std::int64_t x, std::int64_t y) const {
  const auto path = tile_path(x, y);
  if (!std::filesystem::exists(path)) return std::nullopt;
  auto tile = read_image(path);
  if (tile.width() != kTileSize || tile.height() != kTileSize) {
    throw IoError(path, "tile is not 256x256");
  }
  return tile;
}

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t floor_mod(std::int64_t a, std::int64_t b) { return a - floor_div(a, b) * b; }

}  // namespace

std::pair<std::int64_t, std::int64_t> window_origin(const WorldPixel& center, int window_px) {
  return {static_cast<std::int64_t>(std::floor(center.x)) - window_px / 2,
          static_cast<std::int64_t>(std::floor(center.y)) - window_px / 2};
}

SatelliteWindow assemble_window(const LonLat& center, int zoom, int window_px,
                                const TileStore& store) {
  if (window_px <= 0) throw std::invalid_argument("assemble_window: window_px must be > 0");
  if (zoom != store.zoom()) throw std::invalid_argument("assemble_window: zoom differs from store");

  const auto world = static_cast<std::int64_t>(world_size_px(zoom));
  const std::int64_t tiles_per_axis = world / kTileSize;
  const auto [ox, oy] = window_origin(lonlat_to_world_pixel(center.lon, center.lat, zoom), window_px);

  SatelliteWindow out;
  out.center = center;
  out.zoom = zoom;
  out.origin_x = ox;
  out.origin_y = oy;
  out.image = Raster(window_px, window_px, kMidGray);

  const std::int64_t tx0 = floor_div(ox, kTileSize);
  const std::int64_t tx1 = floor_div(ox + window_px - 1, kTileSize);
  const std::int64_t ty0 = floor_div(oy, kTileSize);
  const std::int64_t ty1 = floor_div(oy + window_px - 1, kTileSize);

  for (std::int64_t ty = ty0; ty <= ty1; ++ty) {
    for (std::int64_t tx = tx0; tx <= tx1; ++tx) {
      ++out.total_tiles;
      std::optional<Raster> tile;
      if (ty >= 0 && ty < tiles_per_axis) tile = store.load(floor_mod(tx, tiles_per_axis), ty);
      if (!tile) {
        ++out.missing_tiles;
        continue;
      }
      // Intersection of this tile with the window, in world pixels.
      const std::int64_t wx0 = std::max(ox, tx * kTileSize);
      const std::int64_t wx1 = std::min(ox + window_px, (tx + 1) * kTileSize);
      const std::int64_t wy0 = std::max(oy, ty * kTileSize);
      const std::int64_t wy1 = std::min(oy + window_px, (ty + 1) * kTileSize);
      for (std::int64_t wy = wy0; wy < wy1; ++wy) {
        for (std::int64_t wx = wx0; wx < wx1; ++wx) {
          out.image.set(static_cast<int>(wx - ox), static_cast<int>(wy - oy),
                        tile->at(static_cast<int>(wx - tx * kTileSize),
                                 static_cast<int>(wy - ty * kTileSize)));
        }
      }
    }
  }
  if (out.missing_tiles == out.total_tiles) {
    throw ForgeError("assemble_window: all " + std::to_string(out.total_tiles) +
                     " tiles missing under " + store.root().string());
  }
  return out;
}

namespace {

// Liang-Barsky clip of segment a->b to [0, side]^2. Returns false when the
// segment misses the box.
bool clip_segment(double side, double& ax, double& ay, double& bx, double& by) {
  double t0 = 0.0, t1 = 1.0;
  const double dx = bx - ax, dy = by - ay;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {ax, side - ax, ay, side - ay};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
    } else {
      const double r = q[i] / p[i];
      if (p[i] < 0.0) {
        if (r > t1) return false;
        t0 = std::max(t0, r);
      } else {
        if (r < t0) return false;
        t1 = std::min(t1, r);
      }
    }
  }
  const double nax = ax + t0 * dx, nay = ay + t0 * dy;
  bx = ax + t1 * dx;
  by = ay + t1 * dy;
  ax = nax;
  ay = nay;
  return true;
}

}  // namespace

std::vector<RoadClip> clip_roads(const SatelliteWindow& window, std::span<const Road> roads) {
  const double side = window.image.width();
  std::vector<RoadClip> clips;
  for (std::size_t r = 0; r < roads.size(); ++r) {
    std::vector<WorldPixel> pts;
    try {
      for (const auto& v : roads[r].polyline) {
        const auto p = lonlat_to_world_pixel(v.lon, v.lat, window.zoom);
        pts.push_back({p.x - static_cast<double>(window.origin_x),
                       p.y - static_cast<double>(window.origin_y)});
      }
    } catch (const std::domain_error&) {
      continue;
    }
    RoadClip clip{r, 0.0, 0.0, 0.0};
    double longest = -1.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      double ax = pts[i - 1].x, ay = pts[i - 1].y, bx = pts[i].x, by = pts[i].y;
      if (!clip_segment(side, ax, ay, bx, by)) continue;
      const double len = std::hypot(bx - ax, by - ay);
      if (len <= 0.0) continue;
      clip.inside_length += len;
      if (len > longest) {
        longest = len;
        clip.anchor_x = (ax + bx) / 2.0;
        clip.anchor_y = (ay + by) / 2.0;
      }
    }
    if (clip.inside_length > 0.0) clips.push_back(clip);
  }
  std::stable_sort(clips.begin(), clips.end(), [](const RoadClip& a, const RoadClip& b) {
    return a.inside_length > b.inside_length;
  });
  return clips;
}

AnnotatedWindow annotate_streets(const SatelliteWindow& window, std::span<const Road> roads,
                                 const AnnotationStyle& style) {
  if (style.font_size_px < 8) throw std::invalid_argument("annotation font_size_px must be >= 8");
  if (style.halo_px < 0 || style.max_labels < 0) {
    throw std::invalid_argument("annotation halo_px and max_labels must be >= 0");
  }
  AnnotatedWindow out{window.image, {}};
  if (!style.enabled || roads.empty()) return out;

  const int side = window.image.width();
  const int font = cv::FONT_HERSHEY_SIMPLEX;
  const int thickness = 1;
  const double scale = cv::getFontScaleFromHeight(font, style.font_size_px, thickness);
  const int margin = style.halo_px + thickness + 1;
  const cv::Scalar text_color(style.text_color[0], style.text_color[1], style.text_color[2]);
  const cv::Scalar halo_color(style.halo_color[0], style.halo_color[1], style.halo_color[2]);

  cv::Mat canvas(side, side, CV_8UC3, out.image.data());
  const auto clips = clip_roads(window, roads);
  const auto n = std::min<std::size_t>(clips.size(), static_cast<std::size_t>(style.max_labels));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& clip = clips[i];
    const std::string& text = roads[clip.road].name;
    int baseline = 0;
    const cv::Size ts = cv::getTextSize(text, font, scale, thickness, &baseline);
    const int box_w = ts.width + 2 * margin;
    const int box_h = ts.height + baseline + 2 * margin;

    int x0 = static_cast<int>(std::lround(clip.anchor_x)) - box_w / 2;
    int y0 = static_cast<int>(std::lround(clip.anchor_y)) - box_h / 2;
    x0 = std::clamp(x0, 0, std::max(0, side - box_w));
    y0 = std::clamp(y0, 0, std::max(0, side - box_h));
    const int x1 = std::min(side, x0 + box_w);
    const int y1 = std::min(side, y0 + box_h);

    // Draw into a scratch copy of the box so nothing outside it is touched;
    // oversized labels are clipped at the window edge.
    cv::Mat scratch(box_h, box_w, CV_8UC3, cv::Scalar(0, 0, 0));
    const cv::Rect inside(x0, y0, x1 - x0, y1 - y0);
    canvas(inside).copyTo(scratch(cv::Rect(0, 0, inside.width, inside.height)));
    const cv::Point org(margin, margin + ts.height);
    if (style.halo_px > 0) {
      cv::putText(scratch, text, org, font, scale, halo_color, thickness + 2 * style.halo_px,
                  cv::LINE_8);
    }
    cv::putText(scratch, text, org, font, scale, text_color, thickness, cv::LINE_8);
    scratch(cv::Rect(0, 0, inside.width, inside.height)).copyTo(canvas(inside));

    out.labels.push_back({text, x0, y0, x1, y1});
  }
  return out;
}

}  // namespace addrforge
