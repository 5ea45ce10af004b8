#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace addrforge {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kMidGray{128, 128, 128};

/// Interleaved 8-bit RGB image, row-major, top row first.
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, Rgb fill = {0, 0, 0});

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return width_ == 0 || height_ == 0; }

  Rgb at(int x, int y) const {
    const auto* p = &data_[index(x, y)];
    return {p[0], p[1], p[2]};
  }
  void set(int x, int y, Rgb c) {
    auto* p = &data_[index(x, y)];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }

  std::uint8_t* data() noexcept { return data_.data(); }
  const std::uint8_t* data() const noexcept { return data_.data(); }
  std::size_t byte_size() const noexcept { return data_.size(); }

  bool operator==(const Raster&) const = default;

 private:
  std::size_t index(int x, int y) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
            static_cast<std::size_t>(x)) * 3;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Area-averaging (box) resample. Weights are exact integer overlaps of source
/// and destination pixel footprints, so the result is bit-reproducible.
/// Zero-sized targets give an empty raster.
Raster resize_area(const Raster& src, int width, int height);

/// Copy of the [x, x+w) x [y, y+h) region; the region must lie inside src.
Raster crop(const Raster& src, int x, int y, int w, int h);

/// Decode PNG/JPEG (gray, RGB or RGBA; alpha is dropped). Throws IoError.
Raster read_image(const std::filesystem::path& path);

/// Encode by extension (.png or .jpg/.jpeg). Throws IoError.
void write_image(const std::filesystem::path& path, const Raster& image);

/// Encoded bytes for an in-memory image; `ext` is ".png" or ".jpg".
std::vector<std::uint8_t> encode_image(const Raster& image, const std::string& ext);

}  // namespace addrforge
