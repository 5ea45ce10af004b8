#include "addrforge/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "addrforge/errors.hpp"

namespace addrforge {

Raster::Raster(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width < 0 || height < 0) throw std::invalid_argument("Raster: negative dimensions");
  data_.resize(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3);
  for (std::size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill[0];
    data_[i + 1] = fill[1];
    data_[i + 2] = fill[2];
  }
}

namespace {

struct Tap {
  int src;
  std::uint64_t weight;
};

// Taps for each destination index. Coordinates are scaled by dst so that a
// destination pixel covers [i*src, (i+1)*src) and a source pixel covers
// [k*dst, (k+1)*dst); overlaps are then integers summing to `src`.
std::vector<std::vector<Tap>> area_taps(int src, int dst) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(dst));
  const auto s = static_cast<std::int64_t>(src);
  const auto d = static_cast<std::int64_t>(dst);
  for (std::int64_t i = 0; i < d; ++i) {
    const std::int64_t lo = i * s;
    const std::int64_t hi = (i + 1) * s;
    for (std::int64_t k = lo / d; k < s && k * d < hi; ++k) {
      const std::int64_t overlap = std::min(hi, (k + 1) * d) - std::max(lo, k * d);
      if (overlap > 0) {
        taps[static_cast<std::size_t>(i)].push_back(
            {static_cast<int>(k), static_cast<std::uint64_t>(overlap)});
      }
    }
  }
  return taps;
}

}  // namespace

Raster resize_area(const Raster& src, int width, int height) {
  if (width < 0 || height < 0) throw std::invalid_argument("resize_area: negative size");
  if (width == 0 || height == 0) return Raster(width, height);
  if (src.empty()) throw std::invalid_argument("resize_area: empty source");
  if (src.width() == width && src.height() == height) return src;

  const auto xtaps = area_taps(src.width(), width);
  const auto ytaps = area_taps(src.height(), height);

  // Horizontal pass without division; sums carry a factor of src.width().
  std::vector<std::uint64_t> rows(static_cast<std::size_t>(width) * src.height() * 3);
  for (int y = 0; y < src.height(); ++y) {
    for (int x = 0; x < width; ++x) {
      std::uint64_t acc[3] = {0, 0, 0};
      for (const auto& t : xtaps[static_cast<std::size_t>(x)]) {
        const Rgb c = src.at(t.src, y);
        for (int ch = 0; ch < 3; ++ch) acc[ch] += t.weight * c[ch];
      }
      auto* out = &rows[(static_cast<std::size_t>(y) * width + x) * 3];
      std::copy(acc, acc + 3, out);
    }
  }

  const std::uint64_t denom =
      static_cast<std::uint64_t>(src.width()) * static_cast<std::uint64_t>(src.height());
  Raster dst(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      std::uint64_t acc[3] = {0, 0, 0};
      for (const auto& t : ytaps[static_cast<std::size_t>(y)]) {
        const auto* in = &rows[(static_cast<std::size_t>(t.src) * width + x) * 3];
        for (int ch = 0; ch < 3; ++ch) acc[ch] += t.weight * in[ch];
      }
      Rgb c;
      for (int ch = 0; ch < 3; ++ch) {
        c[ch] = static_cast<std::uint8_t>((2 * acc[ch] + denom) / (2 * denom));
      }
      dst.set(x, y, c);
    }
  }
  return dst;
}

Raster crop(const Raster& src, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > src.width() || y + h > src.height()) {
    throw std::out_of_range("crop: region outside source");
  }
  Raster out(w, h);
  for (int j = 0; j < h; ++j) {
    std::copy_n(src.data() + (static_cast<std::size_t>(y + j) * src.width() + x) * 3,
                static_cast<std::size_t>(w) * 3,
                out.data() + static_cast<std::size_t>(j) * w * 3);
  }
  return out;
}

namespace {

Raster from_bgr(const cv::Mat& bgr) {
  Raster out(bgr.cols, bgr.rows);
  cv::Mat rgb(bgr.rows, bgr.cols, CV_8UC3, out.data());
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return out;
}

cv::Mat to_bgr(const Raster& image) {
  cv::Mat rgb(image.height(), image.width(), CV_8UC3, const_cast<std::uint8_t*>(image.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

Raster read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError(path, "image not found");
  cv::Mat bgr;
  try {
    bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw IoError(path, std::string("decode failed: ") + e.what());
  }
  if (bgr.empty()) throw IoError(path, "unsupported or corrupt image");
  return from_bgr(bgr);
}

std::vector<std::uint8_t> encode_image(const Raster& image, const std::string& ext) {
  if (image.empty()) throw std::invalid_argument("encode_image: empty raster");
  std::vector<int> params;
  if (ext == ".jpg" || ext == ".jpeg") params = {cv::IMWRITE_JPEG_QUALITY, 95};
  std::vector<std::uint8_t> bytes;
  if (!cv::imencode(ext, to_bgr(image), bytes, params)) {
    throw std::runtime_error("encode_image: encoder rejected " + ext);
  }
  return bytes;
}

void write_image(const std::filesystem::path& path, const Raster& image) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") {
    throw IoError(path, "unsupported output extension");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<std::uint8_t> bytes;
  try {
    bytes = encode_image(image, ext);
  } catch (const std::exception& e) {
    throw IoError(path, e.what());
  }
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (f == nullptr) throw IoError(path, "cannot open for writing");
  const auto n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw IoError(path, "short write");
}

}  // namespace addrforge
