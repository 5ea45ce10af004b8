#pragma once

// Reference implementations kept deliberately naive and independent of the
// library code paths they check.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <regex>
#include <sstream>
#include <string>

#include "addrforge/grafting.hpp"
#include "addrforge/raster.hpp"

namespace addrforge::testkit {

/// Area-average resize by brute force over the 2-D footprint. In units where
/// a source pixel is w x h wide, every overlap is an integer, so the mean
/// sum / (sw * sh) is rounded half up without floating-point error.
inline Raster exact_box_resize(const Raster& src, int w, int h) {
  Raster out(w, h);
  const long long sw = src.width(), sh = src.height();
  auto overlap = [](long long a0, long long a1, long long b0, long long b1) {
    return std::max(0LL, std::min(a1, b1) - std::max(a0, b0));
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      long long acc[3] = {0, 0, 0};
      for (long long k = y * sh / h; k * h < (y + 1) * sh; ++k) {
        const long long wy = overlap(y * sh, (y + 1) * sh, k * h, (k + 1) * h);
        if (wy == 0) continue;
        for (long long i = x * sw / w; i * w < (x + 1) * sw; ++i) {
          const long long wx = overlap(x * sw, (x + 1) * sw, i * w, (i + 1) * w);
          if (wx == 0) continue;
          const auto c = src.at(static_cast<int>(i), static_cast<int>(k));
          for (int ch = 0; ch < 3; ++ch) acc[ch] += wx * wy * c[ch];
        }
      }
      const long long d = sw * sh;  // the footprint area in these units
      Rgb c;
      for (int ch = 0; ch < 3; ++ch) c[ch] = static_cast<std::uint8_t>((2 * acc[ch] + d) / (2 * d));
      out.set(x, y, c);
    }
  }
  return out;
}

struct OracleRect {
  int x0, y0, x1, y1;
};

/// Placement per the stated rule: longer side round(delta*T), shorter side
/// scaled in proportion, both half away from zero, flush top-right.
inline OracleRect oracle_graft_rect(int sw, int sh, double delta, int side) {
  const long double L = std::floor(static_cast<long double>(delta) * side + 0.5L);
  const int longer = std::max(sw, sh), shorter = std::min(sw, sh);
  const long double S = std::floor(static_cast<long double>(shorter) * L / longer + 0.5L);
  const int w = static_cast<int>(sw >= sh ? L : S);
  const int h = static_cast<int>(sw >= sh ? S : L);
  return {side - w, 0, side, h};
}

/// Brute-force composition: satellite outside the rect, resampled street inside.
inline Raster oracle_graft(const Raster& satellite, const Raster& street, double delta) {
  const int side = satellite.width();
  const auto r = oracle_graft_rect(street.width(), street.height(), delta, side);
  Raster out = satellite;
  if (r.x1 - r.x0 <= 0 || r.y1 - r.y0 <= 0) return out;
  const auto scaled = exact_box_resize(street, r.x1 - r.x0, r.y1 - r.y0);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const bool inside = x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
      if (inside) out.set(x, y, scaled.at(x - r.x0, y - r.y0));
    }
  }
  return out;
}

/// Address normalizer built from regex passes instead of the library's
/// single scan.
inline std::string reference_normalize(const std::string& text, bool street) {
  std::string s = std::regex_replace(text, std::regex("'"), "");
  for (auto& c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::ispunct(u)) c = ' ';
    else if (u < 0x80) c = static_cast<char>(std::tolower(u));
  }
  static const std::map<std::string, std::string> table = {
      {"st", "street"}, {"ave", "avenue"}, {"blvd", "boulevard"}, {"rd", "road"}, {"dr", "drive"}};
  std::istringstream is(s);
  std::string tok, out;
  while (is >> tok) {
    if (street) {
      auto it = table.find(tok);
      if (it != table.end()) tok = it->second;
    }
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

}  // namespace addrforge::testkit
