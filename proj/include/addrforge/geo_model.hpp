#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace addrforge {

enum class AddressLevel { street, district };

const char* to_string(AddressLevel level);

/// Street and district display names as they appear in the gazetteer.
struct AddressLabel {
  std::string street;
  std::string district;

  bool operator==(const AddressLabel&) const = default;
};

struct LonLat {
  double lon = 0.0;
  double lat = 0.0;

  bool operator==(const LonLat&) const = default;
};

struct ViewImage {
  std::filesystem::path path;
  double heading = 0.0;  // degrees in [0, 360)
  int width = 0;         // 0 when not declared in the input
  int height = 0;

  bool operator==(const ViewImage&) const = default;
};

struct Location {
  std::string id;
  double lat = 0.0;
  double lon = 0.0;
  AddressLabel address;
  std::vector<ViewImage> views;

  bool operator==(const Location&) const = default;
};

struct Road {
  std::string name;
  std::vector<LonLat> polyline;

  bool operator==(const Road&) const = default;
};

/// Canonical name sets for one city. Entries are keyed by their normalized
/// form; the first spelling seen becomes the display name.
class Gazetteer {
 public:
  Gazetteer() = default;
  explicit Gazetteer(std::string city_id) : city_id_(std::move(city_id)) {}

  /// Returns the display name the text resolves to, inserting it if new.
  const std::string& add(std::string_view name, AddressLevel level);

  /// Exact match under normalization.
  std::optional<std::string> lookup(std::string_view text, AddressLevel level) const;

  /// First gazetteer entry mentioned in free text, matched on whole normalized
  /// tokens. Earliest position wins; longer names win ties at one position.
  std::optional<std::string> find_mention(std::string_view text, AddressLevel level) const;

  /// Display names in insertion order.
  const std::vector<std::string>& names(AddressLevel level) const;

  bool contains(std::string_view name, AddressLevel level) const;

  const std::string& city_id() const noexcept { return city_id_; }
  std::size_t size(AddressLevel level) const { return names(level).size(); }

 private:
  struct Table {
    std::map<std::string, std::size_t, std::less<>> by_key;
    std::vector<std::string> display;
    std::vector<std::string> keys;
  };
  const Table& table(AddressLevel level) const;
  Table& table(AddressLevel level);

  std::string city_id_;
  Table streets_;
  Table districts_;
};

struct CityIndex {
  std::string city_id;
  std::vector<Location> locations;
  std::vector<Road> roads;
  Gazetteer gazetteer;

  const Location* find(std::string_view location_id) const;
  std::size_t image_count() const;
};

/// Parses a locations JSONL file (see docs/schemas/location.schema.json).
/// Relative view paths resolve against the file's directory. Blank lines are
/// skipped. Throws InputError carrying the 1-based line number.
CityIndex ingest_locations(const std::filesystem::path& path, std::string city_id = "city");

/// Same, from an in-memory JSONL string; relative view paths resolve against `base_dir`.
CityIndex parse_locations(std::string_view jsonl, std::string city_id,
                          const std::filesystem::path& base_dir = {});

struct RoadIngest {
  std::vector<Road> roads;
  std::size_t skipped_unnamed = 0;
  std::size_t skipped_geometry = 0;  // non-LineString, < 2 vertices or out-of-range vertices
};

/// Reads an RFC 7946 FeatureCollection; keeps named LineStrings only.
RoadIngest ingest_roads(const std::filesystem::path& path);
RoadIngest parse_roads(std::string_view geojson);

/// Case-folds ASCII, deletes apostrophes, turns other punctuation into
/// spaces, collapses whitespace and, at street level, expands the suffix
/// abbreviations st, ave, blvd, rd and dr on every token. Idempotent.
/// Throws std::invalid_argument on empty input.
std::string normalize_address(std::string_view text, AddressLevel level);

/// The gazetteer entry whose normalized form equals normalize(text), if any.
std::optional<std::string> gazetteer_lookup(std::string_view text, AddressLevel level,
                                            const CityIndex& index);

}  // namespace addrforge
