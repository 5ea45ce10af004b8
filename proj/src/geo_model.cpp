#include "addrforge/geo_model.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "addrforge/errors.hpp"

namespace addrforge {

using nlohmann::json;

const char* to_string(AddressLevel level) {
  return level == AddressLevel::street ? "street" : "district";
}

namespace {

constexpr std::array<std::pair<std::string_view, std::string_view>, 5> kSuffixTable{{
    {"st", "street"},
    {"ave", "avenue"},
    {"blvd", "boulevard"},
    {"rd", "road"},
    {"dr", "drive"},
}};

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string normalize_address(std::string_view text, AddressLevel level) {
  if (text.empty()) throw std::invalid_argument("normalize_address: empty input");

  std::string folded;
  folded.reserve(text.size());
  for (unsigned char c : text) {
    if (c == '\'') continue;
    if (c < 0x80 && std::ispunct(c)) {
      folded.push_back(' ');
    } else if (c < 0x80) {
      folded.push_back(static_cast<char>(std::tolower(c)));
    } else {
      folded.push_back(static_cast<char>(c));
    }
  }

  std::string out;
  out.reserve(folded.size());
  std::size_t i = 0;
  while (i < folded.size()) {
    while (i < folded.size() && is_space(static_cast<unsigned char>(folded[i]))) ++i;
    if (i >= folded.size()) break;
    std::size_t j = i;
    while (j < folded.size() && !is_space(static_cast<unsigned char>(folded[j]))) ++j;
    std::string_view token(folded.data() + i, j - i);
    if (level == AddressLevel::street) {
      for (const auto& [abbr, full] : kSuffixTable) {
        if (token == abbr) {
          token = full;
          break;
        }
      }
    }
    if (!out.empty()) out.push_back(' ');
    out.append(token);
    i = j;
  }
  return out;
}

const Gazetteer::Table& Gazetteer::table(AddressLevel level) const {
  return level == AddressLevel::street ? streets_ : districts_;
}

Gazetteer::Table& Gazetteer::table(AddressLevel level) {
  return level == AddressLevel::street ? streets_ : districts_;
}

const std::string& Gazetteer::add(std::string_view name, AddressLevel level) {
  auto key = normalize_address(name, level);
  if (key.empty()) {
    throw InputError(std::string(to_string(level)) + " name '" + std::string(name) +
                     "' is empty after normalization");
  }
  auto& t = table(level);
  if (auto it = t.by_key.find(key); it != t.by_key.end()) return t.display[it->second];
  t.by_key.emplace(key, t.display.size());
  t.display.emplace_back(name);
  t.keys.push_back(std::move(key));
  return t.display.back();
}

std::optional<std::string> Gazetteer::lookup(std::string_view text, AddressLevel level) const {
  if (text.empty()) return std::nullopt;
  const auto& t = table(level);
  auto it = t.by_key.find(normalize_address(text, level));
  if (it == t.by_key.end()) return std::nullopt;
  return t.display[it->second];
}

std::optional<std::string> Gazetteer::find_mention(std::string_view text,
                                                   AddressLevel level) const {
  if (text.empty()) return std::nullopt;
  const std::string haystack = " " + normalize_address(text, level) + " ";
  const auto& t = table(level);
  std::size_t best_pos = std::string::npos;
  std::size_t best = 0;
  for (std::size_t k = 0; k < t.keys.size(); ++k) {
    const std::string needle = " " + t.keys[k] + " ";
    const auto pos = haystack.find(needle);
    if (pos == std::string::npos) continue;
    if (pos < best_pos || (pos == best_pos && t.keys[k].size() > t.keys[best].size())) {
      best_pos = pos;
      best = k;
    }
  }
  if (best_pos == std::string::npos) return std::nullopt;
  return t.display[best];
}

const std::vector<std::string>& Gazetteer::names(AddressLevel level) const {
  return table(level).display;
}

bool Gazetteer::contains(std::string_view name, AddressLevel level) const {
  return lookup(name, level).has_value();
}

const Location* CityIndex::find(std::string_view location_id) const {
  auto it = std::find_if(locations.begin(), locations.end(),
                         [&](const Location& l) { return l.id == location_id; });
  return it == locations.end() ? nullptr : &*it;
}

std::size_t CityIndex::image_count() const {
  std::size_t n = 0;
  for (const auto& l : locations) n += l.views.size();
  return n;
}

namespace {

const json& require(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw InputError(std::string("missing field '") + key + "'", line);
  return *it;
}

std::string require_string(const json& obj, const char* key, std::size_t line) {
  const auto& v = require(obj, key, line);
  if (!v.is_string() || v.get_ref<const std::string&>().empty()) {
    throw InputError(std::string("field '") + key + "' must be a nonempty string", line);
  }
  return v.get<std::string>();
}

double require_number(const json& obj, const char* key, std::size_t line) {
  const auto& v = require(obj, key, line);
  if (!v.is_number()) throw InputError(std::string("field '") + key + "' must be a number", line);
  return v.get<double>();
}

ViewImage parse_view(const json& v, const std::filesystem::path& base_dir, std::size_t line) {
  if (!v.is_object()) throw InputError("view entry must be an object", line);
  ViewImage view;
  std::filesystem::path p = require_string(v, "path", line);
  view.path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  view.heading = require_number(v, "heading", line);
  if (!(view.heading >= 0.0 && view.heading < 360.0)) {
    throw InputError("heading must be in [0, 360)", line);
  }
  if (v.contains("width") || v.contains("height")) {
    view.width = static_cast<int>(require_number(v, "width", line));
    view.height = static_cast<int>(require_number(v, "height", line));
    if (view.width <= 0 || view.height <= 0) {
      throw InputError("view dimensions must be positive", line);
    }
  }
  return view;
}

}  // namespace

CityIndex parse_locations(std::string_view jsonl, std::string city_id,
                          const std::filesystem::path& base_dir) {
  CityIndex index;
  index.city_id = city_id;
  index.gazetteer = Gazetteer(std::move(city_id));
  std::set<std::string, std::less<>> seen_ids;

  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    ++line_no;
    std::string_view line = jsonl.substr(start, end - start);
    start = end + 1;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return is_space(c); })) {
      if (end == jsonl.size()) break;
      continue;
    }

    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!rec.is_object()) throw InputError("record must be a JSON object", line_no);

    Location loc;
    loc.id = require_string(rec, "id", line_no);
    loc.lat = require_number(rec, "lat", line_no);
    loc.lon = require_number(rec, "lon", line_no);
    if (!(loc.lat >= -90.0 && loc.lat <= 90.0)) throw InputError("lat out of range", line_no);
    if (!(loc.lon >= -180.0 && loc.lon <= 180.0)) throw InputError("lon out of range", line_no);
    if (!seen_ids.insert(loc.id).second) {
      throw InputError("duplicate location id '" + loc.id + "'", line_no);
    }

    try {
      loc.address.street = index.gazetteer.add(require_string(rec, "street", line_no),
                                               AddressLevel::street);
      loc.address.district = index.gazetteer.add(require_string(rec, "district", line_no),
                                                 AddressLevel::district);
    } catch (const InputError& e) {
      if (e.line() != 0) throw;
      throw InputError(e.what(), line_no);
    }

    const auto& views = require(rec, "views", line_no);
    if (!views.is_array() || views.empty()) {
      throw InputError("views must be a nonempty array", line_no);
    }
    for (const auto& v : views) {
      auto view = parse_view(v, base_dir, line_no);
      for (const auto& other : loc.views) {
        if (other.heading == view.heading) throw InputError("duplicate view heading", line_no);
      }
      loc.views.push_back(std::move(view));
    }
    index.locations.push_back(std::move(loc));
    if (end == jsonl.size()) break;
  }
  return index;
}

CityIndex ingest_locations(const std::filesystem::path& path, std::string city_id) {
  const auto text = read_file(path);
  return parse_locations(text, std::move(city_id), path.parent_path());
}

RoadIngest parse_roads(std::string_view geojson) {
  json doc;
  try {
    doc = json::parse(geojson);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("unparsable GeoJSON: ") + e.what());
  }
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" ||
      !doc.contains("features") || !doc["features"].is_array()) {
    throw InputError("GeoJSON root must be a FeatureCollection with a features array");
  }

  RoadIngest out;
  for (const auto& feature : doc["features"]) {
    const json* geom = nullptr;
    if (feature.is_object() && feature.contains("geometry") && feature["geometry"].is_object()) {
      geom = &feature["geometry"];
    }
    if (geom == nullptr || geom->value("type", "") != "LineString" ||
        !geom->contains("coordinates") || !(*geom)["coordinates"].is_array()) {
      ++out.skipped_geometry;
      continue;
    }

    std::string name;
    if (feature.contains("properties") && feature["properties"].is_object()) {
      const auto& props = feature["properties"];
      if (auto it = props.find("name"); it != props.end() && it->is_string()) {
        name = it->get<std::string>();
      }
    }
    if (name.empty()) {
      ++out.skipped_unnamed;
      continue;
    }

    Road road;
    road.name = std::move(name);
    bool valid = (*geom)["coordinates"].size() >= 2;
    for (const auto& c : (*geom)["coordinates"]) {
      if (!valid) break;
      if (!c.is_array() || c.size() < 2 || !c[0].is_number() || !c[1].is_number()) {
        valid = false;
        break;
      }
      LonLat p{c[0].get<double>(), c[1].get<double>()};
      if (!(p.lon >= -180.0 && p.lon <= 180.0 && p.lat >= -90.0 && p.lat <= 90.0)) {
        valid = false;
        break;
      }
      road.polyline.push_back(p);
    }
    if (!valid) {
      ++out.skipped_geometry;
      continue;
    }
    out.roads.push_back(std::move(road));
  }
  return out;
}

RoadIngest ingest_roads(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return parse_roads(text);
  } catch (const InputError& e) {
    throw IoError(path, e.what());
  }
}

std::optional<std::string> gazetteer_lookup(std::string_view text, AddressLevel level,
                                            const CityIndex& index) {
  return index.gazetteer.lookup(text, level);
}

}  // namespace addrforge
