#include "addrforge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "addrforge/errors.hpp"

namespace addrforge {

using nlohmann::json;
using nlohmann::ordered_json;

FrequencyMap tally(std::span<const std::string> responses, const Gazetteer& gazetteer) {
  FrequencyMap f;
  f.total = responses.size();
  for (const auto& r : responses) {
    auto hit = gazetteer.lookup(r, AddressLevel::street);
    if (!hit) hit = gazetteer.find_mention(r, AddressLevel::street);
    if (hit) {
      ++f.counts[*hit];
    } else {
      ++f.invalid;
    }
  }
  return f;
}

std::vector<RankedStreet> topk(const FrequencyMap& freq, int k) {
  if (k < 1) throw std::invalid_argument("topk: k must be >= 1");
  std::vector<RankedStreet> all;
  all.reserve(freq.counts.size());
  for (const auto& [name, count] : freq.counts) {
    if (count > 0) all.push_back({name, count, 0});
  }
  const auto n = std::min(all.size(), static_cast<std::size_t>(k));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                    [](const RankedStreet& a, const RankedStreet& b) {
                      return a.count != b.count ? a.count > b.count : a.name < b.name;
                    });
  all.resize(n);
  for (std::size_t i = 0; i < n; ++i) all[i].rank = static_cast<int>(i + 1);
  return all;
}

namespace {

ordered_json position(const LonLat& p) { return ordered_json::array({p.lon, p.lat}); }

ordered_json line_coords(const Road& r) {
  auto coords = ordered_json::array();
  for (const auto& p : r.polyline) coords.push_back(position(p));
  return coords;
}

}  // namespace

OverlayDoc emit_overlay(const FrequencyMap& freq, std::span<const Road> roads,
                        const Location& truth, int k) {
  if (k < 1 || k > static_cast<int>(kRankColors.size())) {
    throw std::invalid_argument("overlay: k must be in [1, 3]");
  }
  OverlayDoc out;
  auto features = ordered_json::array();

  ordered_json point;
  point["type"] = "Feature";
  point["geometry"] = {{"type", "Point"}, {"coordinates", position({truth.lon, truth.lat})}};
  point["properties"] = {{"role", "truth"},
                         {"location_id", truth.id},
                         {"street", truth.address.street},
                         {"district", truth.address.district}};
  features.push_back(std::move(point));

  for (const auto& r : topk(freq, k)) {
    const auto key = normalize_address(r.name, AddressLevel::street);
    std::vector<const Road*> matches;
    for (const auto& road : roads) {
      if (road.polyline.size() >= 2 && !road.name.empty() &&
          normalize_address(road.name, AddressLevel::street) == key) {
        matches.push_back(&road);
      }
    }
    ordered_json f;
    f["type"] = "Feature";
    if (matches.empty()) {
      f["geometry"] = nullptr;
      out.warnings.push_back("no road geometry for '" + r.name + "'");
    } else if (matches.size() == 1) {
      f["geometry"] = {{"type", "LineString"}, {"coordinates", line_coords(*matches[0])}};
    } else {
      auto lines = ordered_json::array();
      for (const auto* m : matches) lines.push_back(line_coords(*m));
      f["geometry"] = {{"type", "MultiLineString"}, {"coordinates", std::move(lines)}};
    }
    f["properties"] = {{"role", "prediction"},
                       {"name", r.name},
                       {"rank", r.rank},
                       {"count", r.count},
                       {"color", std::string(kRankColors[static_cast<std::size_t>(r.rank - 1)])}};
    features.push_back(std::move(f));
  }

  out.geojson["type"] = "FeatureCollection";
  out.geojson["features"] = std::move(features);
  out.geojson["properties"] = {{"total", freq.total}, {"invalid", freq.invalid}};
  return out;
}

namespace {

bool is_position(const json& p) {
  if (!p.is_array() || p.size() < 2 || p.size() > 3) return false;
  for (const auto& c : p) {
    if (!c.is_number() || !std::isfinite(c.get<double>())) return false;
  }
  const double lon = p[0].get<double>(), lat = p[1].get<double>();
  return lon >= -180.0 && lon <= 180.0 && lat >= -90.0 && lat <= 90.0;
}

bool is_line(const json& c) {
  if (!c.is_array() || c.size() < 2) return false;
  return std::all_of(c.begin(), c.end(), is_position);
}

void check_geometry(const json& g, const std::string& where, std::vector<std::string>& errors) {
  if (g.is_null()) return;
  if (!g.is_object() || !g.contains("type") || !g["type"].is_string()) {
    errors.push_back(where + ": geometry must be null or an object with a type");
    return;
  }
  const auto type = g["type"].get<std::string>();
  if (!g.contains("coordinates")) {
    errors.push_back(where + ": geometry has no coordinates");
    return;
  }
  const auto& c = g["coordinates"];
  bool ok = false;
  if (type == "Point") {
    ok = is_position(c);
  } else if (type == "LineString") {
    ok = is_line(c);
  } else if (type == "MultiLineString") {
    ok = c.is_array() && !c.empty() && std::all_of(c.begin(), c.end(), is_line);
  } else {
    errors.push_back(where + ": unsupported geometry type " + type);
    return;
  }
  if (!ok) errors.push_back(where + ": malformed " + type + " coordinates");
}

}  // namespace

std::vector<std::string> validate_geojson(const json& doc) {
  std::vector<std::string> errors;
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection") {
    errors.push_back("root is not a FeatureCollection");
    return errors;
  }
  if (!doc.contains("features") || !doc["features"].is_array()) {
    errors.push_back("features is not an array");
    return errors;
  }
  std::size_t i = 0;
  for (const auto& f : doc["features"]) {
    const auto where = "feature " + std::to_string(i++);
    if (!f.is_object() || f.value("type", "") != "Feature") {
      errors.push_back(where + ": not a Feature");
      continue;
    }
    if (!f.contains("geometry")) {
      errors.push_back(where + ": missing geometry member");
    } else {
      check_geometry(f["geometry"], where, errors);
    }
    if (!f.contains("properties") || !(f["properties"].is_object() || f["properties"].is_null())) {
      errors.push_back(where + ": properties must be an object or null");
    }
  }
  return errors;
}

std::vector<std::string> choice_prompt_options(std::span<const std::string> streets) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : streets) {
    if (s.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    if (seen.insert(normalize_address(s, AddressLevel::street)).second) out.push_back(s);
  }
  return out;
}

std::string build_choice_prompt(std::span<const std::string> streets) {
  const auto options = choice_prompt_options(streets);
  if (options.empty()) throw std::invalid_argument("choice prompt needs at least one street");
  std::ostringstream os;
  os << "Which of the following streets is this street-view image taken on?\n";
  for (std::size_t i = 0; i < options.size(); ++i) os << (i + 1) << ". " << options[i] << "\n";
  os << "Answer with the street name only, chosen from the list.";
  return os.str();
}

std::vector<ResponseRecord> read_responses(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open responses");
  std::vector<ResponseRecord> out;
  std::set<std::pair<std::string, int>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ResponseRecord r;
    try {
      const auto j = json::parse(line);
      r.image_id = j.at("image_id").get<std::string>();
      r.run = j.at("run").get<int>();
      r.response = j.at("response").get<std::string>();
      if (j.contains("location_id") && !j["location_id"].is_null()) {
        r.location_id = j["location_id"].get<std::string>();
      }
    } catch (const json::exception& e) {
      throw InputError(path.string() + ": bad response record: " + e.what(), line_no);
    }
    if (!seen.emplace(r.image_id, r.run).second) {
      throw InputError(path.string() + ": duplicate run " + std::to_string(r.run) + " for " +
                           r.image_id,
                       line_no);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::map<std::string, std::vector<ResponseRecord>> group_by_image(
    std::span<const ResponseRecord> records) {
  std::map<std::string, std::vector<ResponseRecord>> out;
  for (const auto& r : records) out[r.image_id].push_back(r);
  for (auto& [id, group] : out) {
    std::stable_sort(group.begin(), group.end(),
                     [](const ResponseRecord& a, const ResponseRecord& b) { return a.run < b.run; });
  }
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string frequency_csv(const std::map<std::string, FrequencyMap>& per_image) {
  std::ostringstream os;
  os << "image_id,rank,street,count\n";
  for (const auto& [id, freq] : per_image) {
    const auto ranked = topk(freq, std::max<int>(1, static_cast<int>(freq.counts.size())));
    for (const auto& r : ranked) {
      os << csv_field(id) << ',' << r.rank << ',' << csv_field(r.name) << ',' << r.count << '\n';
    }
    os << csv_field(id) << ",,(invalid)," << freq.invalid << '\n';
  }
  return os.str();
}

}  // namespace addrforge
