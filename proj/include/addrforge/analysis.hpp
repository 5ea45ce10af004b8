#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "addrforge/geo_model.hpp"

namespace addrforge {

/// Street tally of repeated inference on one image.
struct FrequencyMap {
  std::map<std::string, std::size_t> counts;  // display name -> count
  std::size_t invalid = 0;
  std::size_t total = 0;

  std::size_t valid() const noexcept { return total - invalid; }
  bool operator==(const FrequencyMap&) const = default;
};

/// Resolves each response to a gazetteer street: an exact lookup of the whole
/// response first, otherwise its first street mention. Unresolved responses
/// count as invalid.
FrequencyMap tally(std::span<const std::string> responses, const Gazetteer& gazetteer);

struct RankedStreet {
  std::string name;
  std::size_t count = 0;
  int rank = 0;  // 1-based

  bool operator==(const RankedStreet&) const = default;
};

/// Highest counts first, ties by name. Throws std::invalid_argument for k < 1.
std::vector<RankedStreet> topk(const FrequencyMap& freq, int k = 3);

inline constexpr std::array<std::string_view, 3> kRankColors = {"red", "orange", "yellow"};

struct OverlayDoc {
  nlohmann::ordered_json geojson;
  std::vector<std::string> warnings;
};

/// FeatureCollection with the truth point followed by the top-k streets.
/// Roads sharing a name become one MultiLineString; a street without
/// geometry keeps its feature with a null geometry and adds a warning.
/// Throws std::invalid_argument unless 1 <= k <= 3.
OverlayDoc emit_overlay(const FrequencyMap& freq, std::span<const Road> roads,
                        const Location& truth, int k = 3);

/// Structural RFC 7946 checks for the subset emitted here; empty when valid.
std::vector<std::string> validate_geojson(const nlohmann::json& doc);

/// List-selection prompt for zero-shot models. Names are deduplicated under
/// street normalization, first spelling and order kept. Throws
/// std::invalid_argument for an empty list.
std::string build_choice_prompt(std::span<const std::string> streets);

/// Names enumerated by build_choice_prompt, in prompt order.
std::vector<std::string> choice_prompt_options(std::span<const std::string> streets);

struct ResponseRecord {
  std::string image_id;
  int run = 0;
  std::string response;
  std::optional<std::string> location_id;
};

/// Reads {image_id, run, response[, location_id]} lines. Throws InputError
/// on malformed lines or a repeated (image_id, run).
std::vector<ResponseRecord> read_responses(const std::filesystem::path& path);

/// Responses grouped per image, each group ordered by run.
std::map<std::string, std::vector<ResponseRecord>> group_by_image(
    std::span<const ResponseRecord> records);

/// image_id,rank,street,count rows per image, then one "(invalid)" row.
std::string frequency_csv(const std::map<std::string, FrequencyMap>& per_image);

}  // namespace addrforge
