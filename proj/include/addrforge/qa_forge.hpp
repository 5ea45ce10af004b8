#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "addrforge/geo_model.hpp"
#include "addrforge/rng.hpp"

namespace addrforge {

enum class QuestionType { generation, judgment, multiple_choice, alignment };
enum class QuestionLevel { district, street, combined };
enum class Stage { alignment, localization };
enum class Split { train, val, test };

const char* to_string(QuestionType t);
const char* to_string(QuestionLevel l);
const char* to_string(Stage s);
const char* to_string(Split s);
QuestionType parse_question_type(std::string_view text);
QuestionLevel parse_question_level(std::string_view text);
Stage parse_stage(std::string_view text);
Split parse_split(std::string_view text);

inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::val, Split::test};
inline constexpr std::string_view kImageToken = "<image>\n";

struct TemplateBank {
  std::array<std::string, 10> district;
  std::array<std::string, 10> street;
  std::string generation_prompt;
  std::string combined_question;

  /// The published templates and appended prompts.
  static const TemplateBank& standard();

  const std::array<std::string, 10>& for_level(QuestionLevel level) const;
};

struct QuestionTurn {
  QuestionType qtype = QuestionType::generation;
  QuestionLevel level = QuestionLevel::street;
  std::string question;
  std::string answer;
  std::vector<std::string> options;    // multiple_choice: exactly 4, labelled A-D
  int correct_option = -1;             // multiple_choice: index of the truth in options
  std::optional<bool> judgment_truth;  // judgment: planted yes/no
  std::string candidate;               // judgment: the address named in the question

  bool operator==(const QuestionTurn&) const = default;
};

/// Renders one question. `distractors` must not contain the truth for the
/// level. Judgment polarity is drawn by coin flip unless `judgment_answer` is
/// given. Throws InputError when the pool is too small for the request.
QuestionTurn render_question(const TemplateBank& bank, QuestionType qtype, QuestionLevel level,
                             const AddressLabel& truth, std::span<const std::string> distractors,
                             Rng& rng, std::optional<bool> judgment_answer = std::nullopt);

/// City-wide candidate names; the truth is excluded per question.
struct DistractorPools {
  std::vector<std::string> streets;
  std::vector<std::string> districts;

  static DistractorPools from(const Gazetteer& gazetteer);
  std::vector<std::string> excluding(QuestionLevel level, const AddressLabel& truth) const;
};

struct TurnSpec {
  QuestionType qtype = QuestionType::generation;
  std::optional<QuestionLevel> level;  // nullopt: uniform over {district, street}
  std::optional<bool> judgment_answer; // nullopt: coin flip
};

struct QaProfile {
  std::string name;
  std::vector<TurnSpec> turns;
  bool shuffle_turns = false;

  /// One generation, one judgment, one multiple-choice turn; levels uniform.
  static QaProfile train();
  /// Generation x2 levels, judgment yes/no x2 levels, multiple-choice x2
  /// levels and one combined street+district generation turn.
  static QaProfile test();
  static QaProfile by_name(std::string_view name);
};

struct ConversationSample {
  std::string id;
  std::string city_id;
  std::string location_id;
  double heading = 0.0;
  std::vector<std::string> images;
  Stage stage = Stage::localization;
  Split split = Split::train;
  AddressLabel truth;
  std::vector<QuestionTurn> turns;

  bool operator==(const ConversationSample&) const = default;
};

/// Turns for one image under `profile`. The caller fills identity fields.
ConversationSample build_conversation(std::vector<std::string> images, const QaProfile& profile,
                                      const AddressLabel& truth, const DistractorPools& pools,
                                      Rng& rng, const TemplateBank& bank = TemplateBank::standard());

/// Line format: {"id", "image" | "images", "conversations", "meta"}. The first
/// human turn starts with one "<image>\n" per image.
nlohmann::ordered_json to_json(const ConversationSample& sample);
ConversationSample sample_from_json(const nlohmann::json& j);

/// Structural check of the conversation schema shared with external data.
/// Throws InputError naming the sample id (or line when the id is missing).
void validate_conversation_json(const nlohmann::json& j, std::size_t line = 0);

struct SplitFractions {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

struct SplitAssignment {
  std::vector<std::pair<std::string, Split>> entries;  // in location input order
  SplitFractions fractions;
  std::uint64_t seed = 0;

  std::optional<Split> of(std::string_view location_id) const;
  std::size_t count(Split s) const;
  nlohmann::ordered_json to_json() const;
};

/// Seeded shuffle of the locations; the first floor(train*n) go to train, the
/// next floor(val*n) to val, the rest to test. Throws InputError for n < 3.
SplitAssignment split_locations(const CityIndex& index, const SplitFractions& fractions,
                                std::uint64_t seed);

struct DownsampleSpec {
  double view_fraction = 1.0;
  double location_fraction = 1.0;
};

struct ForgeSelection {
  CityIndex index;
  SplitAssignment split;
};

/// Keeps ceil(location_fraction * n_train) train locations and, for each of
/// them, ceil(view_fraction * v) views. Val and test are untouched.
ForgeSelection downsample(const CityIndex& index, const SplitAssignment& split,
                          const DownsampleSpec& spec, std::uint64_t seed);

struct SplitCounts {
  std::size_t locations = 0;
  std::size_t images = 0;
  std::size_t questions = 0;

  bool operator==(const SplitCounts&) const = default;
};

struct DatasetManifest {
  std::vector<std::string> city_ids;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, SplitCounts> counts;  // keyed by split name
  std::string profile;
  std::string generated_at;

  nlohmann::ordered_json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct Dataset {
  std::vector<ConversationSample> samples;
  DatasetManifest manifest;
};

struct ForgeOptions {
  QaProfile train_profile = QaProfile::train();
  QaProfile eval_profile = QaProfile::test();  // used for val and test
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  /// Image reference written for a view; defaults to the view path.
  std::function<std::string(const Location&, const ViewImage&)> image_ref;
};

/// Stage-2 address-VQA conversations for every view of every assigned
/// location. Samples are sorted by id.
Dataset forge_dataset(const CityIndex& index, const SplitAssignment& split,
                      const ForgeOptions& options);

/// Counts recomputed from the samples themselves.
std::map<std::string, SplitCounts> recount(std::span<const ConversationSample> samples);

/// Writes {split}.jsonl for each split and manifest.json under `dir`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

/// Concatenates city datasets. Ids gain a "{city}/" prefix when missing.
/// Throws InputError on a repeated city id or a colliding sample id.
Dataset merge_cities(std::span<const Dataset> datasets);

struct MixRatio {
  int task = 1;
  int external = 1;
};

MixRatio parse_mix_ratio(std::string_view text);

/// Shuffles both streams under `seed`, then emits repeating blocks of
/// `task` task samples followed by `external` external samples until one
/// stream runs dry; the remainder of the other is appended.
std::vector<nlohmann::json> mix_external(std::span<const nlohmann::json> task,
                                         std::span<const nlohmann::json> external,
                                         const MixRatio& ratio, std::uint64_t seed);

/// JSONL reader that validates each line with validate_conversation_json.
std::vector<nlohmann::json> load_conversation_jsonl(const std::filesystem::path& path);

/// Fine-tuning hyper-parameters as published; documentation artifact only.
nlohmann::ordered_json training_config_manifest();

std::string format_heading(double heading);

/// UTC "YYYY-MM-DDTHH:MM:SSZ"; SOURCE_DATE_EPOCH overrides the clock.
std::string manifest_timestamp();

}  // namespace addrforge
