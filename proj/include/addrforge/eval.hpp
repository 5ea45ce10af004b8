#pragma once

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
#include "addrforge/qa_forge.hpp"

namespace addrforge {

struct PredictionRecord {
  std::string id;
  int turn = 1;  // 1-based question index within the sample
  std::string answer;

  bool operator==(const PredictionRecord&) const = default;
};

/// Reads {"id", "turn", "answer"} lines. Throws InputError on a repeated
/// (id, turn) pair or a malformed line.
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);
void write_predictions(const std::filesystem::path& path, std::span<const PredictionRecord> preds);

struct ParsedAnswer {
  QuestionType qtype = QuestionType::generation;
  bool parsed = false;
  std::string text;                     // generation: trimmed raw answer
  std::optional<bool> yes;              // judgment
  char letter = 0;                      // multiple_choice: 'A'..'D'
  std::optional<std::string> street;    // combined
  std::optional<std::string> district;  // combined
};

/// Judgment: first standalone yes/no token, case-insensitive.
/// Multiple choice: first standalone capital A-D, or a lower-case letter
/// written as "(c)" or after "answer:"/"option".
/// Combined: first gazetteer street and district mentioned.
ParsedAnswer parse_answer(std::string_view raw, QuestionType qtype, QuestionLevel level,
                          const Gazetteer& gazetteer);

/// Ground truth for one scored turn.
struct TurnTruth {
  QuestionType qtype = QuestionType::generation;
  QuestionLevel level = QuestionLevel::street;
  AddressLabel address;
  std::optional<bool> judgment;
  int correct_option = -1;

  static TurnTruth from(const ConversationSample& sample, const QuestionTurn& turn);
};

bool score_question(const ParsedAnswer& parsed, const TurnTruth& truth, const Gazetteer& gazetteer);

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;

  std::optional<double> percent() const;
  Accuracy& operator+=(const Accuracy& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
  bool operator==(const Accuracy&) const = default;
};

enum class AsdSource { combined_turn, paired_generation };

/// Exact per-category counts. Averages are derived on demand.
struct MetricsReport {
  Accuracy district_generation, district_judgment, district_choice;
  Accuracy street_generation, street_judgment, street_choice;
  Accuracy combined;  // A_sd
  std::size_t unparsable = 0;
  std::size_t missing = 0;

  Accuracy& category(QuestionLevel level, QuestionType qtype);
  const Accuracy& category(QuestionLevel level, QuestionType qtype) const;

  Accuracy micro_district() const;
  Accuracy micro_street() const;
  Accuracy micro_overall() const;
  std::optional<double> macro_district() const;
  std::optional<double> macro_street() const;
  std::optional<double> macro_overall() const;

  MetricsReport& operator+=(const MetricsReport& o);
  bool operator==(const MetricsReport&) const = default;
};

struct ScoredQuestion {
  QuestionLevel level = QuestionLevel::street;
  QuestionType qtype = QuestionType::generation;
  bool correct = false;
  bool unparsable = false;
  bool missing = false;
};

MetricsReport aggregate(std::span<const ScoredQuestion> scored);

struct EvalResult {
  MetricsReport overall;
  std::map<std::string, MetricsReport> per_city;
  std::size_t extra_predictions = 0;  // predictions with no matching turn
};

/// Scores every localization turn of `gt` against `preds`. A turn with no
/// prediction counts as incorrect and missing.
EvalResult evaluate(std::span<const ConversationSample> gt, std::span<const PredictionRecord> preds,
                    const std::map<std::string, Gazetteer>& gazetteers,
                    AsdSource asd = AsdSource::combined_turn);

/// Gazetteers rebuilt from the names present in ground-truth samples
/// (truths, options and judgment candidates), one per city.
std::map<std::string, Gazetteer> gazetteers_from_samples(std::span<const ConversationSample> gt);

nlohmann::ordered_json to_json(const MetricsReport& report);
MetricsReport metrics_from_json(const nlohmann::json& j);

/// Fixed-width table with one column per published metric, "-" for absent
/// categories, micro and macro rows.
std::string render_report(const MetricsReport& report);

}  // namespace addrforge
