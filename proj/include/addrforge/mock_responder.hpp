#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "addrforge/eval.hpp"
#include "addrforge/geo_model.hpp"
#include "addrforge/qa_forge.hpp"

namespace addrforge {

/// Planted error rates per (level, question type); unlisted categories use
/// `default_rate`.
struct ErrorModel {
  std::map<std::pair<QuestionLevel, QuestionType>, double> rates;
  double default_rate = 0.0;
  std::uint64_t seed = 0;

  double rate(QuestionLevel level, QuestionType qtype) const;
  /// Throws std::invalid_argument when a rate lies outside [0, 1].
  void validate() const;

  static ErrorModel uniform(double rate, std::uint64_t seed);
};

/// Answer to turn `turn` (1-based) of `sample`. Correct answers vary their
/// surface form; wrong answers keep the shape of the question. Determined by
/// model.seed, sample.id and turn only. Throws ForgeError when a wrong answer
/// could be needed but the pool has no alternative.
std::string respond(const ConversationSample& sample, int turn, const DistractorPools& pools,
                    const ErrorModel& model);

/// Predictions for every localization turn, ordered by (id, turn).
std::vector<PredictionRecord> mock_predictions(std::span<const ConversationSample> gt,
                                               const std::map<std::string, Gazetteer>& gazetteers,
                                               const ErrorModel& model, int jobs = 1);

/// Local OpenAI-style chat-completion endpoint for exercising labelgen.
class StubChatServer {
 public:
  struct Reply {
    int status = 200;
    std::string content;
    std::chrono::milliseconds delay{0};
    bool malformed = false;  // 200 with a body that is not a chat completion
  };
  /// Receives the text part of the user message and the 0-based arrival index.
  using Handler = std::function<Reply(const std::string& prompt, std::size_t index)>;

  explicit StubChatServer(Handler handler, int threads = 32);
  ~StubChatServer();
  StubChatServer(const StubChatServer&) = delete;
  StubChatServer& operator=(const StubChatServer&) = delete;

  int port() const;
  std::string base_url() const;  // http://127.0.0.1:<port>/v1
  std::size_t max_in_flight() const;
  std::size_t total_requests() const;

  /// Reasoning that restates the hinted street and district, never the markers.
  static Handler echo_hint_handler(std::chrono::milliseconds delay = std::chrono::milliseconds{0});

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Street and district named by an alignment hint, if it has the expected form.
std::optional<AddressLabel> parse_hint(const std::string& prompt);

}  // namespace addrforge
