#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "addrforge/geo_model.hpp"
#include "addrforge/qa_forge.hpp"

namespace addrforge {

inline constexpr std::string_view kHintOpen = "[HINT]";
inline constexpr std::string_view kHintClose = "[/HINT]";

/// One grafted image awaiting a reasoning label.
struct AlignmentJob {
  std::string sample_id;
  std::filesystem::path image;
  AddressLabel label;
};

struct AlignmentPrompt {
  std::string sample_id;
  AddressLabel label;
  std::string question;  // hint-free instruction, starts with the image token
  std::string hint;      // clause between the markers
  std::string text;      // question + marked hint; what the labeller sees
};

/// Deterministic prompt with the ground truth inside the hint markers.
/// Throws IoError when the grafted image is missing.
AlignmentPrompt build_alignment_prompt(const AlignmentJob& job);

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8000/v1";
  std::string model = "llava-v1.6-34b";
  double temperature = 0.2;
  int max_tokens = 512;
  int max_in_flight = 4;
  int retry_budget = 3;
  std::chrono::milliseconds timeout{60000};
  std::chrono::milliseconds backoff{500};  // first retry delay, doubled per retry

  void validate() const;
};

/// OpenAI-style chat-completion body with the image inlined as a data URL.
nlohmann::ordered_json chat_request_body(const EndpointConfig& config, std::string_view prompt_text,
                                         std::span<const std::uint8_t> image_bytes,
                                         std::string_view mime);

/// choices[0].message.content of a chat-completion response.
/// Throws InputError when the body does not have that shape.
std::string parse_chat_response(std::string_view body);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view data);

struct RequestAttempt {
  int status = 0;  // HTTP status, 0 for transport failures
  std::string body;
};

struct RequestOutcome {
  std::optional<std::string> text;
  std::string request_hash;
  std::vector<RequestAttempt> attempts;
};

/// POST {base}/chat/completions, retrying transport failures and non-2xx
/// replies with exponential backoff up to the retry budget.
RequestOutcome request_label(const EndpointConfig& config, const AlignmentPrompt& prompt,
                             const std::filesystem::path& image);

struct AlignmentLabel {
  std::string text;
  AddressLabel target;
  std::string sample_id;

  bool operator==(const AlignmentLabel&) const = default;
};

struct LabelVerdict {
  std::optional<AlignmentLabel> label;
  std::string rejection;  // empty when accepted
};

/// Removes echoed hint clauses and stray markers, then accepts when the
/// normalized text still names the target street.
LabelVerdict validate_and_strip(std::string_view raw, const AddressLabel& label,
                                const AlignmentPrompt& prompt);

/// Stage-1 training conversation: grafted image, hint-free question, label.
ConversationSample make_alignment_sample(const AlignmentPrompt& prompt, const AlignmentLabel& label,
                                         const std::string& image_ref, std::string city_id);

/// Append-only JSONL audit trail; appends are serialized.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(const std::filesystem::path& path);

  void append(const std::string& sample_id, const std::string& request_hash,
              const nlohmann::json& raw_response, const std::string& verdict);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

struct LabelBatchReport {
  std::vector<AlignmentLabel> accepted;  // sorted by sample id
  std::vector<AlignmentPrompt> prompts;  // prompts of accepted labels, same order
  std::size_t requested = 0;
  std::size_t skipped_existing = 0;
  std::size_t regenerated = 0;
  std::size_t dropped = 0;  // rejected twice
  std::size_t failed = 0;   // retry budget exhausted
};

/// Labels every job not already in `done` using at most
/// config.max_in_flight concurrent requests. A rejected label is requested
/// once more, then dropped.
LabelBatchReport generate_labels(const EndpointConfig& config, std::span<const AlignmentJob> jobs,
                                 const std::set<std::string, std::less<>>& done,
                                 AuditLog* audit = nullptr);

nlohmann::ordered_json to_json(const AlignmentLabel& label);
AlignmentLabel alignment_label_from_json(const nlohmann::json& j);

}  // namespace addrforge
