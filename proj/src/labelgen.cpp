#include "addrforge/labelgen.hpp"

#include <algorithm>
#include <atomic>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <openssl/evp.h>

#include <httplib.h>

#include "addrforge/errors.hpp"

namespace addrforge {

using nlohmann::json;
using nlohmann::ordered_json;

AlignmentPrompt build_alignment_prompt(const AlignmentJob& job) {
  if (!std::filesystem::exists(job.image)) throw IoError(job.image, "grafted image not found");
  if (job.label.street.empty() || job.label.district.empty()) {
    throw InputError("alignment label for '" + job.sample_id + "' is incomplete");
  }
  AlignmentPrompt p;
  p.sample_id = job.sample_id;
  p.label = job.label;
  p.question = std::string(kImageToken) +
               "The satellite image is annotated with street names, and a street-view photo "
               "is grafted into its upper right corner. Match the street-view photo to one of "
               "the annotated streets on the map, name that street and its district, and "
               "explain why the street view matches it.";
  p.hint = "Hint: the street-view photo was taken on " + job.label.street + " in " +
           job.label.district + ".";
  p.text = p.question + " " + std::string(kHintOpen) + p.hint + std::string(kHintClose);
  return p;
}

void EndpointConfig::validate() const {
  if (max_in_flight < 1) throw std::invalid_argument("endpoint max_in_flight must be >= 1");
  if (retry_budget < 0) throw std::invalid_argument("endpoint retry_budget must be >= 0");
  if (max_tokens < 1) throw std::invalid_argument("endpoint max_tokens must be >= 1");
  if (base_url.empty()) throw std::invalid_argument("endpoint base_url is empty");
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

ordered_json chat_request_body(const EndpointConfig& config, std::string_view prompt_text,
                               std::span<const std::uint8_t> image_bytes, std::string_view mime) {
  ordered_json text_part = {{"type", "text"}, {"text", std::string(prompt_text)}};
  ordered_json image_part = {
      {"type", "image_url"},
      {"image_url",
       {{"url", "data:" + std::string(mime) + ";base64," + base64_encode(image_bytes)}}}};
  ordered_json body;
  body["model"] = config.model;
  body["messages"] = ordered_json::array(
      {{{"role", "user"}, {"content", ordered_json::array({text_part, image_part})}}});
  body["temperature"] = config.temperature;
  body["max_tokens"] = config.max_tokens;
  return body;
}

std::string parse_chat_response(std::string_view body) {
  try {
    const auto j = json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw InputError("message content is not a string");
    return content.get<std::string>();
  } catch (const json::exception& e) {
    throw InputError(std::string("unexpected chat-completion response: ") + e.what());
  }
}

namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // prefix + /chat/completions
};

Endpoint split_base_url(const std::string& base) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(base, m, re)) {
    throw std::invalid_argument("endpoint base_url must be http(s)://host[:port][/prefix]: " + base);
  }
  std::string prefix = m[2].str();
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {m[1].str(), prefix + "/chat/completions"};
}

std::string mime_for(const std::filesystem::path& image) {
  auto ext = image.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  throw IoError(image, "unsupported image type for upload");
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string prompt_for_wire(const std::string& text) {
  // The image travels as a separate content part, so the placeholder is dropped.
  std::string out = text;
  while (out.rfind(kImageToken, 0) == 0) out.erase(0, kImageToken.size());
  return out;
}

}  // namespace

RequestOutcome request_label(const EndpointConfig& config, const AlignmentPrompt& prompt,
                             const std::filesystem::path& image) {
  config.validate();
  const auto endpoint = split_base_url(config.base_url);
  const auto bytes = read_bytes(image);
  const std::string body =
      chat_request_body(config, prompt_for_wire(prompt.text), bytes, mime_for(image)).dump();

  RequestOutcome out;
  out.request_hash = sha256_hex(body);

  httplib::Client client(endpoint.origin);
  client.set_connection_timeout(config.timeout);
  client.set_read_timeout(config.timeout);
  client.set_write_timeout(config.timeout);

  auto delay = config.backoff;
  for (int attempt = 0; attempt <= config.retry_budget; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
    auto res = client.Post(endpoint.path, body, "application/json");
    if (!res) {
      out.attempts.push_back({0, httplib::to_string(res.error())});
      continue;
    }
    out.attempts.push_back({res->status, res->body});
    if (res->status < 200 || res->status >= 300) continue;
    try {
      out.text = parse_chat_response(res->body);
      return out;
    } catch (const InputError&) {
      continue;
    }
  }
  return out;
}

namespace {

void erase_all(std::string& text, std::string_view needle) {
  if (needle.empty()) return;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos)) {
    text.erase(pos, needle.size());
  }
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

LabelVerdict validate_and_strip(std::string_view raw, const AddressLabel& label,
                                const AlignmentPrompt& prompt) {
  std::string text(raw);
  // Whole marked clauses first, then the bare hint sentence, then stray markers.
  for (auto open = text.find(kHintOpen); open != std::string::npos; open = text.find(kHintOpen, open)) {
    const auto close = text.find(kHintClose, open + kHintOpen.size());
    if (close == std::string::npos) break;
    text.erase(open, close + kHintClose.size() - open);
  }
  erase_all(text, prompt.hint);
  erase_all(text, kHintOpen);
  erase_all(text, kHintClose);
  text = trim(std::move(text));

  LabelVerdict v;
  if (text.find(kHintOpen) != std::string::npos || text.find(kHintClose) != std::string::npos) {
    v.rejection = "hint marker survived stripping";
    return v;
  }
  if (text.empty()) {
    v.rejection = "empty label";
    return v;
  }
  const auto haystack = " " + normalize_address(text, AddressLevel::street) + " ";
  const auto needle = " " + normalize_address(label.street, AddressLevel::street) + " ";
  if (haystack.find(needle) == std::string::npos) {
    v.rejection = "label does not name the street '" + label.street + "'";
    return v;
  }
  v.label = AlignmentLabel{std::move(text), label, prompt.sample_id};
  return v;
}

ConversationSample make_alignment_sample(const AlignmentPrompt& prompt, const AlignmentLabel& label,
                                         const std::string& image_ref, std::string city_id) {
  ConversationSample s;
  s.id = prompt.sample_id;
  s.city_id = std::move(city_id);
  s.images = {image_ref};
  s.stage = Stage::alignment;
  s.split = Split::train;
  s.truth = label.target;
  QuestionTurn turn;
  turn.qtype = QuestionType::alignment;
  turn.question = prompt_for_wire(prompt.question);
  turn.answer = label.text;
  s.turns.push_back(std::move(turn));
  return s;
}

AuditLog::AuditLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::binary | std::ios::app);
  if (!out_) throw IoError(path, "cannot open audit log");
}

void AuditLog::append(const std::string& sample_id, const std::string& request_hash,
                      const json& raw_response, const std::string& verdict) {
  ordered_json line;
  line["sample_id"] = sample_id;
  line["request_hash"] = request_hash;
  line["raw_response"] = raw_response;
  line["verdict"] = verdict;
  const auto text = line.dump();
  std::lock_guard lock(mu_);
  if (!out_.is_open()) return;
  out_ << text << '\n';
  out_.flush();
}

LabelBatchReport generate_labels(const EndpointConfig& config, std::span<const AlignmentJob> jobs,
                                 const std::set<std::string, std::less<>>& done, AuditLog* audit) {
  config.validate();
  LabelBatchReport report;
  std::vector<const AlignmentJob*> pending;
  for (const auto& job : jobs) {
    if (done.contains(job.sample_id)) {
      ++report.skipped_existing;
    } else {
      pending.push_back(&job);
    }
  }
  report.requested = pending.size();

  struct Slot {
    std::optional<AlignmentLabel> label;
    std::optional<AlignmentPrompt> prompt;
  };
  std::vector<Slot> slots(pending.size());
  std::atomic<std::size_t> next{0}, regenerated{0}, dropped{0}, failed{0};

  auto log = [&](const std::string& id, const std::string& hash, const json& raw,
                 const std::string& verdict) {
    if (audit != nullptr) audit->append(id, hash, raw, verdict);
  };

  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < pending.size(); i = next.fetch_add(1)) {
      const auto& job = *pending[i];
      AlignmentPrompt prompt;
      try {
        prompt = build_alignment_prompt(job);
      } catch (const ForgeError& e) {
        log(job.sample_id, "", nullptr, std::string("error: ") + e.what());
        ++failed;
        continue;
      }
      for (int generation = 0; generation < 2; ++generation) {
        RequestOutcome outcome;
        try {
          outcome = request_label(config, prompt, job.image);
        } catch (const ForgeError& e) {
          log(job.sample_id, "", nullptr, std::string("error: ") + e.what());
          ++failed;
          break;
        }
        const std::size_t failed_attempts = outcome.attempts.size() - (outcome.text ? 1 : 0);
        for (std::size_t a = 0; a < failed_attempts; ++a) {
          const auto& at = outcome.attempts[a];
          log(job.sample_id, outcome.request_hash, at.body,
              at.status == 0 ? "transport_error" : "http_" + std::to_string(at.status));
        }
        if (!outcome.text) {
          ++failed;
          break;
        }
        auto verdict = validate_and_strip(*outcome.text, job.label, prompt);
        log(job.sample_id, outcome.request_hash, *outcome.text,
            verdict.label ? "accepted" : "rejected: " + verdict.rejection);
        if (verdict.label) {
          slots[i].label = std::move(verdict.label);
          slots[i].prompt = prompt;
          break;
        }
        if (generation == 0) {
          ++regenerated;
        } else {
          ++dropped;
        }
      }
    }
  };

  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.max_in_flight),
                                             std::max<std::size_t>(1, pending.size()));
  {
    std::vector<std::jthread> threads;
    for (std::size_t t = 0; t < workers; ++t) threads.emplace_back(worker);
  }

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].label) order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return slots[a].label->sample_id < slots[b].label->sample_id;
  });
  for (auto i : order) {
    report.accepted.push_back(std::move(*slots[i].label));
    report.prompts.push_back(std::move(*slots[i].prompt));
  }
  report.regenerated = regenerated;
  report.dropped = dropped;
  report.failed = failed;
  return report;
}

ordered_json to_json(const AlignmentLabel& label) {
  ordered_json j;
  j["sample_id"] = label.sample_id;
  j["street"] = label.target.street;
  j["district"] = label.target.district;
  j["label"] = label.text;
  return j;
}

AlignmentLabel alignment_label_from_json(const json& j) {
  try {
    return {j.at("label").get<std::string>(),
            {j.at("street").get<std::string>(), j.at("district").get<std::string>()},
            j.at("sample_id").get<std::string>()};
  } catch (const json::exception& e) {
    throw InputError(std::string("bad alignment label record: ") + e.what());
  }
}

}  // namespace addrforge
