#include "addrforge/mock_responder.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <httplib.h>

#include "addrforge/errors.hpp"
#include "addrforge/labelgen.hpp"
#include "addrforge/parallel.hpp"
#include "addrforge/rng.hpp"

namespace addrforge {

double ErrorModel::rate(QuestionLevel level, QuestionType qtype) const {
  auto it = rates.find({level, qtype});
  return it == rates.end() ? default_rate : it->second;
}

void ErrorModel::validate() const {
  auto check = [](double r) {
    if (!(r >= 0.0 && r <= 1.0)) {
      throw std::invalid_argument("error rate must be in [0, 1], got " + std::to_string(r));
    }
  };
  check(default_rate);
  for (const auto& [key, r] : rates) check(r);
}

ErrorModel ErrorModel::uniform(double rate, std::uint64_t seed) {
  ErrorModel m;
  m.default_rate = rate;
  m.seed = seed;
  return m;
}

namespace {

struct Abbrev {
  std::string_view full;
  std::string_view shortform;
};

constexpr Abbrev kAbbrevs[] = {
    {"Street", "St"}, {"Avenue", "Ave"}, {"Boulevard", "Blvd"}, {"Road", "Rd"}, {"Drive", "Dr"}};

std::string abbreviate(const std::string& name) {
  const auto space = name.rfind(' ');
  const std::string last = space == std::string::npos ? name : name.substr(space + 1);
  for (const auto& a : kAbbrevs) {
    if (last == a.full) {
      return name.substr(0, name.size() - last.size()) + std::string(a.shortform) + ".";
    }
  }
  std::string out = name;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// One of three surface forms of a name: as written, abbreviated or
// lower-cased, or inside a sentence.
std::string surface(const std::string& name, QuestionLevel level, Rng& rng) {
  switch (rng.uniform_index(3)) {
    case 0:
      return name;
    case 1:
      return abbreviate(name);
    default:
      return level == QuestionLevel::street ? "The photo was taken on " + name + "."
                                            : "This place is in " + name + ".";
  }
}

std::string pick(const std::vector<std::string>& pool, Rng& rng) {
  return pool[static_cast<std::size_t>(rng.uniform_index(pool.size()))];
}

std::string yes_no(bool yes, Rng& rng) {
  static constexpr std::string_view kYes[] = {"Yes", "yes.", "Yes, it is."};
  static constexpr std::string_view kNo[] = {"No", "no.", "No, it is not."};
  const auto i = static_cast<std::size_t>(rng.uniform_index(3));
  return std::string(yes ? kYes[i] : kNo[i]);
}

std::string letter_form(char letter, Rng& rng) {
  const std::string l(1, letter);
  switch (rng.uniform_index(4)) {
    case 0: return l;
    case 1: return "(" + l + ")";
    case 2: return "Answer: " + l;
    default: return "The answer is " + l + ".";
  }
}

}  // namespace

std::string respond(const ConversationSample& sample, int turn, const DistractorPools& pools,
                    const ErrorModel& model) {
  if (turn < 1 || static_cast<std::size_t>(turn) > sample.turns.size()) {
    throw std::out_of_range("respond: turn " + std::to_string(turn) + " outside sample " +
                            sample.id);
  }
  const auto& t = sample.turns[static_cast<std::size_t>(turn - 1)];
  const double rate = model.rate(t.level, t.qtype);
  Rng rng(derive_seed(model.seed, {sample.id, std::to_string(turn)}));
  const bool wrong = rng.bernoulli(rate);

  switch (t.qtype) {
    case QuestionType::judgment: {
      if (!t.judgment_truth) throw ForgeError("judgment turn without planted answer in " + sample.id);
      return yes_no(*t.judgment_truth != wrong, rng);
    }
    case QuestionType::multiple_choice: {
      if (t.correct_option < 0 || t.correct_option > 3) {
        throw ForgeError("multiple-choice turn without a correct option in " + sample.id);
      }
      int option = t.correct_option;
      if (wrong) {
        option = static_cast<int>(rng.uniform_index(3));
        if (option >= t.correct_option) ++option;
      }
      return letter_form(static_cast<char>('A' + option), rng);
    }
    case QuestionType::generation:
      break;
    case QuestionType::alignment:
      throw ForgeError("alignment turns are not answered by the mock responder");
  }

  if (t.level != QuestionLevel::combined) {
    const auto& truth = t.level == QuestionLevel::street ? sample.truth.street : sample.truth.district;
    if (rate > 0.0) {
      const auto pool = pools.excluding(t.level, sample.truth);
      if (pool.empty()) {
        throw ForgeError(std::string("no wrong ") + to_string(t.level) + " available for " +
                         sample.id);
      }
      if (wrong) return surface(pick(pool, rng), t.level, rng);
    }
    return surface(truth, t.level, rng);
  }

  std::string street = sample.truth.street;
  std::string district = sample.truth.district;
  if (rate > 0.0) {
    const auto streets = pools.excluding(QuestionLevel::street, sample.truth);
    const auto districts = pools.excluding(QuestionLevel::district, sample.truth);
    if (streets.empty() && districts.empty()) {
      throw ForgeError("no wrong street or district available for " + sample.id);
    }
    if (wrong) {
      // 0: street wrong, 1: district wrong, 2: both, limited to what the pools allow.
      auto mode = rng.uniform_index(3);
      if (streets.empty()) mode = 1;
      if (districts.empty()) mode = 0;
      if (mode != 1) street = pick(streets, rng);
      if (mode != 0) district = pick(districts, rng);
    }
  }
  if (rng.bernoulli(0.5)) return street + ", " + district;
  return "It is " + street + " in " + district + ".";
}

std::vector<PredictionRecord> mock_predictions(std::span<const ConversationSample> gt,
                                               const std::map<std::string, Gazetteer>& gazetteers,
                                               const ErrorModel& model, int jobs) {
  model.validate();
  std::map<std::string, DistractorPools> pools;
  for (const auto& [city, gaz] : gazetteers) pools.emplace(city, DistractorPools::from(gaz));
  const DistractorPools empty;

  std::vector<std::vector<PredictionRecord>> per_sample(gt.size());
  parallel_for(gt.size(), static_cast<unsigned>(std::max(1, jobs)), [&](std::size_t i) {
    const auto& s = gt[i];
    if (s.stage != Stage::localization) return;
    auto it = pools.find(s.city_id);
    const auto& p = it == pools.end() ? empty : it->second;
    for (std::size_t t = 0; t < s.turns.size(); ++t) {
      if (s.turns[t].qtype == QuestionType::alignment) continue;
      const int turn = static_cast<int>(t + 1);
      per_sample[i].push_back({s.id, turn, respond(s, turn, p, model)});
    }
  });

  std::vector<PredictionRecord> out;
  for (auto& v : per_sample) std::move(v.begin(), v.end(), std::back_inserter(out));
  std::sort(out.begin(), out.end(), [](const PredictionRecord& a, const PredictionRecord& b) {
    return a.id != b.id ? a.id < b.id : a.turn < b.turn;
  });
  return out;
}

struct StubChatServer::Impl {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<std::size_t> in_flight{0};
  std::atomic<std::size_t> max_in_flight{0};
  std::atomic<std::size_t> total{0};
};

namespace {

std::string prompt_text(const nlohmann::json& body) {
  const auto& content = body.at("messages").at(0).at("content");
  if (content.is_string()) return content.get<std::string>();
  for (const auto& part : content) {
    if (part.value("type", "") == "text") return part.at("text").get<std::string>();
  }
  return {};
}

}  // namespace

StubChatServer::StubChatServer(Handler handler, int threads) : impl_(std::make_unique<Impl>()) {
  const auto pool_size = static_cast<std::size_t>(std::max(1, threads));
  impl_->server.new_task_queue = [pool_size] { return new httplib::ThreadPool(pool_size); };
  auto* impl = impl_.get();
  impl_->server.Post(R"(/v1/chat/completions)", [impl, handler = std::move(handler)](
                                                     const httplib::Request& req,
                                                     httplib::Response& res) {
    const auto index = impl->total.fetch_add(1);
    const auto now = impl->in_flight.fetch_add(1) + 1;
    for (auto seen = impl->max_in_flight.load(); now > seen;) {
      if (impl->max_in_flight.compare_exchange_weak(seen, now)) break;
    }
    Reply reply;
    try {
      reply = handler(prompt_text(nlohmann::json::parse(req.body)), index);
    } catch (const std::exception& e) {
      reply = {400, e.what(), {}, false};
    }
    if (reply.delay.count() > 0) std::this_thread::sleep_for(reply.delay);
    res.status = reply.status;
    if (reply.status >= 200 && reply.status < 300 && !reply.malformed) {
      nlohmann::ordered_json body;
      body["id"] = "stub-" + std::to_string(index);
      body["object"] = "chat.completion";
      body["choices"] = nlohmann::ordered_json::array(
          {{{"index", 0},
            {"message", {{"role", "assistant"}, {"content", reply.content}}},
            {"finish_reason", "stop"}}});
      res.set_content(body.dump(), "application/json");
    } else {
      res.set_content(reply.content, "text/plain");
    }
    impl->in_flight.fetch_sub(1);
  });
  impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
  if (impl_->port <= 0) throw ForgeError("stub chat server could not bind a port");
  impl_->thread = std::thread([impl] { impl->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

StubChatServer::~StubChatServer() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int StubChatServer::port() const { return impl_->port; }

std::string StubChatServer::base_url() const {
  return "http://127.0.0.1:" + std::to_string(impl_->port) + "/v1";
}

std::size_t StubChatServer::max_in_flight() const { return impl_->max_in_flight.load(); }
std::size_t StubChatServer::total_requests() const { return impl_->total.load(); }

std::optional<AddressLabel> parse_hint(const std::string& prompt) {
  const auto open = prompt.find(kHintOpen);
  if (open == std::string::npos) return std::nullopt;
  const auto body = open + kHintOpen.size();
  const auto close = prompt.find(kHintClose, body);
  if (close == std::string::npos) return std::nullopt;
  const std::string hint = prompt.substr(body, close - body);
  static constexpr std::string_view kLead = "taken on ";
  const auto on = hint.find(kLead);
  const auto in = hint.rfind(" in ");
  if (on == std::string::npos || in == std::string::npos || in < on) return std::nullopt;
  AddressLabel label;
  label.street = hint.substr(on + kLead.size(), in - on - kLead.size());
  label.district = hint.substr(in + 4);
  while (!label.district.empty() && label.district.back() == '.') label.district.pop_back();
  if (label.street.empty() || label.district.empty()) return std::nullopt;
  return label;
}

StubChatServer::Handler StubChatServer::echo_hint_handler(std::chrono::milliseconds delay) {
  return [delay](const std::string& prompt, std::size_t) {
    Reply r;
    r.delay = delay;
    const auto label = parse_hint(prompt);
    if (!label) {
      r.status = 422;
      r.content = "prompt carries no hint";
      return r;
    }
    r.content = "The road crossing the upper right corner of the map is " + label->street +
                ". The lane layout and the buildings in the street view fit that stretch of " +
                label->street + " in " + label->district + ".";
    return r;
  };
}

}  // namespace addrforge
