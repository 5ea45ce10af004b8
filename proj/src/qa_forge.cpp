#include "addrforge/qa_forge.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "addrforge/errors.hpp"
#include "addrforge/parallel.hpp"

namespace addrforge {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(QuestionType t) {
  switch (t) {
    case QuestionType::generation: return "generation";
    case QuestionType::judgment: return "judgment";
    case QuestionType::multiple_choice: return "multiple_choice";
    case QuestionType::alignment: return "alignment";
  }
  return "?";
}

const char* to_string(QuestionLevel l) {
  switch (l) {
    case QuestionLevel::district: return "district";
    case QuestionLevel::street: return "street";
    case QuestionLevel::combined: return "combined";
  }
  return "?";
}

const char* to_string(Stage s) { return s == Stage::alignment ? "alignment" : "localization"; }

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

QuestionType parse_question_type(std::string_view text) {
  for (auto t : {QuestionType::generation, QuestionType::judgment, QuestionType::multiple_choice,
                 QuestionType::alignment}) {
    if (text == to_string(t)) return t;
  }
  throw InputError("unknown question type '" + std::string(text) + "'");
}

QuestionLevel parse_question_level(std::string_view text) {
  for (auto l : {QuestionLevel::district, QuestionLevel::street, QuestionLevel::combined}) {
    if (text == to_string(l)) return l;
  }
  throw InputError("unknown question level '" + std::string(text) + "'");
}

Stage parse_stage(std::string_view text) {
  if (text == "alignment") return Stage::alignment;
  if (text == "localization") return Stage::localization;
  throw InputError("unknown stage '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
  for (auto s : kAllSplits) {
    if (text == to_string(s)) return s;
  }
  throw InputError("unknown split '" + std::string(text) + "'");
}

const TemplateBank& TemplateBank::standard() {
  static const TemplateBank bank{
      {
          "Tell me the district where this image was captured.",
          "I'm curious about the district, where is this?",
          "In which urban district was this photo taken?",
          "Can you identify which district this is?",
          "What district is shown in this photograph?",
          "What major district does the photo fall under?",
          "I'm looking for the name of the district in this photo, can you help?",
          "Can you specify the district shown in this photo?",
          "Which district is depicted in the photo?",
          "What's the name of the district shown in the photo?",
      },
      {
          "Identify the street in this image, please.",
          "What is the street seen in this picture called?",
          "On which boulevard or street was this taken?",
          "Give me the name of the street that appears in this photograph.",
          "Where was this, can you name the street?",
          "What's the name of the avenue or street captured in this shot?",
          "The street in this image, what is it named?",
          "What's the name of this street shown in the photo?",
          "Can you tell me which road this is?",
          "What thoroughfare is depicted here?",
      },
      "Answer the question using a single word or phrase.",
      "What street and district is shown in this photo? Answer with street and district.",
  };
  return bank;
}

const std::array<std::string, 10>& TemplateBank::for_level(QuestionLevel level) const {
  if (level == QuestionLevel::district) return district;
  if (level == QuestionLevel::street) return street;
  throw std::invalid_argument("combined level has no template list");
}

namespace {

constexpr std::array<char, 4> kLetters{'A', 'B', 'C', 'D'};

const std::string& truth_for(const AddressLabel& truth, QuestionLevel level) {
  return level == QuestionLevel::street ? truth.street : truth.district;
}

AddressLevel address_level(QuestionLevel level) {
  return level == QuestionLevel::street ? AddressLevel::street : AddressLevel::district;
}

}  // namespace

QuestionTurn render_question(const TemplateBank& bank, QuestionType qtype, QuestionLevel level,
                             const AddressLabel& truth, std::span<const std::string> distractors,
                             Rng& rng, std::optional<bool> judgment_answer) {
  QuestionTurn turn;
  turn.qtype = qtype;
  turn.level = level;

  if (level == QuestionLevel::combined) {
    if (qtype != QuestionType::generation) {
      throw std::invalid_argument("combined level is only defined for generation questions");
    }
    turn.question = bank.combined_question;
    turn.answer = truth.street + ", " + truth.district;
    return turn;
  }
  if (qtype == QuestionType::alignment) {
    throw std::invalid_argument("alignment turns are not rendered from templates");
  }

  const std::string& answer_name = truth_for(truth, level);
  const auto key = normalize_address(answer_name, address_level(level));
  for (const auto& d : distractors) {
    if (normalize_address(d, address_level(level)) == key) {
      throw std::invalid_argument("distractor pool contains the truth '" + answer_name + "'");
    }
  }

  const auto& templates = bank.for_level(level);
  const std::string& stem = templates[rng.uniform_index(templates.size())];
  const char* level_word = level == QuestionLevel::street ? "street" : "district";

  switch (qtype) {
    case QuestionType::generation:
      turn.question = stem + " " + bank.generation_prompt;
      turn.answer = answer_name;
      break;
    case QuestionType::judgment: {
      const bool yes = judgment_answer ? *judgment_answer : rng.bernoulli(0.5);
      if (yes) {
        turn.candidate = answer_name;
      } else {
        if (distractors.empty()) {
          throw InputError(std::string("no ") + level_word +
                           " distractors available for a 'No' judgment");
        }
        turn.candidate = distractors[rng.uniform_index(distractors.size())];
      }
      turn.judgment_truth = yes;
      turn.question = stem + " Is this image taken " +
                      (level == QuestionLevel::street ? "on " : "in ") + turn.candidate +
                      ", Yes or No?";
      turn.answer = yes ? "Yes" : "No";
      break;
    }
    case QuestionType::multiple_choice: {
      if (distractors.size() < 3) {
        throw InputError(std::string("multiple choice needs 3 ") + level_word +
                         " distractors, have " + std::to_string(distractors.size()));
      }
      turn.options.push_back(answer_name);
      for (auto i : rng.sample_indices(distractors.size(), 3)) turn.options.push_back(distractors[i]);
      rng.shuffle(turn.options);
      turn.correct_option = static_cast<int>(
          std::find(turn.options.begin(), turn.options.end(), answer_name) - turn.options.begin());
      std::string q = stem + " Which of the following " + level_word +
                      " correctly represents the location shown in the image?";
      for (std::size_t i = 0; i < 4; ++i) {
        q += std::string(" (") + kLetters[i] + ") " + turn.options[i];
      }
      q += ". Please select the correct option (A/B/C/D).";
      turn.question = std::move(q);
      turn.answer = std::string(1, kLetters[static_cast<std::size_t>(turn.correct_option)]);
      break;
    }
    case QuestionType::alignment:
      break;
  }
  return turn;
}

DistractorPools DistractorPools::from(const Gazetteer& gazetteer) {
  return {gazetteer.names(AddressLevel::street), gazetteer.names(AddressLevel::district)};
}

std::vector<std::string> DistractorPools::excluding(QuestionLevel level,
                                                    const AddressLabel& truth) const {
  const auto lvl = address_level(level);
  const auto& pool = level == QuestionLevel::street ? streets : districts;
  const auto key = normalize_address(truth_for(truth, level), lvl);
  std::vector<std::string> out;
  out.reserve(pool.size());
  for (const auto& name : pool) {
    if (normalize_address(name, lvl) != key) out.push_back(name);
  }
  return out;
}

QaProfile QaProfile::train() {
  return {"train",
          {{QuestionType::generation, std::nullopt, std::nullopt},
           {QuestionType::judgment, std::nullopt, std::nullopt},
           {QuestionType::multiple_choice, std::nullopt, std::nullopt}},
          true};
}

QaProfile QaProfile::test() {
  using QT = QuestionType;
  using QL = QuestionLevel;
  return {"test",
          {{QT::generation, QL::district, std::nullopt},
           {QT::generation, QL::street, std::nullopt},
           {QT::judgment, QL::district, true},
           {QT::judgment, QL::district, false},
           {QT::judgment, QL::street, true},
           {QT::judgment, QL::street, false},
           {QT::multiple_choice, QL::district, std::nullopt},
           {QT::multiple_choice, QL::street, std::nullopt},
           {QT::generation, QL::combined, std::nullopt}},
          false};
}

QaProfile QaProfile::by_name(std::string_view name) {
  if (name == "train") return train();
  if (name == "test") return test();
  throw InputError("unknown QA profile '" + std::string(name) + "'");
}

ConversationSample build_conversation(std::vector<std::string> images, const QaProfile& profile,
                                      const AddressLabel& truth, const DistractorPools& pools,
                                      Rng& rng, const TemplateBank& bank) {
  if (images.empty()) throw std::invalid_argument("build_conversation: no image reference");
  if (profile.turns.empty()) throw std::invalid_argument("build_conversation: empty profile");
  ConversationSample sample;
  sample.images = std::move(images);
  sample.truth = truth;
  sample.stage = Stage::localization;
  for (const auto& spec : profile.turns) {
    const QuestionLevel level =
        spec.level ? *spec.level
                   : (rng.uniform_index(2) == 0 ? QuestionLevel::district : QuestionLevel::street);
    std::vector<std::string> distractors;
    if (level != QuestionLevel::combined) distractors = pools.excluding(level, truth);
    sample.turns.push_back(
        render_question(bank, spec.qtype, level, truth, distractors, rng, spec.judgment_answer));
  }
  if (profile.shuffle_turns) rng.shuffle(sample.turns);
  return sample;
}

std::string format_heading(double heading) {
  if (heading == std::floor(heading) && heading >= 0.0 && heading < 1000.0) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%03d", static_cast<int>(heading));
    return buf;
  }
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, heading);
  return std::string(buf, end);
}

ordered_json to_json(const ConversationSample& sample) {
  ordered_json j;
  j["id"] = sample.id;
  if (sample.images.size() == 1) {
    j["image"] = sample.images.front();
  } else {
    j["images"] = sample.images;
  }

  std::string prefix;
  for (std::size_t i = 0; i < sample.images.size(); ++i) prefix += kImageToken;
  ordered_json conv = ordered_json::array();
  ordered_json turn_meta = ordered_json::array();
  for (std::size_t t = 0; t < sample.turns.size(); ++t) {
    const auto& turn = sample.turns[t];
    conv.push_back({{"from", "human"}, {"value", (t == 0 ? prefix : "") + turn.question}});
    conv.push_back({{"from", "assistant"}, {"value", turn.answer}});

    ordered_json m;
    m["qtype"] = to_string(turn.qtype);
    if (turn.qtype != QuestionType::alignment) m["level"] = to_string(turn.level);
    if (turn.judgment_truth) {
      m["judgment_truth"] = *turn.judgment_truth ? "yes" : "no";
      m["candidate"] = turn.candidate;
    }
    if (turn.qtype == QuestionType::multiple_choice) {
      m["options"] = turn.options;
      m["correct_option"] = std::string(1, kLetters[static_cast<std::size_t>(turn.correct_option)]);
    }
    turn_meta.push_back(std::move(m));
  }
  j["conversations"] = std::move(conv);

  ordered_json meta;
  meta["city"] = sample.city_id;
  meta["location_id"] = sample.location_id;
  meta["heading"] = sample.heading;
  meta["split"] = to_string(sample.split);
  meta["stage"] = to_string(sample.stage);
  meta["truth"] = {{"street", sample.truth.street}, {"district", sample.truth.district}};
  meta["turns"] = std::move(turn_meta);
  j["meta"] = std::move(meta);
  return j;
}

void validate_conversation_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw InputError("sample must be a JSON object", line);
  if (!j.contains("id") || !j["id"].is_string() || j["id"].get_ref<const std::string&>().empty()) {
    throw InputError("sample without a string id", line);
  }
  const std::string id = j["id"].get<std::string>();
  auto fail = [&](const std::string& why) { throw InputError("sample '" + id + "': " + why, line); };

  std::size_t image_count = 0;
  if (j.contains("image") && j.contains("images")) fail("both 'image' and 'images' present");
  if (j.contains("image")) {
    if (!j["image"].is_string()) fail("'image' must be a string");
    image_count = 1;
  }
  if (j.contains("images")) {
    if (!j["images"].is_array() || j["images"].empty()) fail("'images' must be a nonempty array");
    for (const auto& p : j["images"]) {
      if (!p.is_string()) fail("'images' entries must be strings");
    }
    image_count = j["images"].size();
  }

  if (!j.contains("conversations") || !j["conversations"].is_array() || j["conversations"].empty()) {
    fail("'conversations' must be a nonempty array");
  }
  const auto& conv = j["conversations"];
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& msg = conv[i];
    if (!msg.is_object() || !msg.contains("from") || !msg["from"].is_string() ||
        !msg.contains("value") || !msg["value"].is_string()) {
      fail("message " + std::to_string(i) + " needs string 'from' and 'value'");
    }
    const auto& from = msg["from"].get_ref<const std::string&>();
    const bool human = from == "human";
    if (!human && from != "assistant" && from != "gpt") fail("unknown speaker '" + from + "'");
    if (human != (i % 2 == 0)) fail("messages must alternate starting with human");

    const auto& value = msg["value"].get_ref<const std::string&>();
    std::size_t tokens = 0;
    for (auto pos = value.find("<image>"); pos != std::string::npos;
         pos = value.find("<image>", pos + 1)) {
      ++tokens;
    }
    const std::size_t expected = i == 0 ? image_count : 0;
    if (tokens != expected) {
      fail("message " + std::to_string(i) + " has " + std::to_string(tokens) +
           " image placeholders, expected " + std::to_string(expected));
    }
  }
}

ConversationSample sample_from_json(const json& j) {
  validate_conversation_json(j);
  ConversationSample s;
  s.id = j["id"].get<std::string>();
  if (j.contains("image")) s.images.push_back(j["image"].get<std::string>());
  if (j.contains("images")) s.images = j["images"].get<std::vector<std::string>>();
  if (!j.contains("meta") || !j["meta"].is_object()) {
    throw InputError("sample '" + s.id + "': missing meta block");
  }
  const auto& meta = j["meta"];
  try {
    s.city_id = meta.value("city", "");
    s.location_id = meta.value("location_id", "");
    s.heading = meta.value("heading", 0.0);
    s.split = parse_split(meta.value("split", "train"));
    s.stage = parse_stage(meta.value("stage", "localization"));
    s.truth.street = meta.at("truth").at("street").get<std::string>();
    s.truth.district = meta.at("truth").at("district").get<std::string>();

    const auto& conv = j["conversations"];
    const auto& tmeta = meta.at("turns");
    if (!tmeta.is_array() || tmeta.size() * 2 != conv.size()) {
      throw InputError("sample '" + s.id + "': meta.turns does not match conversation length");
    }
    for (std::size_t t = 0; t < tmeta.size(); ++t) {
      QuestionTurn turn;
      const auto& m = tmeta[t];
      turn.qtype = parse_question_type(m.at("qtype").get<std::string>());
      if (m.contains("level")) turn.level = parse_question_level(m["level"].get<std::string>());
      std::string q = conv[2 * t]["value"].get<std::string>();
      while (q.rfind(kImageToken, 0) == 0) q.erase(0, kImageToken.size());
      turn.question = std::move(q);
      turn.answer = conv[2 * t + 1]["value"].get<std::string>();
      if (m.contains("judgment_truth")) {
        turn.judgment_truth = m["judgment_truth"].get<std::string>() == "yes";
        turn.candidate = m.value("candidate", "");
      }
      if (m.contains("options")) {
        turn.options = m["options"].get<std::vector<std::string>>();
        const auto letter = m.at("correct_option").get<std::string>();
        if (letter.size() != 1 || letter[0] < 'A' || letter[0] > 'D') {
          throw InputError("sample '" + s.id + "': bad correct_option");
        }
        turn.correct_option = letter[0] - 'A';
      }
      s.turns.push_back(std::move(turn));
    }
  } catch (const json::exception& e) {
    throw InputError("sample '" + s.id + "': bad meta: " + e.what());
  }
  return s;
}

std::optional<Split> SplitAssignment::of(std::string_view location_id) const {
  for (const auto& [id, s] : entries) {
    if (id == location_id) return s;
  }
  return std::nullopt;
}

std::size_t SplitAssignment::count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.second == s; }));
}

ordered_json SplitAssignment::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["fractions"] = {{"train", fractions.train}, {"val", fractions.val}, {"test", fractions.test}};
  ordered_json assignment = ordered_json::object();
  for (const auto& [id, s] : entries) assignment[id] = to_string(s);
  j["assignment"] = std::move(assignment);
  return j;
}

namespace {

// Guards floor/ceil of fraction products such as 0.7 * 10 against
// representation error.
constexpr double kFractionEps = 1e-9;

std::size_t floor_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + kFractionEps));
}

std::size_t ceil_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - kFractionEps));
}

}  // namespace

SplitAssignment split_locations(const CityIndex& index, const SplitFractions& fractions,
                                std::uint64_t seed) {
  if (!(fractions.train > 0 && fractions.val > 0 && fractions.test > 0) ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw InputError("split fractions must be positive and sum to 1");
  }
  const std::size_t n = index.locations.size();
  if (n < 3) throw InputError("need at least 3 locations to split, have " + std::to_string(n));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const std::size_t n_train = floor_count(fractions.train, n);
  const std::size_t n_val = floor_count(fractions.val, n);
  std::vector<Split> by_index(n, Split::test);
  for (std::size_t k = 0; k < n; ++k) {
    by_index[order[k]] = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }

  SplitAssignment out;
  out.fractions = fractions;
  out.seed = seed;
  out.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.entries.emplace_back(index.locations[i].id, by_index[i]);
  return out;
}

ForgeSelection downsample(const CityIndex& index, const SplitAssignment& split,
                          const DownsampleSpec& spec, std::uint64_t seed) {
  for (double f : {spec.view_fraction, spec.location_fraction}) {
    if (!(f > 0.0 && f <= 1.0)) throw InputError("down-sampling fractions must be in (0, 1]");
  }
  std::map<std::string, Split, std::less<>> assigned(split.entries.begin(), split.entries.end());

  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < index.locations.size(); ++i) {
    auto it = assigned.find(index.locations[i].id);
    if (it != assigned.end() && it->second == Split::train) train_idx.push_back(i);
  }
  Rng loc_rng(derive_seed(seed, {"locations"}));
  const auto keep_n = ceil_count(spec.location_fraction, train_idx.size());
  std::set<std::size_t> kept_train;
  for (auto k : loc_rng.sample_indices(train_idx.size(), keep_n)) kept_train.insert(train_idx[k]);

  ForgeSelection out;
  out.index.city_id = index.city_id;
  out.index.roads = index.roads;
  out.index.gazetteer = index.gazetteer;
  out.split.fractions = split.fractions;
  out.split.seed = split.seed;
  for (std::size_t i = 0; i < index.locations.size(); ++i) {
    const auto& loc = index.locations[i];
    auto it = assigned.find(loc.id);
    if (it == assigned.end()) continue;
    if (it->second != Split::train) {
      out.index.locations.push_back(loc);
      out.split.entries.emplace_back(loc.id, it->second);
      continue;
    }
    if (!kept_train.contains(i)) continue;
    Location kept = loc;
    Rng view_rng(derive_seed(seed, {"views", loc.id}));
    const auto v = loc.views.size();
    const auto keep_v = std::max<std::size_t>(1, ceil_count(spec.view_fraction, v));
    kept.views.clear();
    for (auto k : view_rng.sample_indices(v, keep_v)) kept.views.push_back(loc.views[k]);
    out.index.locations.push_back(std::move(kept));
    out.split.entries.emplace_back(loc.id, Split::train);
  }
  return out;
}

ordered_json DatasetManifest::to_json() const {
  ordered_json j;
  j["city_ids"] = city_ids;
  j["seeds"] = seeds;
  j["profile"] = profile;
  j["generated_at"] = generated_at;
  ordered_json c = ordered_json::object();
  for (auto s : kAllSplits) {
    auto it = counts.find(to_string(s));
    const SplitCounts sc = it == counts.end() ? SplitCounts{} : it->second;
    c[to_string(s)] = {{"locations", sc.locations}, {"images", sc.images}, {"questions", sc.questions}};
  }
  j["counts"] = std::move(c);
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  try {
    m.city_ids = j.at("city_ids").get<std::vector<std::string>>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.profile = j.value("profile", "");
    m.generated_at = j.value("generated_at", "");
    for (const auto& [split, c] : j.at("counts").items()) {
      m.counts[split] = {c.at("locations").get<std::size_t>(), c.at("images").get<std::size_t>(),
                         c.at("questions").get<std::size_t>()};
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("bad dataset manifest: ") + e.what());
  }
  return m;
}

std::map<std::string, SplitCounts> recount(std::span<const ConversationSample> samples) {
  std::map<std::string, SplitCounts> counts;
  std::map<std::string, std::set<std::string>> locations;
  for (auto s : kAllSplits) counts[to_string(s)];
  for (const auto& sample : samples) {
    auto& c = counts[to_string(sample.split)];
    c.images += 1;
    c.questions += sample.turns.size();
    locations[to_string(sample.split)].insert(sample.city_id + "/" + sample.location_id);
  }
  for (auto& [split, ids] : locations) counts[split].locations = ids.size();
  return counts;
}

namespace {

std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  // Honour SOURCE_DATE_EPOCH so reruns can be byte-identical.
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch != '\0') {
    t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string manifest_timestamp() { return utc_timestamp(); }

Dataset forge_dataset(const CityIndex& index, const SplitAssignment& split,
                      const ForgeOptions& options) {
  struct Job {
    const Location* location;
    const ViewImage* view;
    Split split;
  };
  std::map<std::string, Split, std::less<>> assigned(split.entries.begin(), split.entries.end());
  std::vector<Job> jobs;
  for (const auto& loc : index.locations) {
    auto it = assigned.find(loc.id);
    if (it == assigned.end()) continue;
    for (const auto& view : loc.views) jobs.push_back({&loc, &view, it->second});
  }

  const auto pools = DistractorPools::from(index.gazetteer);
  std::vector<ConversationSample> samples(jobs.size());
  parallel_for(jobs.size(), options.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto heading = format_heading(job.view->heading);
    Rng rng(derive_seed(options.seed, {index.city_id, job.location->id, heading}));
    const auto& profile = job.split == Split::train ? options.train_profile : options.eval_profile;
    std::string image = options.image_ref ? options.image_ref(*job.location, *job.view)
                                          : job.view->path.generic_string();
    auto sample = build_conversation({std::move(image)}, profile, job.location->address, pools, rng);
    sample.id = index.city_id + "/" + job.location->id + "/" + heading;
    sample.city_id = index.city_id;
    sample.location_id = job.location->id;
    sample.heading = job.view->heading;
    sample.split = job.split;
    samples[i] = std::move(sample);
  });
  std::sort(samples.begin(), samples.end(),
            [](const ConversationSample& a, const ConversationSample& b) { return a.id < b.id; });

  Dataset ds;
  ds.manifest.city_ids = {index.city_id};
  ds.manifest.seeds = {options.seed};
  ds.manifest.profile = options.train_profile.name + "/" + options.eval_profile.name;
  ds.manifest.generated_at = utc_timestamp();
  ds.manifest.counts = recount(samples);
  ds.samples = std::move(samples);
  return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  for (auto split : kAllSplits) {
    const auto path = dir / (std::string(to_string(split)) + ".jsonl");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    for (const auto& s : dataset.samples) {
      if (s.split == split) out << to_json(s).dump() << '\n';
    }
    if (!out) throw IoError(path, "write failed");
  }
  const auto mpath = dir / "manifest.json";
  std::ofstream m(mpath, std::ios::binary);
  if (!m) throw IoError(mpath, "cannot open for writing");
  m << dataset.manifest.to_json().dump(2) << '\n';
}

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(path, std::string("malformed JSON: ") + e.what());
  }
}

template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(path.string() + ": malformed JSON: " + e.what(), line_no);
    }
    fn(std::move(j), line_no);
  }
}

}  // namespace

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = DatasetManifest::from_json(read_json_file(dir / "manifest.json"));
  for (auto split : kAllSplits) {
    const auto path = dir / (std::string(to_string(split)) + ".jsonl");
    if (!std::filesystem::exists(path)) continue;
    for_each_jsonl(path, [&](json j, std::size_t line) {
      try {
        ds.samples.push_back(sample_from_json(j));
      } catch (const InputError& e) {
        throw InputError(path.string() + ": " + e.what(), line);
      }
    });
  }
  return ds;
}

Dataset merge_cities(std::span<const Dataset> datasets) {
  Dataset out;
  std::set<std::string> cities;
  std::set<std::string> ids;
  std::vector<std::string> profiles;
  for (const auto& ds : datasets) {
    for (const auto& city : ds.manifest.city_ids) {
      if (!cities.insert(city).second) throw InputError("city id '" + city + "' appears twice");
      out.manifest.city_ids.push_back(city);
    }
    out.manifest.seeds.insert(out.manifest.seeds.end(), ds.manifest.seeds.begin(),
                              ds.manifest.seeds.end());
    if (std::find(profiles.begin(), profiles.end(), ds.manifest.profile) == profiles.end()) {
      profiles.push_back(ds.manifest.profile);
    }
    for (const auto& [split, c] : ds.manifest.counts) {
      auto& acc = out.manifest.counts[split];
      acc.locations += c.locations;
      acc.images += c.images;
      acc.questions += c.questions;
    }
    if (out.manifest.generated_at < ds.manifest.generated_at) {
      out.manifest.generated_at = ds.manifest.generated_at;
    }
    for (auto sample : ds.samples) {
      const auto prefix = sample.city_id + "/";
      if (sample.id.rfind(prefix, 0) != 0) sample.id = prefix + sample.id;
      if (!ids.insert(sample.id).second) throw InputError("sample id collision '" + sample.id + "'");
      out.samples.push_back(std::move(sample));
    }
  }
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    out.manifest.profile += (i ? "+" : "") + profiles[i];
  }
  return out;
}

MixRatio parse_mix_ratio(std::string_view text) {
  const auto colon = text.find(':');
  MixRatio r{0, 0};
  if (colon != std::string_view::npos) {
    auto a = std::from_chars(text.data(), text.data() + colon, r.task);
    auto b = std::from_chars(text.data() + colon + 1, text.data() + text.size(), r.external);
    if (a.ec == std::errc{} && b.ec == std::errc{} && a.ptr == text.data() + colon &&
        b.ptr == text.data() + text.size() && r.task > 0 && r.external > 0) {
      return r;
    }
  }
  throw InputError("mix ratio must look like A:B with positive integers, got '" +
                   std::string(text) + "'");
}

std::vector<json> mix_external(std::span<const json> task, std::span<const json> external,
                               const MixRatio& ratio, std::uint64_t seed) {
  if (ratio.task <= 0 || ratio.external <= 0) throw InputError("mix ratio parts must be positive");
  std::vector<json> a(task.begin(), task.end());
  std::vector<json> b(external.begin(), external.end());
  Rng ra(derive_seed(seed, {"mix", "task"}));
  Rng rb(derive_seed(seed, {"mix", "external"}));
  ra.shuffle(a);
  rb.shuffle(b);

  std::vector<json> out;
  out.reserve(a.size() + b.size());
  std::size_t ia = 0, ib = 0;
  const auto ta = static_cast<std::size_t>(ratio.task);
  const auto tb = static_cast<std::size_t>(ratio.external);
  while (ia + ta <= a.size() && ib + tb <= b.size()) {
    for (std::size_t k = 0; k < ta; ++k) out.push_back(std::move(a[ia++]));
    for (std::size_t k = 0; k < tb; ++k) out.push_back(std::move(b[ib++]));
  }
  while (ia < a.size()) out.push_back(std::move(a[ia++]));
  while (ib < b.size()) out.push_back(std::move(b[ib++]));
  return out;
}

std::vector<json> load_conversation_jsonl(const std::filesystem::path& path) {
  std::vector<json> out;
  for_each_jsonl(path, [&](json j, std::size_t line) {
    try {
      validate_conversation_json(j, line);
    } catch (const InputError& e) {
      throw InputError(path.string() + ": " + e.what());
    }
    out.push_back(std::move(j));
  });
  return out;
}

ordered_json training_config_manifest() {
  constexpr int image_side = 336;
  constexpr int patch = 14;
  ordered_json j;
  j["purpose"] = "reference hyper-parameters for the two tuning stages; not executed by this toolkit";
  j["stages"] = {"alignment", "localization"};
  j["batch_size_per_device"] = 4;
  j["devices"] = 8;
  j["gradient_accumulation"] = 16;
  j["learning_rate"] = 1e-5;
  j["weight_decay"] = 0;
  j["betas"] = {0.9, 0.999};
  j["warmup_ratio"] = 0.03;
  j["lora_rank"] = 128;
  j["lora_dropout"] = 0.05;
  j["image_side"] = image_side;
  j["patch_size"] = patch;
  j["model_max_length"] = 2048 - (image_side / patch) * (image_side / patch);
  return j;
}

}  // namespace addrforge
