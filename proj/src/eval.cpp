#include "addrforge/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "addrforge/errors.hpp"

namespace addrforge {

using nlohmann::json;
using nlohmann::ordered_json;

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open predictions");
  std::vector<PredictionRecord> out;
  std::set<std::pair<std::string, int>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PredictionRecord rec;
    try {
      const auto j = json::parse(line);
      rec.id = j.at("id").get<std::string>();
      rec.turn = j.at("turn").get<int>();
      rec.answer = j.at("answer").get<std::string>();
    } catch (const json::exception& e) {
      throw InputError(path.string() + ": bad prediction: " + e.what(), line_no);
    }
    if (rec.turn < 1) throw InputError(path.string() + ": turn must be >= 1", line_no);
    if (!seen.emplace(rec.id, rec.turn).second) {
      throw InputError(path.string() + ": duplicate prediction for (" + rec.id + ", " +
                           std::to_string(rec.turn) + ")",
                       line_no);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_predictions(const std::filesystem::path& path, std::span<const PredictionRecord> preds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  for (const auto& p : preds) {
    ordered_json j;
    j["id"] = p.id;
    j["turn"] = p.turn;
    j["answer"] = p.answer;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

namespace {

bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::optional<bool> parse_yes_no(std::string_view raw) {
  std::size_t i = 0;
  while (i < raw.size()) {
    while (i < raw.size() && !is_alnum(raw[i])) ++i;
    std::size_t j = i;
    while (j < raw.size() && is_alnum(raw[j])) ++j;
    if (j > i) {
      const auto token = lower(raw.substr(i, j - i));
      if (token == "yes") return true;
      if (token == "no") return false;
    }
    i = j;
  }
  return std::nullopt;
}

bool ends_with_ci(std::string_view text, std::string_view suffix) {
  if (text.size() < suffix.size()) return false;
  return lower(text.substr(text.size() - suffix.size())) == suffix;
}

char parse_letter(std::string_view raw) {
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const char c = raw[i];
    const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (up < 'A' || up > 'D') continue;
    const bool before_ok = i == 0 || !is_alnum(raw[i - 1]);
    const bool after_ok = i + 1 == raw.size() || !is_alnum(raw[i + 1]);
    if (!before_ok || !after_ok) continue;
    if (c == up) return up;
    // Lower-case letters only count in an explicit answer position.
    const auto prefix = std::string_view(raw).substr(0, i);
    const auto trimmed = trim(prefix);
    if ((i > 0 && raw[i - 1] == '(') || ends_with_ci(trimmed, "answer:") ||
        ends_with_ci(trimmed, "answer is") || ends_with_ci(trimmed, "option")) {
      return up;
    }
  }
  return 0;
}

AddressLevel address_level(QuestionLevel level) {
  return level == QuestionLevel::street ? AddressLevel::street : AddressLevel::district;
}

bool same_name(std::string_view a, std::string_view b, AddressLevel level) {
  if (a.empty() || b.empty()) return false;
  return normalize_address(a, level) == normalize_address(b, level);
}

// Free-text answer resolved to a name: exact normalized match, then a
// gazetteer entry of that exact form, then the first gazetteer mention.
bool generation_matches(std::string_view answer, std::string_view truth, AddressLevel level,
                        const Gazetteer& gazetteer) {
  if (trim(answer).empty()) return false;
  if (same_name(answer, truth, level)) return true;
  if (auto hit = gazetteer.lookup(answer, level)) return same_name(*hit, truth, level);
  if (auto hit = gazetteer.find_mention(answer, level)) return same_name(*hit, truth, level);
  return false;
}

}  // namespace

ParsedAnswer parse_answer(std::string_view raw, QuestionType qtype, QuestionLevel level,
                          const Gazetteer& gazetteer) {
  ParsedAnswer p;
  p.qtype = qtype;
  switch (qtype) {
    case QuestionType::judgment:
      p.yes = parse_yes_no(raw);
      p.parsed = p.yes.has_value();
      break;
    case QuestionType::multiple_choice:
      p.letter = parse_letter(raw);
      p.parsed = p.letter != 0;
      break;
    case QuestionType::generation:
      p.text = trim(raw);
      if (level == QuestionLevel::combined) {
        if (!p.text.empty()) {
          p.street = gazetteer.find_mention(p.text, AddressLevel::street);
          p.district = gazetteer.find_mention(p.text, AddressLevel::district);
        }
        p.parsed = p.street.has_value() || p.district.has_value();
      } else {
        p.parsed = !p.text.empty();
      }
      break;
    case QuestionType::alignment:
      p.text = trim(raw);
      p.parsed = !p.text.empty();
      break;
  }
  return p;
}

TurnTruth TurnTruth::from(const ConversationSample& sample, const QuestionTurn& turn) {
  return {turn.qtype, turn.level, sample.truth, turn.judgment_truth, turn.correct_option};
}

bool score_question(const ParsedAnswer& parsed, const TurnTruth& truth, const Gazetteer& gazetteer) {
  if (!parsed.parsed) return false;
  switch (truth.qtype) {
    case QuestionType::judgment:
      return truth.judgment.has_value() && parsed.yes == truth.judgment;
    case QuestionType::multiple_choice:
      return truth.correct_option >= 0 && parsed.letter == 'A' + truth.correct_option;
    case QuestionType::generation:
      if (truth.level == QuestionLevel::combined) {
        return parsed.street && parsed.district &&
               same_name(*parsed.street, truth.address.street, AddressLevel::street) &&
               same_name(*parsed.district, truth.address.district, AddressLevel::district);
      }
      return generation_matches(parsed.text,
                                truth.level == QuestionLevel::street ? truth.address.street
                                                                     : truth.address.district,
                                address_level(truth.level), gazetteer);
    case QuestionType::alignment:
      return false;
  }
  return false;
}

std::optional<double> Accuracy::percent() const {
  if (total == 0) return std::nullopt;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

Accuracy& MetricsReport::category(QuestionLevel level, QuestionType qtype) {
  return const_cast<Accuracy&>(std::as_const(*this).category(level, qtype));
}

const Accuracy& MetricsReport::category(QuestionLevel level, QuestionType qtype) const {
  if (level == QuestionLevel::combined) return combined;
  const bool d = level == QuestionLevel::district;
  switch (qtype) {
    case QuestionType::generation: return d ? district_generation : street_generation;
    case QuestionType::judgment: return d ? district_judgment : street_judgment;
    case QuestionType::multiple_choice: return d ? district_choice : street_choice;
    case QuestionType::alignment: break;
  }
  throw std::invalid_argument("alignment turns are not scored");
}

Accuracy MetricsReport::micro_district() const {
  Accuracy a = district_generation;
  a += district_judgment;
  a += district_choice;
  return a;
}

Accuracy MetricsReport::micro_street() const {
  Accuracy a = street_generation;
  a += street_judgment;
  a += street_choice;
  return a;
}

Accuracy MetricsReport::micro_overall() const {
  Accuracy a = micro_district();
  a += micro_street();
  return a;
}

namespace {

std::optional<double> mean_of(std::initializer_list<const Accuracy*> parts) {
  double sum = 0.0;
  int n = 0;
  for (const auto* p : parts) {
    if (auto v = p->percent()) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

std::optional<double> MetricsReport::macro_district() const {
  return mean_of({&district_generation, &district_judgment, &district_choice});
}

std::optional<double> MetricsReport::macro_street() const {
  return mean_of({&street_generation, &street_judgment, &street_choice});
}

std::optional<double> MetricsReport::macro_overall() const {
  return mean_of({&district_generation, &district_judgment, &district_choice, &street_generation,
                  &street_judgment, &street_choice});
}

MetricsReport& MetricsReport::operator+=(const MetricsReport& o) {
  district_generation += o.district_generation;
  district_judgment += o.district_judgment;
  district_choice += o.district_choice;
  street_generation += o.street_generation;
  street_judgment += o.street_judgment;
  street_choice += o.street_choice;
  combined += o.combined;
  unparsable += o.unparsable;
  missing += o.missing;
  return *this;
}

MetricsReport aggregate(std::span<const ScoredQuestion> scored) {
  MetricsReport r;
  for (const auto& q : scored) {
    auto& acc = r.category(q.level, q.qtype);
    ++acc.total;
    if (q.correct) ++acc.correct;
    if (q.unparsable) ++r.unparsable;
    if (q.missing) ++r.missing;
  }
  return r;
}

std::map<std::string, Gazetteer> gazetteers_from_samples(std::span<const ConversationSample> gt) {
  std::map<std::string, Gazetteer> out;
  for (const auto& s : gt) {
    auto [it, inserted] = out.try_emplace(s.city_id, s.city_id);
    auto& g = it->second;
    g.add(s.truth.street, AddressLevel::street);
    g.add(s.truth.district, AddressLevel::district);
    for (const auto& t : s.turns) {
      if (t.level == QuestionLevel::combined || t.qtype == QuestionType::alignment) continue;
      const auto lvl = address_level(t.level);
      for (const auto& o : t.options) g.add(o, lvl);
      if (!t.candidate.empty()) g.add(t.candidate, lvl);
    }
  }
  return out;
}

EvalResult evaluate(std::span<const ConversationSample> gt, std::span<const PredictionRecord> preds,
                    const std::map<std::string, Gazetteer>& gazetteers, AsdSource asd) {
  std::map<std::pair<std::string_view, int>, const PredictionRecord*> by_key;
  for (const auto& p : preds) by_key.emplace(std::pair<std::string_view, int>{p.id, p.turn}, &p);

  const Gazetteer empty;
  std::map<std::string, std::vector<ScoredQuestion>> per_city;
  std::size_t matched = 0;
  for (const auto& sample : gt) {
    if (sample.stage != Stage::localization) continue;
    auto git = gazetteers.find(sample.city_id);
    const Gazetteer& gaz = git == gazetteers.end() ? empty : git->second;
    auto& bucket = per_city[sample.city_id];

    bool district_gen_ok = false, street_gen_ok = false;
    bool has_district_gen = false, has_street_gen = false;
    for (std::size_t t = 0; t < sample.turns.size(); ++t) {
      const auto& turn = sample.turns[t];
      if (turn.qtype == QuestionType::alignment) continue;
      ScoredQuestion q{turn.level, turn.qtype, false, false, false};
      auto it = by_key.find({sample.id, static_cast<int>(t + 1)});
      if (it == by_key.end()) {
        q.missing = true;
      } else {
        ++matched;
        const auto parsed = parse_answer(it->second->answer, turn.qtype, turn.level, gaz);
        q.unparsable = !parsed.parsed;
        q.correct = score_question(parsed, TurnTruth::from(sample, turn), gaz);
      }
      if (turn.qtype == QuestionType::generation && turn.level == QuestionLevel::district) {
        has_district_gen = true;
        district_gen_ok = q.correct;
      }
      if (turn.qtype == QuestionType::generation && turn.level == QuestionLevel::street) {
        has_street_gen = true;
        street_gen_ok = q.correct;
      }
      if (turn.level == QuestionLevel::combined && asd == AsdSource::paired_generation) continue;
      bucket.push_back(q);
    }
    if (asd == AsdSource::paired_generation && has_district_gen && has_street_gen) {
      bucket.push_back({QuestionLevel::combined, QuestionType::generation,
                        district_gen_ok && street_gen_ok, false, false});
    }
  }

  EvalResult result;
  for (const auto& [city, scored] : per_city) {
    auto report = aggregate(scored);
    result.overall += report;
    result.per_city.emplace(city, std::move(report));
  }
  result.extra_predictions = preds.size() - matched;
  return result;
}

namespace {

ordered_json accuracy_json(const Accuracy& a) {
  ordered_json j;
  j["correct"] = a.correct;
  j["total"] = a.total;
  if (auto p = a.percent()) {
    j["accuracy"] = *p;
  } else {
    j["accuracy"] = nullptr;
  }
  return j;
}

ordered_json optional_json(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

Accuracy accuracy_from(const json& j) {
  return {j.at("correct").get<std::size_t>(), j.at("total").get<std::size_t>()};
}

struct Column {
  const char* name;
  Accuracy MetricsReport::*field;
};

constexpr Column kCategories[] = {
    {"district_generation", &MetricsReport::district_generation},
    {"district_judgment", &MetricsReport::district_judgment},
    {"district_choice", &MetricsReport::district_choice},
    {"street_generation", &MetricsReport::street_generation},
    {"street_judgment", &MetricsReport::street_judgment},
    {"street_choice", &MetricsReport::street_choice},
    {"combined", &MetricsReport::combined},
};

}  // namespace

ordered_json to_json(const MetricsReport& r) {
  ordered_json j;
  ordered_json cats;
  for (const auto& c : kCategories) cats[c.name] = accuracy_json(r.*(c.field));
  j["categories"] = std::move(cats);
  j["micro"] = {{"district", accuracy_json(r.micro_district())},
                {"street", accuracy_json(r.micro_street())},
                {"overall", accuracy_json(r.micro_overall())}};
  j["macro"] = {{"district", optional_json(r.macro_district())},
                {"street", optional_json(r.macro_street())},
                {"overall", optional_json(r.macro_overall())}};
  j["unparsable"] = r.unparsable;
  j["missing"] = r.missing;
  return j;
}

MetricsReport metrics_from_json(const json& j) {
  MetricsReport r;
  try {
    const auto& cats = j.at("categories");
    for (const auto& c : kCategories) r.*(c.field) = accuracy_from(cats.at(c.name));
    r.unparsable = j.at("unparsable").get<std::size_t>();
    r.missing = j.at("missing").get<std::size_t>();
  } catch (const json::exception& e) {
    throw InputError(std::string("bad metrics report: ") + e.what());
  }
  for (const auto& c : kCategories) {
    const auto& a = r.*(c.field);
    if (a.correct > a.total) throw InputError(std::string("metrics: correct > total for ") + c.name);
  }
  return r;
}

namespace {

std::size_t display_width(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::string pad_left(std::string_view s, std::size_t width) {
  const auto w = display_width(s);
  return std::string(w < width ? width - w : 0, ' ') + std::string(s);
}

std::string pad_right(std::string_view s, std::size_t width) {
  const auto w = display_width(s);
  return std::string(s) + std::string(w < width ? width - w : 0, ' ');
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

}  // namespace

std::string render_report(const MetricsReport& r) {
  constexpr std::size_t kLabel = 8;
  constexpr std::size_t kCell = 8;
  const char* headers[] = {"A_d^G", "A_d^J", "A_d^M", "Ā_d", "A_s^G",
                           "A_s^J", "A_s^M", "Ā_s",   "Ā",   "A_sd"};

  auto row = [&](std::string_view label, const std::vector<std::string>& cells) {
    std::string line = pad_right(label, kLabel);
    for (const auto& c : cells) line += pad_left(c, kCell);
    return line + "\n";
  };

  std::vector<std::string> head(std::begin(headers), std::end(headers));
  const auto dg = r.district_generation.percent(), dj = r.district_judgment.percent(),
             dm = r.district_choice.percent(), sg = r.street_generation.percent(),
             sj = r.street_judgment.percent(), sm = r.street_choice.percent(),
             sd = r.combined.percent();

  std::string out = row("", head);
  out += row("micro", {cell(dg), cell(dj), cell(dm), cell(r.micro_district().percent()), cell(sg),
                       cell(sj), cell(sm), cell(r.micro_street().percent()),
                       cell(r.micro_overall().percent()), cell(sd)});
  out += row("macro", {cell(dg), cell(dj), cell(dm), cell(r.macro_district()), cell(sg), cell(sj),
                       cell(sm), cell(r.macro_street()), cell(r.macro_overall()), cell(sd)});
  auto n = [](const Accuracy& a) { return std::to_string(a.total); };
  out += row("n", {n(r.district_generation), n(r.district_judgment), n(r.district_choice),
                   n(r.micro_district()), n(r.street_generation), n(r.street_judgment),
                   n(r.street_choice), n(r.micro_street()), n(r.micro_overall()), n(r.combined)});
  out += "unparsable: " + std::to_string(r.unparsable) + "  missing: " + std::to_string(r.missing) +
         "\n";
  return out;
}

}  // namespace addrforge
