// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "addrforge/analysis.hpp"
#include "addrforge/cli.hpp"
#include "addrforge/eval.hpp"
#include "addrforge/grafting.hpp"
#include "addrforge/labelgen.hpp"
#include "addrforge/mock_responder.hpp"
#include "addrforge/qa_forge.hpp"
#include "addrforge/rng.hpp"
#include "addrforge/tiling.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "support/synthetic_city.hpp"

using namespace addrforge;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Check graft_mask_exactness() {
  Check c;
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int side = 32 + static_cast<int>(rng.uniform_index(305));
    const int sw = 4 + static_cast<int>(rng.uniform_index(700));
    const int sh = 4 + static_cast<int>(rng.uniform_index(700));
    const double delta = 0.5 * rng.uniform01();
    const auto sat = testkit::noise_image(side, side, rng.next());
    const auto street = testkit::noise_image(sw, sh, rng.next());
    GraftSpec spec;
    spec.delta = delta;
    spec.target_side = side;
    const auto got = graft(sat, street, spec).image;
    c.expect(got == testkit::oracle_graft(sat, street, delta),
             "trial " + std::to_string(trial) + " differs from the brute-force oracle");
    spec.delta = 0.0;
    c.expect(graft(sat, street, spec).image == sat,
             "delta 0 is not the identity in trial " + std::to_string(trial));
  }
  return c;
}

// ---------------------------------------------------------------- 2

Check graft_geometry() {
  Check c;
  GraftSpec spec;
  spec.delta = 0.5;
  spec.target_side = 336;
  const auto g = compute_graft_geometry(672, 336, spec);
  c.expect(g.rect == PixelRect{168, 0, 336, 84}, "672x336 rect is not [168,336)x[0,84)");

  Rng rng(7);
  for (int trial = 0; trial < 20000; ++trial) {
    const int w = 1 + static_cast<int>(rng.uniform_index(4000));
    const int h = 1 + static_cast<int>(rng.uniform_index(4000));
    GraftSpec s;
    s.delta = 0.5 * rng.uniform01();
    s.target_side = 16 + static_cast<int>(rng.uniform_index(1024));
    const auto r = compute_graft_geometry(w, h, s).rect;
    const double t = s.target_side, dt = s.delta * t;
    const double bound = (dt + 0.5) * (dt + 1.0) / (t * t);
    const double frac = static_cast<double>(r.area()) / (t * t);
    c.expect(frac <= bound + 1e-12, "area fraction above bound for " + std::to_string(w) + "x" +
                                        std::to_string(h));
    c.expect(r.x1 == s.target_side && r.y0 == 0, "rect not flush top-right");
  }
  return c;
}

// ---------------------------------------------------------------- 3

Check projection_and_mosaic() {
  Check c;
  Rng rng(99);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const int zoom = static_cast<int>(rng.uniform_index(21));
    const double lon = -180.0 + 360.0 * rng.uniform01();
    const double lat = -85.0 + 170.0 * rng.uniform01();
    const auto p = lonlat_to_world_pixel(lon, lat, zoom);
    const auto back = world_pixel_to_lonlat(p.x, p.y, zoom);
    worst = std::max({worst, std::abs(back.lon - lon), std::abs(back.lat - lat)});
  }
  c.expect(worst <= 1e-9, "round-trip error " + std::to_string(worst));

  const auto root = testkit::scratch_dir("accept-tiles");
  constexpr int zoom = 3;
  for (int x = 2; x <= 4; ++x) {
    for (int y = 2; y <= 4; ++y) {
      write_image(root / "3" / std::to_string(x) / (std::to_string(y) + ".png"),
                  testkit::synthetic_tile(x, y, zoom));
    }
  }
  const TileStore store(root, zoom);
  const auto w = assemble_window(world_pixel_to_lonlat(896.5, 896.5, zoom), zoom, 640, store);
  c.expect(w.missing_tiles == 0 && w.total_tiles == 9, "3x3 fixture tile count");
  bool exact = w.origin_x == 576 && w.origin_y == 576;
  for (int j = 0; exact && j < 640; ++j) {
    for (int i = 0; exact && i < 640; ++i) {
      const int wx = 576 + i, wy = 576 + j;
      const Rgb want{static_cast<std::uint8_t>(wx % kTileSize),
                     static_cast<std::uint8_t>(wy % kTileSize),
                     static_cast<std::uint8_t>((wx / kTileSize * 7 + wy / kTileSize * 13 + zoom * 31) & 0xff)};
      exact = w.image.at(i, j) == want;
    }
  }
  c.expect(exact, "3x3 mosaic differs from per-pixel tile addressing");
  fs::remove_all(root);
  return c;
}

// ---------------------------------------------------------------- 4

Check dataset_arithmetic() {
  Check c;
  const auto index = parse_locations(testkit::locations_jsonl(100, 24, 30, 8, 4), "pgh");
  const auto split = split_locations(index, {}, 4);
  ForgeOptions opt;
  opt.seed = 4;
  opt.jobs = 2;
  const auto ds = forge_dataset(index, split, opt);
  const auto counts = recount(ds.samples);
  const auto& train = counts.at("train");
  c.expect(train.images == 70u * 24u, "train images " + std::to_string(train.images));
  c.expect(train.questions == 3 * train.images,
           std::to_string(train.questions) + " train questions for " +
               std::to_string(train.images) + " images");
  c.expect(ds.manifest.counts == counts, "manifest counts disagree with a recount");

  const auto big = parse_locations(testkit::locations_jsonl(10586, 1, 50, 12, 5), "pgh");
  const auto big_split = split_locations(big, {}, 5);
  c.expect(big_split.count(Split::train) == 7410u,
           "10586 locations give " + std::to_string(big_split.count(Split::train)) + " train");
  c.expect(533520 == 3 * 177840, "published question count");
  return c;
}

// ---------------------------------------------------------------- 5

Check split_hygiene() {
  Check c;
  const auto index = parse_locations(testkit::locations_jsonl(997, 2, 30, 8, 6), "pgh");
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = split_locations(index, {}, seed);
    std::map<Split, std::set<std::string>> by;
    for (const auto& [id, sp] : s.entries) by[sp].insert(id);
    std::set<std::string> all;
    std::size_t total = 0;
    for (const auto& [sp, ids] : by) {
      all.insert(ids.begin(), ids.end());
      total += ids.size();
    }
    c.expect(total == all.size() && all.size() == index.locations.size(),
             "location overlap or loss under seed " + std::to_string(seed));
    c.expect(s.to_json().dump() == split_locations(index, {}, seed).to_json().dump(),
             "seed " + std::to_string(seed) + " is not reproducible");
  }
  return c;
}

// ---------------------------------------------------------------- 6

ConversationSample combined_sample() {
  ConversationSample s;
  s.id = "pgh/L2/000";
  s.city_id = "pgh";
  s.location_id = "L2";
  s.split = Split::test;
  s.truth = {"Grant Street", "Downtown"};
  QuestionTurn t;
  t.qtype = QuestionType::generation;
  t.level = QuestionLevel::combined;
  t.question = "Where was this photo taken?";
  t.answer = "Grant Street, Downtown";
  s.turns = {t};
  return s;
}

Check metric_oracle() {
  Check c;
  const auto index = parse_locations(testkit::locations_jsonl(3000, 4, 40, 12, 8), "pgh");
  auto split = split_locations(index, {}, 8);
  for (auto& e : split.entries) e.second = Split::test;
  ForgeOptions opt;
  opt.seed = 8;
  opt.jobs = 2;
  const auto ds = forge_dataset(index, split, opt);
  const std::map<std::string, Gazetteer> gaz{{index.city_id, index.gazetteer}};
  const auto preds = mock_predictions(ds.samples, gaz, ErrorModel::uniform(0.25, 8), 2);
  const auto r = evaluate(ds.samples, preds, gaz).overall;
  c.expect(r.micro_overall().total >= 10000, "fewer than 10000 questions");
  const std::pair<QuestionLevel, QuestionType> cats[] = {
      {QuestionLevel::district, QuestionType::generation},
      {QuestionLevel::district, QuestionType::judgment},
      {QuestionLevel::district, QuestionType::multiple_choice},
      {QuestionLevel::street, QuestionType::generation},
      {QuestionLevel::street, QuestionType::judgment},
      {QuestionLevel::street, QuestionType::multiple_choice},
      {QuestionLevel::combined, QuestionType::generation}};
  for (const auto& [lvl, qt] : cats) {
    const auto& a = r.category(lvl, qt);
    const double p = a.percent().value_or(-1.0);
    c.expect(std::abs(p - 75.0) <= 1.5, std::string(to_string(lvl)) + "/" + to_string(qt) +
                                            " at " + std::to_string(p) + " over " +
                                            std::to_string(a.total));
  }

  const std::vector<ConversationSample> fixture{testkit::four_question_sample()};
  const auto fr = evaluate(fixture, testkit::four_question_predictions(),
                           gazetteers_from_samples(fixture)).overall;
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", fr.micro_overall().percent().value_or(-1));
  c.expect(std::string(buf) == "75.00", std::string("fixture micro overall ") + buf);

  const std::vector<ConversationSample> comb{combined_sample()};
  auto cg = gazetteers_from_samples(comb);
  cg["pgh"].add("Oakland", AddressLevel::district);
  cg["pgh"].add("Liberty Avenue", AddressLevel::street);
  auto score = [&](const std::string& answer) {
    const std::vector<PredictionRecord> p{{"pgh/L2/000", 1, answer}};
    return evaluate(comb, p, cg).overall.combined.correct;
  };
  c.expect(score("Grant Street in Oakland") == 0, "street-only combined answer scored");
  c.expect(score("Liberty Avenue, Downtown") == 0, "district-only combined answer scored");
  c.expect(score("Grant St, Downtown") == 1, "fully right combined answer not scored");
  return c;
}

// ---------------------------------------------------------------- 7

Check parser_fixture() {
  Check c;
  Gazetteer g("pgh");
  for (const char* s : {"Grant Street", "Liberty Avenue", "Penn Avenue", "Fifth Avenue",
                        "Forbes Avenue", "Penn", "Smithfield Street"}) {
    g.add(s, AddressLevel::street);
  }
  for (const char* d : {"Downtown", "Oakland", "Shadyside", "Strip District", "North Oakland"}) {
    g.add(d, AddressLevel::district);
  }
  using QT = QuestionType;
  using QL = QuestionLevel;
  struct Case {
    const char* raw;
    QT qtype;
    QL level;
    bool parsed;
    std::string expect;
  };
  const std::vector<Case> cases = {
      {"no, it is not", QT::judgment, QL::street, true, "no"},
      {"Yes.", QT::judgment, QL::district, true, "yes"},
      {"YES, this is Grant Street.", QT::judgment, QL::street, true, "yes"},
      {"I don't know", QT::judgment, QL::street, false, ""},
      {"Nope", QT::judgment, QL::street, false, ""},
      {"The answer is no; yes would be wrong", QT::judgment, QL::district, true, "no"},
      {"Not sure, but yes", QT::judgment, QL::street, true, "yes"},
      {"B) Fifth Avenue", QT::multiple_choice, QL::street, true, "B"},
      {"I think A", QT::multiple_choice, QL::street, true, "A"},
      {"The answer is (C)", QT::multiple_choice, QL::district, true, "C"},
      {"Answer: d", QT::multiple_choice, QL::district, true, "D"},
      {"option b", QT::multiple_choice, QL::street, true, "B"},
      {"a street downtown", QT::multiple_choice, QL::street, false, ""},
      {"(c) Liberty Avenue", QT::multiple_choice, QL::street, true, "C"},
      {"none of these", QT::multiple_choice, QL::district, false, ""},
      {"Definitely D.", QT::multiple_choice, QL::street, true, "D"},
      {"  grant st \n", QT::generation, QL::street, true, "grant st"},
      {"   ", QT::generation, QL::district, false, ""},
      {"It is Grant St in Downtown.", QT::generation, QL::combined, true, "Grant Street|Downtown"},
      {"Liberty Ave, somewhere", QT::generation, QL::combined, true, "Liberty Avenue|"},
  };
  c.expect(cases.size() == 20, "table size");
  for (const auto& k : cases) {
    const auto p = parse_answer(k.raw, k.qtype, k.level, g);
    std::string got;
    if (k.qtype == QT::judgment) {
      got = p.yes ? (*p.yes ? "yes" : "no") : "";
    } else if (k.qtype == QT::multiple_choice) {
      got = p.letter ? std::string(1, p.letter) : "";
    } else if (p.street || p.district) {
      got = p.street.value_or("") + "|" + p.district.value_or("");
    } else {
      got = p.text;
    }
    c.expect(p.parsed == k.parsed && got == k.expect,
             std::string("'") + k.raw + "' parsed as '" + got + "'");
  }
  return c;
}

// ---------------------------------------------------------------- 8

Check label_hygiene() {
  Check c;
  const auto dir = testkit::scratch_dir("accept-labels");
  const auto image = dir / "graft.png";
  write_image(image, testkit::noise_image(48, 48, 3));

  std::vector<AlignmentJob> jobs;
  for (int i = 0; i < 200; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "s%04d", i);
    jobs.push_back({id, image, {"Road " + std::to_string(i) + " Street", "Ward " + std::to_string(i % 7)}});
  }
  // Every tenth street is never named; every seventh reply echoes the marked hint.
  StubChatServer server([](const std::string& prompt, std::size_t) {
    StubChatServer::Reply r;
    r.delay = std::chrono::milliseconds(3);
    const auto label = parse_hint(prompt);
    if (!label) {
      r.status = 422;
      return r;
    }
    const int n = std::stoi(label->street.substr(5));
    if (n % 10 == 0) {
      r.content = "A busy corner in " + label->district + " with parked cars.";
    } else if (n % 7 == 0) {
      const auto open = prompt.find(kHintOpen);
      r.content = prompt.substr(open) + " So this is " + label->street + " in " + label->district + ".";
    } else {
      r.content = "The lane layout matches " + label->street + " in " + label->district + ".";
    }
    return r;
  });
  EndpointConfig cfg;
  cfg.base_url = server.base_url();
  cfg.max_in_flight = 6;
  cfg.backoff = std::chrono::milliseconds(1);
  cfg.timeout = std::chrono::milliseconds(5000);
  const auto report = generate_labels(cfg, jobs, {});
  c.expect(report.accepted.size() == 180, "accepted " + std::to_string(report.accepted.size()) + " of 200");
  c.expect(report.dropped == 20, "dropped " + std::to_string(report.dropped));
  c.expect(server.max_in_flight() <= 6, "in-flight peak " + std::to_string(server.max_in_flight()));

  for (std::size_t i = 0; i < report.accepted.size(); ++i) {
    const auto s = make_alignment_sample(report.prompts[i], report.accepted[i], "graft.png", "pgh");
    const auto text = to_json(s).dump();
    c.expect(text.find(kHintOpen) == std::string::npos && text.find(kHintClose) == std::string::npos,
             "hint marker in stage-1 sample " + s.id);
    c.expect(text.find(report.prompts[i].hint) == std::string::npos,
             "hint clause in stage-1 sample " + s.id);
  }
  fs::remove_all(dir);
  return c;
}

// ---------------------------------------------------------------- 9

Check analysis_oracle() {
  Check c;
  const std::vector<std::string> names{"Penn Avenue",  "Fifth Avenue",      "Liberty Avenue",
                                       "Forbes Avenue", "Grant Street",     "Smithfield Street",
                                       "Wood Street",  "Market Street"};
  Gazetteer g("pgh");
  for (const auto& n : names) g.add(n, AddressLevel::street);
  g.add("Downtown", AddressLevel::district);
  std::vector<Road> roads;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = 40.44 + 0.001 * static_cast<double>(i);
    roads.push_back({names[i], {{-80.0, y}, {-79.99, y}}});
  }
  Location truth;
  truth.id = "L1";
  truth.lat = 40.4405;
  truth.lon = -79.995;
  truth.address = {"Penn Avenue", "Downtown"};

  const std::vector<std::string> junk{"no idea", "", "Downtown", "a road"};
  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> responses;
    std::map<std::string, std::size_t> expect;
    std::size_t invalid = 0;
    const auto n = 1 + rng.uniform_index(200);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (rng.bernoulli(0.1)) {
        responses.push_back(junk[rng.uniform_index(junk.size())]);
        ++invalid;
      } else {
        const auto& name = names[std::min(rng.uniform_index(names.size()), rng.uniform_index(names.size()))];
        ++expect[name];
        responses.push_back(rng.bernoulli(0.5) ? name : "This place is on " + name + ".");
      }
    }
    const auto f = tally(responses, g);
    std::size_t sum = f.invalid;
    for (const auto& [k, v] : f.counts) sum += v;
    c.expect(sum == n && f.total == n && f.invalid == invalid && f.counts == expect,
             "tally conservation in trial " + std::to_string(trial));

    std::vector<std::pair<std::string, std::size_t>> sorted(expect.begin(), expect.end());
    std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    sorted.resize(std::min<std::size_t>(sorted.size(), 3));
    const auto top = topk(f, 3);
    bool same = top.size() == sorted.size();
    for (std::size_t i = 0; same && i < top.size(); ++i) {
      same = top[i].name == sorted[i].first && top[i].count == sorted[i].second;
    }
    c.expect(same, "top-3 differs from the sort oracle in trial " + std::to_string(trial));

    if (trial % 25 == 0 && !top.empty()) {
      const auto doc = emit_overlay(f, roads, truth);
      const auto j = json::parse(doc.geojson.dump());
      c.expect(validate_geojson(j).empty(), "overlay is not valid GeoJSON");
      const auto& feats = j["features"];
      for (std::size_t i = 1; i < feats.size(); ++i) {
        c.expect(feats[i]["properties"]["color"] == kRankColors[i - 1],
                 "rank " + std::to_string(i) + " colour");
      }
    }
  }
  c.expect(kRankColors[0] == "red" && kRankColors[1] == "orange" && kRankColors[2] == "yellow",
           "rank colour table");
  return c;
}

// ---------------------------------------------------------------- 10

int invoke(const std::vector<std::string>& args, std::string& log) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  log += out.str() + err.str();
  return code;
}

Check end_to_end() {
  Check c;
  const auto dir = testkit::scratch_dir("accept-e2e");
  const auto city = testkit::make_city(dir / "city", {.locations = 20, .views = 4, .street_w = 200, .street_h = 100});
  const auto loc = city.locations.string();
  std::string log;
  auto step = [&](const std::vector<std::string>& args) {
    if (!c.ok) return;
    const int code = invoke(args, log);
    c.expect(code == 0, args.front() + " exited " + std::to_string(code) + ": " + log);
  };
  step({"tiles", "--locations", loc, "--roads", city.roads.string(), "--tiles", city.tiles.string(),
        "--city", "pgh", "--annotate", "--out", (dir / "sat").string()});
  step({"graft", "--locations", loc, "--satellite", (dir / "sat").string(), "--delta", "0.5",
        "--out", (dir / "graft").string()});
  step({"gen-qa", "--locations", loc, "--city", "pgh", "--profile", "train", "--eval-profile",
        "test", "--out", (dir / "qa").string()});
  step({"mock", "--gt", (dir / "qa" / "test.jsonl").string(), "--error-rate", "0.25", "--seed", "3",
        "--out", (dir / "pred" / "pred.jsonl").string()});
  step({"eval", "--pred", (dir / "pred" / "pred.jsonl").string(), "--gt",
        (dir / "qa" / "test.jsonl").string()});
  if (!c.ok) return c;

  std::size_t grafted = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "graft")) {
    if (e.path().extension() == ".png") ++grafted;
  }
  c.expect(grafted == 80, "grafted images " + std::to_string(grafted));

  std::ifstream in(dir / "pred" / "pred.report.json");
  const auto report = metrics_from_json(json::parse(in)["overall"]);
  const std::optional<double> columns[] = {
      report.district_generation.percent(), report.district_judgment.percent(),
      report.district_choice.percent(),     report.macro_district(),
      report.street_generation.percent(),   report.street_judgment.percent(),
      report.street_choice.percent(),       report.macro_street(),
      report.macro_overall(),               report.combined.percent()};
  int populated = 0;
  for (const auto& v : columns) populated += v.has_value();
  c.expect(populated == 10, std::to_string(populated) + " of 10 report columns populated");
  c.expect(log.find(" -\n") == std::string::npos, "rendered report has an empty column");
  fs::remove_all(dir);
  return c;
}

}  // namespace

int main() {
  struct Criterion {
    int n;
    const char* name;
    double budget_s;  // 0: no time bound
    std::function<Check()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "graft-mask-exactness", 30, graft_mask_exactness},
      {2, "graft-geometry", 0, graft_geometry},
      {3, "projection-round-trip", 0, projection_and_mosaic},
      {4, "dataset-arithmetic", 120, dataset_arithmetic},
      {5, "split-hygiene", 0, split_hygiene},
      {6, "metric-oracle", 0, metric_oracle},
      {7, "parser-fixture", 0, parser_fixture},
      {8, "label-hygiene", 0, label_hygiene},
      {9, "analysis", 0, analysis_oracle},
      {10, "end-to-end", 180, end_to_end},
  };
  int failures = 0;
  for (const auto& k : criteria) {
    const auto t0 = Clock::now();
    Check c;
    try {
      c = k.run();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (c.ok && k.budget_s > 0 && secs >= k.budget_s) {
      c.ok = false;
      c.detail = "took " + std::to_string(secs) + " s";
    }
    char timing[32];
    std::snprintf(timing, sizeof timing, "%.1fs", secs);
    std::cout << (c.ok ? "PASS " : "FAIL ") << k.n << " " << k.name << " (" << timing << ")";
    if (!c.ok) std::cout << ": " << c.detail;
    std::cout << std::endl;
    failures += !c.ok;
  }
  return failures == 0 ? 0 : 1;
}
