#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "addrforge/cli.hpp"
#include "addrforge/raster.hpp"
#include "support/fixtures.hpp"
#include "support/synthetic_city.hpp"

using namespace addrforge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json load(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

}  // namespace

TEST(Cli, GraftSingleImageAndRerun) {
  const auto dir = testkit::scratch_dir("cli-graft");
  write_image(dir / "sat.png", testkit::noise_image(640, 640, 1));
  write_image(dir / "street.png", testkit::noise_image(200, 100, 2));
  const std::vector<std::string> args = {"graft", "--satellite-image", (dir / "sat.png").string(),
                                         "--street-image", (dir / "street.png").string(),
                                         "--out", (dir / "out").string()};
  auto r = invoke(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("graft: 1 images"), std::string::npos);
  const auto img = read_image(dir / "out" / "street_graft.png");
  EXPECT_EQ(img.width(), 336);
  EXPECT_EQ(img.height(), 336);
  EXPECT_TRUE(fs::exists(dir / "out" / "graft.jsonl"));
  EXPECT_EQ(load(dir / "out" / "run-graft.json")["command"], "graft");

  r = invoke(args);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("graft: up to date"), std::string::npos);

  auto forced = args;
  forced.push_back("--force");
  r = invoke(forced);
  EXPECT_NE(r.out.find("graft: 1 images"), std::string::npos);

  auto changed = args;
  changed.insert(changed.end(), {"--delta", "0.3"});
  r = invoke(changed);
  EXPECT_NE(r.out.find("graft: 1 images"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, EvalFixture) {
  const auto dir = testkit::scratch_dir("cli-eval");
  testkit::write_four_question_fixture(dir);
  const auto r = invoke({"eval", "--pred", (dir / "pred.jsonl").string(), "--gt",
                         (dir / "gt.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("75.00"), std::string::npos);
  const auto report = load(dir / "pred.report.json");
  EXPECT_TRUE(report.contains("overall"));
  EXPECT_TRUE(fs::exists(dir / "run-eval.json"));
  fs::remove_all(dir);
}

TEST(Cli, GenQaCounts) {
  const auto dir = testkit::scratch_dir("cli-genqa");
  {
    std::ofstream f(dir / "locations.jsonl");
    f << testkit::locations_jsonl(100, 24, 30, 8, 3);
  }
  const auto r = invoke({"gen-qa", "--locations", (dir / "locations.jsonl").string(), "--city",
                         "pgh", "--out", (dir / "qa").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto run = load(dir / "qa" / "run-gen-qa.json");
  const auto& train = run["results"]["train"];
  EXPECT_EQ(train["questions"].get<int>(), 3 * train["images"].get<int>());
  EXPECT_EQ(train["locations"].get<int>(), 70);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "gazetteer.json", "split.json"}) {
    EXPECT_TRUE(fs::exists(dir / "qa" / f)) << f;
  }
  fs::remove_all(dir);
}

TEST(Cli, ConfigFile) {
  const auto dir = testkit::scratch_dir("cli-config");
  testkit::write_four_question_fixture(dir);
  {
    std::ofstream f(dir / "eval.toml");
    f << "[eval]\nasd = \"paired\"\n";
  }
  const auto r = invoke({"--config", (dir / "eval.toml").string(), "eval", "--pred",
                         (dir / "pred.jsonl").string(), "--gt", (dir / "gt.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load(dir / "pred.report.json")["asd_source"], "paired");
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(invoke({}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"eval", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"--help"}).code, cli::kExitOk);

  const auto missing = invoke({"eval", "--pred", "/nonexistent/p.jsonl", "--gt", "/nonexistent/g.jsonl"});
  EXPECT_EQ(missing.code, cli::kExitFailure);
  const auto err = json::parse(missing.err.substr(0, missing.err.find('\n')));
  EXPECT_EQ(err["error"], "io");
  EXPECT_TRUE(err.contains("path"));

  const auto dir = testkit::scratch_dir("cli-exit");
  const auto city = testkit::make_city(dir, {.locations = 2, .views = 1});
  const auto t = invoke({"tiles", "--locations", city.locations.string(), "--tiles",
                         city.tiles.string(), "--out", (dir / "sat").string()});
  EXPECT_EQ(t.code, cli::kExitUsage);
  const auto bad_delta = invoke({"graft", "--satellite-image", "a.png", "--street-image", "b.png",
                                 "--delta", "0.9", "--out", (dir / "g").string()});
  EXPECT_EQ(bad_delta.code, cli::kExitUsage);
  fs::remove_all(dir);
}
