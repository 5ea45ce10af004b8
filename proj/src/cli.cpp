#include "addrforge/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "addrforge/analysis.hpp"
#include "addrforge/errors.hpp"
#include "addrforge/eval.hpp"
#include "addrforge/geo_model.hpp"
#include "addrforge/grafting.hpp"
#include "addrforge/labelgen.hpp"
#include "addrforge/mock_responder.hpp"
#include "addrforge/parallel.hpp"
#include "addrforge/qa_forge.hpp"
#include "addrforge/raster.hpp"
#include "addrforge/tiling.hpp"

namespace addrforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- helpers

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError(path, "write failed");
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IoError(path, std::string("invalid JSON: ") + e.what());
  }
}

std::string file_digest(const fs::path& path) { return sha256_hex(read_file(path)); }

// File-system friendly form of an opaque id.
std::string safe_name(std::string_view id) {
  std::string out;
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    out.push_back(ok ? c : '_');
  }
  if (out.empty() || out == "." || out == "..") out = "_" + out;
  return out;
}

std::string generic(const fs::path& p) { return p.generic_string(); }

std::string relative_ref(const fs::path& target, const fs::path& base) {
  const auto rel = fs::absolute(target).lexically_normal().lexically_relative(
      fs::absolute(base).lexically_normal());
  return rel.empty() ? generic(target) : generic(rel);
}

// Run manifest: command, resolved configuration, its hash and the seeds.
struct RunManifest {
  std::string command;
  ordered_json config;
  std::vector<std::uint64_t> seeds;

  std::string hash() const {
    ordered_json j;
    j["command"] = command;
    j["config"] = config;
    return sha256_hex(j.dump());
  }
};

fs::path run_manifest_path(const fs::path& dir, const std::string& command) {
  return dir / ("run-" + command + ".json");
}

bool up_to_date(const fs::path& dir, const RunManifest& run) {
  const auto path = run_manifest_path(dir, run.command);
  if (!fs::exists(path)) return false;
  try {
    const auto j = json::parse(read_file(path));
    if (j.value("config_hash", "") != run.hash()) return false;
    for (const auto& o : j.value("outputs", json::array())) {
      if (!fs::exists(dir / o.get<std::string>())) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

void write_run_manifest(const fs::path& dir, const RunManifest& run,
                        const std::vector<std::string>& outputs, ordered_json results) {
  ordered_json j;
  j["command"] = run.command;
  j["config_hash"] = run.hash();
  j["seeds"] = run.seeds;
  j["config"] = run.config;
  j["outputs"] = outputs;
  j["results"] = std::move(results);
  j["generated_at"] = manifest_timestamp();
  write_file(run_manifest_path(dir, run.command), j.dump(2) + "\n");
}

std::map<std::string, Gazetteer> read_gazetteers(const fs::path& path) {
  const auto j = read_json(path);
  std::map<std::string, Gazetteer> out;
  try {
    for (const auto& [city, entry] : j.at("cities").items()) {
      Gazetteer g(city);
      for (const auto& s : entry.at("streets")) g.add(s.get<std::string>(), AddressLevel::street);
      for (const auto& d : entry.at("districts")) {
        g.add(d.get<std::string>(), AddressLevel::district);
      }
      out.emplace(city, std::move(g));
    }
  } catch (const json::exception& e) {
    throw IoError(path, std::string("bad gazetteer file: ") + e.what());
  }
  return out;
}

ordered_json gazetteers_json(const std::map<std::string, Gazetteer>& gazetteers) {
  ordered_json cities = ordered_json::object();
  for (const auto& [city, g] : gazetteers) {
    cities[city] = {{"streets", g.names(AddressLevel::street)},
                    {"districts", g.names(AddressLevel::district)}};
  }
  return {{"cities", cities}};
}

std::vector<ConversationSample> read_samples(const fs::path& path) {
  std::vector<ConversationSample> out;
  std::size_t line = 0;
  for (const auto& j : load_conversation_jsonl(path)) {
    ++line;
    try {
      out.push_back(sample_from_json(j));
    } catch (const InputError& e) {
      throw InputError(path.string() + ": " + e.what(), line);
    }
  }
  return out;
}

// gazetteer.json beside the ground truth when present, otherwise the names in the samples.
std::map<std::string, Gazetteer> gazetteers_for(const std::optional<fs::path>& explicit_path,
                                                const fs::path& gt,
                                                std::span<const ConversationSample> samples) {
  if (explicit_path) return read_gazetteers(*explicit_path);
  const auto beside = gt.parent_path() / "gazetteer.json";
  if (fs::exists(beside)) return read_gazetteers(beside);
  return gazetteers_from_samples(samples);
}

CityIndex load_city(const fs::path& locations, const std::optional<fs::path>& roads,
                    const std::string& city, std::ostream& err) {
  auto index = ingest_locations(locations, city);
  if (roads) {
    auto r = ingest_roads(*roads);
    if (r.skipped_unnamed + r.skipped_geometry > 0) {
      err << "warning: " << roads->string() << ": skipped " << r.skipped_unnamed
          << " unnamed and " << r.skipped_geometry << " non-LineString features\n";
    }
    index.roads = std::move(r.roads);
  }
  return index;
}

SplitFractions parse_fractions(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("--split expects three comma-separated fractions, got '" + text + "'");
    }
  }
  if (v.size() != 3) throw UsageError("--split expects three fractions, got '" + text + "'");
  return {v[0], v[1], v[2]};
}

unsigned default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------- options

struct Common {
  fs::path out;
  unsigned jobs = default_jobs();
  bool force = false;
};

void add_out(CLI::App* sub, Common& c, bool required = true) {
  auto* o = sub->add_option("--out,-o", c.out, "Output directory");
  if (required) o->required();
}

void add_jobs(CLI::App* sub, Common& c) {
  sub->add_option("--jobs,-j", c.jobs, "Worker threads")->check(CLI::Range(1u, 1024u));
}

void add_force(CLI::App* sub, Common& c) {
  sub->add_flag("--force", c.force, "Rebuild even when the run manifest is current");
}

struct IngestOpts {
  Common c;
  fs::path locations;
  std::optional<fs::path> roads;
  std::string city = "city";
};

struct TilesOpts {
  Common c;
  fs::path locations;
  std::optional<fs::path> roads;
  fs::path tiles;
  std::string city = "city";
  int zoom = 17;
  int window = 640;
  bool annotate = true;
  int font_size = 14;
  int max_labels = 8;
};

struct GraftOpts {
  Common c;
  std::optional<fs::path> locations;
  std::optional<fs::path> satellite_dir;
  std::optional<fs::path> satellite_image;
  std::optional<fs::path> street_image;
  std::string city = "city";
  double delta = 0.5;
  std::string mode = "grafted";
  int target = 336;
  bool wide_delta = false;
};

struct GenQaOpts {
  Common c;
  std::optional<fs::path> locations;
  std::vector<fs::path> merge;
  std::string city = "city";
  std::string profile = "train";
  std::string eval_profile = "test";
  std::string split = "0.7,0.2,0.1";
  std::uint64_t seed = 0;
  double view_frac = 1.0;
  double loc_frac = 1.0;
  std::optional<fs::path> image_root;
  std::optional<fs::path> external;
  std::string mix_ratio = "1:1";
};

struct GenLabelsOpts {
  Common c;
  fs::path graft_dir;
  fs::path locations;
  std::string city = "city";
  EndpointConfig endpoint;
  int timeout_ms = 60000;
  int backoff_ms = 500;
};

struct EvalOpts {
  fs::path pred;
  fs::path gt;
  std::optional<fs::path> gazetteer;
  std::optional<fs::path> report;
  std::string asd = "combined";
};

struct AnalyzeOpts {
  Common c;
  fs::path responses;
  fs::path locations;
  std::optional<fs::path> roads;
  std::string city = "city";
  int k = 3;
};

struct MockOpts {
  Common c;
  std::optional<fs::path> gt;
  std::optional<fs::path> gazetteer;
  std::optional<fs::path> out_file;
  double error_rate = 0.0;
  std::vector<std::string> rates;
  std::uint64_t seed = 0;
  bool serve = false;
  double serve_seconds = 0.0;
};

// ---------------------------------------------------------------- ingest

int cmd_ingest(const IngestOpts& o, std::ostream& out, std::ostream& err) {
  RunManifest run{"ingest", {}, {}};
  run.config = {{"locations", generic(o.locations)},
                {"locations_sha256", file_digest(o.locations)},
                {"roads", o.roads ? generic(*o.roads) : ""},
                {"roads_sha256", o.roads ? file_digest(*o.roads) : ""},
                {"city", o.city}};
  if (!o.c.force && up_to_date(o.c.out, run)) {
    out << "ingest: up to date (" << o.c.out.string() << ")\n";
    return kExitOk;
  }
  auto index = ingest_locations(o.locations, o.city);
  ordered_json summary;
  summary["city"] = o.city;
  summary["locations"] = index.locations.size();
  summary["images"] = index.image_count();
  summary["streets"] = index.gazetteer.names(AddressLevel::street);
  summary["districts"] = index.gazetteer.names(AddressLevel::district);
  if (o.roads) {
    const auto r = ingest_roads(*o.roads);
    summary["roads"] = r.roads.size();
    summary["skipped_unnamed"] = r.skipped_unnamed;
    summary["skipped_geometry"] = r.skipped_geometry;
    if (r.skipped_unnamed + r.skipped_geometry > 0) {
      err << "warning: skipped " << r.skipped_unnamed << " unnamed and " << r.skipped_geometry
          << " non-LineString road features\n";
    }
  }
  write_file(o.c.out / "ingest.json", summary.dump(2) + "\n");
  write_file(o.c.out / "gazetteer.json",
             gazetteers_json({{o.city, index.gazetteer}}).dump(2) + "\n");
  write_run_manifest(o.c.out, run, {"ingest.json", "gazetteer.json"},
                     {{"locations", index.locations.size()}, {"images", index.image_count()}});
  out << "ingest: " << index.locations.size() << " locations, " << index.image_count()
      << " images, " << index.gazetteer.size(AddressLevel::street) << " streets, "
      << index.gazetteer.size(AddressLevel::district) << " districts\n";
  return kExitOk;
}

// ---------------------------------------------------------------- tiles

int cmd_tiles(const TilesOpts& o, std::ostream& out, std::ostream& err) {
  if (o.annotate && !o.roads) throw UsageError("tiles: --annotate needs --roads (or pass --no-annotate)");
  if (o.window <= 0) throw UsageError("tiles: --window must be positive");
  if (o.zoom < 0 || o.zoom > kMaxZoom) throw UsageError("tiles: --zoom out of range");
  if (!fs::is_directory(o.tiles)) throw IoError(o.tiles, "tile directory not found");

  RunManifest run{"tiles", {}, {}};
  run.config = {{"locations", generic(o.locations)},
                {"locations_sha256", file_digest(o.locations)},
                {"roads_sha256", o.roads ? file_digest(*o.roads) : ""},
                {"tiles", generic(o.tiles)},
                {"zoom", o.zoom},
                {"window_px", o.window},
                {"annotate", o.annotate},
                {"font_size_px", o.font_size},
                {"max_labels", o.max_labels}};
  if (!o.c.force && up_to_date(o.c.out, run)) {
    out << "tiles: up to date (" << o.c.out.string() << ")\n";
    return kExitOk;
  }

  const auto index = load_city(o.locations, o.roads, o.city, err);
  const TileStore store(o.tiles, o.zoom);
  AnnotationStyle style;
  style.enabled = o.annotate;
  style.font_size_px = o.font_size;
  style.max_labels = o.max_labels;

  std::set<std::string> names;
  for (const auto& loc : index.locations) {
    if (!names.insert(safe_name(loc.id)).second) {
      throw InputError("location ids '" + loc.id + "' and another map to the same file name");
    }
  }

  std::vector<ordered_json> lines(index.locations.size());
  parallel_for(index.locations.size(), o.c.jobs, [&](std::size_t i) {
    const auto& loc = index.locations[i];
    SatelliteWindow window;
    try {
      window = assemble_window({loc.lon, loc.lat}, o.zoom, o.window, store);
    } catch (const ForgeError& e) {
      throw ForgeError("location " + loc.id + ": " + e.what());
    }
    auto annotated = annotate_streets(window, index.roads, style);
    const auto file = safe_name(loc.id) + ".png";
    write_image(o.c.out / file, annotated.image);
    ordered_json j;
    j["location_id"] = loc.id;
    j["image"] = file;
    j["origin"] = {window.origin_x, window.origin_y};
    j["missing_tiles"] = window.missing_tiles;
    j["total_tiles"] = window.total_tiles;
    auto labels = ordered_json::array();
    for (const auto& l : annotated.labels) labels.push_back(l.text);
    j["labels"] = std::move(labels);
    lines[i] = std::move(j);
  });

  std::string jsonl;
  std::size_t missing = 0;
  for (const auto& j : lines) {
    jsonl += j.dump() + "\n";
    missing += j["missing_tiles"].get<std::size_t>();
  }
  write_file(o.c.out / "tiles.jsonl", jsonl);
  if (missing > 0) err << "warning: " << missing << " tiles missing, filled with mid-gray\n";
  write_run_manifest(o.c.out, run, {"tiles.jsonl"},
                     {{"windows", lines.size()}, {"missing_tiles", missing}});
  out << "tiles: " << lines.size() << " windows -> " << o.c.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- graft

GraftSpec graft_spec(const GraftOpts& o) {
  GraftSpec spec;
  try {
    spec.mode = parse_graft_mode(o.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  spec.delta = o.delta;
  spec.target_side = o.target;
  spec.wide_delta = o.wide_delta;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return spec;
}

Raster to_target(const Raster& satellite, int side) {
  if (satellite.width() != satellite.height()) {
    throw InputError("satellite window is not square (" + std::to_string(satellite.width()) + "x" +
                     std::to_string(satellite.height()) + ")");
  }
  return resize_area(satellite, side, side);
}

std::vector<std::string> write_graft(const GraftResult& r, const fs::path& dir,
                                     const std::string& stem) {
  if (r.second) {
    write_image(dir / (stem + "_sat.png"), r.image);
    write_image(dir / (stem + "_street.png"), *r.second);
    return {stem + "_sat.png", stem + "_street.png"};
  }
  write_image(dir / (stem + ".png"), r.image);
  return {stem + ".png"};
}

int cmd_graft(const GraftOpts& o, std::ostream& out, std::ostream& err) {
  const auto spec = graft_spec(o);
  const bool single = o.satellite_image || o.street_image;
  if (single && !(o.satellite_image && o.street_image)) {
    throw UsageError("graft: --satellite-image and --street-image go together");
  }
  if (!single && !(o.locations && o.satellite_dir)) {
    throw UsageError("graft: give --locations with --satellite, or --satellite-image with --street-image");
  }

  RunManifest run{"graft", {}, {}};
  run.config = {{"mode", to_string(spec.mode)},
                {"delta", spec.delta},
                {"target_side", spec.target_side},
                {"wide_delta", spec.wide_delta}};
  if (single) {
    run.config["satellite_sha256"] = file_digest(*o.satellite_image);
    run.config["street_sha256"] = file_digest(*o.street_image);
  } else {
    run.config["locations_sha256"] = file_digest(*o.locations);
    run.config["satellite"] = generic(*o.satellite_dir);
    const auto tiles_manifest = *o.satellite_dir / "tiles.jsonl";
    run.config["tiles_sha256"] = fs::exists(tiles_manifest) ? file_digest(tiles_manifest) : "";
  }
  if (!o.c.force && up_to_date(o.c.out, run)) {
    out << "graft: up to date (" << o.c.out.string() << ")\n";
    return kExitOk;
  }

  std::vector<ordered_json> lines;
  if (single) {
    const auto sat = to_target(read_image(*o.satellite_image), spec.target_side);
    const auto result = graft(sat, read_image(*o.street_image), spec);
    ordered_json j;
    j["satellite"] = generic(*o.satellite_image);
    j["street"] = generic(*o.street_image);
    j["delta"] = spec.delta;
    j["mode"] = to_string(spec.mode);
    j["images"] = write_graft(result, o.c.out, o.street_image->stem().string() + "_graft");
    lines.push_back(std::move(j));
  } else {
    const auto index = load_city(*o.locations, std::nullopt, o.city, err);
    std::vector<std::vector<ordered_json>> per_loc(index.locations.size());
    parallel_for(index.locations.size(), o.c.jobs, [&](std::size_t i) {
      const auto& loc = index.locations[i];
      const auto name = safe_name(loc.id);
      const auto sat = to_target(read_image(*o.satellite_dir / (name + ".png")), spec.target_side);
      for (const auto& view : loc.views) {
        const auto result = graft(sat, read_image(view.path), spec);
        const auto stem = format_heading(view.heading);
        auto files = write_graft(result, o.c.out / name, stem);
        for (auto& f : files) f = name + "/" + f;
        ordered_json j;
        j["location_id"] = loc.id;
        j["heading"] = view.heading;
        j["delta"] = spec.delta;
        j["mode"] = to_string(spec.mode);
        j["images"] = std::move(files);
        if (spec.mode == GraftMode::grafted) {
          const auto& r = result.geometry.rect;
          j["rect"] = {r.x0, r.y0, r.x1, r.y1};
        }
        per_loc[i].push_back(std::move(j));
      }
    });
    for (auto& v : per_loc) std::move(v.begin(), v.end(), std::back_inserter(lines));
  }

  std::string jsonl;
  for (const auto& j : lines) jsonl += j.dump() + "\n";
  write_file(o.c.out / "graft.jsonl", jsonl);
  write_run_manifest(o.c.out, run, {"graft.jsonl"}, {{"images", lines.size()}});
  out << "graft: " << lines.size() << " images (" << to_string(spec.mode) << ", delta "
      << spec.delta << ") -> " << o.c.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- gen-qa

int cmd_gen_qa(const GenQaOpts& o, std::ostream& out, std::ostream& err) {
  const bool merging = !o.merge.empty();
  if (merging == o.locations.has_value()) {
    throw UsageError("gen-qa: give either --locations or one or more --merge directories");
  }
  MixRatio ratio;
  if (o.external) {
    try {
      ratio = parse_mix_ratio(o.mix_ratio);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }

  RunManifest run{"gen-qa", {}, {o.seed}};
  run.config = {{"city", o.city},
                {"profile", o.profile},
                {"eval_profile", o.eval_profile},
                {"split", o.split},
                {"seed", o.seed},
                {"view_frac", o.view_frac},
                {"loc_frac", o.loc_frac},
                {"image_root", o.image_root ? generic(*o.image_root) : ""},
                {"external_sha256", o.external ? file_digest(*o.external) : ""},
                {"mix_ratio", o.external ? o.mix_ratio : ""}};
  if (merging) {
    auto parts = ordered_json::array();
    for (const auto& d : o.merge) {
      parts.push_back({{"dir", generic(d)}, {"manifest_sha256", file_digest(d / "manifest.json")}});
    }
    run.config["merge"] = std::move(parts);
  } else {
    run.config["locations_sha256"] = file_digest(*o.locations);
  }
  if (!o.c.force && up_to_date(o.c.out, run)) {
    out << "gen-qa: up to date (" << o.c.out.string() << ")\n";
    return kExitOk;
  }

  Dataset ds;
  std::map<std::string, Gazetteer> gazetteers;
  std::vector<std::string> outputs = {"manifest.json", "gazetteer.json", "training_config.json"};
  ordered_json split_doc;
  if (merging) {
    std::vector<Dataset> parts;
    for (const auto& d : o.merge) {
      parts.push_back(read_dataset(d));
      const auto gpath = d / "gazetteer.json";
      auto g = fs::exists(gpath) ? read_gazetteers(gpath) : gazetteers_from_samples(parts.back().samples);
      for (auto& [city, gaz] : g) {
        if (!gazetteers.emplace(city, std::move(gaz)).second) {
          throw InputError("city id '" + city + "' appears in more than one merged dataset");
        }
      }
    }
    ds = merge_cities(parts);
  } else {
    QaProfile train_profile, eval_profile;
    try {
      train_profile = QaProfile::by_name(o.profile);
      eval_profile = QaProfile::by_name(o.eval_profile);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const auto fractions = parse_fractions(o.split);
    auto index = ingest_locations(*o.locations, o.city);
    SplitAssignment split;
    try {
      split = split_locations(index, fractions, o.seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    split_doc = split.to_json();
    auto selection = downsample(index, split, {o.view_frac, o.loc_frac}, o.seed);

    ForgeOptions opts;
    opts.train_profile = train_profile;
    opts.eval_profile = eval_profile;
    opts.seed = o.seed;
    opts.jobs = o.c.jobs;
    const fs::path root = o.image_root ? *o.image_root : o.locations->parent_path();
    opts.image_ref = [root](const Location&, const ViewImage& v) {
      return relative_ref(v.path, root.empty() ? fs::path(".") : root);
    };
    ds = forge_dataset(selection.index, selection.split, opts);
    gazetteers.emplace(o.city, index.gazetteer);
  }

  write_dataset(o.c.out, ds);
  for (auto s : kAllSplits) {
    if (fs::exists(o.c.out / (std::string(to_string(s)) + ".jsonl"))) {
      outputs.push_back(std::string(to_string(s)) + ".jsonl");
    }
  }
  write_file(o.c.out / "gazetteer.json", gazetteers_json(gazetteers).dump(2) + "\n");
  write_file(o.c.out / "training_config.json", training_config_manifest().dump(2) + "\n");
  if (!split_doc.is_null()) {
    write_file(o.c.out / "split.json", split_doc.dump(2) + "\n");
    outputs.push_back("split.json");
  }

  ordered_json results;
  for (const auto& [split, c] : ds.manifest.counts) {
    results[split] = {{"locations", c.locations}, {"images", c.images}, {"questions", c.questions}};
  }
  if (o.external) {
    std::vector<json> task;
    for (const auto& s : ds.samples) {
      if (s.split == Split::train) task.push_back(json(to_json(s)));
    }
    const auto external = load_conversation_jsonl(*o.external);
    const auto mixed = mix_external(task, external, ratio, derive_seed(o.seed, {"mix"}));
    std::string jsonl;
    for (const auto& j : mixed) jsonl += j.dump() + "\n";
    write_file(o.c.out / "train_mixed.jsonl", jsonl);
    outputs.push_back("train_mixed.jsonl");
    results["mixed"] = {{"task", task.size()}, {"external", external.size()}, {"total", mixed.size()}};
  }
  write_run_manifest(o.c.out, run, outputs, results);

  for (const auto& [split, c] : ds.manifest.counts) {
    out << "gen-qa: " << split << ": " << c.locations << " locations, " << c.images << " images, "
        << c.questions << " questions\n";
  }
  (void)err;
  return kExitOk;
}

// ---------------------------------------------------------------- gen-labels

std::set<std::string, std::less<>> existing_labels(const fs::path& path,
                                                   std::vector<AlignmentLabel>& labels) {
  std::set<std::string, std::less<>> done;
  if (!fs::exists(path)) return done;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto label = alignment_label_from_json(json::parse(line));
      if (done.insert(label.sample_id).second) labels.push_back(std::move(label));
    } catch (const json::exception& e) {
      throw InputError(path.string() + ": " + e.what(), n);
    }
  }
  return done;
}

int cmd_gen_labels(const GenLabelsOpts& o, std::ostream& out, std::ostream& err) {
  auto config = o.endpoint;
  config.timeout = std::chrono::milliseconds(o.timeout_ms);
  config.backoff = std::chrono::milliseconds(o.backoff_ms);
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const auto index = ingest_locations(o.locations, o.city);
  const auto graft_manifest = o.graft_dir / "graft.jsonl";
  std::vector<AlignmentJob> jobs;
  std::map<std::string, std::string> image_refs;
  {
    std::ifstream in(graft_manifest, std::ios::binary);
    if (!in) throw IoError(graft_manifest, "cannot open graft manifest");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = json::parse(line);
        if (j.at("mode").get<std::string>() != "grafted") {
          throw InputError("alignment labels need grafted images, found mode " +
                               j.at("mode").get<std::string>(),
                           n);
        }
        const auto loc_id = j.at("location_id").get<std::string>();
        const auto* loc = index.find(loc_id);
        if (loc == nullptr) throw InputError("unknown location " + loc_id, n);
        const auto ref = j.at("images").at(0).get<std::string>();
        const auto id = o.city + "/" + loc_id + "/" + format_heading(j.at("heading").get<double>());
        jobs.push_back({id, o.graft_dir / ref, loc->address});
        image_refs[id] = ref;
      } catch (const json::exception& e) {
        throw InputError(graft_manifest.string() + ": " + e.what(), n);
      }
    }
  }

  RunManifest run{"gen-labels", {}, {}};
  run.config = {{"graft_sha256", file_digest(graft_manifest)},
                {"locations_sha256", file_digest(o.locations)},
                {"city", o.city},
                {"base_url", config.base_url},
                {"model", config.model},
                {"temperature", config.temperature},
                {"max_tokens", config.max_tokens}};

  const auto labels_path = o.c.out / "labels.jsonl";
  std::vector<AlignmentLabel> labels;
  const auto done = existing_labels(labels_path, labels);
  AuditLog audit(o.c.out / "audit.jsonl");
  const auto report = generate_labels(config, jobs, done, &audit);

  labels.insert(labels.end(), report.accepted.begin(), report.accepted.end());
  std::sort(labels.begin(), labels.end(),
            [](const AlignmentLabel& a, const AlignmentLabel& b) { return a.sample_id < b.sample_id; });
  std::string labels_jsonl, stage1;
  std::map<std::string, const AlignmentJob*> by_id;
  for (const auto& j : jobs) by_id[j.sample_id] = &j;
  std::size_t orphaned = 0;
  for (const auto& label : labels) {
    labels_jsonl += to_json(label).dump() + "\n";
    auto it = by_id.find(label.sample_id);
    if (it == by_id.end()) {
      ++orphaned;
      continue;
    }
    const auto prompt = build_alignment_prompt(*it->second);
    const auto sample = make_alignment_sample(prompt, label, image_refs[label.sample_id], o.city);
    stage1 += to_json(sample).dump() + "\n";
  }
  write_file(labels_path, labels_jsonl);
  write_file(o.c.out / "stage1.jsonl", stage1);
  if (orphaned > 0) err << "warning: " << orphaned << " stored labels have no grafted image\n";

  ordered_json results = {{"jobs", jobs.size()},
                          {"skipped_existing", report.skipped_existing},
                          {"requested", report.requested},
                          {"accepted", report.accepted.size()},
                          {"regenerated", report.regenerated},
                          {"dropped", report.dropped},
                          {"failed", report.failed},
                          {"stored", labels.size()}};
  write_run_manifest(o.c.out, run, {"labels.jsonl", "stage1.jsonl", "audit.jsonl"}, results);
  out << "gen-labels: " << report.accepted.size() << " accepted, " << report.dropped
      << " dropped, " << report.failed << " failed, " << report.skipped_existing
      << " already labelled\n";
  return report.failed > 0 ? kExitFailure : kExitOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const EvalOpts& o, std::ostream& out, std::ostream& err) {
  AsdSource asd;
  if (o.asd == "combined") {
    asd = AsdSource::combined_turn;
  } else if (o.asd == "paired") {
    asd = AsdSource::paired_generation;
  } else {
    throw UsageError("--asd must be 'combined' or 'paired'");
  }
  const auto gt = read_samples(o.gt);
  const auto preds = read_predictions(o.pred);
  const auto gazetteers = gazetteers_for(o.gazetteer, o.gt, gt);
  const auto result = evaluate(gt, preds, gazetteers, asd);

  out << render_report(result.overall);
  if (result.per_city.size() > 1) {
    for (const auto& [city, report] : result.per_city) {
      out << "\n[" << city << "]\n" << render_report(report);
    }
  }
  if (result.extra_predictions > 0) {
    err << "warning: " << result.extra_predictions << " predictions match no ground-truth turn\n";
  }

  fs::path report_path = o.report ? *o.report : fs::path(o.pred).replace_extension(".report.json");
  ordered_json doc;
  doc["overall"] = to_json(result.overall);
  ordered_json cities = ordered_json::object();
  for (const auto& [city, report] : result.per_city) cities[city] = to_json(report);
  doc["per_city"] = std::move(cities);
  doc["extra_predictions"] = result.extra_predictions;
  doc["asd_source"] = o.asd;
  write_file(report_path, doc.dump(2) + "\n");

  RunManifest run{"eval", {}, {}};
  run.config = {{"pred_sha256", file_digest(o.pred)},
                {"gt_sha256", file_digest(o.gt)},
                {"asd", o.asd}};
  const auto dir = report_path.has_parent_path() ? report_path.parent_path() : fs::path(".");
  write_run_manifest(dir, run, {report_path.filename().string()},
                     {{"questions", result.overall.micro_overall().total},
                      {"unparsable", result.overall.unparsable},
                      {"missing", result.overall.missing}});
  return kExitOk;
}

// ---------------------------------------------------------------- analyze

std::string location_of(const ResponseRecord& r) {
  if (r.location_id) return *r.location_id;
  // Forge sample ids look like city/location/heading.
  const auto first = r.image_id.find('/');
  const auto last = r.image_id.rfind('/');
  if (first != std::string::npos && last != first) return r.image_id.substr(first + 1, last - first - 1);
  return r.image_id;
}

int cmd_analyze(const AnalyzeOpts& o, std::ostream& out, std::ostream& err) {
  if (o.k < 1 || o.k > 3) throw UsageError("analyze: --k must be 1, 2 or 3");
  RunManifest run{"analyze", {}, {}};
  run.config = {{"responses_sha256", file_digest(o.responses)},
                {"locations_sha256", file_digest(o.locations)},
                {"roads_sha256", o.roads ? file_digest(*o.roads) : ""},
                {"city", o.city},
                {"k", o.k}};
  if (!o.c.force && up_to_date(o.c.out, run)) {
    out << "analyze: up to date (" << o.c.out.string() << ")\n";
    return kExitOk;
  }
  const auto index = load_city(o.locations, o.roads, o.city, err);
  const auto records = read_responses(o.responses);
  const auto groups = group_by_image(records);

  struct Item {
    std::string image_id;
    const std::vector<ResponseRecord>* records;
  };
  std::vector<Item> items;
  for (const auto& [id, g] : groups) items.push_back({id, &g});

  std::vector<FrequencyMap> freqs(items.size());
  std::vector<std::vector<std::string>> warnings(items.size());
  std::vector<std::string> prompts(items.size());
  parallel_for(items.size(), o.c.jobs, [&](std::size_t i) {
    const auto& group = *items[i].records;
    std::vector<std::string> responses;
    for (const auto& r : group) responses.push_back(r.response);
    freqs[i] = tally(responses, index.gazetteer);
    const auto loc_id = location_of(group.front());
    const auto* loc = index.find(loc_id);
    if (loc == nullptr) {
      throw InputError("responses for " + items[i].image_id + " name unknown location " + loc_id);
    }
    auto overlay = emit_overlay(freqs[i], index.roads, *loc, o.k);
    overlay.geojson["properties"]["image_id"] = items[i].image_id;
    write_file(o.c.out / "overlays" / (safe_name(items[i].image_id) + ".geojson"),
               overlay.geojson.dump(2) + "\n");
    warnings[i] = std::move(overlay.warnings);
    std::vector<std::string> named;
    for (const auto& [name, count] : freqs[i].counts) named.push_back(name);
    if (!named.empty()) prompts[i] = build_choice_prompt(named);
  });

  std::map<std::string, FrequencyMap> per_image;
  std::string prompts_jsonl;
  std::size_t responses = 0, invalid = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (const auto& w : warnings[i]) err << "warning: " << items[i].image_id << ": " << w << "\n";
    responses += freqs[i].total;
    invalid += freqs[i].invalid;
    if (!prompts[i].empty()) {
      prompts_jsonl += ordered_json{{"image_id", items[i].image_id}, {"prompt", prompts[i]}}.dump() + "\n";
    }
    per_image.emplace(items[i].image_id, std::move(freqs[i]));
  }
  write_file(o.c.out / "frequency.csv", frequency_csv(per_image));
  write_file(o.c.out / "choice_prompts.jsonl", prompts_jsonl);
  write_run_manifest(o.c.out, run, {"frequency.csv", "choice_prompts.jsonl"},
                     {{"images", items.size()}, {"responses", responses}, {"invalid", invalid}});
  out << "analyze: " << items.size() << " images, " << responses << " responses, " << invalid
      << " invalid -> " << o.c.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- mock

ErrorModel error_model(const MockOpts& o) {
  ErrorModel m = ErrorModel::uniform(o.error_rate, o.seed);
  for (const auto& spec : o.rates) {
    // level:qtype=rate
    const auto colon = spec.find(':');
    const auto eq = spec.find('=');
    if (colon == std::string::npos || eq == std::string::npos || eq < colon) {
      throw UsageError("--rate expects level:qtype=rate, got '" + spec + "'");
    }
    try {
      const auto level = parse_question_level(spec.substr(0, colon));
      const auto qtype = parse_question_type(spec.substr(colon + 1, eq - colon - 1));
      m.rates[{level, qtype}] = std::stod(spec.substr(eq + 1));
    } catch (const std::exception& e) {
      throw UsageError("--rate '" + spec + "': " + e.what());
    }
  }
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return m;
}

int cmd_mock(const MockOpts& o, std::ostream& out, std::ostream& err) {
  if (o.serve) {
    StubChatServer server(StubChatServer::echo_hint_handler());
    out << "mock: serving chat completions at " << server.base_url() << std::endl;
    if (o.serve_seconds > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(o.serve_seconds));
    } else {
      for (;;) std::this_thread::sleep_for(std::chrono::hours(1));
    }
    out << "mock: served " << server.total_requests() << " requests\n";
    return kExitOk;
  }
  if (!o.gt || !o.out_file) throw UsageError("mock: --gt and --out are required unless --serve");
  const auto model = error_model(o);
  const auto gt = read_samples(*o.gt);
  const auto gazetteers = gazetteers_for(o.gazetteer, *o.gt, gt);
  const auto preds = mock_predictions(gt, gazetteers, model, static_cast<int>(o.c.jobs));
  write_predictions(*o.out_file, preds);

  RunManifest run{"mock", {}, {o.seed}};
  ordered_json rates = ordered_json::object();
  for (const auto& [key, r] : model.rates) {
    rates[std::string(to_string(key.first)) + ":" + to_string(key.second)] = r;
  }
  run.config = {{"gt_sha256", file_digest(*o.gt)},
                {"seed", o.seed},
                {"error_rate", o.error_rate},
                {"rates", rates}};
  const auto dir = o.out_file->has_parent_path() ? o.out_file->parent_path() : fs::path(".");
  write_run_manifest(dir, run, {o.out_file->filename().string()}, {{"predictions", preds.size()}});
  out << "mock: " << preds.size() << " predictions -> " << o.out_file->string() << "\n";
  (void)err;
  return kExitOk;
}

void print_error(std::ostream& err, const char* kind, const std::string& message,
                 const std::string& path = {}) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  if (!path.empty()) j["path"] = path;
  err << j.dump() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Address-localization dataset forge and evaluation toolkit", "addrforge"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI config file (default: $ADDRFORGE_CONFIG)")
      ->envname("ADDRFORGE_CONFIG");

  IngestOpts ingest;
  auto* s_ingest = app.add_subcommand("ingest", "Validate locations and roads, write the gazetteer");
  s_ingest->add_option("--locations", ingest.locations, "Locations JSONL")->required();
  s_ingest->add_option("--roads", ingest.roads, "Roads GeoJSON");
  s_ingest->add_option("--city", ingest.city, "City id");
  add_out(s_ingest, ingest.c);
  add_force(s_ingest, ingest.c);

  TilesOpts tiles;
  auto* s_tiles = app.add_subcommand("tiles", "Assemble (and annotate) satellite windows");
  s_tiles->add_option("--locations", tiles.locations, "Locations JSONL")->required();
  s_tiles->add_option("--roads", tiles.roads, "Roads GeoJSON");
  s_tiles->add_option("--tiles", tiles.tiles, "Tile root with {z}/{x}/{y}.png")->required();
  s_tiles->add_option("--city", tiles.city, "City id");
  s_tiles->add_option("--zoom", tiles.zoom, "Tile zoom level");
  s_tiles->add_option("--window", tiles.window, "Window side in pixels");
  s_tiles->add_flag("--annotate,!--no-annotate", tiles.annotate, "Draw street names");
  s_tiles->add_option("--font-size", tiles.font_size, "Label height in pixels");
  s_tiles->add_option("--max-labels", tiles.max_labels, "Labels per window");
  add_out(s_tiles, tiles.c);
  add_jobs(s_tiles, tiles.c);
  add_force(s_tiles, tiles.c);

  GraftOpts gopt;
  auto* s_graft = app.add_subcommand("graft", "Combine satellite windows with street views");
  s_graft->add_option("--locations", gopt.locations, "Locations JSONL");
  s_graft->add_option("--satellite", gopt.satellite_dir, "Directory written by 'tiles'");
  s_graft->add_option("--satellite-image", gopt.satellite_image, "Single satellite image");
  s_graft->add_option("--street-image", gopt.street_image, "Single street-view image");
  s_graft->add_option("--city", gopt.city, "City id");
  s_graft->add_option("--delta", gopt.delta, "Longer-side overlap ratio");
  s_graft->add_option("--mode", gopt.mode, "grafted | stitched | separate");
  s_graft->add_option("--target", gopt.target, "Output side in pixels");
  s_graft->add_flag("--wide-delta", gopt.wide_delta, "Admit delta above 0.5 (ablation runs)");
  add_out(s_graft, gopt.c);
  add_jobs(s_graft, gopt.c);
  add_force(s_graft, gopt.c);

  GenQaOpts qa;
  auto* s_qa = app.add_subcommand("gen-qa", "Synthesize address-VQA conversations and splits");
  s_qa->add_option("--locations", qa.locations, "Locations JSONL");
  s_qa->add_option("--merge", qa.merge, "Merge previously forged city datasets");
  s_qa->add_option("--city", qa.city, "City id");
  s_qa->add_option("--profile", qa.profile, "Train-split profile (train | test)");
  s_qa->add_option("--eval-profile", qa.eval_profile, "Val/test profile (train | test)");
  s_qa->add_option("--split", qa.split, "train,val,test fractions");
  s_qa->add_option("--seed", qa.seed, "Global seed");
  s_qa->add_option("--view-frac", qa.view_frac, "Fraction of views kept per train location");
  s_qa->add_option("--loc-frac", qa.loc_frac, "Fraction of train locations kept");
  s_qa->add_option("--image-root", qa.image_root, "Make image references relative to this directory");
  s_qa->add_option("--external", qa.external, "External conversation JSONL to mix into train");
  s_qa->add_option("--mix-ratio", qa.mix_ratio, "task:external block ratio");
  add_out(s_qa, qa.c);
  add_jobs(s_qa, qa.c);
  add_force(s_qa, qa.c);

  GenLabelsOpts gl;
  auto* s_gl = app.add_subcommand("gen-labels", "Request alignment labels for grafted images");
  s_gl->add_option("--graft-dir", gl.graft_dir, "Directory written by 'graft'")->required();
  s_gl->add_option("--locations", gl.locations, "Locations JSONL")->required();
  s_gl->add_option("--city", gl.city, "City id");
  s_gl->add_option("--endpoint", gl.endpoint.base_url, "Chat-completion base URL");
  s_gl->add_option("--model", gl.endpoint.model, "Model name");
  s_gl->add_option("--temperature", gl.endpoint.temperature, "Sampling temperature");
  s_gl->add_option("--max-tokens", gl.endpoint.max_tokens, "Completion token limit");
  s_gl->add_option("--max-in-flight", gl.endpoint.max_in_flight, "Concurrent requests");
  s_gl->add_option("--retries", gl.endpoint.retry_budget, "Retries per request");
  s_gl->add_option("--timeout-ms", gl.timeout_ms, "Request timeout");
  s_gl->add_option("--backoff-ms", gl.backoff_ms, "First retry delay, doubled per retry");
  add_out(s_gl, gl.c);

  EvalOpts ev;
  auto* s_eval = app.add_subcommand("eval", "Score predictions against forged ground truth");
  s_eval->add_option("--pred", ev.pred, "Predictions JSONL")->required();
  s_eval->add_option("--gt", ev.gt, "Ground-truth conversation JSONL")->required();
  s_eval->add_option("--gazetteer", ev.gazetteer, "gazetteer.json (default: beside --gt)");
  s_eval->add_option("--report", ev.report, "Report JSON path");
  s_eval->add_option("--asd", ev.asd, "A_sd source: combined | paired");

  AnalyzeOpts an;
  auto* s_an = app.add_subcommand("analyze", "Street frequency tallies and overlays");
  s_an->add_option("--responses", an.responses, "Responses JSONL")->required();
  s_an->add_option("--locations", an.locations, "Locations JSONL")->required();
  s_an->add_option("--roads", an.roads, "Roads GeoJSON");
  s_an->add_option("--city", an.city, "City id");
  s_an->add_option("--k", an.k, "Streets per overlay (1-3)");
  add_out(s_an, an.c);
  add_jobs(s_an, an.c);
  add_force(s_an, an.c);

  MockOpts mk;
  auto* s_mock = app.add_subcommand("mock", "Seeded oracle predictions, or a stub chat endpoint");
  s_mock->add_option("--gt", mk.gt, "Ground-truth conversation JSONL");
  s_mock->add_option("--gazetteer", mk.gazetteer, "gazetteer.json (default: beside --gt)");
  s_mock->add_option("--out,-o", mk.out_file, "Predictions JSONL to write");
  s_mock->add_option("--error-rate", mk.error_rate, "Error rate for every category");
  s_mock->add_option("--rate", mk.rates, "Per-category rate, level:qtype=rate");
  s_mock->add_option("--seed", mk.seed, "Seed");
  s_mock->add_flag("--serve", mk.serve, "Serve the stub chat endpoint instead");
  s_mock->add_option("--serve-seconds", mk.serve_seconds, "Stop serving after this long (0: never)");
  add_jobs(s_mock, mk.c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s_ingest->parsed()) return cmd_ingest(ingest, out, err);
    if (s_tiles->parsed()) return cmd_tiles(tiles, out, err);
    if (s_graft->parsed()) return cmd_graft(gopt, out, err);
    if (s_qa->parsed()) return cmd_gen_qa(qa, out, err);
    if (s_gl->parsed()) return cmd_gen_labels(gl, out, err);
    if (s_eval->parsed()) return cmd_eval(ev, out, err);
    if (s_an->parsed()) return cmd_analyze(an, out, err);
    if (s_mock->parsed()) return cmd_mock(mk, out, err);
  } catch (const UsageError& e) {
    print_error(err, "usage", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    print_error(err, "io", e.what(), e.path().string());
    return kExitFailure;
  } catch (const InputError& e) {
    print_error(err, "input", e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    print_error(err, "failure", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv = {"addrforge"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace addrforge::cli
