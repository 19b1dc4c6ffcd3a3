#pragma once

// End-to-end commands behind the ietp tool: synth, prepare, train, evaluate
// and bench. Every command reads one WorkflowConfig and writes its artifacts
// into a directory.
//
// Prepared directory:
//   samples.bin          binary sample list (see write_samples)
//   train.idx, test.idx  sample positions, one per line
//   bootstrap_NN.idx     positions drawn for bootstrap set NN
//   prepared.json        sample rule, seeds, counts and the dataset fingerprint
//   report.json          processing report
//
// Run directory (train):
//   learner_NN.ietpw     weight container per learner
//   manifest.json        RunManifest

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/ensemble.hpp"
#include "ietp/evaluation.hpp"
#include "ietp/synthetic.hpp"
#include "ietp/trajectory_data.hpp"
#include "ietp/training.hpp"
#include "ietp/weights_io.hpp"

namespace ietp {

inline constexpr const char* kToolVersion = "0.1.0";

namespace fs = std::filesystem;

/// A learner or other step failed after the inputs were accepted.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BenchOptions {
  std::vector<std::size_t> sizes{1, 2, 5, 10, 20};
  std::size_t samples = 100;
  std::size_t repetitions = 3;
};

/// All knobs of a run. Sections in the JSON file: scenario, data, model,
/// train, evaluate, bench. Missing keys keep the defaults below.
struct WorkflowConfig {
  ScenarioConfig scenario;
  IngestOptions ingest;
  SampleConfig samples;
  SplitOptions split;
  std::size_t learners = 20;
  std::uint64_t bootstrap_seed = 0;
  ModelConfig model;
  TrainConfig train;
  std::size_t train_workers = 0;  // 0: default_workers()
  EvalOptions eval{0.2, 0, 0, 64};  // workers 0: default_workers()
  BenchOptions bench;

  std::size_t resolved_train_workers() const { return train_workers ? train_workers : default_workers(); }
  std::size_t resolved_eval_workers() const { return eval.workers ? eval.workers : default_workers(); }

  /// Copies the data-side sizes into the model section.
  void sync() {
    model.history_steps = samples.history_steps;
    model.future_steps = samples.future_steps;
    model.grid = samples.grid;
    eval.frame_period = ingest.working_period_s;
  }

  void validate() const {
    scenario.validate();
    ingest.downsample_factor();
    model.validate();
    train.validate();
    if (!(split.test_fraction > 0.0 && split.test_fraction < 1.0)) {
      throw ConfigError("data.test_fraction must lie in (0, 1)");
    }
    if (learners == 0) throw ConfigError("data.learners must be >= 1");
    if (samples.stride == 0 || samples.grid.rows == 0 || samples.grid.cols == 0 || !(samples.grid.cell_length > 0.0)) {
      throw ConfigError("data grid and stride must be positive");
    }
    if (eval.chunk == 0) throw ConfigError("evaluate.chunk must be >= 1");
    if (bench.sizes.empty() || bench.samples == 0) throw ConfigError("bench needs sizes and samples");
  }

  nlohmann::json data_json() const {
    return {{"units", ingest.units == LengthUnit::feet ? "feet" : "meters"},
            {"source_rate_hz", ingest.source_rate_hz},
            {"working_period_s", ingest.working_period_s},
            {"history_steps", samples.history_steps},
            {"future_steps", samples.future_steps},
            {"stride", samples.stride},
            {"lane_window_steps", samples.lane_window_steps},
            {"speed_window_steps", samples.speed_window_steps},
            {"braking_ratio", samples.braking_ratio},
            {"grid", {{"rows", samples.grid.rows}, {"cols", samples.grid.cols}, {"cell_length", samples.grid.cell_length}}},
            {"test_fraction", split.test_fraction},
            {"split_seed", split.seed},
            {"split_by_vehicle", split.by_vehicle},
            {"learners", learners},
            {"bootstrap_seed", bootstrap_seed}};
  }

  nlohmann::json to_json() const {
    return {{"scenario", scenario.to_json()},
            {"data", data_json()},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"evaluate", {{"tie_seed", eval.tie_seed}, {"chunk", eval.chunk}}},
            {"bench", {{"sizes", bench.sizes}, {"samples", bench.samples}, {"repetitions", bench.repetitions}}}};
  }

  static WorkflowConfig from_json(const nlohmann::json& j) {
    WorkflowConfig c;
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      static const std::vector<std::string> known{"scenario", "data", "model", "train", "evaluate", "bench"};
      if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config section " + key);
      if (!value.is_object()) throw ConfigError("config section " + key + " must be an object");
    }
    try {
      if (j.contains("scenario")) c.scenario = ScenarioConfig::from_json(j["scenario"]);
      if (j.contains("data")) {
        const auto& d = j["data"];
        auto get = [&](const char* key, auto& field) {
          if (d.contains(key)) field = d.at(key).get<std::decay_t<decltype(field)>>();
        };
        if (d.contains("units")) {
          const std::string u = d["units"].get<std::string>();
          if (u == "feet") c.ingest.units = LengthUnit::feet;
          else if (u == "meters") c.ingest.units = LengthUnit::meters;
          else throw ConfigError("data.units must be feet or meters");
        }
        get("source_rate_hz", c.ingest.source_rate_hz);
        get("working_period_s", c.ingest.working_period_s);
        get("history_steps", c.samples.history_steps);
        get("future_steps", c.samples.future_steps);
        get("stride", c.samples.stride);
        get("lane_window_steps", c.samples.lane_window_steps);
        get("speed_window_steps", c.samples.speed_window_steps);
        get("braking_ratio", c.samples.braking_ratio);
        if (d.contains("grid")) {
          const auto& g = d["grid"];
          if (g.contains("rows")) c.samples.grid.rows = g["rows"].get<std::size_t>();
          if (g.contains("cols")) c.samples.grid.cols = g["cols"].get<std::size_t>();
          if (g.contains("cell_length")) c.samples.grid.cell_length = g["cell_length"].get<double>();
        }
        get("test_fraction", c.split.test_fraction);
        get("split_seed", c.split.seed);
        get("split_by_vehicle", c.split.by_vehicle);
        get("learners", c.learners);
        get("bootstrap_seed", c.bootstrap_seed);
      }
      if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
      if (j.contains("train")) {
        c.train = TrainConfig::from_json(j["train"]);
        if (j["train"].contains("workers")) c.train_workers = j["train"]["workers"].get<std::size_t>();
      }
      if (j.contains("evaluate")) {
        const auto& e = j["evaluate"];
        if (e.contains("tie_seed")) c.eval.tie_seed = e["tie_seed"].get<std::uint64_t>();
        if (e.contains("chunk")) c.eval.chunk = e["chunk"].get<std::size_t>();
        if (e.contains("workers")) c.eval.workers = e["workers"].get<std::size_t>();
      }
      if (j.contains("bench")) {
        const auto& b = j["bench"];
        if (b.contains("sizes")) c.bench.sizes = b["sizes"].get<std::vector<std::size_t>>();
        if (b.contains("samples")) c.bench.samples = b["samples"].get<std::size_t>();
        if (b.contains("repetitions")) c.bench.repetitions = b["repetitions"].get<std::size_t>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    c.sync();
    c.validate();
    return c;
  }

  static WorkflowConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    return from_json(j);
  }

  /// Hash of everything that influences trained weights.
  std::uint64_t training_hash() const {
    const nlohmann::json j{{"data", data_json()}, {"model", model.to_json()}, {"train", train.to_json()}};
    return Fnv1a::of(j.dump());
  }
};

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const fs::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + p.string());
}

inline nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_file(p, j.dump(2) + "\n"); }

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create " + p.string() + ": " + ec.message());
}

inline std::string two_digits(std::size_t k) {
  std::ostringstream s;
  s << std::setw(2) << std::setfill('0') << k;
  return s.str();
}

class ByteWriter {
 public:
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.append(s); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint64_t u64() {
    if (pos_ + 8 > bytes_.size()) throw DataError("sample file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view raw(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("sample file truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void put_points(ByteWriter& w, const std::vector<Point>& pts) {
  w.u64(pts.size());
  for (const Point& p : pts) {
    w.f64(p.x);
    w.f64(p.y);
  }
}

inline std::vector<Point> get_points(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > (1u << 20)) throw DataError("sample file corrupt");
  std::vector<Point> pts(n);
  for (Point& p : pts) {
    p.x = r.f64();
    p.y = r.f64();
  }
  return pts;
}

}  // namespace detail

inline constexpr std::string_view kSampleMagic{"IETPSMP\0", 8};

/// Binary sample list: magic, u64 version, u64 count, then per sample the id,
/// maneuver offset, target history, neighbors and future (all LE).
inline std::string serialize_samples(const std::vector<TrajectorySample>& samples) {
  detail::ByteWriter w;
  w.raw(kSampleMagic);
  w.u64(1);
  w.u64(samples.size());
  for (const TrajectorySample& s : samples) {
    w.i64(s.id.vehicle_id);
    w.i64(s.id.frame);
    w.u64(s.maneuver.offset());
    detail::put_points(w, s.target_history);
    w.u64(s.neighbors.size());
    for (const NeighborHistory& n : s.neighbors) {
      w.u64(n.row);
      w.u64(n.col);
      w.i64(n.vehicle_id);
      detail::put_points(w, n.history);
    }
    detail::put_points(w, s.future);
  }
  return w.bytes();
}

inline std::vector<TrajectorySample> deserialize_samples(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(kSampleMagic.size()) != kSampleMagic) throw DataError("not an ietp sample file");
  if (r.u64() != 1) throw DataError("unsupported sample file version");
  const std::uint64_t count = r.u64();
  std::vector<TrajectorySample> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    TrajectorySample s;
    s.id.vehicle_id = r.i64();
    s.id.frame = r.i64();
    const std::uint64_t m = r.u64();
    if (m >= kManeuverCount) throw DataError("sample file has a bad maneuver");
    s.maneuver = ManeuverClass::from_offset(m);
    s.target_history = detail::get_points(r);
    const std::uint64_t nn = r.u64();
    if (nn > (1u << 16)) throw DataError("sample file corrupt");
    for (std::uint64_t i = 0; i < nn; ++i) {
      NeighborHistory n;
      n.row = r.u64();
      n.col = r.u64();
      n.vehicle_id = r.i64();
      n.history = detail::get_points(r);
      s.neighbors.push_back(std::move(n));
    }
    s.future = detail::get_points(r);
    out.push_back(std::move(s));
  }
  if (!r.done()) throw DataError("trailing bytes in sample file");
  return out;
}

inline std::string format_index(const std::vector<std::size_t>& idx) {
  std::string out;
  for (std::size_t i : idx) out += std::to_string(i) + "\n";
  return out;
}

inline std::vector<std::size_t> parse_index(const std::string& text, const std::string& name) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc() || p != line.data() + line.size()) throw ParseError(lineno, name + ": bad index '" + line + "'");
    out.push_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synth

struct SynthResult {
  fs::path csv;
  std::size_t tracks = 0;
  std::size_t labels = 0;
};

/// Writes tracks.csv, its sidecar tracks.json and labels.csv (intended
/// maneuver per working frame).
inline SynthResult cmd_synth(const WorkflowConfig& cfg, const fs::path& out_dir) {
  detail::ensure_dir(out_dir);
  const Scenario s = generate(cfg.scenario, cfg.samples);
  std::ostringstream csv;
  write_csv(csv, s.tracks);
  detail::write_file(out_dir / "tracks.csv", csv.str());
  detail::write_json(out_dir / "tracks.json", {{"units", "meters"}, {"frame_rate_hz", cfg.scenario.source_rate_hz}});
  std::ostringstream labels;
  labels << "vehicle_id,frame,maneuver,name\n";
  for (const GeneratedLabel& l : s.labels) {
    labels << l.vehicle_id << ',' << l.frame << ',' << l.maneuver.index() << ',' << l.maneuver.name() << '\n';
  }
  detail::write_file(out_dir / "labels.csv", labels.str());
  return {out_dir / "tracks.csv", s.tracks.size(), s.labels.size()};
}

// ---------------------------------------------------------------------------
// prepare

struct PreparedData {
  std::vector<TrajectorySample> samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<BootstrapSet> sets;
  std::uint64_t fingerprint = 0;
  nlohmann::json info;
};

/// Sidecar next to the CSV (same stem, .json) if present.
inline IngestOptions ingest_options_for(const fs::path& csv, const WorkflowConfig& cfg) {
  fs::path sidecar = csv;
  sidecar.replace_extension(".json");
  if (fs::exists(sidecar)) return read_sidecar(sidecar.string(), cfg.ingest);
  return cfg.ingest;
}

inline PreparedData cmd_prepare(const fs::path& csv, const WorkflowConfig& cfg, const fs::path& out_dir) {
  const IngestOptions opts = ingest_options_for(csv, cfg);
  if (std::abs(opts.working_period_s - cfg.eval.frame_period) > 1e-12) {
    throw ConfigError("working period differs between data and evaluation");
  }
  const std::vector<RawTrack> tracks = ingest_file(csv.string(), opts);
  SampleSet set = build_samples(tracks, cfg.samples);
  if (set.samples.size() < 2) throw DataError("fewer than two samples could be built from " + csv.string());
  detail::ensure_dir(out_dir);

  PreparedData out;
  const Split sp = split(set.samples, cfg.split);
  if (sp.train.empty() || sp.test.empty()) throw DataError("split left the train or test side empty");
  out.train = sp.train;
  out.test = sp.test;
  out.sets = bootstrap(sp.train, cfg.learners, cfg.bootstrap_seed);

  const std::string bytes = serialize_samples(set.samples);
  out.fingerprint = Fnv1a::of(bytes);
  detail::write_file(out_dir / "samples.bin", bytes);
  detail::write_file(out_dir / "train.idx", format_index(out.train));
  detail::write_file(out_dir / "test.idx", format_index(out.test));
  nlohmann::json sets = nlohmann::json::array();
  for (const BootstrapSet& b : out.sets) {
    const std::string name = "bootstrap_" + detail::two_digits(b.index) + ".idx";
    detail::write_file(out_dir / name, format_index(b.sample_ids));
    sets.push_back({{"index", b.index}, {"seed", b.seed}, {"file", name}});
  }
  out.info = {{"tool_version", kToolVersion},
              {"dataset_fingerprint", hex64(out.fingerprint)},
              {"data", cfg.data_json()},
              {"samples", set.samples.size()},
              {"train", out.train.size()},
              {"test", out.test.size()},
              {"bootstrap_sets", sets}};
  detail::write_json(out_dir / "prepared.json", out.info);
  nlohmann::json report = set.report.to_json();
  report["train"] = out.train.size();
  report["test"] = out.test.size();
  detail::write_json(out_dir / "report.json", report);
  out.samples = std::move(set.samples);
  return out;
}

/// Reads a prepared directory back and checks its fingerprint.
inline PreparedData load_prepared(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("prepared directory " + dir.string() + " does not exist");
  PreparedData out;
  out.info = detail::read_json(dir / "prepared.json");
  const std::string bytes = detail::read_file(dir / "samples.bin");
  out.fingerprint = Fnv1a::of(bytes);
  if (hex64(out.fingerprint) != out.info.at("dataset_fingerprint").get<std::string>()) {
    throw DataError("samples.bin does not match the fingerprint in prepared.json");
  }
  out.samples = deserialize_samples(bytes);
  out.train = parse_index(detail::read_file(dir / "train.idx"), "train.idx");
  out.test = parse_index(detail::read_file(dir / "test.idx"), "test.idx");
  for (const auto& s : out.info.at("bootstrap_sets")) {
    BootstrapSet b;
    b.index = s.at("index").get<std::size_t>();
    b.seed = s.at("seed").get<std::uint64_t>();
    const std::string file = s.at("file").get<std::string>();
    b.sample_ids = parse_index(detail::read_file(dir / file), file);
    out.sets.push_back(std::move(b));
  }
  const auto check = [&](const std::vector<std::size_t>& idx, const std::string& what) {
    for (std::size_t i : idx)
      if (i >= out.samples.size()) throw DataError(what + " refers to sample " + std::to_string(i) + " out of range");
  };
  check(out.train, "train.idx");
  check(out.test, "test.idx");
  for (const auto& b : out.sets) check(b.sample_ids, "bootstrap set " + std::to_string(b.index));
  return out;
}

// ---------------------------------------------------------------------------
// train

struct ManifestEntry {
  std::size_t index = 0;
  std::string weights;  // relative to the manifest directory
  std::uint64_t seed = 0;
  std::uint64_t checksum = 0;
  std::vector<double> epoch_loss;
  double wall_seconds = 0.0;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_fingerprint = 0;
  std::string prepared_dir;
  std::uint64_t master_seed = 0;
  nlohmann::json config;
  std::vector<ManifestEntry> learners;  // ascending index
  std::map<std::size_t, std::string> failures;

  nlohmann::json to_json() const {
    nlohmann::json ls = nlohmann::json::array();
    for (const auto& e : learners) {
      ls.push_back({{"index", e.index},
                    {"weights", e.weights},
                    {"seed", e.seed},
                    {"checksum", hex64(e.checksum)},
                    {"epoch_loss", e.epoch_loss},
                    {"wall_seconds", e.wall_seconds}});
    }
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& [idx, why] : failures) fails.push_back({{"index", idx}, {"error", why}});
    return {{"tool_version", tool_version},
            {"config_hash", hex64(config_hash)},
            {"dataset_fingerprint", hex64(dataset_fingerprint)},
            {"prepared_dir", prepared_dir},
            {"master_seed", master_seed},
            {"config", config},
            {"learners", ls},
            {"failures", fails}};
  }

  static std::uint64_t parse_hex(const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    if (ec != std::errc() || p != s.data() + s.size()) throw DataError("bad hex value in manifest: " + s);
    return v;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
      m.tool_version = j.at("tool_version").get<std::string>();
      m.config_hash = parse_hex(j.at("config_hash").get<std::string>());
      m.dataset_fingerprint = parse_hex(j.at("dataset_fingerprint").get<std::string>());
      m.prepared_dir = j.at("prepared_dir").get<std::string>();
      m.master_seed = j.at("master_seed").get<std::uint64_t>();
      m.config = j.at("config");
      for (const auto& e : j.at("learners")) {
        ManifestEntry x;
        x.index = e.at("index").get<std::size_t>();
        x.weights = e.at("weights").get<std::string>();
        x.seed = e.at("seed").get<std::uint64_t>();
        x.checksum = parse_hex(e.at("checksum").get<std::string>());
        x.epoch_loss = e.at("epoch_loss").get<std::vector<double>>();
        x.wall_seconds = e.value("wall_seconds", 0.0);
        m.learners.push_back(std::move(x));
      }
      for (const auto& f : j.at("failures")) m.failures[f.at("index").get<std::size_t>()] = f.at("error").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
  }
};

/// Writes the manifest after checking that every referenced file exists.
inline void write_manifest(const fs::path& run_dir, const RunManifest& m) {
  for (const auto& e : m.learners) {
    if (!fs::exists(run_dir / e.weights)) throw DataError("manifest refers to missing " + e.weights);
  }
  detail::write_json(run_dir / "manifest.json", m.to_json());
}

inline std::string weight_file_name(std::size_t index) { return "learner_" + detail::two_digits(index) + ".ietpw"; }

struct TrainOptions {
  bool resume = false;
  std::optional<std::size_t> workers;  // overrides the config
};

/// Trains one learner per bootstrap set of the prepared directory. With
/// resume, learners whose weight file already matches the configuration are
/// kept. Failures leave a manifest listing them and raise RuntimeFailure.
inline RunManifest cmd_train(const fs::path& prepared_dir, const WorkflowConfig& cfg, const fs::path& run_dir,
                             const TrainOptions& opts = {}) {
  const PreparedData data = load_prepared(prepared_dir);
  if (data.info.at("data") != cfg.data_json()) {
    throw ConfigError("prepared data was built with a different data section");
  }
  detail::ensure_dir(run_dir);
  RunManifest m;
  m.config_hash = cfg.training_hash();
  m.dataset_fingerprint = data.fingerprint;
  m.prepared_dir = fs::absolute(prepared_dir).lexically_normal().string();
  m.master_seed = cfg.train.seed;
  m.config = cfg.to_json();

  std::map<std::size_t, ManifestEntry> done;
  std::vector<BootstrapSet> todo;
  std::optional<RunManifest> previous;
  if (opts.resume && fs::exists(run_dir / "manifest.json")) {
    previous = RunManifest::from_json(detail::read_json(run_dir / "manifest.json"));
    if (previous->config_hash != m.config_hash || previous->dataset_fingerprint != m.dataset_fingerprint) {
      previous.reset();  // different run: retrain everything
    }
  }
  for (const BootstrapSet& b : data.sets) {
    bool kept = false;
    if (previous) {
      for (const auto& e : previous->learners) {
        if (e.index != b.index || !fs::exists(run_dir / e.weights)) continue;
        try {
          if (load_weights((run_dir / e.weights).string()).learner.checksum() == e.checksum) {
            done[b.index] = e;
            kept = true;
          }
        } catch (const DataError&) {
        }
      }
    }
    if (!kept) todo.push_back(b);
  }

  const std::size_t workers = opts.workers.value_or(cfg.resolved_train_workers());
  std::vector<TrainedLearner> trained;
  try {
    if (!todo.empty()) trained = train_fleet(data.samples, todo, cfg.model, cfg.train, workers);
  } catch (FleetError& e) {
    trained = std::move(e.partial());
    for (std::size_t idx : e.failed_indices()) m.failures[idx] = e.what();
  }
  for (const TrainedLearner& t : trained) {
    const std::string name = weight_file_name(t.learner.index());
    save_weights((run_dir / name).string(), t.learner,
                 {{"config_hash", hex64(m.config_hash)}, {"dataset_fingerprint", hex64(m.dataset_fingerprint)}});
    ManifestEntry e;
    e.index = t.learner.index();
    e.weights = name;
    e.seed = learner_seed(cfg.train.seed, e.index);
    e.checksum = t.report.checksum;
    e.epoch_loss = t.report.epoch_loss;
    e.wall_seconds = t.report.wall_seconds;
    done[e.index] = std::move(e);
  }
  for (auto& [idx, e] : done) m.learners.push_back(e);
  write_manifest(run_dir, m);
  if (!m.failures.empty()) {
    std::string which;
    for (const auto& [idx, why] : m.failures) which += (which.empty() ? "" : ", ") + std::to_string(idx);
    throw RuntimeFailure("learners " + which + " failed; partial manifest written: " + m.failures.begin()->second);
  }
  return m;
}

// ---------------------------------------------------------------------------
// evaluate / bench

struct LoadedRun {
  RunManifest manifest;
  PreparedData data;
  std::vector<BaseLearner> fleet;  // index 1..N
};

/// Loads the manifest, its prepared data and every weight file, verifying
/// the dataset fingerprint and each weight checksum.
inline LoadedRun load_run(const fs::path& manifest_path, const std::optional<fs::path>& prepared_override = {}) {
  LoadedRun run;
  if (!fs::exists(manifest_path)) throw DataError("manifest " + manifest_path.string() + " does not exist");
  run.manifest = RunManifest::from_json(detail::read_json(manifest_path));
  if (!run.manifest.failures.empty()) {
    throw DataError("manifest lists failed learners; rerun train with --resume");
  }
  if (run.manifest.learners.empty()) throw DataError("manifest lists no learners");
  const fs::path dir = manifest_path.parent_path();
  run.data = load_prepared(prepared_override.value_or(fs::path(run.manifest.prepared_dir)));
  if (run.data.fingerprint != run.manifest.dataset_fingerprint) {
    throw DataError("prepared data fingerprint " + hex64(run.data.fingerprint) + " differs from the manifest's " +
                    hex64(run.manifest.dataset_fingerprint));
  }
  for (std::size_t k = 0; k < run.manifest.learners.size(); ++k) {
    const ManifestEntry& e = run.manifest.learners[k];
    if (e.index != k + 1) throw DataError("manifest learners must be indexed 1..N without gaps");
    const fs::path p = dir / e.weights;
    if (!fs::exists(p)) throw DataError("weight file for learner " + std::to_string(e.index) + " is missing: " + p.string());
    LoadedWeights w = load_weights(p.string());
    if (w.learner.checksum() != e.checksum) {
      throw DataError("weight file for learner " + std::to_string(e.index) + " does not match its checksum");
    }
    if (w.learner.index() != e.index) throw DataError("weight file " + p.string() + " holds a different learner");
    run.fleet.push_back(std::move(w.learner));
  }
  return run;
}

inline std::vector<TrajectorySample> select_samples(const std::vector<TrajectorySample>& all,
                                                    const std::vector<std::size_t>& idx) {
  std::vector<TrajectorySample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all.at(i));
  return out;
}

struct EvaluateOptions {
  std::optional<fs::path> prepared_dir;  // defaults to the manifest's
  std::optional<fs::path> test_index;    // defaults to test.idx
  std::optional<std::size_t> workers;
};

/// Writes metrics.csv and summary.json into out_dir.
inline FleetEvaluation cmd_evaluate(const fs::path& manifest_path, const WorkflowConfig& cfg, const fs::path& out_dir,
                                    const EvaluateOptions& opts = {}) {
  LoadedRun run = load_run(manifest_path, opts.prepared_dir);
  const std::vector<std::size_t> idx =
      opts.test_index ? parse_index(detail::read_file(*opts.test_index), opts.test_index->string()) : run.data.test;
  for (std::size_t i : idx)
    if (i >= run.data.samples.size()) throw DataError("test index " + std::to_string(i) + " out of range");
  const std::vector<TrajectorySample> test = select_samples(run.data.samples, idx);
  EvalOptions eo = cfg.eval;
  eo.workers = opts.workers.value_or(cfg.resolved_eval_workers());
  const FleetEvaluation ev = evaluate_fleet(run.fleet, test, eo);
  detail::ensure_dir(out_dir);
  std::ostringstream csv;
  write_metrics_csv(csv, ev);
  detail::write_file(out_dir / "metrics.csv", csv.str());
  nlohmann::json summary = summary_json(ev);
  summary["config_hash"] = hex64(run.manifest.config_hash);
  summary["dataset_fingerprint"] = hex64(run.manifest.dataset_fingerprint);
  detail::write_json(out_dir / "summary.json", summary);
  return ev;
}

/// Per-sample latency of base learner 1 and of ensembles of the configured
/// sizes (sizes above the fleet size are dropped). Writes latency.json into out_dir.
inline LatencyReport cmd_bench(const fs::path& manifest_path, const WorkflowConfig& cfg, const fs::path& out_dir) {
  LoadedRun run = load_run(manifest_path);
  std::vector<std::size_t> idx = run.data.test;
  idx.resize(std::min(idx.size(), cfg.bench.samples));
  const std::vector<TrajectorySample> samples = select_samples(run.data.samples, idx);
  const std::vector<EnsembleLearner> ensembles = build_ensembles(run.fleet, cfg.eval.tie_seed);
  std::vector<LatencyModel> models;
  const BaseLearner* first = &run.fleet.front();
  models.push_back({"base_1", 0, [first](const TrajectorySample& s) { forward(*first, s); }});
  for (std::size_t n : cfg.bench.sizes) {
    if (n == 0 || n > ensembles.size()) continue;
    const EnsembleLearner* e = &ensembles[n - 1];
    models.push_back({"ensemble_" + std::to_string(n), n, [e](const TrajectorySample& s) { ensemble_predict(*e, s); }});
  }
  if (models.empty()) throw ConfigError("no bench size fits a fleet of " + std::to_string(run.fleet.size()));
  LatencyReport rep = bench_latency(models, samples, cfg.bench.repetitions);
  detail::ensure_dir(out_dir);
  nlohmann::json j = rep.to_json();
  j["samples"] = samples.size();
  j["repetitions"] = cfg.bench.repetitions;
  detail::write_json(out_dir / "latency.json", j);
  return rep;
}

}  // namespace ietp
