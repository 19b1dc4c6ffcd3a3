#pragma once

// Trajectory tables to prediction samples: CSV ingest, maneuver labeling,
// social-grid sample construction, train/test split and bootstrap resampling.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/maneuver.hpp"
#include "ietp/util.hpp"

namespace ietp {

struct Point {
  double x = 0.0;  // lateral, meters
  double y = 0.0;  // longitudinal (driving direction), meters

  friend bool operator==(const Point&, const Point&) = default;
};

struct TrackFrame {
  std::int64_t frame = 0;
  int lane_id = 0;
  double x = 0.0;
  double y = 0.0;
};

/// Frames of one vehicle, strictly increasing by a constant frame step.
struct RawTrack {
  std::int64_t vehicle_id = 0;
  std::int64_t frame_step = 1;
  std::vector<TrackFrame> frames;

  /// Position of `frame` in frames, if the track covers it.
  std::optional<std::size_t> index_of(std::int64_t frame) const {
    if (frames.empty()) return std::nullopt;
    const std::int64_t off = frame - frames.front().frame;
    if (off < 0 || off % frame_step != 0) return std::nullopt;
    const auto idx = static_cast<std::size_t>(off / frame_step);
    if (idx >= frames.size()) return std::nullopt;
    return idx;
  }
};

enum class LengthUnit { meters, feet };

struct IngestOptions {
  LengthUnit units = LengthUnit::meters;
  double source_rate_hz = 10.0;
  double working_period_s = 0.2;

  /// Source frames per working frame.
  std::int64_t downsample_factor() const {
    const double f = source_rate_hz * working_period_s;
    const auto r = static_cast<std::int64_t>(std::llround(f));
    if (source_rate_hz <= 0.0 || working_period_s <= 0.0 || r < 1 || std::abs(f - r) > 1e-6) {
      throw ConfigError("working period must be a whole multiple of the source frame period");
    }
    return r;
  }
};

inline constexpr double kMetersPerFoot = 0.3048;

/// Reads units and frame rate from a sidecar JSON file
/// ({"units": "feet"|"meters", "frame_rate_hz": 10}).
inline IngestOptions read_sidecar(const std::string& path, IngestOptions base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sidecar " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("sidecar " + path + ": " + e.what());
  }
  if (j.contains("units")) {
    const std::string u = j.at("units").get<std::string>();
    if (u == "feet") base.units = LengthUnit::feet;
    else if (u == "meters") base.units = LengthUnit::meters;
    else throw ConfigError("sidecar units must be feet or meters, got " + u);
  }
  if (j.contains("frame_rate_hz")) base.source_rate_hz = j.at("frame_rate_hz").get<double>();
  return base;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view field, std::size_t line, const char* column) {
  T v{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ParseError(line, std::string("bad ") + column + " value '" + std::string(field) + "'");
  }
  return v;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

/// Parses the trajectory CSV (header `vehicle_id,frame,lane_id,local_x,local_y`
/// in any order, extra columns ignored). Rows of one vehicle must appear in
/// strictly increasing frame order with no gaps after downsampling. Returns
/// tracks ordered by vehicle id, positions in meters.
inline std::vector<RawTrack> ingest(std::istream& in, const IngestOptions& opts = {}) {
  const std::int64_t factor = opts.downsample_factor();
  const double to_m = opts.units == LengthUnit::feet ? kMetersPerFoot : 1.0;
  std::string line;
  std::size_t line_no = 0;
  std::array<std::size_t, 5> col{};
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    static constexpr std::array<std::array<const char*, 2>, 5> names{{{"vehicle_id", "vehicle_id"},
                                                                     {"frame", "frame_id"},
                                                                     {"lane_id", "lane_id"},
                                                                     {"local_x", "local_x"},
                                                                     {"local_y", "local_y"}}};
    for (std::size_t k = 0; k < names.size(); ++k) {
      auto it = std::find_if(fields.begin(), fields.end(), [&](std::string_view f) {
        const std::string l = detail::lower(f);
        return l == names[k][0] || l == names[k][1];
      });
      if (it == fields.end()) {
        throw ParseError(line_no, std::string("header lacks column ") + names[k][0]);
      }
      col[k] = static_cast<std::size_t>(it - fields.begin());
    }
    have_header = true;
  }
  if (!have_header) throw ParseError(line_no + 1, "missing header");
  const std::size_t min_fields = *std::max_element(col.begin(), col.end()) + 1;

  std::map<std::int64_t, RawTrack> by_vehicle;
  std::map<std::int64_t, std::int64_t> last_frame;  // before downsampling
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    if (fields.size() < min_fields) {
      throw ParseError(line_no, "expected at least " + std::to_string(min_fields) + " fields, got " +
                                    std::to_string(fields.size()));
    }
    const auto vid = detail::parse_number<std::int64_t>(fields[col[0]], line_no, "vehicle_id");
    const auto frame = detail::parse_number<std::int64_t>(fields[col[1]], line_no, "frame");
    const auto lane = detail::parse_number<int>(fields[col[2]], line_no, "lane_id");
    const auto x = detail::parse_number<double>(fields[col[3]], line_no, "local_x");
    const auto y = detail::parse_number<double>(fields[col[4]], line_no, "local_y");
    if (!std::isfinite(x) || !std::isfinite(y)) throw ParseError(line_no, "non-finite position");
    auto [lf, first] = last_frame.try_emplace(vid, frame);
    if (!first) {
      if (frame == lf->second) {
        throw DataError("line " + std::to_string(line_no) + ": duplicated row for vehicle " +
                        std::to_string(vid) + " frame " + std::to_string(frame));
      }
      if (frame < lf->second) {
        throw DataError("line " + std::to_string(line_no) + ": frames of vehicle " +
                        std::to_string(vid) + " are not increasing");
      }
      lf->second = frame;
    }
    if (frame % factor != 0) continue;
    RawTrack& track = by_vehicle[vid];
    track.vehicle_id = vid;
    track.frame_step = factor;
    if (!track.frames.empty() && frame - track.frames.back().frame != factor) {
      throw DataError("line " + std::to_string(line_no) + ": gap in frames of vehicle " +
                      std::to_string(vid));
    }
    track.frames.push_back({frame, lane, x * to_m, y * to_m});
  }
  std::vector<RawTrack> out;
  out.reserve(by_vehicle.size());
  for (auto& [vid, track] : by_vehicle) out.push_back(std::move(track));
  return out;
}

inline std::vector<RawTrack> ingest_file(const std::string& path, const IngestOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return ingest(in, opts);
}

/// Writes tracks in the schema ingest() reads (meters, one row per frame).
inline void write_csv(std::ostream& out, const std::vector<RawTrack>& tracks) {
  out << "vehicle_id,frame,lane_id,local_x,local_y\n";
  out.precision(17);
  for (const RawTrack& t : tracks)
    for (const TrackFrame& f : t.frames)
      out << t.vehicle_id << ',' << f.frame << ',' << f.lane_id << ',' << f.x << ',' << f.y << '\n';
}

/// Social grid around the target: `rows` longitudinal cells centered on the
/// target, `cols` lanes {left, own, right}.
struct GridSpec {
  std::size_t rows = 13;
  std::size_t cols = 3;
  double cell_length = 4.6;  // meters

  std::size_t center_row() const { return rows / 2; }
  std::size_t center_col() const { return cols / 2; }
};

struct SampleConfig {
  std::size_t history_steps = 15;       // t_h: history has t_h + 1 positions
  std::size_t future_steps = 25;        // t_f
  std::size_t stride = 1;               // working frames between prediction times
  std::size_t lane_window_steps = 20;   // lane change looked for within +-window
  std::size_t speed_window_steps = 5;   // backward window for the speed at t
  double braking_ratio = 0.8;
  GridSpec grid;
};

class CoverageError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Lateral: lane_id change within +-lane_window of t (a smaller id is a left
/// change; a change ahead of t wins over one behind). Longitudinal: braking
/// when the mean speed over the horizon is below braking_ratio times the
/// speed at t.
inline ManeuverClass label_at(const RawTrack& track, std::size_t i, const SampleConfig& cfg) {
  const auto& f = track.frames;
  if (i < cfg.history_steps || i + cfg.future_steps >= f.size() || cfg.future_steps == 0) {
    throw CoverageError("track " + std::to_string(track.vehicle_id) +
                        " does not cover the history and horizon around index " + std::to_string(i));
  }
  const std::size_t ub = std::min(f.size() - 1, i + cfg.lane_window_steps);
  const std::size_t lb = i >= cfg.lane_window_steps ? i - cfg.lane_window_steps : 0;
  const int now = f[i].lane_id;
  Lateral lat = Lateral::keep;
  if (f[ub].lane_id < now) lat = Lateral::left_change;
  else if (f[ub].lane_id > now) lat = Lateral::right_change;
  else if (now < f[lb].lane_id) lat = Lateral::left_change;
  else if (now > f[lb].lane_id) lat = Lateral::right_change;

  const std::size_t k = std::max<std::size_t>(1, std::min({cfg.speed_window_steps, cfg.history_steps, i}));
  const double speed_now = (f[i].y - f[i - k].y) / static_cast<double>(k);
  const double mean_future =
      (f[i + cfg.future_steps].y - f[i].y) / static_cast<double>(cfg.future_steps);
  const Longitudinal lon =
      mean_future < cfg.braking_ratio * speed_now ? Longitudinal::braking : Longitudinal::normal;
  return {lat, lon};
}

inline ManeuverClass label_maneuver(const RawTrack& track, std::int64_t frame,
                                    const SampleConfig& cfg = {}) {
  const auto i = track.index_of(frame);
  if (!i) throw CoverageError("track " + std::to_string(track.vehicle_id) + " has no frame " +
                              std::to_string(frame));
  return label_at(track, *i, cfg);
}

struct SampleId {
  std::int64_t vehicle_id = 0;
  std::int64_t frame = 0;
  friend auto operator<=>(const SampleId&, const SampleId&) = default;
};

struct NeighborHistory {
  std::size_t row = 0;
  std::size_t col = 0;
  std::int64_t vehicle_id = 0;
  std::vector<Point> history;  // t_h + 1 positions, target-relative
};

/// One prediction instance. All positions are relative to the target's
/// position at prediction time.
struct TrajectorySample {
  SampleId id;
  std::vector<Point> target_history;     // t_h + 1, last is (0, 0)
  std::vector<NeighborHistory> neighbors;  // at most one per grid cell
  std::vector<Point> future;             // t_f
  ManeuverClass maneuver;
};

struct ProcessingReport {
  std::size_t tracks = 0;
  std::size_t samples = 0;
  std::size_t skipped_vehicles = 0;          // no window with full coverage
  std::size_t neighbors_assigned = 0;
  std::size_t neighbors_displaced = 0;       // lost a cell to a nearer vehicle
  std::size_t neighbors_without_history = 0;
  std::array<std::size_t, kManeuverCount> label_counts{};

  nlohmann::json to_json() const {
    nlohmann::json labels = nlohmann::json::object();
    for (std::size_t k = 0; k < kManeuverCount; ++k) {
      labels[ManeuverClass::from_offset(k).name()] = label_counts[k];
    }
    return {{"tracks", tracks},
            {"samples", samples},
            {"skipped_vehicles", skipped_vehicles},
            {"neighbors_assigned", neighbors_assigned},
            {"neighbors_displaced", neighbors_displaced},
            {"neighbors_without_history", neighbors_without_history},
            {"label_counts", labels}};
  }
};

struct SampleSet {
  std::vector<TrajectorySample> samples;
  ProcessingReport report;
};

/// One sample per (vehicle, time) with full history and horizon coverage.
/// Neighbors in the adjacent or own lane within the grid's longitudinal
/// reach are placed by their position at t; the nearest vehicle keeps a
/// contested cell (ties to the lower vehicle id).
inline SampleSet build_samples(const std::vector<RawTrack>& tracks, const SampleConfig& cfg = {}) {
  if (cfg.grid.rows == 0 || cfg.grid.cols == 0 || cfg.grid.cell_length <= 0.0 || cfg.stride == 0) {
    throw ConfigError("invalid grid or stride");
  }
  SampleSet out;
  out.report.tracks = tracks.size();
  std::unordered_map<std::int64_t, std::vector<std::pair<std::size_t, std::size_t>>> at_frame;
  for (std::size_t t = 0; t < tracks.size(); ++t)
    for (std::size_t i = 0; i < tracks[t].frames.size(); ++i)
      at_frame[tracks[t].frames[i].frame].emplace_back(t, i);

  const auto half_rows = static_cast<long>(cfg.grid.rows / 2);
  const auto center_col = static_cast<long>(cfg.grid.center_col());
  const std::size_t th = cfg.history_steps, tf = cfg.future_steps;

  for (std::size_t t = 0; t < tracks.size(); ++t) {
    const RawTrack& track = tracks[t];
    const auto& f = track.frames;
    bool any = false;
    for (std::size_t i = th; i + tf < f.size(); i += cfg.stride) {
      any = true;
      TrajectorySample s;
      s.id = {track.vehicle_id, f[i].frame};
      const Point origin{f[i].x, f[i].y};
      for (std::size_t k = i - th; k <= i; ++k)
        s.target_history.push_back({f[k].x - origin.x, f[k].y - origin.y});
      for (std::size_t k = i + 1; k <= i + tf; ++k)
        s.future.push_back({f[k].x - origin.x, f[k].y - origin.y});
      s.maneuver = label_at(track, i, cfg);

      struct Candidate {
        double dist;
        std::int64_t vid;
        std::size_t track, index;
      };
      std::map<std::pair<std::size_t, std::size_t>, Candidate> cells;
      for (const auto& [nt, ni] : at_frame[f[i].frame]) {
        if (nt == t) continue;
        const TrackFrame& nf = tracks[nt].frames[ni];
        const long dc = nf.lane_id - f[i].lane_id;
        if (std::abs(dc) > center_col) continue;
        const double dy = nf.y - origin.y;
        const long dr = std::lround(dy / cfg.grid.cell_length);
        if (std::abs(dr) > half_rows) continue;
        if (ni < th) {
          ++out.report.neighbors_without_history;
          continue;
        }
        const double dx = nf.x - origin.x;
        const Candidate c{std::hypot(dx, dy), tracks[nt].vehicle_id, nt, ni};
        const std::pair<std::size_t, std::size_t> cell{static_cast<std::size_t>(dr + half_rows),
                                                       static_cast<std::size_t>(dc + center_col)};
        auto [it, fresh] = cells.try_emplace(cell, c);
        if (!fresh) {
          ++out.report.neighbors_displaced;
          if (c.dist < it->second.dist || (c.dist == it->second.dist && c.vid < it->second.vid)) {
            it->second = c;
          }
        }
      }
      for (const auto& [cell, c] : cells) {
        NeighborHistory nh;
        nh.row = cell.first;
        nh.col = cell.second;
        nh.vehicle_id = c.vid;
        const auto& nfr = tracks[c.track].frames;
        for (std::size_t k = c.index - th; k <= c.index; ++k)
          nh.history.push_back({nfr[k].x - origin.x, nfr[k].y - origin.y});
        s.neighbors.push_back(std::move(nh));
        ++out.report.neighbors_assigned;
      }
      ++out.report.label_counts[s.maneuver.offset()];
      out.samples.push_back(std::move(s));
    }
    if (!any) ++out.report.skipped_vehicles;
  }
  out.report.samples = out.samples.size();
  return out;
}

struct Split {
  std::vector<std::size_t> train;  // sample positions, ascending
  std::vector<std::size_t> test;
};

struct SplitOptions {
  double test_fraction = 0.25;
  std::uint64_t seed = 0;
  bool by_vehicle = false;  // keep all samples of a vehicle on one side
};

/// Seeded disjoint split of sample positions; the test side receives
/// round(n * test_fraction) samples (by-vehicle: the first vehicles in shuffled
/// order until that count is reached).
inline Split split(const std::vector<TrajectorySample>& samples, const SplitOptions& opts = {}) {
  if (!(opts.test_fraction > 0.0 && opts.test_fraction < 1.0)) {
    throw PreconditionError("test fraction must lie in (0, 1)");
  }
  const std::size_t n = samples.size();
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * opts.test_fraction + 0.5));
  std::mt19937_64 rng(opts.seed);
  std::vector<char> is_test(n, 0);
  if (!opts.by_vehicle) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = 1;
  } else {
    std::map<std::int64_t, std::vector<std::size_t>> by_vid;
    for (std::size_t k = 0; k < n; ++k) by_vid[samples[k].id.vehicle_id].push_back(k);
    std::vector<const std::vector<std::size_t>*> groups;
    for (const auto& [vid, idx] : by_vid) groups.push_back(&idx);
    std::shuffle(groups.begin(), groups.end(), rng);
    std::size_t taken = 0;
    for (const auto* grp : groups) {
      if (taken >= n_test) break;
      for (std::size_t k : *grp) is_test[k] = 1;
      taken += grp->size();
    }
  }
  Split s;
  for (std::size_t k = 0; k < n; ++k) (is_test[k] ? s.test : s.train).push_back(k);
  return s;
}

/// One resampled training set; `sample_ids` are positions into the sample
/// list, drawn with replacement from the training positions.
struct BootstrapSet {
  std::size_t index = 0;  // 1-based
  std::uint64_t seed = 0;
  std::vector<std::size_t> sample_ids;
};

inline std::vector<BootstrapSet> bootstrap(const std::vector<std::size_t>& train, std::size_t n_sets,
                                           std::uint64_t seed) {
  if (train.empty()) throw PreconditionError("bootstrap needs a non-empty training set");
  if (n_sets == 0) throw PreconditionError("bootstrap needs at least one set");
  std::vector<BootstrapSet> sets;
  sets.reserve(n_sets);
  for (std::size_t k = 1; k <= n_sets; ++k) {
    BootstrapSet b;
    b.index = k;
    b.seed = derive_seed(seed, k);
    std::mt19937_64 rng(b.seed);
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    b.sample_ids.resize(train.size());
    for (auto& id : b.sample_ids) id = train[pick(rng)];
    sets.push_back(std::move(b));
  }
  return sets;
}

/// Distinct sample count divided by set size.
inline double unique_fraction(const BootstrapSet& set) {
  std::vector<std::size_t> ids = set.sample_ids;
  std::sort(ids.begin(), ids.end());
  const auto distinct = static_cast<double>(std::unique(ids.begin(), ids.end()) - ids.begin());
  return ids.empty() ? 0.0 : distinct / static_cast<double>(ids.size());
}

}  // namespace ietp
