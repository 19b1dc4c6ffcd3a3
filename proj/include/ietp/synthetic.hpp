#pragma once

// Kinematic multi-lane highway episodes with known maneuvers. Longitudinal
// motion is constant speed or a constant deceleration to 60% of the initial
// speed; lane changes follow a logistic lateral profile lasting about 4 s.
// Lane 1 is the leftmost lane and x grows to the right.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/trajectory_data.hpp"

namespace ietp {

struct ScenarioConfig {
  std::size_t lanes = 3;
  double lane_width = 3.7;        // meters
  std::size_t vehicles = 30;      // per episode
  std::size_t episodes = 1;
  double speed_min = 20.0;        // m/s
  double speed_max = 30.0;
  std::array<double, kManeuverCount> maneuver_mix{0.40, 0.15, 0.15, 0.05, 0.20, 0.05};
  double noise_std = 0.0;         // meters, added to x and y
  double duration_s = 60.0;
  double road_length = 400.0;     // initial placement span
  double min_gap = 12.0;          // initial spacing within a lane
  double lane_change_s = 4.0;
  double deceleration = 2.0;      // m/s^2 while braking
  double braking_floor = 0.6;     // braking ends at this fraction of the initial speed
  double source_rate_hz = 10.0;
  double working_period_s = 0.2;
  std::uint64_t seed = 0;

  std::size_t capacity() const {
    return lanes * static_cast<std::size_t>(std::floor(road_length / min_gap));
  }

  void validate() const {
    const double mix = std::accumulate(maneuver_mix.begin(), maneuver_mix.end(), 0.0);
    if (std::abs(mix - 1.0) > 1e-9 || std::any_of(maneuver_mix.begin(), maneuver_mix.end(), [](double p) { return p < 0; })) {
      throw ConfigError("maneuver mix must be a probability vector");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (lanes == 0 || lane_width <= 0.0 || duration_s <= 0.0 || speed_min <= 0.0 || speed_max < speed_min ||
        episodes == 0 || min_gap <= 0.0 || deceleration <= 0.0 || braking_floor <= 0.0 || braking_floor >= 1.0) {
      throw ConfigError("invalid scenario geometry or kinematics");
    }
    const double lane_change_mix = maneuver_mix[2] + maneuver_mix[3] + maneuver_mix[4] + maneuver_mix[5];
    if (lanes < 2 && lane_change_mix > 0.0) throw ConfigError("lane changes need at least two lanes");
    if (vehicles > capacity()) {
      throw ConfigError("scenario holds at most " + std::to_string(capacity()) + " vehicles, asked for " +
                        std::to_string(vehicles));
    }
    IngestOptions{LengthUnit::meters, source_rate_hz, working_period_s}.downsample_factor();
  }

  nlohmann::json to_json() const {
    return {{"lanes", lanes},
            {"lane_width", lane_width},
            {"vehicles", vehicles},
            {"episodes", episodes},
            {"speed_min", speed_min},
            {"speed_max", speed_max},
            {"maneuver_mix", maneuver_mix},
            {"noise_std", noise_std},
            {"duration_s", duration_s},
            {"road_length", road_length},
            {"min_gap", min_gap},
            {"lane_change_s", lane_change_s},
            {"deceleration", deceleration},
            {"braking_floor", braking_floor},
            {"source_rate_hz", source_rate_hz},
            {"working_period_s", working_period_s},
            {"seed", seed}};
  }

  static ScenarioConfig from_json(const nlohmann::json& j) { return from_json(j, ScenarioConfig{}); }

  static ScenarioConfig from_json(const nlohmann::json& j, ScenarioConfig c) {
    try {
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
      };
      get("lanes", c.lanes);
      get("lane_width", c.lane_width);
      get("vehicles", c.vehicles);
      get("episodes", c.episodes);
      get("speed_min", c.speed_min);
      get("speed_max", c.speed_max);
      get("maneuver_mix", c.maneuver_mix);
      get("noise_std", c.noise_std);
      get("duration_s", c.duration_s);
      get("road_length", c.road_length);
      get("min_gap", c.min_gap);
      get("lane_change_s", c.lane_change_s);
      get("deceleration", c.deceleration);
      get("braking_floor", c.braking_floor);
      get("source_rate_hz", c.source_rate_hz);
      get("working_period_s", c.working_period_s);
      get("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("scenario config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Intended maneuver of one vehicle at one prediction frame.
struct GeneratedLabel {
  std::int64_t vehicle_id = 0;
  std::int64_t frame = 0;
  ManeuverClass maneuver;
};

struct Scenario {
  std::vector<RawTrack> tracks;  // at the source frame rate
  std::vector<GeneratedLabel> labels;
};

namespace detail {

/// Noise-free motion of one generated vehicle.
struct VehiclePlan {
  int lane0 = 1;
  int lane_delta = 0;  // -1 left, +1 right
  double y0 = 0.0;
  double v0 = 0.0;
  bool brakes = false;
  double event_s = 0.0;  // lane-change midpoint and braking onset

  double x(double t, const ScenarioConfig& c) const {
    const double center = (lane0 - 0.5) * c.lane_width;
    if (lane_delta == 0) return center;
    // logistic reaching 1% / 99% at +-lane_change_s / 2
    const double k = 2.0 * std::log(99.0) / c.lane_change_s;
    return center + lane_delta * c.lane_width / (1.0 + std::exp(-k * (t - event_s)));
  }

  double brake_duration(const ScenarioConfig& c) const { return (1.0 - c.braking_floor) * v0 / c.deceleration; }

  double y(double t, const ScenarioConfig& c) const {
    if (!brakes || t <= event_s) return y0 + v0 * t;
    const double tb = brake_duration(c);
    const double d = std::min(t - event_s, tb);
    double y = y0 + v0 * event_s + v0 * d - 0.5 * c.deceleration * d * d;
    if (t - event_s > tb) y += c.braking_floor * v0 * (t - event_s - tb);
    return y;
  }
};

inline int lane_of(double x, const ScenarioConfig& c) {
  const int lane = static_cast<int>(std::floor(x / c.lane_width)) + 1;
  return std::clamp(lane, 1, static_cast<int>(c.lanes));
}

}  // namespace detail

/// Generates tracks at the source frame rate plus the intended maneuver for
/// every working frame with full history and horizon coverage under `rule`.
/// Intended labels come from the analytic motion: a lane change counts when
/// its lane-boundary crossing falls inside the lane window around t, braking
/// when the exact mean horizon speed is below braking_ratio times the exact
/// backward-window speed.
inline Scenario generate(const ScenarioConfig& cfg, const SampleConfig& rule = {}) {
  cfg.validate();
  const std::int64_t factor = IngestOptions{LengthUnit::meters, cfg.source_rate_hz, cfg.working_period_s}.downsample_factor();
  const double dt = 1.0 / cfg.source_rate_hz;
  const auto frames_per_episode = static_cast<std::int64_t>(std::floor(cfg.duration_s * cfg.source_rate_hz)) + 1;
  // episodes are separated in time so they never share a frame
  const std::int64_t episode_stride = ((frames_per_episode + 10 * factor) / factor + 1) * factor;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Scenario out;
  std::int64_t next_id = 1;
  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const std::int64_t frame0 = static_cast<std::int64_t>(ep) * episode_stride;
    const auto slots_per_lane = static_cast<std::size_t>(std::floor(cfg.road_length / cfg.min_gap));
    std::vector<std::size_t> slots(cfg.lanes * slots_per_lane);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::discrete_distribution<std::size_t> pick_maneuver(cfg.maneuver_mix.begin(), cfg.maneuver_mix.end());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t v = 0; v < cfg.vehicles; ++v) {
      const ManeuverClass m = ManeuverClass::from_offset(pick_maneuver(rng));
      detail::VehiclePlan plan;
      plan.lane0 = static_cast<int>(slots[v] / slots_per_lane) + 1;
      plan.y0 = static_cast<double>(slots[v] % slots_per_lane) * cfg.min_gap + unit(rng) * 0.25 * cfg.min_gap;
      plan.v0 = cfg.speed_min + (cfg.speed_max - cfg.speed_min) * unit(rng);
      plan.brakes = m.longitudinal() == Longitudinal::braking;
      plan.event_s = cfg.duration_s * (0.15 + 0.7 * unit(rng));
      const int lanes = static_cast<int>(cfg.lanes);
      if (m.lateral() == Lateral::left_change) {
        plan.lane_delta = -1;
        if (plan.lane0 == 1) plan.lane0 = 2 + static_cast<int>(unit(rng) * (lanes - 1)) % (lanes - 1);
      } else if (m.lateral() == Lateral::right_change) {
        plan.lane_delta = 1;
        if (plan.lane0 == lanes) plan.lane0 = 1 + static_cast<int>(unit(rng) * (lanes - 1)) % (lanes - 1);
      }
      plan.lane0 = std::clamp(plan.lane0, 1, lanes);

      RawTrack track;
      track.vehicle_id = next_id++;
      track.frame_step = 1;
      for (std::int64_t f = 0; f < frames_per_episode; ++f) {
        const double t = static_cast<double>(f) * dt;
        const double x = plan.x(t, cfg) + cfg.noise_std * noise(rng);
        const double y = plan.y(t, cfg) + cfg.noise_std * noise(rng);
        track.frames.push_back({frame0 + f, detail::lane_of(x, cfg), x, y});
      }

      // intended labels on the working grid
      const double period = cfg.working_period_s;
      const auto working = static_cast<std::size_t>((frames_per_episode - 1) / factor) + 1;
      const double t_end = static_cast<double>(working - 1) * period;
      for (std::size_t i = rule.history_steps; i + rule.future_steps < working; i += 1) {
        const double t = static_cast<double>(i) * period;
        Lateral lat = Lateral::keep;
        if (plan.lane_delta != 0) {
          const double hi = std::min(t + static_cast<double>(rule.lane_window_steps) * period, t_end);
          const double lo = std::max(t - static_cast<double>(rule.lane_window_steps) * period, 0.0);
          if (plan.event_s > lo && plan.event_s <= hi) {
            lat = plan.lane_delta < 0 ? Lateral::left_change : Lateral::right_change;
          }
        }
        const std::size_t k = std::max<std::size_t>(1, std::min({rule.speed_window_steps, rule.history_steps, i}));
        const double back = static_cast<double>(k) * period;
        const double horizon = static_cast<double>(rule.future_steps) * period;
        const double speed_now = (plan.y(t, cfg) - plan.y(t - back, cfg)) / back;
        const double mean_future = (plan.y(t + horizon, cfg) - plan.y(t, cfg)) / horizon;
        const Longitudinal lon =
            mean_future < rule.braking_ratio * speed_now ? Longitudinal::braking : Longitudinal::normal;
        out.labels.push_back({track.vehicle_id, frame0 + static_cast<std::int64_t>(i) * factor, {lat, lon}});
      }
      out.tracks.push_back(std::move(track));
    }
  }
  return out;
}

}  // namespace ietp
