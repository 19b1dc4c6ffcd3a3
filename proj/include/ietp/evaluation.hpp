#pragma once

// Horizon metrics (RMSE of the most probable trajectory, mixture NLL), cross
// learner variance, and per-sample latency against ensemble size.

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/ensemble.hpp"

namespace ietp {

/// Mean trajectory under the argmax maneuver (lowest index on ties), or the
/// only sequence of a maneuver-free prediction.
inline std::vector<Point> select_trajectory(const BaseLearnerPrediction& pred) {
  const std::size_t seq = pred.variant == Variant::with_maneuvers ? pred.maneuver_probs.argmax().offset() : 0;
  std::vector<Point> out;
  for (const GaussianStep& g : pred.gaussians.at(seq)) out.push_back({g.m_x, g.m_y});
  return out;
}

/// Averaged mean trajectory under the voted maneuver.
inline std::vector<Point> select_trajectory(const EnsemblePrediction& pred) {
  const std::size_t seq = pred.voted_maneuver ? pred.voted_maneuver->offset() : 0;
  std::vector<Point> out;
  for (const GaussianStep& g : pred.avg_gaussians.at(seq)) out.push_back({g.m_x, g.m_y});
  return out;
}

/// Mixture over future trajectories: one weight per Gaussian sequence.
struct TrajectoryMixture {
  std::vector<double> weights;
  std::vector<std::vector<GaussianStep>> sequences;
};

inline TrajectoryMixture mixture_of(const BaseLearnerPrediction& pred) {
  if (pred.variant == Variant::without_maneuvers) return {{1.0}, pred.gaussians};
  return {std::vector<double>(pred.maneuver_probs.p.begin(), pred.maneuver_probs.p.end()), pred.gaussians};
}

/// Ensemble mixture weights are the vote shares.
inline TrajectoryMixture mixture_of(const EnsemblePrediction& pred) {
  if (pred.variant == Variant::without_maneuvers) return {{1.0}, pred.avg_gaussians};
  return {std::vector<double>(pred.vote_shares.begin(), pred.vote_shares.end()), pred.avg_gaussians};
}

/// sqrt(mean_i |pred_i(step) - truth_i(step)|^2), Euclidean over (x, y).
/// `step` is 1-based (1 = first future position).
inline double rmse(const std::vector<std::vector<Point>>& preds, const std::vector<std::vector<Point>>& truths,
                   std::size_t step) {
  if (preds.size() != truths.size()) throw DimensionError("rmse: prediction and truth counts differ");
  if (preds.empty()) throw PreconditionError("rmse needs at least one sample");
  double sq = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (step == 0 || step > preds[i].size() || step > truths[i].size()) {
      throw DimensionError("rmse: step outside the horizon");
    }
    const Point& p = preds[i][step - 1];
    const Point& t = truths[i][step - 1];
    sq += (p.x - t.x) * (p.x - t.x) + (p.y - t.y) * (p.y - t.y);
  }
  return std::sqrt(sq / static_cast<double>(preds.size()));
}

/// -log sum_i w_i N2(truth(step); G_i(step)) for one sample.
inline double mixture_step_nll(const TrajectoryMixture& mix, const Point& truth, std::size_t step) {
  std::vector<GaussianStep> modes;
  for (const auto& seq : mix.sequences) modes.push_back(seq.at(step - 1));
  return mixture_nll(mix.weights, modes, truth.x, truth.y);
}

/// Mean over samples of the per-step mixture NLL (nats).
inline double nll(const std::vector<TrajectoryMixture>& preds, const std::vector<std::vector<Point>>& truths,
                  std::size_t step) {
  if (preds.size() != truths.size()) throw DimensionError("nll: prediction and truth counts differ");
  if (preds.empty()) throw PreconditionError("nll needs at least one sample");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += mixture_step_nll(preds[i], truths[i].at(step - 1), step);
  return s / static_cast<double>(preds.size());
}

/// Future steps evaluated: whole seconds 1, 2, ... that fit in the horizon.
inline std::vector<std::size_t> horizon_steps(std::size_t future_steps, double frame_period = 0.2) {
  std::vector<std::size_t> out;
  for (int sec = 1;; ++sec) {
    const auto step = static_cast<std::size_t>(std::llround(sec / frame_period));
    if (step == 0 || step > future_steps) break;
    out.push_back(step);
  }
  if (out.empty()) out.push_back(future_steps);
  return out;
}

struct HorizonMetrics {
  std::vector<double> horizon_s;
  std::vector<double> rmse;  // meters
  std::vector<double> nll;   // nats
  std::size_t k = 0;
};

inline double population_variance(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size());
}

struct FleetStats {
  std::vector<double> horizon_s;
  std::vector<double> base_rmse_var, base_nll_var;
  std::vector<double> ensemble_rmse_var, ensemble_nll_var;

  /// 1 - var_ensemble / var_base per horizon (0 when the base variance is 0).
  static std::vector<double> reduction(const std::vector<double>& base, const std::vector<double>& ens) {
    std::vector<double> out;
    for (std::size_t h = 0; h < base.size(); ++h) out.push_back(base[h] > 0.0 ? 1.0 - ens[h] / base[h] : 0.0);
    return out;
  }

  nlohmann::json to_json() const {
    return {{"horizon_s", horizon_s},
            {"base_rmse_variance", base_rmse_var},
            {"base_nll_variance", base_nll_var},
            {"ensemble_rmse_variance", ensemble_rmse_var},
            {"ensemble_nll_variance", ensemble_nll_var},
            {"rmse_variance_reduction", reduction(base_rmse_var, ensemble_rmse_var)},
            {"nll_variance_reduction", reduction(base_nll_var, ensemble_nll_var)}};
  }
};

/// Population variance across learners per horizon, separately for the base
/// and ensemble groups.
inline FleetStats fleet_variance(const std::vector<HorizonMetrics>& base, const std::vector<HorizonMetrics>& ensemble) {
  if (base.size() < 2 || ensemble.size() < 2) throw PreconditionError("fleet variance needs at least two learners");
  FleetStats s;
  s.horizon_s = base.front().horizon_s;
  const std::size_t hn = s.horizon_s.size();
  auto column = [hn](const std::vector<HorizonMetrics>& group, bool use_rmse, std::size_t h) {
    std::vector<double> v;
    for (const auto& m : group) {
      if (m.rmse.size() != hn) throw DimensionError("learners report different horizons");
      v.push_back(use_rmse ? m.rmse[h] : m.nll[h]);
    }
    return v;
  };
  for (std::size_t h = 0; h < hn; ++h) {
    s.base_rmse_var.push_back(population_variance(column(base, true, h)));
    s.base_nll_var.push_back(population_variance(column(base, false, h)));
    s.ensemble_rmse_var.push_back(population_variance(column(ensemble, true, h)));
    s.ensemble_nll_var.push_back(population_variance(column(ensemble, false, h)));
  }
  return s;
}

/// Horizon-wise mean of several learners' metrics.
inline HorizonMetrics mean_metrics(const std::vector<HorizonMetrics>& group) {
  if (group.empty()) throw PreconditionError("no metrics to average");
  HorizonMetrics out = group.front();
  for (std::size_t k = 1; k < group.size(); ++k) {
    for (std::size_t h = 0; h < out.rmse.size(); ++h) {
      out.rmse[h] += group[k].rmse[h];
      out.nll[h] += group[k].nll[h];
    }
  }
  for (std::size_t h = 0; h < out.rmse.size(); ++h) {
    out.rmse[h] /= static_cast<double>(group.size());
    out.nll[h] /= static_cast<double>(group.size());
  }
  return out;
}

struct FleetEvaluation {
  std::vector<HorizonMetrics> base;      // learner 1..N
  std::vector<HorizonMetrics> ensemble;  // ensemble 1..N
  std::vector<double> horizon_s;
};

struct EvalOptions {
  double frame_period = 0.2;
  std::uint64_t tie_seed = 0;
  std::size_t workers = 1;
  std::size_t chunk = 64;
};

/// Metrics of every base learner and every prefix ensemble on the same test
/// samples. Sums are reduced in fixed chunk order, so results do not depend
/// on the worker count.
inline FleetEvaluation evaluate_fleet(std::span<const BaseLearner> fleet, const std::vector<TrajectorySample>& test,
                                      const EvalOptions& opt = {}) {
  if (fleet.empty()) throw PreconditionError("no learners to evaluate");
  if (test.empty()) throw PreconditionError("no test samples");
  const std::size_t n = fleet.size();
  const std::vector<std::size_t> steps = horizon_steps(fleet.front().config().future_steps, opt.frame_period);
  const std::size_t hn = steps.size();
  const std::vector<EnsembleLearner> ensembles = build_ensembles(fleet, opt.tie_seed);
  const std::size_t chunks = (test.size() + opt.chunk - 1) / opt.chunk;
  // per chunk: [group][learner][horizon] squared error and nll sums
  struct Partial {
    std::vector<double> sq, nl;
  };
  const std::size_t cells = 2 * n * hn;
  std::vector<Partial> partial(chunks, Partial{std::vector<double>(cells), std::vector<double>(cells)});
  auto cell = [n, hn](std::size_t group, std::size_t learner, std::size_t h) { return (group * n + learner) * hn + h; };

  parallel_for(chunks, opt.workers, [&](std::size_t c) {
    const std::size_t begin = c * opt.chunk;
    const std::size_t end = std::min(test.size(), begin + opt.chunk);
    std::vector<const TrajectorySample*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&test[i]);
    std::vector<std::vector<BaseLearnerPrediction>> member(n);
    for (std::size_t k = 0; k < n; ++k) member[k] = forward_batch(fleet[k], batch);
    Partial& part = partial[c];
    auto accumulate = [&](std::size_t group, std::size_t learner, const std::vector<Point>& traj,
                          const TrajectoryMixture& mix, const TrajectorySample& s) {
      for (std::size_t h = 0; h < hn; ++h) {
        const Point& p = traj.at(steps[h] - 1);
        const Point& t = s.future.at(steps[h] - 1);
        part.sq[cell(group, learner, h)] += (p.x - t.x) * (p.x - t.x) + (p.y - t.y) * (p.y - t.y);
        part.nl[cell(group, learner, h)] += mixture_step_nll(mix, t, steps[h]);
      }
    };
    std::vector<BaseLearnerPrediction> prefix;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TrajectorySample& s = *batch[i];
      prefix.clear();
      for (std::size_t k = 0; k < n; ++k) {
        const BaseLearnerPrediction& p = member[k][i];
        accumulate(0, k, select_trajectory(p), mixture_of(p), s);
        prefix.push_back(p);
        auto rng = tie_rng_for(ensembles[k].tie_seed, ensembles[k].index, s.id);
        const EnsemblePrediction e = combine(prefix, rng);
        accumulate(1, k, select_trajectory(e), mixture_of(e), s);
      }
    }
  });

  std::vector<double> sq(cells), nl(cells);
  for (const Partial& p : partial) {
    for (std::size_t x = 0; x < cells; ++x) {
      sq[x] += p.sq[x];
      nl[x] += p.nl[x];
    }
  }
  FleetEvaluation out;
  for (std::size_t s : steps) out.horizon_s.push_back(static_cast<double>(s) * opt.frame_period);
  const auto k = static_cast<double>(test.size());
  for (std::size_t group = 0; group < 2; ++group) {
    auto& dest = group == 0 ? out.base : out.ensemble;
    for (std::size_t l = 0; l < n; ++l) {
      HorizonMetrics m;
      m.horizon_s = out.horizon_s;
      m.k = test.size();
      for (std::size_t h = 0; h < hn; ++h) {
        m.rmse.push_back(std::sqrt(sq[cell(group, l, h)] / k));
        m.nll.push_back(nl[cell(group, l, h)] / k);
      }
      dest.push_back(std::move(m));
    }
  }
  return out;
}

/// Long-format metrics: one row per group x learner x horizon.
inline void write_metrics_csv(std::ostream& out, const FleetEvaluation& ev) {
  out << "group,learner,horizon_s,rmse_m,nll_nats,samples\n";
  out.precision(12);
  for (std::size_t group = 0; group < 2; ++group) {
    const auto& rows = group == 0 ? ev.base : ev.ensemble;
    for (std::size_t l = 0; l < rows.size(); ++l)
      for (std::size_t h = 0; h < rows[l].rmse.size(); ++h)
        out << (group == 0 ? "base" : "ensemble") << ',' << l + 1 << ',' << rows[l].horizon_s[h] << ','
            << rows[l].rmse[h] << ',' << rows[l].nll[h] << ',' << rows[l].k << '\n';
  }
}

inline nlohmann::json metrics_json(const HorizonMetrics& m) {
  return {{"horizon_s", m.horizon_s}, {"rmse_m", m.rmse}, {"nll_nats", m.nll}, {"samples", m.k}};
}

/// Summary: mean base row, mean ensemble row and (with >= 2 learners) the
/// fleet variance statistics.
inline nlohmann::json summary_json(const FleetEvaluation& ev) {
  nlohmann::json j{{"learners", ev.base.size()},
                   {"base_mean", metrics_json(mean_metrics(ev.base))},
                   {"ensemble_mean", metrics_json(mean_metrics(ev.ensemble))},
                   {"largest_ensemble", metrics_json(ev.ensemble.back())}};
  if (ev.base.size() >= 2) j["fleet_variance"] = fleet_variance(ev.base, ev.ensemble).to_json();
  return j;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares y = slope * x + intercept.
inline LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw PreconditionError("linear fit needs >= 2 aligned points");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit f;
  f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  f.r2 = (sxx > 0.0 && syy > 0.0) ? (sxy * sxy) / (sxx * syy) : 0.0;
  return f;
}

/// Something that predicts one sample, timed by bench_latency.
struct LatencyModel {
  std::string name;
  std::size_t ensemble_size = 0;  // 0 for a bare base learner
  std::function<void(const TrajectorySample&)> predict;
};

struct LatencyEntry {
  std::string name;
  std::size_t ensemble_size = 0;
  double mean_s = 0.0;
  double stddev_s = 0.0;
  std::size_t calls = 0;
};

struct LatencyReport {
  std::vector<LatencyEntry> entries;
  LinearFit fit;  // mean latency vs ensemble size over ensemble entries

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : entries) {
      rows.push_back({{"name", e.name},
                      {"ensemble_size", e.ensemble_size},
                      {"mean_s", e.mean_s},
                      {"stddev_s", e.stddev_s},
                      {"calls", e.calls}});
    }
    return {{"entries", rows}, {"fit", {{"slope_s", fit.slope}, {"intercept_s", fit.intercept}, {"r2", fit.r2}}}};
  }
};

/// Per-sample latency of each model. One warmup pass over the samples is
/// discarded; then models are timed round-robin per repetition so slow
/// drift affects all of them alike.
inline LatencyReport bench_latency(const std::vector<LatencyModel>& models, const std::vector<TrajectorySample>& samples,
                                   std::size_t repetitions) {
  if (models.empty() || samples.empty()) throw PreconditionError("latency bench needs models and samples");
  repetitions = std::max<std::size_t>(1, repetitions);
  using clock = std::chrono::steady_clock;
  for (const auto& m : models)
    for (const auto& s : samples) m.predict(s);
  std::vector<std::vector<double>> times(models.size());
  for (std::size_t r = 0; r < repetitions; ++r) {
    for (std::size_t k = 0; k < models.size(); ++k) {
      for (const auto& s : samples) {
        const auto t0 = clock::now();
        models[k].predict(s);
        times[k].push_back(std::chrono::duration<double>(clock::now() - t0).count());
      }
    }
  }
  LatencyReport rep;
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < models.size(); ++k) {
    LatencyEntry e;
    e.name = models[k].name;
    e.ensemble_size = models[k].ensemble_size;
    e.calls = times[k].size();
    for (double t : times[k]) e.mean_s += t;
    e.mean_s /= static_cast<double>(e.calls);
    e.stddev_s = std::sqrt(population_variance(times[k]));
    if (e.ensemble_size > 0) {
      xs.push_back(static_cast<double>(e.ensemble_size));
      ys.push_back(e.mean_s);
    }
    rep.entries.push_back(std::move(e));
  }
  if (xs.size() >= 2) rep.fit = linear_fit(xs, ys);
  return rep;
}

}  // namespace ietp
