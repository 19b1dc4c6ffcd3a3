#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/model.hpp"

namespace ietp {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 128;
  std::size_t epochs = 8;
  std::uint64_t seed = 0;
  double clip_norm = 10.0;  // <= 0 disables clipping

  void validate() const {
    if (!(learning_rate >= 0.0) || epochs == 0 || batch_size == 0) {
      throw ConfigError("training needs learning_rate >= 0, epochs >= 1, batch_size >= 1");
    }
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"clip_norm", clip_norm}};
  }

  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

  static TrainConfig from_json(const nlohmann::json& j, TrainConfig c) {
    try {
      if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
      if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
      if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
      if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
      if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

struct TrainReport {
  std::size_t learner_index = 0;
  std::vector<double> epoch_loss;  // mean per-sample loss
  double wall_seconds = 0.0;
  std::uint64_t checksum = 0;

  nlohmann::json to_json() const {
    return {{"learner_index", learner_index},
            {"epoch_loss", epoch_loss},
            {"wall_seconds", wall_seconds},
            {"checksum", hex64(checksum)}};
  }
};

/// Training hit a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t learner, std::size_t batch, double grad_norm, const std::string& what)
      : std::runtime_error("learner " + std::to_string(learner) + ", batch " + std::to_string(batch) +
                           " (last grad norm " + std::to_string(grad_norm) + "): " + what),
        learner_(learner),
        batch_(batch) {}
  std::size_t learner() const { return learner_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t learner_;
  std::size_t batch_;
};

/// Mean over the batch of sum_t -log N2(truth_t; G_t | d_true) - log P(d_true).
/// The maneuver term is absent for the without-maneuvers variant.
inline Var batch_loss(Graph& g, const ModelConfig& cfg, const BoundWeights& w,
                      std::span<const TrajectorySample* const> batch) {
  const std::size_t b = batch.size();
  if (b == 0) throw PreconditionError("empty batch");
  const Encoded enc = encode(g, cfg, w, batch);
  const Var ctx = context(cfg, w, enc);
  std::optional<Var> total;
  Var dec_in = ctx;
  if (cfg.variant == Variant::with_maneuvers) {
    std::vector<std::size_t> labels;
    std::vector<ManeuverClass> classes;
    for (const auto* s : batch) {
      labels.push_back(s->maneuver.offset());
      classes.push_back(s->maneuver);
    }
    total = ad::neg_log_prob(maneuver_logits(cfg, w, ctx), labels);
    dec_in = ad::concat_cols({ctx, g.constant(one_hot_rows(classes))});
  }
  const std::vector<Var> raw = decode(cfg, w, dec_in);
  for (std::size_t t = 0; t < cfg.future_steps; ++t) {
    Tensor truth({b, 2});
    for (std::size_t i = 0; i < b; ++i) {
      if (batch[i]->future.size() != cfg.future_steps) {
        throw DimensionError("sample future length differs from t_f");
      }
      truth(i, 0) = batch[i]->future[t].x;
      truth(i, 1) = batch[i]->future[t].y;
    }
    const Var step = ad::gaussian_nll(raw[t], truth, cfg.position_unit);
    total = total ? ad::add(*total, step) : step;
  }
  return ad::scale(ad::sum(*total), 1.0 / static_cast<double>(b));
}

/// Training loss of one sample from an already computed prediction.
inline double sample_loss(const BaseLearnerPrediction& pred, const TrajectorySample& sample,
                          double floor = 1e-12) {
  const bool with = pred.variant == Variant::with_maneuvers;
  const std::size_t seq = with ? sample.maneuver.offset() : 0;
  if (seq >= pred.gaussians.size() || pred.gaussians[seq].size() != sample.future.size()) {
    throw DimensionError("prediction does not match the sample horizon");
  }
  double loss = 0.0;
  for (std::size_t t = 0; t < sample.future.size(); ++t) {
    loss += bivariate_nll(pred.gaussians[seq][t], sample.future[t].x, sample.future[t].y);
  }
  if (with) loss -= std::log(std::max(pred.maneuver_probs.p[sample.maneuver.offset()], floor));
  return loss;
}

struct TrainedLearner {
  BaseLearner learner;
  TrainReport report;
};

/// Seed of the learner trained on bootstrap set `index`.
inline std::uint64_t learner_seed(std::uint64_t master, std::size_t index) {
  return derive_seed(master, 1000 + index);
}

/// Minibatch Adam over shuffled epochs of one bootstrap set. Deterministic
/// given (samples, set, configs).
inline TrainedLearner train_base_learner(const std::vector<TrajectorySample>& samples, const BootstrapSet& set,
                                         const ModelConfig& model_cfg, const TrainConfig& cfg) {
  cfg.validate();
  model_cfg.validate();
  if (set.sample_ids.empty()) throw PreconditionError("bootstrap set is empty");
  for (std::size_t id : set.sample_ids) {
    if (id >= samples.size()) throw PreconditionError("bootstrap id outside the sample list");
  }
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t seed = learner_seed(cfg.seed, set.index);
  TrainedLearner out{BaseLearner(model_cfg, set.index, derive_seed(seed, 0)), {}};
  BaseLearner& learner = out.learner;
  out.report.learner_index = set.index;
  AdamState adam(learner.parameters());
  const AdamOptions opt{cfg.learning_rate, 0.9, 0.999, 1e-8};
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::vector<std::size_t> order = set.sample_ids;
  std::size_t batch_id = 0;
  double last_norm = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_id) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<const TrajectorySample*> batch;
      for (std::size_t k = begin; k < end; ++k) batch.push_back(&samples[order[k]]);
      for (Parameter& p : learner.parameters()) p.zero_grad();
      double loss = 0.0;
      try {
        Graph g;
        const BoundWeights w = bind_trainable(g, learner);
        const Var l = batch_loss(g, model_cfg, w, batch);
        loss = l.value()[0];
        g.backward(l);
      } catch (const std::domain_error& e) {
        throw TrainingError(set.index, batch_id, last_norm, e.what());
      }
      last_norm = clip_grad_norm(learner.parameters(), cfg.clip_norm);
      if (!std::isfinite(loss) || !std::isfinite(last_norm)) {
        throw TrainingError(set.index, batch_id, last_norm, "non-finite loss or gradient");
      }
      adam_step(learner.parameters(), adam, opt);
      loss_sum += loss * static_cast<double>(end - begin);
    }
    out.report.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }
  out.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.report.checksum = learner.checksum();
  return out;
}

/// Some members of a fleet failed; the successful ones are kept.
class FleetError : public std::runtime_error {
 public:
  FleetError(std::vector<std::size_t> failed, std::vector<TrainedLearner> partial, const std::string& what)
      : std::runtime_error(what), failed_(std::move(failed)), partial_(std::move(partial)) {}
  const std::vector<std::size_t>& failed_indices() const { return failed_; }
  std::vector<TrainedLearner>& partial() { return partial_; }

 private:
  std::vector<std::size_t> failed_;
  std::vector<TrainedLearner> partial_;
};

/// One learner per bootstrap set, trained on up to `workers` threads.
/// Results are ordered by bootstrap index.
inline std::vector<TrainedLearner> train_fleet(const std::vector<TrajectorySample>& samples,
                                               const std::vector<BootstrapSet>& sets, const ModelConfig& model_cfg,
                                               const TrainConfig& cfg, std::size_t workers = 1) {
  if (sets.empty()) throw PreconditionError("fleet needs at least one bootstrap set");
  std::vector<std::optional<TrainedLearner>> slots(sets.size());
  std::vector<std::string> errors(sets.size());
  parallel_for(sets.size(), workers, [&](std::size_t k) {
    try {
      slots[k] = train_base_learner(samples, sets[k], model_cfg, cfg);
    } catch (const std::exception& e) {
      errors[k] = e.what();
    }
  });
  std::vector<TrainedLearner> done;
  std::vector<std::size_t> failed;
  std::string message;
  for (std::size_t k = 0; k < sets.size(); ++k) {
    if (slots[k]) {
      done.push_back(std::move(*slots[k]));
    } else {
      failed.push_back(sets[k].index);
      message += (message.empty() ? "" : "; ") + std::string("learner ") + std::to_string(sets[k].index) + ": " +
                 errors[k];
    }
  }
  if (!failed.empty()) throw FleetError(std::move(failed), std::move(done), "fleet training failed: " + message);
  return done;
}

}  // namespace ietp
