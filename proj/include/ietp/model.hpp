#pragma once

// The convolutional social pooling base learner: a shared LSTM encoder over
// every vehicle's history, a grid of neighbor encodings pooled by two
// convolutions and a max pool, a 6-way maneuver head, and an LSTM decoder
// that emits one bivariate Gaussian per future step.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/autodiff.hpp"
#include "ietp/gaussian.hpp"
#include "ietp/maneuver.hpp"
#include "ietp/nn.hpp"
#include "ietp/trajectory_data.hpp"
#include "ietp/util.hpp"

namespace ietp {

/// A call that does not fit the learner's variant.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Variant { with_maneuvers, without_maneuvers };

inline std::string to_string(Variant v) {
  return v == Variant::with_maneuvers ? "with-maneuvers" : "without-maneuvers";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "with-maneuvers" || s == "cs-lstm-m") return Variant::with_maneuvers;
  if (s == "without-maneuvers" || s == "cs-lstm") return Variant::without_maneuvers;
  throw ConfigError("unknown variant '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::with_maneuvers;
  std::size_t encoder_hidden = 64;
  std::size_t decoder_hidden = 128;
  std::size_t conv1_depth = 64;
  std::size_t conv1_kernel_rows = 3;
  std::size_t conv1_kernel_cols = 3;
  std::size_t conv2_depth = 16;
  std::size_t conv2_kernel_rows = 3;
  std::size_t conv2_kernel_cols = 1;
  std::size_t pool_rows = 2;
  std::size_t pool_cols = 1;
  GridSpec grid;
  std::size_t history_steps = 15;
  std::size_t future_steps = 25;
  double leaky_alpha = 0.1;
  double position_unit = 1.0;  // meters per network unit, inputs and outputs

  struct PoolDims {
    std::size_t rows, cols;
  };

  /// Spatial size after conv1, conv2 and pooling on the grid.
  PoolDims pooled_dims() const {
    const auto shrink = [](std::size_t n, std::size_t k) -> std::size_t {
      if (k == 0 || k > n) throw ConfigError("kernel larger than its input in the pooling stack");
      return n - k + 1;
    };
    const std::size_t r2 = shrink(shrink(grid.rows, conv1_kernel_rows), conv2_kernel_rows);
    const std::size_t c2 = shrink(shrink(grid.cols, conv1_kernel_cols), conv2_kernel_cols);
    if (pool_rows == 0 || pool_cols == 0 || pool_rows > r2 || pool_cols > c2) {
      throw ConfigError("pooling window exceeds the convolution output");
    }
    return {r2 / pool_rows, c2 / pool_cols};
  }

  std::size_t pooled_size() const {
    const PoolDims d = pooled_dims();
    return conv2_depth * d.rows * d.cols;
  }
  std::size_t context_size() const { return encoder_hidden + pooled_size(); }
  std::size_t decoder_input_size() const {
    return context_size() + (variant == Variant::with_maneuvers ? kManeuverCount : 0);
  }
  std::size_t sequence_count() const {
    return variant == Variant::with_maneuvers ? kManeuverCount : 1;
  }

  void validate() const {
    if (encoder_hidden == 0 || decoder_hidden == 0 || conv1_depth == 0 || conv2_depth == 0 ||
        future_steps == 0 || !(position_unit > 0.0) || leaky_alpha < 0.0) {
      throw ConfigError("model sizes must be positive");
    }
    pooled_dims();
  }

  nlohmann::json to_json() const {
    return {{"variant", to_string(variant)},
            {"encoder_hidden", encoder_hidden},
            {"decoder_hidden", decoder_hidden},
            {"conv1_depth", conv1_depth},
            {"conv1_kernel", {conv1_kernel_rows, conv1_kernel_cols}},
            {"conv2_depth", conv2_depth},
            {"conv2_kernel", {conv2_kernel_rows, conv2_kernel_cols}},
            {"pool", {pool_rows, pool_cols}},
            {"grid", {{"rows", grid.rows}, {"cols", grid.cols}, {"cell_length", grid.cell_length}}},
            {"history_steps", history_steps},
            {"future_steps", future_steps},
            {"leaky_alpha", leaky_alpha},
            {"position_unit", position_unit}};
  }

  /// Fields absent from `j` keep their current values.
  static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig{}); }
  static ModelConfig from_json(const nlohmann::json& j, ModelConfig c) {
    try {
      if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
      };
      get("encoder_hidden", c.encoder_hidden);
      get("decoder_hidden", c.decoder_hidden);
      get("conv1_depth", c.conv1_depth);
      get("conv2_depth", c.conv2_depth);
      get("history_steps", c.history_steps);
      get("future_steps", c.future_steps);
      get("leaky_alpha", c.leaky_alpha);
      get("position_unit", c.position_unit);
      if (j.contains("conv1_kernel")) {
        c.conv1_kernel_rows = j["conv1_kernel"].at(0).get<std::size_t>();
        c.conv1_kernel_cols = j["conv1_kernel"].at(1).get<std::size_t>();
      }
      if (j.contains("conv2_kernel")) {
        c.conv2_kernel_rows = j["conv2_kernel"].at(0).get<std::size_t>();
        c.conv2_kernel_cols = j["conv2_kernel"].at(1).get<std::size_t>();
      }
      if (j.contains("pool")) {
        c.pool_rows = j["pool"].at(0).get<std::size_t>();
        c.pool_cols = j["pool"].at(1).get<std::size_t>();
      }
      if (j.contains("grid")) {
        const auto& g = j["grid"];
        if (g.contains("rows")) c.grid.rows = g["rows"].get<std::size_t>();
        if (g.contains("cols")) c.grid.cols = g["cols"].get<std::size_t>();
        if (g.contains("cell_length")) c.grid.cell_length = g["cell_length"].get<double>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Probability vector over the six maneuvers.
struct ManeuverDistribution {
  std::array<double, kManeuverCount> p{};

  static ManeuverDistribution uniform() {
    ManeuverDistribution d;
    d.p.fill(1.0 / static_cast<double>(kManeuverCount));
    return d;
  }

  static ManeuverDistribution one_hot(ManeuverClass m) {
    ManeuverDistribution d;
    d.p[m.offset()] = 1.0;
    return d;
  }

  /// Most probable maneuver; ties go to the lowest index.
  ManeuverClass argmax() const {
    return ManeuverClass::from_offset(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()));
  }

  double total() const {
    double s = 0.0;
    for (double v : p) s += v;
    return s;
  }
};

struct BaseLearnerPrediction {
  Variant variant = Variant::with_maneuvers;
  ManeuverDistribution maneuver_probs = ManeuverDistribution::uniform();
  /// 6 x t_f with maneuvers (row = maneuver offset), 1 x t_f without.
  std::vector<std::vector<GaussianStep>> gaussians;
};

/// One trained (or freshly initialized) network with its 1-based fleet index.
class BaseLearner {
 public:
  BaseLearner() = default;

  BaseLearner(const ModelConfig& cfg, std::size_t index, std::uint64_t seed)
      : config_(cfg), index_(index) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t he = cfg.encoder_hidden, hd = cfg.decoder_hidden;
    add_lstm("encoder", 2, he, rng);
    const std::size_t k1 = cfg.conv1_kernel_rows * cfg.conv1_kernel_cols;
    const std::size_t k2 = cfg.conv2_kernel_rows * cfg.conv2_kernel_cols;
    add("conv1.kernel", uniform_init({cfg.conv1_depth, he, cfg.conv1_kernel_rows, cfg.conv1_kernel_cols}, he * k1, rng));
    add("conv1.bias", uniform_init({cfg.conv1_depth}, he * k1, rng));
    add("conv2.kernel", uniform_init({cfg.conv2_depth, cfg.conv1_depth, cfg.conv2_kernel_rows, cfg.conv2_kernel_cols},
                                     cfg.conv1_depth * k2, rng));
    add("conv2.bias", uniform_init({cfg.conv2_depth}, cfg.conv1_depth * k2, rng));
    const std::size_t ctx = cfg.context_size();
    if (cfg.variant == Variant::with_maneuvers) {
      add("maneuver.weight", uniform_init({ctx, kManeuverCount}, ctx, rng));
      add("maneuver.bias", uniform_init({kManeuverCount}, ctx, rng));
    }
    add_lstm("decoder", cfg.decoder_input_size(), hd, rng);
    add("head.weight", uniform_init({hd, 5}, hd, rng));
    add("head.bias", uniform_init({5}, hd, rng));
  }

  /// Rebuilds a learner from stored parameters; names and shapes must match
  /// what the config would create.
  static BaseLearner from_parameters(const ModelConfig& cfg, std::size_t index,
                                     std::vector<Parameter> params) {
    BaseLearner reference(cfg, index, 0);
    if (params.size() != reference.params_.size()) {
      throw ConfigError("weight set has " + std::to_string(params.size()) + " tensors, config expects " +
                        std::to_string(reference.params_.size()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Parameter& want = reference.params_[k];
      if (params[k].name != want.name || params[k].value.shape() != want.value.shape()) {
        throw ConfigError("weight tensor " + params[k].name + " " + shape_string(params[k].value.shape()) +
                          " does not match expected " + want.name + " " + shape_string(want.value.shape()));
      }
      params[k].grad = Tensor(params[k].value.shape());
    }
    reference.params_ = std::move(params);
    return reference;
  }

  const ModelConfig& config() const { return config_; }
  std::size_t index() const { return index_; }
  void set_index(std::size_t i) { index_ = i; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  Parameter& parameter(std::string_view name) { return params_.at(slot(name)); }
  const Parameter& parameter(std::string_view name) const { return params_.at(slot(name)); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// FNV-1a over parameter names, shapes and values.
  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& p : params_) {
      h.update(p.name);
      for (std::size_t d : p.value.shape()) h.update(&d, sizeof d);
      h.update(p.value.data().data(), p.value.size() * sizeof(double));
    }
    return h.digest();
  }

 private:
  void add(std::string name, Tensor t) { params_.emplace_back(std::move(name), std::move(t)); }

  void add_lstm(const std::string& prefix, std::size_t in, std::size_t hidden, std::mt19937_64& rng) {
    LstmWeights w(prefix, in, hidden, rng);
    params_.push_back(std::move(w.w_ih));
    params_.push_back(std::move(w.w_hh));
    params_.push_back(std::move(w.bias));
  }

  std::size_t slot(std::string_view name) const {
    for (std::size_t k = 0; k < params_.size(); ++k)
      if (params_[k].name == name) return k;
    throw std::out_of_range("no parameter named " + std::string(name));
  }

  ModelConfig config_;
  std::size_t index_ = 1;
  std::vector<Parameter> params_;
};

/// Graph handles for every learner parameter.
struct BoundWeights {
  Var enc_w_ih, enc_w_hh, enc_bias;
  Var conv1_kernel, conv1_bias, conv2_kernel, conv2_bias;
  std::optional<Var> maneuver_weight, maneuver_bias;
  Var dec_w_ih, dec_w_hh, dec_bias;
  Var head_weight, head_bias;
};

namespace detail {

template <class Learner, class BindFn>
BoundWeights bind_with(Learner& learner, BindFn bind) {
  BoundWeights w;
  w.enc_w_ih = bind(learner.parameter("encoder.w_ih"));
  w.enc_w_hh = bind(learner.parameter("encoder.w_hh"));
  w.enc_bias = bind(learner.parameter("encoder.bias"));
  w.conv1_kernel = bind(learner.parameter("conv1.kernel"));
  w.conv1_bias = bind(learner.parameter("conv1.bias"));
  w.conv2_kernel = bind(learner.parameter("conv2.kernel"));
  w.conv2_bias = bind(learner.parameter("conv2.bias"));
  if (learner.config().variant == Variant::with_maneuvers) {
    w.maneuver_weight = bind(learner.parameter("maneuver.weight"));
    w.maneuver_bias = bind(learner.parameter("maneuver.bias"));
  }
  w.dec_w_ih = bind(learner.parameter("decoder.w_ih"));
  w.dec_w_hh = bind(learner.parameter("decoder.w_hh"));
  w.dec_bias = bind(learner.parameter("decoder.bias"));
  w.head_weight = bind(learner.parameter("head.weight"));
  w.head_bias = bind(learner.parameter("head.bias"));
  return w;
}

}  // namespace detail

/// Parameters as trainable leaves; backward() accumulates into their grads.
inline BoundWeights bind_trainable(Graph& g, BaseLearner& learner) {
  return detail::bind_with(learner, [&g](Parameter& p) { return g.param(p); });
}

inline BoundWeights bind_frozen(Graph& g, const BaseLearner& learner) {
  return detail::bind_with(learner, [&g](const Parameter& p) { return g.frozen(p); });
}

struct Encoded {
  Var target_state;  // B x encoder_hidden
  Var social;        // B x encoder_hidden x rows x cols
};

/// Runs every vehicle history of the batch through the shared encoder and
/// scatters neighbor final states into the social grid.
inline Encoded encode(Graph& g, const ModelConfig& cfg, const BoundWeights& w,
                      std::span<const TrajectorySample* const> batch) {
  const std::size_t b = batch.size();
  const std::size_t steps = cfg.history_steps + 1;
  std::vector<const std::vector<Point>*> histories;
  std::vector<std::pair<std::size_t, ad::GridSlot>> slots;
  for (const TrajectorySample* s : batch) histories.push_back(&s->target_history);
  for (std::size_t k = 0; k < b; ++k) {
    for (const NeighborHistory& n : batch[k]->neighbors) {
      if (n.row >= cfg.grid.rows || n.col >= cfg.grid.cols) {
        throw DimensionError("neighbor cell outside the social grid");
      }
      slots.emplace_back(histories.size(), ad::GridSlot{k, n.row, n.col});
      histories.push_back(&n.history);
    }
  }
  for (const auto* h : histories) {
    if (h->size() != steps) {
      throw DimensionError("history length " + std::to_string(h->size()) + " differs from t_h + 1 = " +
                           std::to_string(steps));
    }
  }
  const std::size_t v = histories.size();
  const std::size_t he = cfg.encoder_hidden;
  const double inv_unit = 1.0 / cfg.position_unit;
  LstmState state{g.constant(Tensor({v, he})), g.constant(Tensor({v, he}))};
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor x({v, 2});
    for (std::size_t r = 0; r < v; ++r) {
      x(r, 0) = (*histories[r])[t].x * inv_unit;
      x(r, 1) = (*histories[r])[t].y * inv_unit;
    }
    state = lstm_cell(g.constant(std::move(x)), state, w.enc_w_ih, w.enc_w_hh, w.enc_bias);
  }
  Encoded out;
  out.target_state = ad::slice_rows(state.h, 0, b);
  out.social = ad::scatter_to_grid(state.h, slots, b, cfg.grid.rows, cfg.grid.cols);
  return out;
}

/// conv -> leaky-ReLU -> conv -> leaky-ReLU -> max pool -> flatten (B x F).
inline Var pool(const ModelConfig& cfg, const BoundWeights& w, const Var& social) {
  const Tensor& s = social.value();
  if (s.rank() != 4 || s.dim(1) != cfg.encoder_hidden || s.dim(2) != cfg.grid.rows || s.dim(3) != cfg.grid.cols) {
    throw ConfigError("social tensor " + shape_string(s.shape()) + " does not match the model config");
  }
  const std::size_t b = s.dim(0);
  Var x = ad::leaky_relu(ad::conv2d(social, w.conv1_kernel, &w.conv1_bias), cfg.leaky_alpha);
  x = ad::leaky_relu(ad::conv2d(x, w.conv2_kernel, &w.conv2_bias), cfg.leaky_alpha);
  x = ad::maxpool2d(x, cfg.pool_rows, cfg.pool_cols);
  return ad::reshape(x, {b, cfg.pooled_size()});
}

/// Target encoding followed by pooled social features.
inline Var context(const ModelConfig& cfg, const BoundWeights& w, const Encoded& enc) {
  return ad::concat_cols({enc.target_state, pool(cfg, w, enc.social)});
}

inline Var maneuver_logits(const ModelConfig& cfg, const BoundWeights& w, const Var& ctx) {
  if (cfg.variant != Variant::with_maneuvers || !w.maneuver_weight) {
    throw UsageError("maneuver head exists only in the with-maneuvers variant");
  }
  return ad::add_row_bias(ad::matmul(ctx, *w.maneuver_weight), *w.maneuver_bias);
}

/// Unrolls the decoder t_f steps on a constant input; returns one B x 5 raw
/// head output per step.
inline std::vector<Var> decode(const ModelConfig& cfg, const BoundWeights& w, const Var& decoder_input) {
  Graph& g = *decoder_input.graph;
  if (decoder_input.value().rank() != 2 || decoder_input.value().dim(1) != cfg.decoder_input_size()) {
    throw DimensionError("decoder input " + shape_string(decoder_input.shape()) + " does not match " +
                         std::to_string(cfg.decoder_input_size()) + " columns");
  }
  const std::size_t rows = decoder_input.value().dim(0);
  const std::size_t hd = cfg.decoder_hidden;
  Var gates = ad::add_row_bias(ad::matmul(decoder_input, w.dec_w_ih), w.dec_bias);
  LstmState state{g.constant(Tensor({rows, hd})), g.constant(Tensor({rows, hd}))};
  std::vector<Var> out;
  out.reserve(cfg.future_steps);
  for (std::size_t t = 0; t < cfg.future_steps; ++t) {
    state = lstm_step_from_gates(gates, state, w.dec_w_hh);
    out.push_back(ad::add_row_bias(ad::matmul(state.h, w.head_weight), w.head_bias));
  }
  return out;
}

/// Rows of one-hot maneuver codes.
inline Tensor one_hot_rows(std::span<const ManeuverClass> maneuvers) {
  Tensor t({maneuvers.size(), kManeuverCount});
  for (std::size_t i = 0; i < maneuvers.size(); ++i) t(i, maneuvers[i].offset()) = 1.0;
  return t;
}

/// Batched inference. With maneuvers, the decoder runs once per maneuver on
/// the same context.
inline std::vector<BaseLearnerPrediction> forward_batch(const BaseLearner& learner,
                                                        std::span<const TrajectorySample* const> batch) {
  const ModelConfig& cfg = learner.config();
  Graph g;
  const BoundWeights w = bind_frozen(g, learner);
  const Encoded enc = encode(g, cfg, w, batch);
  const Var ctx = context(cfg, w, enc);
  const std::size_t b = batch.size();
  const std::size_t seqs = cfg.sequence_count();
  std::vector<BaseLearnerPrediction> preds(b);
  Var dec_in = ctx;
  if (cfg.variant == Variant::with_maneuvers) {
    const Tensor probs = ad::softmax(maneuver_logits(cfg, w, ctx)).value();
    const Tensor& c = ctx.value();
    const std::size_t cw = c.dim(1);
    Tensor in({seqs * b, cw + kManeuverCount});
    for (std::size_t m = 0; m < seqs; ++m) {
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t r = m * b + i;
        std::copy_n(c.data().begin() + static_cast<std::ptrdiff_t>(i * cw), cw,
                    in.data().begin() + static_cast<std::ptrdiff_t>(r * (cw + kManeuverCount)));
        in(r, cw + m) = 1.0;
      }
    }
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t m = 0; m < kManeuverCount; ++m) preds[i].maneuver_probs.p[m] = probs(i, m);
    dec_in = g.constant(std::move(in));
  }
  const std::vector<Var> raw = decode(cfg, w, dec_in);
  for (std::size_t i = 0; i < b; ++i) {
    preds[i].variant = cfg.variant;
    preds[i].gaussians.assign(seqs, std::vector<GaussianStep>(cfg.future_steps));
  }
  for (std::size_t t = 0; t < cfg.future_steps; ++t) {
    const Tensor& r = raw[t].value();
    for (std::size_t m = 0; m < seqs; ++m)
      for (std::size_t i = 0; i < b; ++i)
        preds[i].gaussians[m][t] = gaussian_from_raw(
            std::span<const double>(r.data().data() + (m * b + i) * 5, 5), cfg.position_unit);
  }
  return preds;
}

inline BaseLearnerPrediction forward(const BaseLearner& learner, const TrajectorySample& sample) {
  const TrajectorySample* one[] = {&sample};
  return std::move(forward_batch(learner, one).front());
}

/// Target state and social tensor (encoder_hidden x rows x cols) of one sample.
inline std::pair<Tensor, Tensor> encode_sample(const BaseLearner& learner, const TrajectorySample& sample) {
  Graph g;
  const BoundWeights w = bind_frozen(g, learner);
  const TrajectorySample* one[] = {&sample};
  const Encoded e = encode(g, learner.config(), w, one);
  const ModelConfig& cfg = learner.config();
  return {e.target_state.value().reshaped({cfg.encoder_hidden}),
          e.social.value().reshaped({cfg.encoder_hidden, cfg.grid.rows, cfg.grid.cols})};
}

/// Pooled social features of one social tensor (encoder_hidden x rows x cols).
inline Tensor pool_social(const BaseLearner& learner, const Tensor& social) {
  const ModelConfig& cfg = learner.config();
  Graph g;
  const BoundWeights w = bind_frozen(g, learner);
  Shape batched{1};
  batched.insert(batched.end(), social.shape().begin(), social.shape().end());
  const Var out = pool(cfg, w, g.constant(social.reshaped(batched)));
  return out.value().reshaped({cfg.pooled_size()});
}

/// Decoder context = target state followed by pooled social features.
inline Tensor context_vector(const BaseLearner& learner, const TrajectorySample& sample) {
  const auto [target, social] = encode_sample(learner, sample);
  const Tensor pooled = pool_social(learner, social);
  std::vector<double> v(target.values());
  v.insert(v.end(), pooled.values().begin(), pooled.values().end());
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

inline ManeuverDistribution predict_maneuvers(const BaseLearner& learner, const Tensor& ctx) {
  const ModelConfig& cfg = learner.config();
  if (cfg.variant != Variant::with_maneuvers) {
    throw UsageError("predict_maneuvers called on a learner without maneuver head");
  }
  Graph g;
  const BoundWeights w = bind_frozen(g, learner);
  const Tensor p = ad::softmax(maneuver_logits(cfg, w, g.constant(ctx.reshaped({1, ctx.size()})))).value();
  ManeuverDistribution d;
  for (std::size_t m = 0; m < kManeuverCount; ++m) d.p[m] = p[m];
  return d;
}

/// One Gaussian sequence from a context; the maneuver must be given exactly
/// when the learner has a maneuver head.
inline std::vector<GaussianStep> decode_context(const BaseLearner& learner, const Tensor& ctx,
                                                std::optional<ManeuverClass> maneuver) {
  const ModelConfig& cfg = learner.config();
  const bool needs = cfg.variant == Variant::with_maneuvers;
  if (needs != maneuver.has_value()) {
    throw UsageError(needs ? "decode needs a maneuver for the with-maneuvers variant"
                           : "decode takes no maneuver for the without-maneuvers variant");
  }
  std::vector<double> in(ctx.values());
  if (maneuver) {
    for (std::size_t m = 0; m < kManeuverCount; ++m) in.push_back(m == maneuver->offset() ? 1.0 : 0.0);
  }
  Graph g;
  const BoundWeights w = bind_frozen(g, learner);
  const std::size_t width = in.size();
  const std::vector<Var> raw = decode(cfg, w, g.constant(Tensor({1, width}, std::move(in))));
  std::vector<GaussianStep> out;
  for (const Var& r : raw) out.push_back(gaussian_from_raw(r.value().data(), cfg.position_unit));
  return out;
}

}  // namespace ietp
