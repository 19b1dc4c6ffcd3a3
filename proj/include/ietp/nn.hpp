#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ietp/autodiff.hpp"

namespace ietp {

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

/// Weights of one LSTM layer. Gate column blocks are ordered
/// input, forget, candidate, output.
struct LstmWeights {
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  Parameter w_ih;  // input_size x 4H
  Parameter w_hh;  // H x 4H
  Parameter bias;  // 4H

  LstmWeights() = default;

  LstmWeights(const std::string& prefix, std::size_t in, std::size_t hidden,
              std::mt19937_64& rng)
      : input_size(in),
        hidden_size(hidden),
        w_ih(prefix + ".w_ih", uniform_init({in, 4 * hidden}, hidden, rng)),
        w_hh(prefix + ".w_hh", uniform_init({hidden, 4 * hidden}, hidden, rng)),
        bias(prefix + ".bias", uniform_init({4 * hidden}, hidden, rng)) {}
};

struct LstmState {
  Var h;
  Var c;
};

/// One LSTM step given the already-projected input gates x*W_ih + b
/// (rows x 4H). Splitting the projection out lets a decoder fed the same
/// input every step project it once.
inline LstmState lstm_step_from_gates(const Var& input_gates, const LstmState& prev,
                                      const Var& w_hh) {
  const std::size_t hidden = prev.h.value().dim(1);
  if (input_gates.value().dim(1) != 4 * hidden || w_hh.value().dim(1) != 4 * hidden ||
      w_hh.value().dim(0) != hidden) {
    throw DimensionError("lstm: hidden size does not match weight shapes");
  }
  Var gates = ad::add(input_gates, ad::matmul(prev.h, w_hh));
  Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
  Var f = ad::sigmoid(ad::slice_cols(gates, hidden, 2 * hidden));
  Var g = ad::tanh(ad::slice_cols(gates, 2 * hidden, 3 * hidden));
  Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, 4 * hidden));
  Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
  Var h = ad::mul(o, ad::tanh(c));
  return {h, c};
}

/// Standard LSTM cell: x (rows x in), h and c (rows x H).
inline LstmState lstm_cell(const Var& x, const LstmState& prev, const Var& w_ih,
                           const Var& w_hh, const Var& bias) {
  if (x.value().rank() != 2 || w_ih.value().rank() != 2 || x.value().dim(1) != w_ih.value().dim(0)) {
    throw DimensionError("lstm: input " + shape_string(x.shape()) + " vs w_ih " +
                         shape_string(w_ih.shape()));
  }
  if (prev.h.value().dim(0) != x.value().dim(0)) {
    throw DimensionError("lstm: state rows differ from input rows");
  }
  Var gates = ad::add_row_bias(ad::matmul(x, w_ih), bias);
  return lstm_step_from_gates(gates, prev, w_hh);
}

struct AdamOptions {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::span<const Parameter> params) {
    for (const Parameter& p : params) {
      first_moment.emplace_back(p.value.shape());
      second_moment.emplace_back(p.value.shape());
    }
  }
};

/// One bias-corrected Adam update of every parameter from its grad.
inline void adam_step(std::span<Parameter> params, AdamState& state,
                      const AdamOptions& opt = {}) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw DimensionError("adam: optimizer state does not match parameter count");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Parameter& p = params[k];
    if (p.grad.shape() != p.value.shape() || state.first_moment[k].shape() != p.value.shape()) {
      throw DimensionError("adam: shape mismatch for " + p.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.epsilon);
    }
  }
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<Parameter> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter& p : params) sq += p.grad.squared_norm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter& p : params) p.grad *= s;
  }
  return norm;
}

}  // namespace ietp
