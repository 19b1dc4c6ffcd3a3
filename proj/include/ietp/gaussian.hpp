#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace ietp {

/// Bivariate normal over one future (x, y) position. s_x and s_y are
/// standard deviations in meters, r the correlation coefficient.
struct GaussianStep {
  double m_x = 0.0;
  double m_y = 0.0;
  double s_x = 1.0;
  double s_y = 1.0;
  double r = 0.0;

  bool valid() const {
    return s_x > 0.0 && s_y > 0.0 && std::abs(r) < 1.0 && std::isfinite(m_x) && std::isfinite(m_y);
  }

  friend bool operator==(const GaussianStep&, const GaussianStep&) = default;
};

/// Head outputs (mx, my, log sx, log sy, atanh r) to a GaussianStep, with
/// means and deviations scaled by `unit` meters.
inline GaussianStep gaussian_from_raw(std::span<const double> raw, double unit = 1.0) {
  return {unit * raw[0], unit * raw[1], unit * std::exp(raw[2]), unit * std::exp(raw[3]),
          std::tanh(raw[4])};
}

/// log N2((x, y); g)
inline double bivariate_log_density(const GaussianStep& g, double x, double y) {
  if (!(g.s_x > 0.0 && g.s_y > 0.0 && std::abs(g.r) < 1.0)) {
    throw std::domain_error("bivariate normal needs s > 0 and |r| < 1");
  }
  const double zx = (x - g.m_x) / g.s_x;
  const double zy = (y - g.m_y) / g.s_y;
  const double om = 1.0 - g.r * g.r;
  const double q = zx * zx + zy * zy - 2.0 * g.r * zx * zy;
  return -std::log(2.0 * std::numbers::pi * g.s_x * g.s_y) - 0.5 * std::log(om) - q / (2.0 * om);
}

/// -log N2(truth; g) in nats.
inline double bivariate_nll(const GaussianStep& g, double x, double y) {
  return -bivariate_log_density(g, x, y);
}

/// -log sum_i max(w_i, floor) * N2(truth; g_i), computed in log space.
inline double mixture_nll(std::span<const double> weights, std::span<const GaussianStep> modes,
                          double x, double y, double floor = 1e-12) {
  if (weights.size() != modes.size() || modes.empty()) {
    throw std::invalid_argument("mixture_nll: weights and modes must be non-empty and aligned");
  }
  std::vector<double> terms(modes.size());
  for (std::size_t i = 0; i < modes.size(); ++i) {
    terms[i] = std::log(std::max(weights[i], floor)) + bivariate_log_density(modes[i], x, y);
  }
  const double mx = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return -(mx + std::log(s));
}

}  // namespace ietp
