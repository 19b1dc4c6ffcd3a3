#pragma once

// Combination of base learners: plurality voting over one-hot maneuver
// predictions and elementwise averaging of the Gaussian parameters.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/model.hpp"

namespace ietp {

struct OneHotVote {
  std::array<int, kManeuverCount> v{};

  ManeuverClass label() const {
    return ManeuverClass::from_offset(static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin()));
  }
  friend bool operator==(const OneHotVote&, const OneHotVote&) = default;
};

inline OneHotVote one_hot_vote(ManeuverClass m) {
  OneHotVote o;
  o.v[m.offset()] = 1;
  return o;
}

/// One-hot at argmax(p); ties go to the lowest index.
inline OneHotVote encode_one_hot(const ManeuverDistribution& p) { return one_hot_vote(p.argmax()); }

struct VoteResult {
  ManeuverClass winner;
  std::array<double, kManeuverCount> shares{};  // votes_j / n
};

/// Class with the most votes; several maxima are broken uniformly at random.
inline VoteResult plurality_vote(std::span<const OneHotVote> votes, std::mt19937_64& tie_rng) {
  if (votes.empty()) throw PreconditionError("plurality vote needs at least one vote");
  std::array<int, kManeuverCount> counts{};
  for (const OneHotVote& vote : votes)
    for (std::size_t j = 0; j < kManeuverCount; ++j) counts[j] += vote.v[j];
  const int best = *std::max_element(counts.begin(), counts.end());
  std::vector<std::size_t> tied;
  for (std::size_t j = 0; j < kManeuverCount; ++j)
    if (counts[j] == best) tied.push_back(j);
  std::size_t pick = tied.front();
  if (tied.size() > 1) {
    std::uniform_int_distribution<std::size_t> d(0, tied.size() - 1);
    pick = tied[d(tie_rng)];
  }
  VoteResult r;
  r.winner = ManeuverClass::from_offset(pick);
  const auto n = static_cast<double>(votes.size());
  for (std::size_t j = 0; j < kManeuverCount; ++j) r.shares[j] = counts[j] / n;
  return r;
}

inline ManeuverDistribution decode_to_distribution(ManeuverClass winner) {
  return ManeuverDistribution::one_hot(winner);
}

/// Elementwise mean of (m_x, m_y, s_x, s_y, r) per sequence and step, as a
/// running mean so identical members average to themselves exactly.
inline std::vector<std::vector<GaussianStep>> average_gaussians(std::span<const BaseLearnerPrediction> preds) {
  if (preds.empty()) throw PreconditionError("nothing to average");
  const auto& first = preds.front();
  std::vector<std::vector<GaussianStep>> out = first.gaussians;
  for (std::size_t k = 1; k < preds.size(); ++k) {
    const BaseLearnerPrediction& p = preds[k];
    if (p.variant != first.variant || p.gaussians.size() != out.size()) {
      throw DimensionError("cannot average predictions of different variants");
    }
    const double w = 1.0 / static_cast<double>(k + 1);
    for (std::size_t m = 0; m < out.size(); ++m) {
      if (p.gaussians[m].size() != out[m].size()) throw DimensionError("cannot average different horizons");
      for (std::size_t t = 0; t < out[m].size(); ++t) {
        const GaussianStep& s = p.gaussians[m][t];
        GaussianStep& a = out[m][t];
        a.m_x += (s.m_x - a.m_x) * w;
        a.m_y += (s.m_y - a.m_y) * w;
        a.s_x += (s.s_x - a.s_x) * w;
        a.s_y += (s.s_y - a.s_y) * w;
        a.r += (s.r - a.r) * w;
      }
    }
  }
  return out;
}

struct EnsemblePrediction {
  Variant variant = Variant::with_maneuvers;
  std::optional<ManeuverClass> voted_maneuver;  // absent without maneuvers
  ManeuverDistribution maneuver_probs = ManeuverDistribution::uniform();
  std::array<double, kManeuverCount> vote_shares{};
  std::vector<std::vector<GaussianStep>> avg_gaussians;
  std::size_t n_members = 0;

  nlohmann::json to_json() const {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& seq : avg_gaussians) {
      nlohmann::json steps = nlohmann::json::array();
      for (const GaussianStep& g : seq) {
        steps.push_back({{"m_x", g.m_x}, {"m_y", g.m_y}, {"s_x", g.s_x}, {"s_y", g.s_y}, {"r", g.r}});
      }
      seqs.push_back(std::move(steps));
    }
    nlohmann::json j{{"variant", to_string(variant)},
                     {"maneuver_probs", maneuver_probs.p},
                     {"vote_shares", vote_shares},
                     {"avg_gaussians", std::move(seqs)},
                     {"n_members", n_members}};
    j["voted_maneuver"] = voted_maneuver ? nlohmann::json(voted_maneuver->index()) : nlohmann::json(nullptr);
    return j;
  }
};

/// Votes on the members' maneuver heads and averages their Gaussians.
inline EnsemblePrediction combine(std::span<const BaseLearnerPrediction> members, std::mt19937_64& tie_rng) {
  if (members.empty()) throw PreconditionError("ensemble has no members");
  EnsemblePrediction out;
  out.variant = members.front().variant;
  out.n_members = members.size();
  out.avg_gaussians = average_gaussians(members);
  if (out.variant == Variant::with_maneuvers) {
    std::vector<OneHotVote> votes;
    votes.reserve(members.size());
    for (const auto& m : members) votes.push_back(encode_one_hot(m.maneuver_probs));
    const VoteResult r = plurality_vote(votes, tie_rng);
    out.voted_maneuver = r.winner;
    out.maneuver_probs = decode_to_distribution(r.winner);
    out.vote_shares = r.shares;
  } else {
    out.vote_shares.fill(1.0 / static_cast<double>(kManeuverCount));
  }
  return out;
}

/// The n-th ensemble: base learners 1..n. Members are borrowed.
struct EnsembleLearner {
  std::size_t index = 0;
  std::vector<const BaseLearner*> members;
  std::uint64_t tie_seed = 0;
};

/// Tie-break stream for one (ensemble, sample) prediction.
inline std::mt19937_64 tie_rng_for(std::uint64_t tie_seed, std::size_t ensemble_index, const SampleId& id) {
  std::uint64_t s = derive_seed(tie_seed, ensemble_index);
  s = derive_seed(s, static_cast<std::uint64_t>(id.vehicle_id));
  s = derive_seed(s, static_cast<std::uint64_t>(id.frame));
  return std::mt19937_64(s);
}

inline EnsemblePrediction ensemble_predict(const EnsembleLearner& ensemble, const TrajectorySample& sample) {
  if (ensemble.members.empty()) throw PreconditionError("ensemble has no members");
  std::vector<BaseLearnerPrediction> preds;
  preds.reserve(ensemble.members.size());
  for (const BaseLearner* m : ensemble.members) {
    try {
      preds.push_back(forward(*m, sample));
    } catch (const std::exception& e) {
      throw std::runtime_error("ensemble member " + std::to_string(m->index()) + ": " + e.what());
    }
  }
  auto rng = tie_rng_for(ensemble.tie_seed, ensemble.index, sample.id);
  return combine(preds, rng);
}

/// Ensembles 1..N over a fleet indexed 1..N (in order).
inline std::vector<EnsembleLearner> build_ensembles(std::span<const BaseLearner> fleet, std::uint64_t tie_seed = 0) {
  for (std::size_t k = 0; k < fleet.size(); ++k) {
    if (fleet[k].index() != k + 1) {
      throw PreconditionError("fleet must be ordered and indexed 1..N; position " + std::to_string(k + 1) +
                              " holds learner " + std::to_string(fleet[k].index()));
    }
  }
  std::vector<EnsembleLearner> out;
  for (std::size_t n = 1; n <= fleet.size(); ++n) {
    EnsembleLearner e;
    e.index = n;
    e.tie_seed = tie_seed;
    for (std::size_t k = 0; k < n; ++k) e.members.push_back(&fleet[k]);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace ietp
