#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ietp/model.hpp"
#include "ietp/training.hpp"
#include "ietp/weights_io.hpp"
#include "test_support.hpp"

using namespace ietp;
using ietp::testing::random_sample;
using ietp::testing::random_tensor;

namespace {

ModelConfig tiny(Variant v = Variant::with_maneuvers) {
  ModelConfig c;
  c.variant = v;
  c.encoder_hidden = 4;
  c.decoder_hidden = 8;
  c.conv1_depth = 3;
  c.conv2_depth = 2;
  c.history_steps = 3;
  c.future_steps = 4;
  c.position_unit = 5.0;
  return c;
}

void zero(BaseLearner& l, const std::string& name) {
  for (double& v : l.parameter(name).value.values()) v = 0.0;
}

// Naive conv (valid, cross-correlation) + bias + leaky ReLU.
std::vector<double> conv_leaky(const std::vector<double>& in, std::size_t c_in, std::size_t rows, std::size_t cols,
                               const Tensor& k, const Tensor& bias, double alpha, std::size_t& out_rows,
                               std::size_t& out_cols) {
  const std::size_t c_out = k.dim(0), kr = k.dim(2), kc = k.dim(3);
  out_rows = rows - kr + 1;
  out_cols = cols - kc + 1;
  std::vector<double> out(c_out * out_rows * out_cols);
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t r = 0; r < out_rows; ++r)
      for (std::size_t c = 0; c < out_cols; ++c) {
        double s = bias[o];
        for (std::size_t i = 0; i < c_in; ++i)
          for (std::size_t a = 0; a < kr; ++a)
            for (std::size_t b = 0; b < kc; ++b)
              s += k[((o * c_in + i) * kr + a) * kc + b] * in[(i * rows + r + a) * cols + c + b];
        out[(o * out_rows + r) * out_cols + c] = s > 0 ? s : alpha * s;
      }
  return out;
}

std::vector<double> pool_oracle(const BaseLearner& l, const Tensor& social) {
  const ModelConfig& cfg = l.config();
  std::size_t r1, c1, r2, c2;
  const auto x1 = conv_leaky(social.values(), cfg.encoder_hidden, cfg.grid.rows, cfg.grid.cols,
                             l.parameter("conv1.kernel").value, l.parameter("conv1.bias").value, cfg.leaky_alpha, r1, c1);
  const auto x2 = conv_leaky(x1, cfg.conv1_depth, r1, c1, l.parameter("conv2.kernel").value,
                             l.parameter("conv2.bias").value, cfg.leaky_alpha, r2, c2);
  const std::size_t pr = r2 / cfg.pool_rows, pc = c2 / cfg.pool_cols;
  std::vector<double> out;
  for (std::size_t o = 0; o < cfg.conv2_depth; ++o)
    for (std::size_t r = 0; r < pr; ++r)
      for (std::size_t c = 0; c < pc; ++c) {
        double m = -INFINITY;
        for (std::size_t a = 0; a < cfg.pool_rows; ++a)
          for (std::size_t b = 0; b < cfg.pool_cols; ++b)
            m = std::max(m, x2[(o * r2 + r * cfg.pool_rows + a) * c2 + c * cfg.pool_cols + b]);
        out.push_back(m);
      }
  return out;
}

}  // namespace

TEST(ModelConfig, DefaultPooledGeometry) {
  const ModelConfig c;
  const auto d = c.pooled_dims();
  EXPECT_EQ(d.rows, 4u);  // 13 -> 11 -> 9 -> 4
  EXPECT_EQ(d.cols, 1u);  // 3 -> 1 -> 1 -> 1
  EXPECT_EQ(c.pooled_size(), 64u);
  EXPECT_EQ(c.context_size(), 128u);
  EXPECT_EQ(c.decoder_input_size(), 134u);
}

TEST(ModelConfig, JsonRoundTripAndValidation) {
  const ModelConfig c = tiny(Variant::without_maneuvers);
  EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(ModelConfig::from_json({{"variant", "nope"}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_json({{"encoder_hidden", 0}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_json({{"conv1_kernel", {14, 3}}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_json({{"position_unit", -1.0}}), ConfigError);
}

TEST(Encode, NoNeighborsGivesZeroSocialTensor) {
  std::mt19937_64 rng(1);
  const BaseLearner l(tiny(), 1, 3);
  const auto s = random_sample(rng, 3, 4, 0);
  const auto [target, social] = encode_sample(l, s);
  EXPECT_EQ(target.shape(), (Shape{4}));
  for (double v : social.values()) EXPECT_EQ(v, 0.0);
  bool any = false;
  for (double v : target.values()) any = any || v != 0.0;
  EXPECT_TRUE(any);
}

TEST(Encode, OneNeighborFillsOnlyItsCell) {
  std::mt19937_64 rng(2);
  const BaseLearner l(tiny(), 1, 3);
  auto s = random_sample(rng, 3, 4, 1);
  s.neighbors[0].row = 7;
  s.neighbors[0].col = 1;
  const auto [target, social] = encode_sample(l, s);
  const ModelConfig& c = l.config();
  // the cell holds the encoding of the neighbor history
  TrajectorySample alone = s;
  alone.target_history = s.neighbors[0].history;
  alone.neighbors.clear();
  const Tensor expected = encode_sample(l, alone).first;
  for (std::size_t h = 0; h < c.encoder_hidden; ++h)
    for (std::size_t r = 0; r < c.grid.rows; ++r)
      for (std::size_t col = 0; col < c.grid.cols; ++col) {
        const double v = social[(h * c.grid.rows + r) * c.grid.cols + col];
        if (r == 7 && col == 1) {
          EXPECT_DOUBLE_EQ(v, expected[h]);
        } else {
          EXPECT_EQ(v, 0.0);
        }
      }
}

TEST(Encode, NeighborOrderDoesNotMatter) {
  std::mt19937_64 rng(3);
  const BaseLearner l(tiny(), 1, 5);
  auto s = random_sample(rng, 3, 4, 6);
  const auto a = forward(l, s);
  std::reverse(s.neighbors.begin(), s.neighbors.end());
  const auto b = forward(l, s);
  EXPECT_EQ(a.maneuver_probs.p, b.maneuver_probs.p);
  EXPECT_EQ(a.gaussians, b.gaussians);
}

TEST(Encode, BadShapesRejected) {
  std::mt19937_64 rng(4);
  const BaseLearner l(tiny(), 1, 5);
  auto s = random_sample(rng, 5, 4, 0);
  EXPECT_THROW(forward(l, s), DimensionError);
  s = random_sample(rng, 3, 4, 1);
  s.neighbors[0].row = 13;
  EXPECT_THROW(forward(l, s), DimensionError);
}

TEST(Pool, ZeroKernelsAndBiasesGiveZeroOutput) {
  BaseLearner l(tiny(), 1, 7);
  for (const char* n : {"conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias"}) zero(l, n);
  std::mt19937_64 rng(5);
  const Tensor out = pool_social(l, random_tensor({4, 13, 3}, rng));
  EXPECT_EQ(out.size(), l.config().pooled_size());
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Pool, MatchesLoopOracle) {
  std::mt19937_64 rng(6);
  for (std::uint64_t seed : {1, 2, 3}) {
    const BaseLearner l(tiny(), 1, seed);
    const Tensor social = random_tensor({4, 13, 3}, rng, -2.0, 2.0);
    const Tensor out = pool_social(l, social);
    const auto want = pool_oracle(l, social);
    ASSERT_EQ(out.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
  }
}

TEST(Pool, WrongSocialShapeIsConfigError) {
  const BaseLearner l(tiny(), 1, 7);
  EXPECT_THROW(pool_social(l, Tensor({4, 12, 3})), ConfigError);
}

TEST(ManeuverHead, ZeroWeightsGiveUniform) {
  BaseLearner l(tiny(), 1, 8);
  zero(l, "maneuver.weight");
  zero(l, "maneuver.bias");
  std::mt19937_64 rng(7);
  const auto d = predict_maneuvers(l, context_vector(l, random_sample(rng, 3, 4, 3)));
  for (double p : d.p) EXPECT_NEAR(p, 1.0 / 6.0, 1e-15);
}

TEST(ManeuverHead, SumsToOneAndIgnoresCommonShift) {
  BaseLearner l(tiny(), 1, 9);
  std::mt19937_64 rng(8);
  const Tensor ctx = context_vector(l, random_sample(rng, 3, 4, 4));
  EXPECT_EQ(ctx.size(), l.config().context_size());
  const auto a = predict_maneuvers(l, ctx);
  EXPECT_NEAR(a.total(), 1.0, 1e-12);
  for (double& b : l.parameter("maneuver.bias").value.values()) b += 3.7;
  const auto b = predict_maneuvers(l, ctx);
  for (std::size_t m = 0; m < kManeuverCount; ++m) EXPECT_NEAR(a.p[m], b.p[m], 1e-12);
}

TEST(ManeuverHead, VariantMisuseIsUsageError) {
  const BaseLearner plain(tiny(Variant::without_maneuvers), 1, 1);
  const BaseLearner with(tiny(), 1, 1);
  std::mt19937_64 rng(9);
  const auto s = random_sample(rng, 3, 4, 2);
  EXPECT_THROW(predict_maneuvers(plain, context_vector(plain, s)), UsageError);
  EXPECT_THROW(decode_context(plain, context_vector(plain, s), ManeuverClass{}), UsageError);
  EXPECT_THROW(decode_context(with, context_vector(with, s), std::nullopt), UsageError);
}

TEST(Decode, ZeroHeadGivesUnitDeviationAndZeroCorrelation) {
  ModelConfig c = tiny();
  c.position_unit = 1.0;
  BaseLearner l(c, 1, 10);
  zero(l, "head.weight");
  zero(l, "head.bias");
  std::mt19937_64 rng(10);
  const auto seq = decode_context(l, context_vector(l, random_sample(rng, 3, 4, 2)), ManeuverClass{});
  ASSERT_EQ(seq.size(), 4u);
  for (const auto& g : seq) EXPECT_EQ(g, (GaussianStep{0.0, 0.0, 1.0, 1.0, 0.0}));
}

TEST(Decode, DifferentManeuversGiveDifferentSequences) {
  const BaseLearner l(tiny(), 1, 11);
  std::mt19937_64 rng(11);
  const Tensor ctx = context_vector(l, random_sample(rng, 3, 4, 2));
  const auto a = decode_context(l, ctx, ManeuverClass::from_offset(0));
  const auto b = decode_context(l, ctx, ManeuverClass::from_offset(3));
  EXPECT_NE(a, b);
  for (const auto& g : a) EXPECT_TRUE(g.valid());
}

TEST(Forward, OutputShapesPerVariant) {
  std::mt19937_64 rng(12);
  const auto s = random_sample(rng, 3, 4, 5);
  const auto with = forward(BaseLearner(tiny(), 1, 1), s);
  ASSERT_EQ(with.gaussians.size(), 6u);
  for (const auto& seq : with.gaussians) EXPECT_EQ(seq.size(), 4u);
  EXPECT_NEAR(with.maneuver_probs.total(), 1.0, 1e-12);
  const auto plain = forward(BaseLearner(tiny(Variant::without_maneuvers), 1, 1), s);
  ASSERT_EQ(plain.gaussians.size(), 1u);
  EXPECT_EQ(plain.gaussians[0].size(), 4u);
}

TEST(Forward, BatchedEqualsSingleAndComponentwise) {
  std::mt19937_64 rng(13);
  const BaseLearner l(tiny(), 1, 12);
  std::vector<TrajectorySample> samples;
  for (int k = 0; k < 5; ++k) samples.push_back(random_sample(rng, 3, 4, static_cast<std::size_t>(k * 2)));
  std::vector<const TrajectorySample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const auto batch = forward_batch(l, ptrs);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto one = forward(l, samples[k]);
    for (std::size_t m = 0; m < 6; ++m) EXPECT_NEAR(batch[k].maneuver_probs.p[m], one.maneuver_probs.p[m], 1e-12);
    const Tensor ctx = context_vector(l, samples[k]);
    for (std::size_t m = 0; m < 6; ++m) {
      const auto seq = decode_context(l, ctx, ManeuverClass::from_offset(m));
      for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_NEAR(batch[k].gaussians[m][t].m_x, seq[t].m_x, 1e-9);
        EXPECT_NEAR(batch[k].gaussians[m][t].s_y, seq[t].s_y, 1e-9);
        EXPECT_NEAR(batch[k].gaussians[m][t].r, seq[t].r, 1e-12);
      }
    }
  }
}

TEST(Forward, DeterministicForSameSeed) {
  std::mt19937_64 rng(14);
  const auto s = random_sample(rng, 3, 4, 3);
  EXPECT_EQ(BaseLearner(tiny(), 1, 42).checksum(), BaseLearner(tiny(), 1, 42).checksum());
  EXPECT_NE(BaseLearner(tiny(), 1, 42).checksum(), BaseLearner(tiny(), 1, 43).checksum());
  EXPECT_EQ(forward(BaseLearner(tiny(), 1, 42), s).gaussians, forward(BaseLearner(tiny(), 1, 42), s).gaussians);
}

TEST(Forward, TranslatingTheSceneChangesNothing) {
  using ietp::testing::straight_track;
  SampleConfig rule;
  rule.history_steps = 3;
  rule.future_steps = 4;
  auto scene = [&](double dx, double dy) {
    std::vector<RawTrack> t{straight_track(1, 2, 5.5 + dx, 0.0 + dy, 3.0, 12),
                            straight_track(2, 2, 5.6 + dx, 9.0 + dy, 2.5, 12),
                            straight_track(3, 1, 1.9 + dx, -6.0 + dy, 3.3, 12)};
    return build_samples(t, rule).samples;
  };
  const auto a = scene(0.0, 0.0);
  const auto b = scene(123.0, -4567.0);
  ASSERT_EQ(a.size(), b.size());
  const BaseLearner l(tiny(), 1, 13);
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto pa = forward(l, a[k]);
    const auto pb = forward(l, b[k]);
    for (std::size_t m = 0; m < 6; ++m)
      for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_NEAR(pa.gaussians[m][t].m_x, pb.gaussians[m][t].m_x, 1e-9);
        EXPECT_NEAR(pa.gaussians[m][t].m_y, pb.gaussians[m][t].m_y, 1e-9);
      }
  }
}

TEST(Gradients, EndToEndLossMatchesFiniteDifferences) {
  for (Variant v : {Variant::with_maneuvers, Variant::without_maneuvers}) {
    std::mt19937_64 rng(15);
    BaseLearner l(tiny(v), 1, 14);
    std::vector<TrajectorySample> samples;
    for (int k = 0; k < 3; ++k) samples.push_back(random_sample(rng, 3, 4, 3 + k, {}, 5.0));
    std::vector<const TrajectorySample*> batch;
    for (const auto& s : samples) batch.push_back(&s);
    auto loss_of = [&]() {
      Graph g;
      const BoundWeights w = bind_frozen(g, l);
      return batch_loss(g, l.config(), w, batch).value()[0];
    };
    for (Parameter& p : l.parameters()) p.zero_grad();
    {
      Graph g;
      const BoundWeights w = bind_trainable(g, l);
      g.backward(batch_loss(g, l.config(), w, batch));
    }
    std::mt19937_64 pick(16);
    for (Parameter& p : l.parameters()) {
      for (int trial = 0; trial < 6; ++trial) {
        const std::size_t i = pick() % p.value.size();
        const double orig = p.value[i], h = 1e-6;
        p.value[i] = orig + h;
        const double up = loss_of();
        p.value[i] = orig - h;
        const double down = loss_of();
        p.value[i] = orig;
        const double numeric = (up - down) / (2 * h);
        const double analytic = p.grad[i];
        EXPECT_LE(std::abs(analytic - numeric), 1e-5 * std::max({1.0, std::abs(analytic), std::abs(numeric)}))
            << p.name << "[" << i << "]";
      }
    }
  }
}

TEST(Gradients, BatchLossEqualsMeanOfSampleLosses) {
  std::mt19937_64 rng(17);
  const BaseLearner l(tiny(), 1, 15);
  std::vector<TrajectorySample> samples;
  for (int k = 0; k < 4; ++k) samples.push_back(random_sample(rng, 3, 4, 2, {}, 4.0));
  std::vector<const TrajectorySample*> batch;
  double mean = 0.0;
  for (const auto& s : samples) {
    batch.push_back(&s);
    mean += sample_loss(forward(l, s), s) / 4.0;
  }
  Graph g;
  const BoundWeights w = bind_frozen(g, l);
  EXPECT_NEAR(batch_loss(g, l.config(), w, batch).value()[0], mean, 1e-9);
}

TEST(WeightsIo, RoundTripIsBitExact) {
  const BaseLearner l(tiny(), 7, 99);
  std::stringstream buf;
  write_weights(buf, l, {{"note", "x"}});
  const LoadedWeights back = read_weights(buf);
  EXPECT_EQ(back.learner.index(), 7u);
  EXPECT_EQ(back.learner.checksum(), l.checksum());
  EXPECT_EQ(back.meta["note"], "x");
  EXPECT_EQ(back.learner.config().to_json(), l.config().to_json());
}

TEST(WeightsIo, CorruptFilesRejected) {
  const BaseLearner l(tiny(), 1, 1);
  std::stringstream buf;
  write_weights(buf, l);
  std::string bytes = buf.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::istringstream a(bad_magic);
  EXPECT_THROW(read_weights(a), DataError);

  std::string bad_version = bytes;
  const auto pos = bad_version.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  bad_version[pos + 10] = '9';
  std::istringstream b(bad_version);
  EXPECT_THROW(read_weights(b), DataError);

  std::istringstream c(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_weights(c), DataError);
}
