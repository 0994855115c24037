#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "support.hpp"

using namespace ctrsink;
using ctrsink::testing::TensorD;

TEST(Tensor, MatmulMatchesHandComputed) {
  auto a = TensorD::from(2, 3, {1, 2, 3, 4, 5, 6});
  auto b = TensorD::from(3, 2, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  EXPECT_EQ(c.value(), Matrix<double>(2, 2, {58, 64, 139, 154}));
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tensor, BackwardRejectsNonScalar) {
  auto a = TensorD::from(1, 2, {1, 2}, true);
  EXPECT_THROW(backward(a), ShapeError);
}

TEST(Tensor, GradientsAccumulateAcrossUses) {
  auto a = TensorD::from(1, 1, {3.0}, true);
  auto y = add(mul(a, a), a);  // a^2 + a
  backward(sum(y));
  EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);
}

TEST(Tensor, RepeatedBackwardThroughSharedSubgraphCountsOnce) {
  auto a = TensorD::from(1, 1, {2.0}, true);
  auto shared = mul(a, a);
  backward(sum(scale(shared, 3.0)));
  backward(sum(scale(shared, 5.0)));
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0 * 4.0 + 5.0 * 4.0);
}

TEST(Tensor, NoGradGuardStopsRecording) {
  auto a = TensorD::from(1, 1, {2.0}, true);
  {
    NoGradGuard guard;
    auto y = mul(a, a);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Softmax, RowsSumToOneAndRespectMask) {
  auto x = TensorD::from(2, 3, {1, 2, 3, -1, 0, 1000});
  auto mask = Mask::causal(3);
  auto y = softmax_rows(x);
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 3; ++c) total += y(r, c);
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
  EXPECT_NEAR(y(1, 2), 1.0, 1e-15);  // large logits stay finite
  auto sq = TensorD::from(3, 3, {1, 5, 9, 2, 3, 7, 4, 4, 4});
  auto ym = softmax_rows(sq, &mask);
  EXPECT_EQ(ym(0, 1), 0.0);
  EXPECT_EQ(ym(0, 2), 0.0);
  EXPECT_EQ(ym(1, 2), 0.0);
  EXPECT_DOUBLE_EQ(ym(0, 0), 1.0);
  EXPECT_NEAR(ym(2, 0), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, FullyMaskedRowThrows) {
  Mask m{2, 2, {1, 0, 0, 0}};
  auto x = TensorD::from(2, 2, {1, 2, 3, 4});
  try {
    softmax_rows(x, &m);
    FAIL() << "expected DegenerateRowError";
  } catch (const DegenerateRowError& e) {
    EXPECT_EQ(e.row(), 1u);
  }
}

TEST(Dropout, SameSeedSameMask) {
  auto x = TensorD::from(4, 8, std::vector<double>(32, 1.0));
  auto a = dropout(x, 0.5, 42);
  auto b = dropout(x, 0.5, 42);
  auto c = dropout(x, 0.5, 43);
  EXPECT_EQ(a.value(), b.value());
  EXPECT_NE(a.value(), c.value());
  for (double v : a.data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
  EXPECT_THROW(dropout(x, 1.0, 1), InvalidArgument);
  EXPECT_TRUE(dropout(x, 0.0, 1).same_node(x));
}

TEST(ScatterBlock, RejectsBadPositions) {
  auto b = TensorD::from(2, 2, {1, 2, 3, 4});
  std::vector<std::size_t> unordered{3, 1}, dup{1, 1}, out{1, 5};
  EXPECT_THROW(scatter_block(b, std::span<const std::size_t>(unordered), 5), InvalidArgument);
  EXPECT_THROW(scatter_block(b, std::span<const std::size_t>(dup), 5), InvalidArgument);
  EXPECT_THROW(scatter_block(b, std::span<const std::size_t>(out), 5), InvalidArgument);
}

TEST(BceWithLogits, MatchesStableFormula) {
  auto z = TensorD::from(3, 1, {-40.0, 0.0, 3.0});
  std::vector<int> y{1, 0, 1};
  const double expect = (40.0 + std::log1p(std::exp(-40.0)) + std::log(2.0) + std::log1p(std::exp(-3.0))) / 3.0;
  EXPECT_NEAR(bce_with_logits(z, std::span<const int>(y)).item(), expect, 1e-12);
}

TEST(AdamW, SingleStepMatchesHandComputation) {
  auto p = TensorD::from(1, 1, {1.0}, true);
  p.mutable_grad()[0] = 0.5;
  std::vector<TensorD> params{p};
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  auto state = make_optimizer_state(params, cfg);
  adamw_step(params, state, 0.1);
  // decay: 1 - 0.1*0.01 = 0.999; bias-corrected moments give m/(sqrt(v)+eps) = 0.5/(0.5+1e-8)
  EXPECT_NEAR(p.data()[0], 0.8990000019999999, 1e-15);
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, ZeroLearningRateLeavesParametersButAdvancesMoments) {
  std::mt19937_64 rng(1);
  auto p = ctrsink::testing::random_tensor(3, 4, rng);
  for (auto& g : p.mutable_grad()) g = 0.25;
  const auto before = p.value();
  std::vector<TensorD> params{p};
  auto state = make_optimizer_state(params, AdamWConfig{});
  adamw_step(params, state, 0.0);
  EXPECT_EQ(p.value(), before);
  EXPECT_EQ(state.step, 1u);
  EXPECT_NE(state.first_moment[0][0], 0.0);
}

TEST(AdamW, ShapeMismatchThrows) {
  std::vector<TensorD> params{TensorD::zeros(2, 2, true)};
  auto state = make_optimizer_state(params, AdamWConfig{});
  std::vector<TensorD> other{TensorD::zeros(3, 2, true)};
  EXPECT_THROW(adamw_step(other, state, 0.1), ShapeError);
}

TEST(LrSchedule, WarmupThenLinearDecay) {
  EXPECT_DOUBLE_EQ(lr_at_step(0, 100, 1e-3, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(lr_at_step(5, 100, 1e-3, 0.1), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at_step(10, 100, 1e-3, 0.1), 1e-3);
  EXPECT_NEAR(lr_at_step(55, 100, 1e-3, 0.1), 5e-4, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at_step(100, 100, 1e-3, 0.1), 0.0);
  EXPECT_THROW(lr_at_step(0, 100, 1e-3, 0.0), InvalidArgument);
  EXPECT_THROW(lr_at_step(101, 100, 1e-3, 0.1), InvalidArgument);
}

TEST(SegmentAttention, MatchesComposedKernelsInDouble) {
  // Fused attention against the slice/matmul/softmax composition, with and
  // without sinks, causal and bidirectional, dropout on and off.
  std::mt19937_64 rng(5);
  for (auto arch : {ArchMode::bidirectional, ArchMode::causal}) {
    for (double p : {0.0, 0.3}) {
      ModelConfig cfg;
      cfg.d_model = 16;
      cfg.n_heads = 4;
      cfg.n_layers = 1;
      cfg.d_ff = 16;
      cfg.vocab_size = 30;
      cfg.max_positions = 40;
      cfg.sink_embed_dim = 8;
      cfg.d_max = 16;
      cfg.arch_mode = arch;
      cfg.dropout_p = p;
      cfg.enable_bias_everywhere();
      auto model = init_model<double>(cfg, 11);
      for (auto& t : model.parameters())
        for (auto& v : t.mutable_data()) v *= 20.0;  // sharpen attention
      std::vector<TokenSequence> seqs;
      for (std::size_t i = 0; i < 4; ++i) seqs.push_back(ctrsink::testing::random_sequence(rng, 30, 7 + 3 * i, i));
      std::vector<const TokenSequence*> batch;
      for (auto& s : seqs) batch.push_back(&s);
      std::vector<Segment> segs;
      auto x = detail::embed_batch(model, batch, segs);
      ForwardOptions opt;
      opt.training = true;
      opt.dropout_seed = 77;
      std::vector<std::vector<AttentionRecord>> r1(4), r2(4);
      auto fused = attention_block(x, segs, 0, model, opt, &r1);
      auto composed = attention_block_composed(x, segs, 0, model, opt, &r2);
      for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused.data()[i], composed.data()[i], 1e-12);
      ASSERT_EQ(r1.size(), r2.size());
      for (std::size_t s = 0; s < r1.size(); ++s)
        for (std::size_t h = 0; h < r1[s].size(); ++h)
          for (std::size_t e = 0; e < r1[s][h].matrix.size(); ++e)
            EXPECT_NEAR(r1[s][h].matrix.data[e], r2[s][h].matrix.data[e], 1e-12);

      // gradients through both routes agree as well
      auto w = ctrsink::testing::random_tensor(fused.rows(), fused.cols(), rng, 1.0, false);
      model.zero_grad();
      backward(sum(mul(fused, w)));
      std::vector<std::vector<double>> g1;
      for (auto& t : model.parameters()) g1.emplace_back(t.grad().begin(), t.grad().end());
      model.zero_grad();
      backward(sum(mul(composed, w)));
      auto params = model.parameters();
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t e = 0; e < g1[i].size(); ++e) EXPECT_NEAR(params[i].grad()[e], g1[i][e], 1e-10);
    }
  }
}
