#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace ctrsink;

namespace {

double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

struct Task {
  LabeledSequences data;
  ModelConfig cfg;
};

Task small_task(std::size_t n_users, std::uint64_t seed, SinkMode mode = SinkMode::info_sink) {
  SynthParams sp;
  sp.n_users = n_users;
  sp.history_len = 16;
  sp.recency_window = 4;
  sp.n_categories = 8;
  sp.items_per_category = 4;
  auto samples = synth_dataset(sp, seed);
  auto vocab = vocab_from_samples(samples);
  PipelineConfig pc;
  pc.k = 6;
  pc.mode = mode;
  pc.d_max = 16;
  auto rep = make_rep_table(vocab, pc.rep_dim, pc.rep_seed);
  Task t{prepare_sequences(samples, pc, vocab, rep), {}};
  t.cfg.d_model = 32;
  t.cfg.n_layers = 2;
  t.cfg.n_heads = 4;
  t.cfg.d_ff = 64;
  t.cfg.vocab_size = vocab.size();
  t.cfg.max_positions = 64;
  t.cfg.sink_embed_dim = 16;
  t.cfg.d_max = 16;
  if (mode != SinkMode::none) t.cfg.enable_bias_everywhere();
  return t;
}

}  // namespace

TEST(BceLoss, Oracles) {
  EXPECT_NEAR(bce_loss(0.0, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(0.0, 1), std::log(2.0), 1e-15);
  EXPECT_LE(bce_loss(20.0, 1), 1e-8);
  EXPECT_LE(bce_loss(-20.0, 0), 1e-8);
  EXPECT_TRUE(std::isfinite(bce_loss(1000.0, 0)));
  EXPECT_NEAR(bce_loss(1000.0, 0), 1000.0, 1e-9);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  for (int i = 0; i < 1000; ++i) {
    const long double z = u(rng);
    const int y = int(rng() % 2);
    const long double s = 1.0L / (1.0L + std::exp(-z));
    const long double direct = -(y * std::log(s) + (1 - y) * std::log(1.0L - s));
    EXPECT_NEAR(bce_loss(double(z), y), double(direct), 1e-12);
  }
}

TEST(BceLoss, TensorFormIsBatchMean) {
  auto z = Tensor<double>::from(3, 1, {0.3, -2.0, 5.0});
  std::vector<int> y{1, 0, 0};
  const double expect = (bce_loss(0.3, 1) + bce_loss(-2.0, 0) + bce_loss(5.0, 0)) / 3.0;
  EXPECT_NEAR(bce_with_logits(z, std::span<const int>(y)).item(), expect, 1e-15);
}

TEST(Auc, ExamplesAndErrors) {
  std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  std::vector<int> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auc(s, y), 0.75);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{1, 2, 3, 4}, y), 1.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>(4, 0.2), y), 0.5);
  EXPECT_THROW(auc(s, std::vector<int>{1, 1, 1, 1}), SingleClassError);
  EXPECT_THROW(auc(s, std::vector<int>{1, 0}), InvalidArgument);
}

TEST(Auc, RankStatisticMatchesPairOracleAndIsMonotoneInvariant) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng() % 12) / 4.0;  // coarse grid: plenty of ties
      y[i] = int(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    const double a = auc(s, y);
    EXPECT_NEAR(a, pair_auc(s, y), 1e-12);
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
    EXPECT_EQ(auc(t, y), a);
  }
}

TEST(TrainStage, ZeroLearningRateLeavesParametersUnchanged) {
  auto task = small_task(1, 3);
  auto model = init_model<float>(task.cfg, 1);
  const auto before = model;
  StageConfig st;
  st.epochs = 1;
  st.peak_lr = 0.0;
  st.weight_decay = 0.01;
  train_stage(model, task.data, nullptr, st);
  auto a = before.named_parameters();
  auto b = model.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.value(), b[i].second.value()) << a[i].first;
}

TEST(TrainStage, DeterministicUnderSeed) {
  auto task = small_task(96, 4);
  StageConfig st;
  st.epochs = 2;
  st.batch_size = 16;
  st.seed = 11;
  auto m1 = init_model<float>(task.cfg, 2);
  auto m2 = init_model<float>(task.cfg, 2);
  auto l1 = train_stage(m1, task.data, &task.data, st);
  auto l2 = train_stage(m2, task.data, &task.data, st);
  std::ostringstream s1, s2;
  write_training_log(s1, l1);
  write_training_log(s2, l2);
  EXPECT_EQ(s1.str(), s2.str());
  auto a = m1.named_parameters();
  auto b = m2.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.value(), b[i].second.value());
}

TEST(TrainStage, RejectsSinkMeanWithoutSinks) {
  auto task = small_task(8, 5, SinkMode::none);
  auto model = init_model<float>(task.cfg, 1);
  StageConfig st;
  st.pooling = Pooling::sink_mean;
  EXPECT_THROW(train_stage(model, task.data, nullptr, st), InvalidArgument);
  st.pooling = std::nullopt;
  st.epochs = 0;
  EXPECT_THROW(train_stage(model, task.data, nullptr, st), InvalidArgument);
  LabeledSequences empty;
  st.epochs = 1;
  EXPECT_THROW(train_stage(model, empty, nullptr, st), InvalidArgument);
}

TEST(TrainStage, MemorizesSixtyFourSamples) {
  auto task = small_task(64, 6);
  task.cfg.dropout_p = 0.0;
  auto model = init_model<float>(task.cfg, 3);
  StageConfig st;
  st.epochs = 200;
  st.batch_size = 16;
  st.peak_lr = 3e-3;
  st.weight_decay = 0.0;
  st.seed = 5;
  auto log = train_stage(model, task.data, nullptr, st);
  double best = 1e9;
  for (const auto& r : log.epochs) best = std::min(best, r.loss);
  EXPECT_LT(best, 0.05);
  auto ev = evaluate(model, task.data);
  ASSERT_TRUE(ev.auc.has_value());
  EXPECT_GE(*ev.auc, 0.99);
}

TEST(Evaluate, RepeatableAndDropoutFree) {
  auto task = small_task(40, 8);
  task.cfg.dropout_p = 0.5;
  auto model = init_model<float>(task.cfg, 4);
  auto a = evaluate(model, task.data);
  auto b = evaluate(model, task.data, std::nullopt, 7);  // different batching
  ASSERT_EQ(a.scores.size(), b.scores.size());
  for (std::size_t i = 0; i < a.scores.size(); ++i) EXPECT_NEAR(a.scores[i], b.scores[i], 1e-5);
  EXPECT_EQ(a.scores, evaluate(model, task.data).scores);
  EXPECT_EQ(a.mean_loss, evaluate(model, task.data).mean_loss);
  for (std::size_t i = 0; i < 5; ++i) {
    ForwardOptions opt;
    opt.dropout_seed = 1000 + i;
    EXPECT_EQ(double(forward(model, task.data.sequences[i], opt).logits.item()),
              double(forward(model, task.data.sequences[i]).logits.item()));
  }
}

TEST(TwoStage, StepAccountingAndEpochParity) {
  auto task = small_task(50, 9);
  TwoStageConfig ts;
  ts.stage1.epochs = 3;
  ts.stage1.batch_size = 16;
  ts.stage2.epochs = 3;
  ts.stage2.batch_size = 16;
  auto model = init_model<float>(task.cfg, 5);
  auto log = two_stage_train(model, task.data, nullptr, ts);
  const auto steps = planned_steps(task.data.size(), ts.stage1) + planned_steps(task.data.size(), ts.stage2);
  EXPECT_EQ(log.optimizer_steps, steps);
  ASSERT_EQ(log.epochs.size(), 6u);
  EXPECT_EQ(log.epochs[0].stage, "stage1");
  EXPECT_EQ(log.epochs[5].stage, "stage2");

  StageConfig single;
  single.epochs = 6;
  single.batch_size = 16;
  auto m2 = init_model<float>(task.cfg, 5);
  EXPECT_EQ(train_stage(m2, task.data, nullptr, single).optimizer_steps, steps);
}

TEST(TwoStage, ZeroStageOneEpochsIsSingleStage) {
  auto task = small_task(40, 10);
  TwoStageConfig ts;
  ts.stage1.epochs = 0;
  ts.stage2.epochs = 2;
  ts.stage2.batch_size = 8;
  ts.stage2.seed = 3;
  auto m1 = init_model<float>(task.cfg, 6);
  auto m2 = init_model<float>(task.cfg, 6);
  auto l1 = two_stage_train(m1, task.data, nullptr, ts);
  auto l2 = train_stage(m2, task.data, nullptr, ts.stage2);
  std::ostringstream s1, s2;
  write_training_log(s1, l1);
  write_training_log(s2, l2);
  EXPECT_EQ(s1.str(), s2.str());
  auto a = m1.named_parameters();
  auto b = m2.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.value(), b[i].second.value());
}

TEST(TwoStage, RequiresSinks) {
  auto task = small_task(8, 11, SinkMode::none);
  auto model = init_model<float>(task.cfg, 1);
  EXPECT_THROW(two_stage_train(model, task.data, nullptr, TwoStageConfig{}), InvalidArgument);
}

TEST(TrainingLog, LineDelimitedRecords) {
  TrainingLog log;
  log.epochs.push_back({"stage1", 1, 4, 0.001, 0.5, std::nullopt});
  log.epochs.push_back({"stage2", 1, 4, 0.002, 0.25, 0.75});
  std::ostringstream out;
  write_training_log(out, log);
  EXPECT_EQ(out.str(),
            "{\"stage\":\"stage1\",\"epoch\":1,\"step\":4,\"lr\":0.001,\"loss\":0.5,\"val_auc\":null}\n"
            "{\"stage\":\"stage2\",\"epoch\":1,\"step\":4,\"lr\":0.002,\"loss\":0.25,\"val_auc\":0.75}\n");
}
