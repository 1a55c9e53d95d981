#include <gtest/gtest.h>

#include <random>

#include "fewshot/training.hpp"
#include "test_support.hpp"

using namespace fewshot;

namespace {

SplitSet gaussian_splits(std::uint64_t seed) {
  return partition_classes(synth_gaussian(SyntheticSpec{40, 16, 20, 0.1, 10.0, seed}), 24, 8);
}

TrainOptions quick_options(std::size_t episodes) {
  TrainOptions o;
  o.train_shape = {5, 1, 5};
  o.eval_shape = {5, 1, 5};
  o.episodes = episodes;
  o.val_interval = 50;
  o.val_episodes = 50;
  o.seed = 3;
  return o;
}

EmbedNetParams linear_net(std::uint64_t seed) {
  auto rng = make_rng(seed, rng_stream::init);
  return init_embednet(Variant::linear, 1, rng, 16, 16);
}

}  // namespace

TEST(Adam, HalvingSchedule) {
  Tensor w(Shape{1}, 0.0);
  Adam adam({&w}, AdamOptions{1e-3, 2000});
  EXPECT_EQ(adam.lr_at(0), 1e-3);
  EXPECT_EQ(adam.lr_at(1999), 1e-3);
  EXPECT_EQ(adam.lr_at(2000), 5e-4);
  EXPECT_EQ(adam.lr_at(4500), 2.5e-4);
  Adam flat({&w}, AdamOptions{1e-3, 0});
  EXPECT_EQ(flat.lr_at(100000), 1e-3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w(Shape{2}, std::vector<double>{1.0, -1.0});
  Adam adam({&w}, AdamOptions{0.1, 0});
  w.ensure_grad()[0] = 3.0;
  w.grad()[1] = -0.5;
  adam.step(0);
  EXPECT_NEAR(w[0], 0.9, 1e-7);
  EXPECT_NEAR(w[1], -0.9, 1e-7);
}

TEST(Training, SyntheticClustersReachHighAccuracy) {
  const SplitSet data = gaussian_splits(1);
  EmbedNetParams p = linear_net(1);
  TrainResult r = train(p, data.train, &data.val, quick_options(200));
  EXPECT_GE(r.best_val_acc, 0.99);
  const AccuracyStats test = evaluate(r.best, data.test, {5, 1, 5}, MetricConfig::leaky(0.0, 0.01), 100,
                                      make_rng(3, rng_stream::test));
  EXPECT_GE(test.mean, 0.99);
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  const SplitSet data = gaussian_splits(2);
  TrainOptions o = quick_options(30);
  o.adam.lr = 0.0;
  EmbedNetParams p = linear_net(2);
  const EmbedNetParams before = p;
  train(p, data.train, &data.val, o);
  EXPECT_EQ(p, before);

  const DatasetSplit imgs = synth_images(RandomImageSpec{6, 4, {1, 28, 28}, 1.0, 0.2, 4});
  auto rng = make_rng(5, rng_stream::init);
  EmbedNetParams conv = init_embednet(Variant::omniglot, 1, rng);
  EmbedNetParams conv_before = conv;
  TrainOptions oc = o;
  oc.train_shape = {3, 1, 2};
  oc.episodes = 3;
  oc.val_interval = 0;
  train(conv, imgs, nullptr, oc);
  auto a = conv.trainable();
  auto b = conv_before.trainable();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);
}

TEST(Training, FixedSeedGivesIdenticalLog) {
  const SplitSet data = gaussian_splits(3);
  auto run = [&]() {
    EmbedNetParams p = linear_net(3);
    return train(p, data.train, &data.val, quick_options(120));
  };
  const TrainResult a = run(), b = run();
  EXPECT_EQ(a.log.csv(), b.log.csv());
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.log.records.size(), 120u);
}

TEST(Training, ValidationCadenceAndBestSelection) {
  const SplitSet data = gaussian_splits(4);
  EmbedNetParams p = linear_net(4);
  const TrainResult r = train(p, data.train, &data.val, quick_options(120));
  std::size_t measured = 0;
  for (const auto& rec : r.log.records) {
    if (rec.val_acc) {
      ++measured;
      EXPECT_TRUE((rec.episode + 1) % 50 == 0 || rec.episode == 119);
      EXPECT_LE(*rec.val_acc, r.best_val_acc);
    }
    EXPECT_FALSE(rec.wall_ms.has_value());
  }
  EXPECT_EQ(measured, 3u);
  EXPECT_EQ(r.log.csv().substr(0, 36), "episode,loss,train_acc,val_acc,wall_");
}

TEST(Training, SnapshotsFireBeforeTheStep) {
  const SplitSet data = gaussian_splits(5);
  EmbedNetParams p = linear_net(5);
  std::vector<GradSnapshot> snaps;
  SnapshotRecorder rec({0, 8, 16}, [&](const GradSnapshot& s) { snaps.push_back(s); });
  TrainOptions o = quick_options(17);
  const TrainResult r = train(p, data.train, &data.val, o, &rec);
  ASSERT_EQ(snaps.size(), 3u);
  EXPECT_EQ(snaps[1].iteration, 8u);
  EXPECT_EQ(snaps[0].grad_values.size(), 25u * 5u);
  // Iteration-0 snapshot comes from the initial parameters: loss recomputed from its distances matches the log.
  double loss = 0.0;
  for (std::size_t q = 0; q < 25; ++q) {
    std::vector<double> row(snaps[0].dist_metric.begin() + static_cast<std::ptrdiff_t>(q * 5),
                            snaps[0].dist_metric.begin() + static_cast<std::ptrdiff_t>(q * 5 + 5));
    const auto pr = softmax_over_neg_distances(row);
    loss -= std::log(pr[q / 5]);
  }
  EXPECT_NEAR(loss / 25.0, r.log.records[0].loss, 1e-9);
}

TEST(Training, PooledSnapshotEpisodes) {
  const SplitSet data = gaussian_splits(6);
  EmbedNetParams p = linear_net(6);
  std::vector<GradSnapshot> snaps;
  SnapshotRecorder rec({0}, [&](const GradSnapshot& s) { snaps.push_back(s); });
  TrainOptions o = quick_options(1);
  o.snapshot_episodes = 3;
  train(p, data.train, nullptr, o, &rec);
  ASSERT_EQ(snaps.size(), 1u);
  EXPECT_EQ(snaps[0].grad_values.size(), 3u * 125u);
}

TEST(Training, NonFiniteAbortsWithDump) {
  const SplitSet data = gaussian_splits(7);
  EmbedNetParams p = linear_net(7);
  for (double& w : p.linear_weight.data()) w = 1e200;
  try {
    train(p, data.train, nullptr, quick_options(5));
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.episode(), 0u);
    EXPECT_NE(e.dump().find("episode,0"), std::string::npos);
  }
}

TEST(Training, WallTimeIsOptIn) {
  const SplitSet data = gaussian_splits(8);
  EmbedNetParams p = linear_net(8);
  TrainOptions o = quick_options(3);
  o.record_wall_time = true;
  const TrainResult r = train(p, data.train, nullptr, o);
  for (const auto& rec : r.log.records) EXPECT_TRUE(rec.wall_ms.has_value());
}

TEST(Summary, MeanAndInterval) {
  const AccuracyStats s = summarize({1.0, 0.0, 1.0, 0.0});
  EXPECT_EQ(s.mean, 0.5);
  EXPECT_NEAR(s.ci95, 1.96 * std::sqrt(1.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(summarize({0.3}).ci95, 0.0);
}
