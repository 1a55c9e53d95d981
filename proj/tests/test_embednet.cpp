#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fewshot/embednet.hpp"
#include "oracles.hpp"

using namespace fewshot;
using fstest::uniform_tensor;

TEST(EmbedNet, InitIsDeterministic) {
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(init_embednet(Variant::omniglot, 1, a), init_embednet(Variant::omniglot, 1, b));
}

TEST(EmbedNet, InitConventions) {
  std::mt19937_64 rng(6);
  const EmbedNetParams p = init_embednet(Variant::standard, 3, rng);
  ASSERT_EQ(p.blocks.size(), 4u);
  std::size_t in = 3;
  for (const ConvBlock& b : p.blocks) {
    EXPECT_EQ(b.weight.shape(), (Shape{64, in, 3, 3}));
    const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
    for (double w : b.weight.data()) EXPECT_LE(std::abs(w), bound);
    for (double v : b.bias.data()) EXPECT_EQ(v, 0.0);
    for (double v : b.gamma.data()) EXPECT_EQ(v, 1.0);
    for (double v : b.beta.data()) EXPECT_EQ(v, 0.0);
    for (double v : b.bn.running_mean.data()) EXPECT_EQ(v, 0.0);
    for (double v : b.bn.running_var.data()) EXPECT_EQ(v, 1.0);
    EXPECT_TRUE(b.pool);
    in = 64;
  }
  std::mt19937_64 rng2(6);
  EXPECT_FALSE(init_embednet(Variant::omniglot, 1, rng2).blocks.back().pool);
}

TEST(EmbedNet, OmniglotGives576) {
  std::mt19937_64 rng(7);
  EmbedNetParams p = init_embednet(Variant::omniglot, 1, rng);
  EXPECT_EQ(p.embedding_dim(), 576u);
  for (std::size_t batch : {1u, 2u, 3u}) {
    const Tensor z = embed_values(p, uniform_tensor(Shape{batch, 1, 28, 28}, rng, 0, 1), Mode::eval);
    EXPECT_EQ(z.shape(), (Shape{batch, 576}));
  }
  const Tensor z = embed_values(p, uniform_tensor(Shape{2, 1, 28, 28}, rng, 0, 1), Mode::train);
  EXPECT_EQ(z.shape(), (Shape{2, 576}));
}

TEST(EmbedNet, StandardGives1600) {
  std::mt19937_64 rng(8);
  EmbedNetParams p = init_embednet(Variant::standard, 3, rng);
  EXPECT_EQ(p.embedding_dim(), 1600u);
  const Tensor z = embed_values(p, uniform_tensor(Shape{2, 3, 84, 84}, rng, 0, 1), Mode::train);
  EXPECT_EQ(z.shape(), (Shape{2, 1600}));
  EXPECT_TRUE(z.all_finite());
}

TEST(EmbedNet, RejectsWrongInputSize) {
  std::mt19937_64 rng(9);
  EmbedNetParams p = init_embednet(Variant::omniglot, 1, rng);
  EXPECT_THROW(embed_values(p, Tensor(Shape{1, 1, 84, 84}), Mode::eval), ShapeError);
  EXPECT_THROW(embed_values(p, Tensor(Shape{1, 3, 28, 28}), Mode::eval), ShapeError);
  EXPECT_THROW(embed_values(p, Tensor(Shape{28, 28}), Mode::eval), ShapeError);
}

TEST(EmbedNet, EvalModeIsPure) {
  std::mt19937_64 rng(10);
  EmbedNetParams p = init_embednet(Variant::omniglot, 1, rng);
  const Tensor x = uniform_tensor(Shape{3, 1, 28, 28}, rng, 0, 1);
  const EmbedNetParams before = p;
  EXPECT_EQ(embed_values(p, x, Mode::eval), embed_values(p, x, Mode::eval));
  EXPECT_EQ(p, before);
}

TEST(EmbedNet, TrainModeUpdatesRunningStats) {
  std::mt19937_64 rng(11);
  EmbedNetParams p = init_embednet(Variant::omniglot, 1, rng);
  const EmbedNetParams before = p;
  embed_values(p, uniform_tensor(Shape{2, 1, 28, 28}, rng, 0, 1), Mode::train);
  EXPECT_FALSE(p == before);
}

TEST(EmbedNet, LinearVariant) {
  std::mt19937_64 rng(12);
  EmbedNetParams p = init_embednet(Variant::linear, 1, rng, 16, 8);
  EXPECT_EQ(p.embedding_dim(), 8u);
  EXPECT_EQ(p.input_shape(), (ImageShape{1, 1, 16}));
  EXPECT_EQ(embed_values(p, Tensor(Shape{3, 1, 1, 16}, 0.5), Mode::eval).shape(), (Shape{3, 8}));
  EXPECT_THROW(init_embednet(Variant::linear, 1, rng, 0, 8), ConfigError);
}

TEST(EmbedNet, VariantNames) {
  for (Variant v : {Variant::omniglot, Variant::standard, Variant::linear}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_THROW(parse_variant("resnet"), ConfigError);
}

TEST(EmbedNet, EndToEndGradient) {
  const auto r = fstest::end_to_end_gradcheck(3, 0.01, MetricConfig::leaky(0.0, 0.01));
  EXPECT_GT(r.checked, 1000u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Checkpoint, BitExactRoundTrip) {
  std::mt19937_64 rng(13);
  EmbedNetParams p = init_embednet(Variant::omniglot, 1, rng);
  embed_values(p, uniform_tensor(Shape{2, 1, 28, 28}, rng, 0, 1), Mode::train);
  const auto bytes = serialize_checkpoint(p);
  const EmbedNetParams q = deserialize_checkpoint(bytes);
  EXPECT_EQ(p, q);
  EXPECT_EQ(serialize_checkpoint(q), bytes);

  const auto dir = fstest::temp_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", p);
  EXPECT_EQ(load_checkpoint(dir / "a.ckpt"), p);

  EmbedNetParams lin = init_embednet(Variant::linear, 1, rng, 5, 3);
  EXPECT_EQ(deserialize_checkpoint(serialize_checkpoint(lin)), lin);
}

TEST(Checkpoint, Layout) {
  std::mt19937_64 rng(14);
  const EmbedNetParams p = init_embednet(Variant::standard, 3, rng);
  const auto bytes = serialize_checkpoint(p);
  ASSERT_GE(bytes.size(), 20u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FSEN");
  EXPECT_EQ(bytes[4], 1);   // version
  EXPECT_EQ(bytes[8], 1);   // variant: standard
  EXPECT_EQ(bytes[12], 3);  // channels
  EXPECT_EQ(bytes[16], 24); // tensor count
  std::size_t expect = 20;
  for (const Tensor* t : p.persisted()) expect += 4 + 8 * t->rank() + 8 * t->size();
  EXPECT_EQ(bytes.size(), expect);
}

TEST(Checkpoint, CorruptionRejected) {
  std::mt19937_64 rng(15);
  const auto bytes = serialize_checkpoint(init_embednet(Variant::omniglot, 1, rng));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), LoadError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(truncated), LoadError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(trailing), LoadError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), LoadError);
  auto bad_extent = bytes;
  bad_extent[24] = 0xFF;  // first extent of the first tensor
  bad_extent[31] = 0x7F;
  EXPECT_THROW(deserialize_checkpoint(bad_extent), LoadError);
  auto bad_channels = bytes;
  bad_channels[12] = 3;
  EXPECT_THROW(deserialize_checkpoint(bad_channels), LoadError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), LoadError);
}
