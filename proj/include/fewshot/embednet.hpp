#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "fewshot/autograd.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/layers.hpp"

namespace fewshot {

/**
 * omniglot: four conv blocks, no pool on the last one (1x28x28 -> 576).
 * standard: four conv blocks, all pooled (3x84x84 -> 1600).
 * linear:   a single affine map for vector data (1x1xD inputs).
 */
enum class Variant : std::uint32_t { omniglot = 0, standard = 1, linear = 2 };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::omniglot: return "omniglot";
    case Variant::standard: return "standard";
    case Variant::linear: return "linear";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "omniglot") return Variant::omniglot;
  if (name == "standard") return Variant::standard;
  if (name == "linear") return Variant::linear;
  throw ConfigError("model.variant", "unknown variant '" + std::string(name) +
                                         "' (expected omniglot, standard or linear)");
}

inline constexpr std::size_t kFilters = 64;
inline constexpr std::size_t kBlocks = 4;

struct ConvBlock {
  Tensor weight;  // [64, C, 3, 3]
  Tensor bias;    // [64]
  Tensor gamma;   // [64]
  Tensor beta;    // [64]
  BatchNormState bn{kFilters};
  bool pool = true;
};

struct EmbedNetParams {
  Variant variant = Variant::omniglot;
  std::size_t channels = 1;
  std::vector<ConvBlock> blocks;  // conv variants
  Tensor linear_weight;           // linear variant: [Out, In]
  Tensor linear_bias;             // linear variant: [Out]

  /// Tensors updated by the optimizer, in checkpoint order.
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    if (variant == Variant::linear) {
      out = {&linear_weight, &linear_bias};
    } else {
      for (ConvBlock& b : blocks) {
        out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
      }
    }
    return out;
  }

  /// Every persisted tensor (trainable plus running statistics).
  std::vector<const Tensor*> persisted() const {
    std::vector<const Tensor*> out;
    if (variant == Variant::linear) {
      out = {&linear_weight, &linear_bias};
    } else {
      for (const ConvBlock& b : blocks) {
        out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta,
                               &b.bn.running_mean, &b.bn.running_var});
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    if (variant == Variant::linear) return linear_weight.size() + linear_bias.size();
    for (const ConvBlock& b : blocks) {
      n += b.weight.size() + b.bias.size() + b.gamma.size() + b.beta.size();
    }
    return n;
  }

  /// Input image shape the variant accepts.
  ImageShape input_shape() const {
    switch (variant) {
      case Variant::omniglot: return {channels, 28, 28};
      case Variant::standard: return {channels, 84, 84};
      case Variant::linear: return {1, 1, linear_weight.dim(1)};
    }
    return {};
  }

  std::size_t embedding_dim() const {
    switch (variant) {
      case Variant::omniglot: return kFilters * 3 * 3;
      case Variant::standard: return kFilters * 5 * 5;
      case Variant::linear: return linear_weight.dim(0);
    }
    return 0;
  }

  friend bool operator==(const EmbedNetParams& a, const EmbedNetParams& b) {
    if (a.variant != b.variant || a.channels != b.channels) return false;
    auto pa = a.persisted(), pb = b.persisted();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (!(*pa[i] == *pb[i])) return false;
    }
    return true;
  }
};

namespace detail {

inline Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

/**
 * He-uniform conv/linear weights (bound sqrt(6/fan_in)), zero biases,
 * gamma 1, beta 0, running mean 0 / variance 1.
 *
 * `linear_in`/`linear_out` are used by the linear variant only;
 * `linear_out` 0 keeps the input dimension.
 */
inline EmbedNetParams init_embednet(Variant variant, std::size_t channels,
                                    std::mt19937_64& rng, std::size_t linear_in = 0,
                                    std::size_t linear_out = 0) {
  EmbedNetParams p;
  p.variant = variant;
  p.channels = channels;
  if (variant == Variant::linear) {
    if (linear_in == 0) throw ConfigError("model.linear_in", "must be positive");
    if (linear_out == 0) linear_out = linear_in;
    p.channels = 1;
    p.linear_weight = detail::he_uniform(Shape{linear_out, linear_in}, linear_in, rng);
    p.linear_bias = Tensor(Shape{linear_out}, 0.0);
    return p;
  }
  if (channels == 0) throw ConfigError("model.channels", "must be positive");
  std::size_t in = channels;
  for (std::size_t b = 0; b < kBlocks; ++b) {
    ConvBlock block;
    block.weight = detail::he_uniform(Shape{kFilters, in, 3, 3}, in * 9, rng);
    block.bias = Tensor(Shape{kFilters}, 0.0);
    block.gamma = Tensor(Shape{kFilters}, 1.0);
    block.beta = Tensor(Shape{kFilters}, 0.0);
    block.pool = !(variant == Variant::omniglot && b + 1 == kBlocks);
    p.blocks.push_back(std::move(block));
    in = kFilters;
  }
  return p;
}

/**
 * Embeds a batch of images [B,C,H,W] -> [B,D] on `tape`. Parameters are
 * registered as gradient-carrying leaves; images are constants. In train
 * mode the batch-norm running statistics are updated.
 */
inline Var embed(EmbedNetParams& params, Tape& tape, const Tensor& images, Mode mode) {
  require_rank(images, 4, "embed");
  const ImageShape want = params.input_shape();
  if (images.dim(1) != want.channels || images.dim(2) != want.height ||
      images.dim(3) != want.width) {
    throw ShapeError("embed: " + std::string(to_string(params.variant)) +
                     " variant expects [B," + std::to_string(want.channels) + "," +
                     std::to_string(want.height) + "," + std::to_string(want.width) +
                     "], got " + to_string(images.shape()));
  }
  Var x = tape.constant(images);
  if (params.variant == Variant::linear) {
    return linear(flatten(x), tape.parameter(params.linear_weight),
                  tape.parameter(params.linear_bias));
  }
  for (ConvBlock& b : params.blocks) {
    x = conv2d(x, tape.parameter(b.weight), tape.parameter(b.bias));
    x = batchnorm2d(x, tape.parameter(b.gamma), tape.parameter(b.beta), b.bn, mode);
    x = relu(x);
    if (b.pool) x = maxpool2x2(x);
  }
  return flatten(x);
}

/// Forward pass without keeping the tape.
inline Tensor embed_values(EmbedNetParams& params, const Tensor& images, Mode mode) {
  Tape tape;
  Var z = embed(params, tape, images, mode);
  Tensor out = z.value();
  out.clear_grad();
  return out;
}

// Checkpoint: little-endian
//   "FSEN" | u32 version | u32 variant | u32 channels | u32 tensor count
//   per tensor: u32 rank | u64 extent * rank | f64 value * product(extents)
// Tensors in EmbedNetParams::persisted() order.

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'S', 'E', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<std::uint8_t, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  out.insert(out.end(), bytes.begin(), bytes.end());
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw LoadError("checkpoint: truncated data");
    std::array<std::uint8_t, sizeof(T)> b;
    std::memcpy(b.data(), bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const EmbedNetParams& params) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.variant));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.channels));
  const auto tensors = params.persisted();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t e : t->shape()) detail::put_le<std::uint64_t>(out, e);
    for (double v : t->data()) detail::put_le<double>(out, v);
  }
  return out;
}

inline EmbedNetParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(),
                                      bytes.begin())) {
    throw LoadError("checkpoint: bad magic");
  }
  detail::ByteReader in(bytes.subspan(4));
  if (const auto version = in.get<std::uint32_t>(); version != kCheckpointVersion) {
    throw LoadError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto raw_variant = in.get<std::uint32_t>();
  if (raw_variant > 2) throw LoadError("checkpoint: unknown variant");
  EmbedNetParams p;
  p.variant = static_cast<Variant>(raw_variant);
  p.channels = in.get<std::uint32_t>();
  const auto count = in.get<std::uint32_t>();

  std::vector<Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw LoadError("checkpoint: implausible tensor rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(in.get<std::uint64_t>());
      if (e == 0 || e > in.remaining() / sizeof(double) || n > in.remaining() / sizeof(double) / e) {
        throw LoadError("checkpoint: bad tensor extent");
      }
      n *= e;
    }
    std::vector<double> vals;
    vals.reserve(n);
    for (std::size_t j = 0; j < n; ++j) vals.push_back(in.get<double>());
    tensors.emplace_back(std::move(shape), std::move(vals));
  }
  if (!in.done()) throw LoadError("checkpoint: trailing bytes");

  if (p.variant == Variant::linear) {
    if (tensors.size() != 2 || tensors[0].rank() != 2 ||
        tensors[1].shape() != Shape{tensors[0].dim(0)}) {
      throw LoadError("checkpoint: linear variant needs weight [Out,In] and bias [Out]");
    }
    p.linear_weight = std::move(tensors[0]);
    p.linear_bias = std::move(tensors[1]);
    return p;
  }
  if (tensors.size() != 6 * kBlocks) {
    throw LoadError("checkpoint: conv variant needs " + std::to_string(6 * kBlocks) +
                    " tensors, found " + std::to_string(tensors.size()));
  }
  for (std::size_t b = 0; b < kBlocks; ++b) {
    ConvBlock block;
    block.weight = std::move(tensors[6 * b]);
    block.bias = std::move(tensors[6 * b + 1]);
    block.gamma = std::move(tensors[6 * b + 2]);
    block.beta = std::move(tensors[6 * b + 3]);
    block.bn.running_mean = std::move(tensors[6 * b + 4]);
    block.bn.running_var = std::move(tensors[6 * b + 5]);
    block.pool = !(p.variant == Variant::omniglot && b + 1 == kBlocks);
    p.blocks.push_back(std::move(block));
  }
  std::size_t in_ch = p.channels;
  for (const ConvBlock& b : p.blocks) {
    const Shape per{kFilters};
    if (b.weight.shape() != Shape{kFilters, in_ch, 3, 3} || b.bias.shape() != per ||
        b.gamma.shape() != per || b.beta.shape() != per || b.bn.running_mean.shape() != per ||
        b.bn.running_var.shape() != per) {
      throw LoadError("checkpoint: tensor shapes do not match the network layout");
    }
    in_ch = kFilters;
  }
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const EmbedNetParams& params) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline EmbedNetParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace fewshot
