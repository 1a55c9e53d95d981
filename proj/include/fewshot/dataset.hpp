#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fewshot/errors.hpp"

namespace fewshot {

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// One class of a split. Rotation is in degrees (0, 90, 180, 270).
struct ClassRecord {
  std::size_t class_id = 0;
  std::string source;
  int rotation = 0;
  std::vector<std::vector<float>> samples;  // each of ImageShape::size() pixels
};

struct DatasetSplit {
  ImageShape shape;
  std::vector<ClassRecord> classes;

  std::size_t class_count() const noexcept { return classes.size(); }
  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.samples.size();
    return n;
  }
};

struct SplitSet {
  DatasetSplit train;
  DatasetSplit val;
  DatasetSplit test;
};

/// Gaussian clusters around class means placed uniformly on a sphere.
struct SyntheticSpec {
  std::size_t n_classes = 20;
  std::size_t dim = 16;
  std::size_t per_class = 20;
  double cluster_std = 0.1;
  double radius = 10.0;
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/**
 * Vectors stored as 1x1xdim images. Class means are standard normal draws
 * normalised to `radius`; samples add isotropic noise of `cluster_std`.
 */
inline DatasetSplit synth_gaussian(const SyntheticSpec& spec) {
  if (spec.dim < 2) throw ConfigError("synthetic.dim", "must be >= 2");
  if (spec.n_classes == 0 || spec.per_class == 0) {
    throw ConfigError("synthetic", "n_classes and per_class must be positive");
  }
  if (!(spec.cluster_std >= 0.0)) throw ConfigError("synthetic.cluster_std", "must be >= 0");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DatasetSplit split;
  split.shape = ImageShape{1, 1, spec.dim};
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    std::vector<double> mean(spec.dim);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : mean) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (double& v : mean) v *= spec.radius / norm;

    ClassRecord rec;
    rec.class_id = c;
    rec.source = "gaussian_" + std::to_string(c);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::vector<float> s(spec.dim);
      for (std::size_t d = 0; d < spec.dim; ++d) {
        s[d] = static_cast<float>(mean[d] + spec.cluster_std * normal(rng));
      }
      rec.samples.push_back(std::move(s));
    }
    split.classes.push_back(std::move(rec));
  }
  return split;
}

/// Noise images in [0, 1] with an optional per-class template.
struct RandomImageSpec {
  std::size_t n_classes = 20;
  std::size_t per_class = 20;
  ImageShape shape{3, 84, 84};
  double contrast = 1.0;   // 0 makes classes indistinguishable
  double noise_std = 0.2;
  std::uint64_t seed = 0;

  friend bool operator==(const RandomImageSpec&, const RandomImageSpec&) = default;
};

/// pixel = clamp(0.5 + contrast * (template - 0.5) + N(0, noise_std), 0, 1)
inline DatasetSplit synth_images(const RandomImageSpec& spec) {
  if (spec.n_classes == 0 || spec.per_class == 0 || spec.shape.size() == 0) {
    throw ConfigError("random_images", "counts and shape must be positive");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = spec.shape.size();
  DatasetSplit split;
  split.shape = spec.shape;
  std::vector<double> tmpl(n);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (double& v : tmpl) v = uniform(rng);
    ClassRecord rec;
    rec.class_id = c;
    rec.source = "noise_" + std::to_string(c);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::vector<float> s(n);
      for (std::size_t p = 0; p < n; ++p) {
        const double v = 0.5 + spec.contrast * (tmpl[p] - 0.5) + spec.noise_std * normal(rng);
        s[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      rec.samples.push_back(std::move(s));
    }
    split.classes.push_back(std::move(rec));
  }
  return split;
}

/// Partitions classes in order into consecutive train/val/test runs.
inline SplitSet partition_classes(DatasetSplit all, std::size_t n_train,
                                  std::size_t n_val) {
  if (n_train + n_val > all.classes.size()) {
    throw CapacityError("partition_classes: " + std::to_string(n_train + n_val) +
                        " classes requested, only " +
                        std::to_string(all.classes.size()) + " available");
  }
  SplitSet set;
  set.train.shape = set.val.shape = set.test.shape = all.shape;
  for (std::size_t i = 0; i < all.classes.size(); ++i) {
    DatasetSplit& dst = i < n_train ? set.train
                        : i < n_train + n_val ? set.val
                                              : set.test;
    ClassRecord rec = std::move(all.classes[i]);
    rec.class_id = dst.classes.size();
    dst.classes.push_back(std::move(rec));
  }
  return set;
}

}  // namespace fewshot
