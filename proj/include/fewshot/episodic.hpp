#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fewshot/autograd.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

struct EpisodeShape {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_query = 5;

  std::size_t support_count() const noexcept { return n_way * k_shot; }
  std::size_t query_count() const noexcept { return n_way * q_query; }
  friend bool operator==(const EpisodeShape&, const EpisodeShape&) = default;
};

/**
 * One N-way K-shot task. Items are grouped by episode class: support row
 * k*k_shot + i belongs to class k, likewise query row k*q_query + i.
 */
struct Episode {
  EpisodeShape shape;
  Tensor support;  // [n_way*k_shot, C, H, W]
  Tensor query;    // [n_way*q_query, C, H, W]
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
  std::vector<std::size_t> class_ids;  // split class index per episode class
};

namespace detail {

// Partial Fisher-Yates: the first `count` entries of a shuffled 0..n-1.
inline std::vector<std::size_t> draw_without_replacement(std::size_t n,
                                                         std::size_t count,
                                                         std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  return idx;
}

}  // namespace detail

/// Classes and per-class samples are both drawn without replacement.
inline Episode sample_episode(const DatasetSplit& split, const EpisodeShape& shape,
                              std::mt19937_64& rng) {
  if (shape.n_way == 0 || shape.k_shot == 0 || shape.q_query == 0) {
    throw ConfigError("episode", "n_way, k_shot and q_query must be positive");
  }
  if (split.classes.size() < shape.n_way) {
    throw CapacityError("sample_episode: " + std::to_string(shape.n_way) +
                        "-way episode needs that many classes, split has " +
                        std::to_string(split.classes.size()));
  }
  const std::size_t per_class = shape.k_shot + shape.q_query;
  for (const ClassRecord& c : split.classes) {
    if (c.samples.size() < per_class) {
      throw CapacityError("sample_episode: class '" + c.source + "' has " +
                          std::to_string(c.samples.size()) + " samples, needs " +
                          std::to_string(per_class));
    }
  }

  const ImageShape& img = split.shape;
  const std::size_t pixels = img.size();
  Episode ep;
  ep.shape = shape;
  ep.support = Tensor(Shape{shape.support_count(), img.channels, img.height, img.width});
  ep.query = Tensor(Shape{shape.query_count(), img.channels, img.height, img.width});
  ep.class_ids = detail::draw_without_replacement(split.classes.size(), shape.n_way, rng);
  for (std::size_t k = 0; k < shape.n_way; ++k) {
    const ClassRecord& cls = split.classes[ep.class_ids[k]];
    const auto picks = detail::draw_without_replacement(cls.samples.size(), per_class, rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto& src = cls.samples[picks[i]];
      const bool is_support = i < shape.k_shot;
      const std::size_t row = is_support ? k * shape.k_shot + i
                                         : k * shape.q_query + (i - shape.k_shot);
      double* dst = (is_support ? ep.support : ep.query).data().data() + row * pixels;
      for (std::size_t p = 0; p < pixels; ++p) dst[p] = src[p];
    }
    for (std::size_t i = 0; i < shape.k_shot; ++i) ep.support_labels.push_back(k);
  }
  for (std::size_t k = 0; k < shape.n_way; ++k) {
    for (std::size_t i = 0; i < shape.q_query; ++i) ep.query_labels.push_back(k);
  }
  return ep;
}

namespace detail {

inline std::vector<std::size_t> class_counts(std::span<const std::size_t> labels,
                                             std::size_t n_classes) {
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t y : labels) {
    if (y >= n_classes) {
      throw std::invalid_argument("label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(n_classes) + ")");
    }
    ++counts[y];
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (counts[k] == 0) {
      throw std::invalid_argument("class " + std::to_string(k) +
                                  " has no support embeddings");
    }
  }
  return counts;
}

}  // namespace detail

/// c_k = mean of the support embeddings labelled k. embeddings [N, D] -> [K, D].
inline Tensor compute_prototypes(const Tensor& embeddings,
                                 std::span<const std::size_t> labels,
                                 std::size_t n_classes) {
  require_rank(embeddings, 2, "compute_prototypes");
  const std::size_t n = embeddings.dim(0), dim = embeddings.dim(1);
  if (labels.size() != n) throw ShapeError("compute_prototypes: label count != rows");
  const auto counts = detail::class_counts(labels, n_classes);
  Tensor protos(Shape{n_classes, dim});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      protos[labels[i] * dim + j] += embeddings[i * dim + j];
    }
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    for (std::size_t j = 0; j < dim; ++j) {
      protos[k * dim + j] /= static_cast<double>(counts[k]);
    }
  }
  return protos;
}

/// Tape version of compute_prototypes.
inline Var class_means(const Var& embeddings, std::span<const std::size_t> labels,
                       std::size_t n_classes) {
  Tensor protos = compute_prototypes(embeddings.value(), labels, n_classes);
  const auto counts = detail::class_counts(labels, n_classes);
  const std::size_t dim = embeddings.value().dim(1);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Tensor* te = &embeddings.tensor();
  return embeddings.tape().record(
      "class_means", std::move(protos), {embeddings},
      [=, lab = std::move(lab)](const Tensor& o) {
        auto g = o.grad();
        auto d = te->ensure_grad();
        for (std::size_t i = 0; i < lab.size(); ++i) {
          const double w = 1.0 / static_cast<double>(counts[lab[i]]);
          for (std::size_t j = 0; j < dim; ++j) d[i * dim + j] += w * g[lab[i] * dim + j];
        }
      });
}

/**
 * ℓ = mean over queries of -log p(y_q | z_q) from a [Q,K] distance matrix,
 * assembled from elementary tape ops: logsumexp(-d) - (-d)[y].
 */
inline Var cross_entropy_over_distances(const Var& distances,
                                        std::span<const std::size_t> labels) {
  Var neg = scale(distances, -1.0);
  return mean(sub(logsumexp_rows(neg), gather_rows(neg, labels)));
}

struct EpisodeResult {
  double loss = 0.0;
  Tensor probs;           // [Q,K]
  Tensor distance_grads;  // [Q,K] per query: p - 1{y=j}, i.e. d(loss_q)/d(-d); tape d(loss)/dd is -distance_grads/Q
  double accuracy = 0.0;
  DistanceMatrix distances;
};

/// Closed-form per-query gradient p_qj - 1{y_q = j} for a [Q,K] distance matrix.
inline Tensor closed_form_distance_grads(const Tensor& probs,
                                         std::span<const std::size_t> labels) {
  Tensor g = probs;
  const std::size_t nk = probs.dim(1);
  for (std::size_t q = 0; q < labels.size(); ++q) g[q * nk + labels[q]] -= 1.0;
  return g;
}

/// Loss, probabilities, accuracy and closed-form gradients from a distance matrix.
inline EpisodeResult evaluate_distances(DistanceMatrix dm,
                                        std::span<const std::size_t> labels) {
  const Tensor& d = dm.values;
  require_rank(d, 2, "evaluate_distances");
  const std::size_t nq = d.dim(0), nk = d.dim(1);
  if (labels.size() != nq) throw ShapeError("evaluate_distances: label count != queries");
  EpisodeResult res;
  res.probs = Tensor(Shape{nq, nk});
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t q = 0; q < nq; ++q) {
    if (labels[q] >= nk) throw std::invalid_argument("evaluate_distances: label out of range");
    auto row = d.data().subspan(q * nk, nk);
    const auto p = softmax_over_neg_distances(row);
    std::size_t nearest = 0, top = 0;
    for (std::size_t k = 1; k < nk; ++k) {
      if (row[k] < row[nearest]) nearest = k;
      if (p[k] > p[top]) top = k;
    }
    double rest = 0.0;
    for (std::size_t k = 0; k < nk; ++k) {
      if (k != nearest) rest += std::exp(-(row[k] - row[nearest]));
    }
    total += (row[labels[q]] - row[nearest]) + std::log1p(rest);
    if (top == labels[q]) ++correct;
    for (std::size_t k = 0; k < nk; ++k) res.probs[q * nk + k] = p[k];
  }
  res.loss = total / static_cast<double>(nq);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(nq);
  res.distance_grads = closed_form_distance_grads(res.probs, labels);
  res.distances = std::move(dm);
  return res;
}

/// Episode loss for query embeddings [Q,D] against prototypes [K,D].
inline EpisodeResult episode_loss(const Tensor& query_embeddings, const Tensor& prototypes,
                                  std::span<const std::size_t> labels,
                                  const MetricConfig& metric) {
  if (!query_embeddings.all_finite() || !prototypes.all_finite()) {
    throw NonFiniteError("episode_loss: non-finite embedding");
  }
  return evaluate_distances(distance_matrix(query_embeddings, prototypes, metric), labels);
}

}  // namespace fewshot
