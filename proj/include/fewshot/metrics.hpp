#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fewshot/autograd.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

enum class MetricKind { squared_euclidean, leaky_squared_euclidean, cosine };

inline std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::squared_euclidean: return "euc";
    case MetricKind::leaky_squared_euclidean: return "lsed";
    case MetricKind::cosine: return "cosine";
  }
  return "?";
}

inline MetricKind parse_metric_kind(std::string_view name) {
  if (name == "euc" || name == "squared_euclidean") return MetricKind::squared_euclidean;
  if (name == "lsed" || name == "leaky_squared_euclidean") return MetricKind::leaky_squared_euclidean;
  if (name == "cosine") return MetricKind::cosine;
  throw ConfigError("metric.kind", "unknown metric '" + std::string(name) +
                                       "' (expected euc, lsed or cosine)");
}

/**
 * Distance selector. `s` is the leak threshold in squared-distance units,
 * `r` the slope above it. Squared Euclidean is stored as s = 0, r = 1.
 */
class MetricConfig {
 public:
  MetricConfig() = default;

  MetricConfig(MetricKind kind, double s, double r) : kind_(kind), s_(s), r_(r) {
    if (!(r > 0.0 && r <= 1.0)) {
      throw ConfigError("metric.r", "leak rate must lie in (0, 1], got " +
                                        std::to_string(r));
    }
    if (!(s >= 0.0) || !std::isfinite(s)) {
      throw ConfigError("metric.s", "threshold must be finite and >= 0, got " +
                                        std::to_string(s));
    }
    if (kind != MetricKind::leaky_squared_euclidean) {
      s_ = 0.0;
      r_ = 1.0;
    }
  }

  static MetricConfig euclidean() { return {MetricKind::squared_euclidean, 0.0, 1.0}; }
  static MetricConfig leaky(double s, double r) {
    return {MetricKind::leaky_squared_euclidean, s, r};
  }
  static MetricConfig cosine() { return {MetricKind::cosine, 0.0, 1.0}; }

  MetricKind kind() const noexcept { return kind_; }
  double s() const noexcept { return s_; }
  double r() const noexcept { return r_; }

  /// True for the squared Euclidean family (plain or leaky).
  bool euclidean_family() const noexcept { return kind_ != MetricKind::cosine; }

  friend bool operator==(const MetricConfig&, const MetricConfig&) = default;

 private:
  MetricKind kind_ = MetricKind::squared_euclidean;
  double s_ = 0.0;
  double r_ = 1.0;
};

inline void require_same_length(std::span<const double> a,
                                std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": dimension mismatch " +
                     std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
}

inline double squared_euclidean(std::span<const double> a,
                                std::span<const double> b) {
  require_same_length(a, b, "squared_euclidean");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// d/da of the squared Euclidean distance: 2(a - b).
inline std::vector<double> squared_euclidean_grad(std::span<const double> a,
                                                  std::span<const double> b) {
  require_same_length(a, b, "squared_euclidean_grad");
  std::vector<double> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = 2.0 * (a[i] - b[i]);
  return g;
}

/// Identity up to `s`, slope `r` beyond it.
inline double leaky_squared_euclidean(double d_euc, const MetricConfig& cfg) {
  if (d_euc <= cfg.s() || cfg.r() == 1.0) return d_euc;
  return cfg.s() + (d_euc - cfg.s()) * cfg.r();
}

/// Derivative of leaky_squared_euclidean; the kink d_euc == s takes slope 1.
inline double leaky_derivative(double d_euc, const MetricConfig& cfg) {
  return d_euc <= cfg.s() ? 1.0 : cfg.r();
}

inline constexpr double kMinNorm = 1e-12;

inline double cosine_distance(std::span<const double> a,
                              std::span<const double> b) {
  require_same_length(a, b, "cosine_distance");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na <= kMinNorm || nb <= kMinNorm) {
    throw DegenerateInputError("cosine_distance: vector norm below 1e-12");
  }
  return 1.0 - ab / (na * nb);
}

/// d/da of the cosine distance.
inline std::vector<double> cosine_distance_grad(std::span<const double> a,
                                                std::span<const double> b) {
  require_same_length(a, b, "cosine_distance_grad");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na <= kMinNorm || nb <= kMinNorm) {
    throw DegenerateInputError("cosine_distance_grad: vector norm below 1e-12");
  }
  std::vector<double> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    g[i] = -(b[i] / (na * nb) - ab * a[i] / (aa * na * nb));
  }
  return g;
}

/// Distance between two embeddings under `cfg`.
inline double metric_distance(std::span<const double> a, std::span<const double> b,
                              const MetricConfig& cfg) {
  if (cfg.kind() == MetricKind::cosine) return cosine_distance(a, b);
  return leaky_squared_euclidean(squared_euclidean(a, b), cfg);
}

/**
 * p_i = exp(-d_i) / Σ_j exp(-d_j), evaluated after shifting by min(d) so
 * that distances in the thousands neither overflow nor produce NaN.
 */
inline std::vector<double> softmax_over_neg_distances(std::span<const double> d) {
  if (d.empty()) throw ShapeError("softmax_over_neg_distances: empty input");
  double lo = d[0];
  for (double v : d) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("softmax_over_neg_distances: non-finite distance");
    }
    lo = std::min(lo, v);
  }
  std::vector<double> p(d.size());
  double z = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    p[i] = std::exp(-(d[i] - lo));
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// Tape versions over embedding matrices: queries [Q,D], prototypes [K,D] -> [Q,K].

inline Var pairwise_squared_euclidean(const Var& queries, const Var& protos) {
  const Tensor& q = queries.value();
  const Tensor& c = protos.value();
  require_rank(q, 2, "pairwise_squared_euclidean queries");
  require_rank(c, 2, "pairwise_squared_euclidean prototypes");
  const std::size_t nq = q.dim(0), nk = c.dim(0), dim = q.dim(1);
  if (c.dim(1) != dim) {
    throw ShapeError("pairwise_squared_euclidean: dimension mismatch " +
                     to_string(q.shape()) + " vs " + to_string(c.shape()));
  }
  Tensor out(Shape{nq, nk});
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t k = 0; k < nk; ++k) {
      out[i * nk + k] = squared_euclidean(q.data().subspan(i * dim, dim),
                                          c.data().subspan(k * dim, dim));
    }
  }
  Tensor* tq = &queries.tensor();
  Tensor* tc = &protos.tensor();
  const bool gq = queries.requires_grad(), gc = protos.requires_grad();
  return queries.tape().record(
      "pairwise_squared_euclidean", std::move(out), {queries, protos},
      [=](const Tensor& o) {
        auto g = o.grad();
        std::span<double> dq, dc;
        if (gq) dq = tq->ensure_grad();
        if (gc) dc = tc->ensure_grad();
        for (std::size_t i = 0; i < nq; ++i) {
          for (std::size_t k = 0; k < nk; ++k) {
            const double gik = 2.0 * g[i * nk + k];
            if (gik == 0.0) continue;
            for (std::size_t j = 0; j < dim; ++j) {
              const double diff = (*tq)[i * dim + j] - (*tc)[k * dim + j];
              if (gq) dq[i * dim + j] += gik * diff;
              if (gc) dc[k * dim + j] -= gik * diff;
            }
          }
        }
      });
}

inline Var pairwise_cosine(const Var& queries, const Var& protos) {
  const Tensor& q = queries.value();
  const Tensor& c = protos.value();
  require_rank(q, 2, "pairwise_cosine queries");
  require_rank(c, 2, "pairwise_cosine prototypes");
  const std::size_t nq = q.dim(0), nk = c.dim(0), dim = q.dim(1);
  if (c.dim(1) != dim) throw ShapeError("pairwise_cosine: dimension mismatch");
  Tensor out(Shape{nq, nk});
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t k = 0; k < nk; ++k) {
      out[i * nk + k] = cosine_distance(q.data().subspan(i * dim, dim),
                                        c.data().subspan(k * dim, dim));
    }
  }
  Tensor* tq = &queries.tensor();
  Tensor* tc = &protos.tensor();
  const bool gq = queries.requires_grad(), gc = protos.requires_grad();
  return queries.tape().record(
      "pairwise_cosine", std::move(out), {queries, protos},
      [=](const Tensor& o) {
        auto g = o.grad();
        for (std::size_t i = 0; i < nq; ++i) {
          auto qi = tq->data().subspan(i * dim, dim);
          for (std::size_t k = 0; k < nk; ++k) {
            const double gik = g[i * nk + k];
            if (gik == 0.0) continue;
            auto ck = tc->data().subspan(k * dim, dim);
            if (gq) {
              auto dq = cosine_distance_grad(qi, ck);
              auto dst = tq->ensure_grad();
              for (std::size_t j = 0; j < dim; ++j) dst[i * dim + j] += gik * dq[j];
            }
            if (gc) {
              auto dc = cosine_distance_grad(ck, qi);
              auto dst = tc->ensure_grad();
              for (std::size_t j = 0; j < dim; ++j) dst[k * dim + j] += gik * dc[j];
            }
          }
        }
      });
}

/// Elementwise leaky transform of a tensor of squared distances.
inline Var leaky_transform(const Var& d_euc, const MetricConfig& cfg) {
  Tensor out = detail::map_values(
      d_euc.value(), [&cfg](double v) { return leaky_squared_euclidean(v, cfg); });
  Tensor* td = &d_euc.tensor();
  return d_euc.tape().record("leaky_transform", std::move(out), {d_euc},
                             [=](const Tensor& o) {
                               auto g = o.grad();
                               auto dst = td->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 dst[i] += g[i] * leaky_derivative((*td)[i], cfg);
                               }
                             });
}

/// Post-metric distance matrix [Q,K] between query rows and prototype rows.
inline Var metric_distances(const Var& queries, const Var& protos,
                            const MetricConfig& cfg) {
  switch (cfg.kind()) {
    case MetricKind::squared_euclidean:
      return pairwise_squared_euclidean(queries, protos);
    case MetricKind::leaky_squared_euclidean:
      return leaky_transform(pairwise_squared_euclidean(queries, protos), cfg);
    case MetricKind::cosine:
      return pairwise_cosine(queries, protos);
  }
  throw std::logic_error("metric_distances: unknown metric kind");
}

/// Pairwise distances with both the squared Euclidean and post-metric values.
struct DistanceMatrix {
  Tensor values;     // post-metric [Q,K]
  Tensor euclidean;  // squared Euclidean [Q,K], recorded for every metric
  MetricConfig metric;
};

inline DistanceMatrix distance_matrix(const Tensor& queries, const Tensor& protos,
                                      const MetricConfig& cfg) {
  require_rank(queries, 2, "distance_matrix queries");
  require_rank(protos, 2, "distance_matrix prototypes");
  const std::size_t nq = queries.dim(0), nk = protos.dim(0), dim = queries.dim(1);
  if (protos.dim(1) != dim) throw ShapeError("distance_matrix: dimension mismatch");
  DistanceMatrix dm{Tensor(Shape{nq, nk}), Tensor(Shape{nq, nk}), cfg};
  for (std::size_t i = 0; i < nq; ++i) {
    auto qi = queries.data().subspan(i * dim, dim);
    for (std::size_t k = 0; k < nk; ++k) {
      auto ck = protos.data().subspan(k * dim, dim);
      const double euc = squared_euclidean(qi, ck);
      dm.euclidean[i * nk + k] = euc;
      dm.values[i * nk + k] = cfg.kind() == MetricKind::cosine
                                  ? cosine_distance(qi, ck)
                                  : leaky_squared_euclidean(euc, cfg);
    }
  }
  return dm;
}

}  // namespace fewshot
