#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fewshot/diagnostics.hpp"
#include "fewshot/embednet.hpp"
#include "fewshot/episodic.hpp"

namespace fewshot {

/// Independent deterministic stream `stream` derived from a run seed.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream,
                                std::uint64_t extra = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(extra),
                    static_cast<std::uint32_t>(extra >> 32)};
  return std::mt19937_64(seq);
}

namespace rng_stream {
inline constexpr std::uint64_t init = 0;
inline constexpr std::uint64_t train = 1;
inline constexpr std::uint64_t validation = 2;
inline constexpr std::uint64_t snapshot = 3;
inline constexpr std::uint64_t test = 4;
}  // namespace rng_stream

struct AdamOptions {
  double lr = 1e-3;
  std::size_t halving_interval = 2000;  // 0 disables the schedule
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  friend bool operator==(const AdamOptions&, const AdamOptions&) = default;
};

/// Adam with a step schedule that halves the learning rate every `halving_interval` episodes.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const Tensor* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  double lr_at(std::size_t episode) const {
    if (opts_.halving_interval == 0) return opts_.lr;
    return opts_.lr * std::pow(0.5, static_cast<double>(episode / opts_.halving_interval));
  }

  void zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
  }

  void step(std::size_t episode) {
    ++t_;
    const double lr = lr_at(episode);
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = opts_.beta1 * m_[i][j] + (1.0 - opts_.beta1) * g[j];
        v_[i][j] = opts_.beta2 * v_[i][j] + (1.0 - opts_.beta2) * g[j] * g[j];
        w[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + opts_.epsilon);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainOptions {
  EpisodeShape train_shape{60, 1, 5};
  EpisodeShape eval_shape{20, 1, 5};
  MetricConfig metric = MetricConfig::leaky(0.0, 0.01);
  AdamOptions adam;
  std::size_t episodes = 2000;
  std::size_t val_interval = 200;  // 0 disables validation
  std::size_t val_episodes = 200;
  std::uint64_t seed = 0;
  bool record_wall_time = false;
  std::size_t snapshot_episodes = 1;  // episodes pooled into each snapshot
};

struct EpisodeRecord {
  std::size_t episode = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> val_acc;
  std::optional<double> wall_ms;
};

struct TrainingLog {
  std::vector<EpisodeRecord> records;

  void write_csv(std::ostream& os) const {
    os << "episode,loss,train_acc,val_acc,wall_ms\n";
    for (const auto& r : records) {
      os << r.episode << ',' << format_double(r.loss) << ',' << format_double(r.train_acc) << ','
         << (r.val_acc ? format_double(*r.val_acc) : "") << ','
         << (r.wall_ms ? format_double(*r.wall_ms) : "") << '\n';
    }
  }

  std::string csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
  }
};

/// Non-finite loss during training; carries a textual dump of the episode state.
class TrainingAborted : public NonFiniteError {
 public:
  TrainingAborted(std::size_t episode, std::string dump)
      : NonFiniteError("non-finite loss at episode " + std::to_string(episode)),
        episode_(episode),
        dump_(std::move(dump)) {}
  std::size_t episode() const noexcept { return episode_; }
  const std::string& dump() const noexcept { return dump_; }

 private:
  std::size_t episode_;
  std::string dump_;
};

struct AccuracyStats {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width, normal approximation
  std::vector<double> per_episode;
};

inline AccuracyStats summarize(std::vector<double> accs) {
  AccuracyStats s;
  s.per_episode = std::move(accs);
  const auto n = static_cast<double>(s.per_episode.size());
  if (s.per_episode.empty()) return s;
  for (double a : s.per_episode) s.mean += a;
  s.mean /= n;
  if (s.per_episode.size() > 1) {
    double ss = 0.0;
    for (double a : s.per_episode) ss += (a - s.mean) * (a - s.mean);
    s.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return s;
}

namespace detail {

inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> vals(a.data().begin(), a.data().end());
  vals.insert(vals.end(), b.data().begin(), b.data().end());
  return Tensor(std::move(shape), std::move(vals));
}

}  // namespace detail

/// Forward state of one episode on a tape.
struct EpisodeGraph {
  Var loss;
  Var distances;  // post-metric [Q,K]
  EpisodeResult result;
};

/**
 * Embeds support and query images as one batch, builds prototypes and the
 * distance matrix, and records the loss on `tape`.
 */
inline EpisodeGraph forward_episode(EmbedNetParams& params, Tape& tape, const Episode& ep,
                                    const MetricConfig& metric, Mode mode) {
  const std::size_t ns = ep.support.dim(0), nq = ep.query.dim(0);
  Var z = embed(params, tape, detail::stack_rows(ep.support, ep.query), mode);
  if (!z.value().all_finite()) throw NonFiniteError("forward_episode: non-finite embedding");
  Var zs = slice_rows(z, 0, ns);
  Var zq = slice_rows(z, ns, ns + nq);
  Var protos = class_means(zs, ep.support_labels, ep.shape.n_way);
  Var d = metric_distances(zq, protos, metric);
  EpisodeGraph g;
  g.distances = d;
  g.loss = cross_entropy_over_distances(d, ep.query_labels);
  DistanceMatrix dm{d.value(), distance_matrix(zq.value(), protos.value(),
                                               MetricConfig::euclidean()).values,
                    metric};
  dm.values.clear_grad();
  g.result = evaluate_distances(std::move(dm), ep.query_labels);
  return g;
}

/// Mean accuracy over `episodes` episodes with batch norm in eval mode.
inline AccuracyStats evaluate(EmbedNetParams& params, const DatasetSplit& split,
                              const EpisodeShape& shape, const MetricConfig& metric,
                              std::size_t episodes, std::mt19937_64 rng) {
  std::vector<double> accs;
  accs.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    const Episode ep = sample_episode(split, shape, rng);
    Tape tape;
    accs.push_back(forward_episode(params, tape, ep, metric, Mode::eval).result.accuracy);
  }
  return summarize(std::move(accs));
}

struct TrainResult {
  TrainingLog log;
  EmbedNetParams best;
  double best_val_acc = -1.0;
  std::size_t best_episode = 0;
};

/**
 * Episodic training: sample -> embed -> prototypes -> loss -> backward ->
 * Adam step. Snapshots fire before the optimizer step of their iteration.
 * With a validation split, accuracy is measured every `val_interval`
 * episodes and after the last one, on a fixed set of validation episodes,
 * and the best parameters are kept; otherwise `best` is the final state.
 */
inline TrainResult train(EmbedNetParams& params, const DatasetSplit& train_split,
                         const DatasetSplit* val_split, const TrainOptions& opts,
                         SnapshotRecorder* recorder = nullptr) {
  using clock = std::chrono::steady_clock;
  TrainResult out;
  Adam adam(params.trainable(), opts.adam);
  auto rng = make_rng(opts.seed, rng_stream::train);
  const bool validate = val_split != nullptr && opts.val_interval > 0;

  for (std::size_t ep_index = 0; ep_index < opts.episodes; ++ep_index) {
    const auto t0 = clock::now();
    const Episode ep = sample_episode(train_split, opts.train_shape, rng);
    Tape tape;
    EpisodeGraph g;
    try {
      g = forward_episode(params, tape, ep, opts.metric, Mode::train);
    } catch (const NonFiniteError& e) {
      std::ostringstream dump;
      dump << "episode," << ep_index << "\nerror," << e.what() << "\nclass_ids";
      for (std::size_t c : ep.class_ids) dump << ',' << c;
      dump << '\n';
      throw TrainingAborted(ep_index, dump.str());
    }
    const double loss = g.loss.value().item();
    if (!std::isfinite(loss)) {
      std::ostringstream dump;
      dump << "episode," << ep_index << "\nloss," << format_double(loss) << "\ndistances";
      for (double v : g.distances.value().data()) dump << ',' << format_double(v);
      dump << '\n';
      throw TrainingAborted(ep_index, dump.str());
    }
    adam.zero_grad();
    tape.backward(g.loss);

    if (recorder != nullptr && recorder->wants(ep_index)) {
      GradSnapshot snap = GradSnapshot::from(ep_index, g.result);
      if (opts.snapshot_episodes > 1) {
        EmbedNetParams scratch = params;
        auto extra_rng = make_rng(opts.seed, rng_stream::snapshot, ep_index);
        for (std::size_t k = 1; k < opts.snapshot_episodes; ++k) {
          const Episode extra = sample_episode(train_split, opts.train_shape, extra_rng);
          Tape t;
          snap.append(forward_episode(scratch, t, extra, opts.metric, Mode::train).result);
        }
      }
      recorder->capture(snap);
    }

    adam.step(ep_index);

    EpisodeRecord rec;
    rec.episode = ep_index;
    rec.loss = loss;
    rec.train_acc = g.result.accuracy;
    if (validate && ((ep_index + 1) % opts.val_interval == 0 || ep_index + 1 == opts.episodes)) {
      const double acc = evaluate(params, *val_split, opts.eval_shape, opts.metric,
                                  opts.val_episodes, make_rng(opts.seed, rng_stream::validation))
                             .mean;
      rec.val_acc = acc;
      if (acc > out.best_val_acc) {
        out.best_val_acc = acc;
        out.best_episode = ep_index;
        out.best = params;
      }
    }
    if (opts.record_wall_time) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    }
    out.log.records.push_back(rec);
  }
  if (!validate || out.best_val_acc < 0.0) {
    out.best = params;
    out.best_episode = opts.episodes == 0 ? 0 : opts.episodes - 1;
  }
  for (Tensor* t : out.best.trainable()) t->clear_grad();
  return out;
}

}  // namespace fewshot
