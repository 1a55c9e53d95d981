#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fewshot/dataset.hpp"
#include "fewshot/embednet.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/training.hpp"

namespace fewshot {

enum class DatasetKind { omniglot, image_folder, synthetic, random_images };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::omniglot: return "omniglot";
    case DatasetKind::image_folder: return "image_folder";
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::random_images: return "random_images";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view name) {
  if (name == "omniglot") return DatasetKind::omniglot;
  if (name == "image_folder" || name == "miniimagenet") return DatasetKind::image_folder;
  if (name == "synthetic") return DatasetKind::synthetic;
  if (name == "random_images") return DatasetKind::random_images;
  throw ConfigError("dataset.kind", "unknown dataset '" + std::string(name) +
                                        "' (expected omniglot, image_folder, synthetic or random_images)");
}

struct DatasetConfig {
  DatasetKind kind = DatasetKind::omniglot;
  std::string root;
  std::string split_dir;               // empty: count-matched default split
  std::size_t train_class_limit = 0;   // 0 keeps every training class
  SyntheticSpec synthetic;             // kind == synthetic (seed comes from the run)
  RandomImageSpec random_images;       // kind == random_images (seed comes from the run)
  std::size_t val_classes = 16;        // generated kinds only
  std::size_t test_classes = 20;       // generated kinds only

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// Metric fields as written; MetricConfig normalises them for non-leaky kinds.
struct MetricSettings {
  MetricKind kind = MetricKind::leaky_squared_euclidean;
  double s = 0.0;
  double r = 0.01;

  MetricConfig resolve() const { return MetricConfig(kind, s, r); }
  friend bool operator==(const MetricSettings&, const MetricSettings&) = default;
};

struct RunConfig {
  DatasetConfig dataset;
  Variant variant = Variant::omniglot;
  std::size_t linear_out = 0;
  MetricSettings metric;
  EpisodeShape train_shape{60, 1, 5};
  EpisodeShape eval_shape{20, 1, 5};
  double lr = 1e-3;
  std::size_t halving_interval = 2000;
  std::size_t train_episodes = 2000;
  std::size_t eval_episodes = 600;
  std::size_t val_interval = 200;
  std::size_t val_episodes = 200;
  std::uint64_t seed = 0;
  std::vector<std::size_t> snapshot_iterations;
  std::size_t snapshot_bins = kDefaultBins;
  std::size_t snapshot_episodes = 1;
  double sparsity_tau = kDefaultTau;
  std::string output_dir = "runs/default";
  bool log_wall_time = false;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Defaults per dataset kind: Omniglot s=0 r=0.01, 84x84 images s=4 r=0.01.
inline RunConfig defaults_for(DatasetKind kind) {
  RunConfig c;
  c.dataset.kind = kind;
  switch (kind) {
    case DatasetKind::omniglot:
      c.variant = Variant::omniglot;
      c.metric = {MetricKind::leaky_squared_euclidean, 0.0, 0.01};
      c.train_shape = {60, 1, 5};
      c.eval_shape = {20, 1, 5};
      break;
    case DatasetKind::image_folder:
    case DatasetKind::random_images:
      c.variant = Variant::standard;
      c.metric = {MetricKind::leaky_squared_euclidean, 4.0, 0.01};
      c.train_shape = {30, 1, 15};
      c.eval_shape = {5, 1, 15};
      c.dataset.random_images = RandomImageSpec{64, 20, {3, 84, 84}, 1.0, 0.2, 0};
      break;
    case DatasetKind::synthetic:
      c.variant = Variant::linear;
      c.metric = {MetricKind::leaky_squared_euclidean, 0.0, 0.01};
      c.train_shape = {5, 1, 5};
      c.eval_shape = {5, 1, 5};
      c.dataset.synthetic = SyntheticSpec{64, 16, 20, 0.1, 10.0, 0};
      break;
  }
  return c;
}

// JSON <-> RunConfig. Missing keys keep the value already in the target.

namespace detail {

template <class T>
void take(const nlohmann::json& j, const char* key, T& dst, const char* field) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(field, std::string("bad value: ") + e.what());
  }
}

inline void take_shape(const nlohmann::json& j, const char* key, EpisodeShape& s,
                       const std::string& field) {
  if (!j.contains(key)) return;
  const auto& o = j.at(key);
  take(o, "n_way", s.n_way, (field + ".n_way").c_str());
  take(o, "k_shot", s.k_shot, (field + ".k_shot").c_str());
  take(o, "q_query", s.q_query, (field + ".q_query").c_str());
}

inline nlohmann::json shape_json(const EpisodeShape& s) {
  return {{"n_way", s.n_way}, {"k_shot", s.k_shot}, {"q_query", s.q_query}};
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& syn = c.dataset.synthetic;
  const auto& ri = c.dataset.random_images;
  return {
      {"dataset",
       {{"kind", std::string(to_string(c.dataset.kind))},
        {"root", c.dataset.root},
        {"split_dir", c.dataset.split_dir},
        {"train_class_limit", c.dataset.train_class_limit},
        {"val_classes", c.dataset.val_classes},
        {"test_classes", c.dataset.test_classes},
        {"synthetic",
         {{"n_classes", syn.n_classes},
          {"dim", syn.dim},
          {"per_class", syn.per_class},
          {"cluster_std", syn.cluster_std},
          {"radius", syn.radius}}},
        {"random_images",
         {{"n_classes", ri.n_classes},
          {"per_class", ri.per_class},
          {"channels", ri.shape.channels},
          {"height", ri.shape.height},
          {"width", ri.shape.width},
          {"contrast", ri.contrast},
          {"noise_std", ri.noise_std}}}}},
      {"model", {{"variant", std::string(to_string(c.variant))}, {"linear_out", c.linear_out}}},
      {"metric", {{"kind", std::string(to_string(c.metric.kind))}, {"s", c.metric.s}, {"r", c.metric.r}}},
      {"train_episode", detail::shape_json(c.train_shape)},
      {"eval_episode", detail::shape_json(c.eval_shape)},
      {"optimizer", {{"lr", c.lr}, {"halving_interval", c.halving_interval}}},
      {"budget",
       {{"train_episodes", c.train_episodes},
        {"eval_episodes", c.eval_episodes},
        {"val_interval", c.val_interval},
        {"val_episodes", c.val_episodes}}},
      {"seed", c.seed},
      {"snapshots",
       {{"iterations", c.snapshot_iterations},
        {"bins", c.snapshot_bins},
        {"episodes", c.snapshot_episodes},
        {"tau", c.sparsity_tau}}},
      {"output_dir", c.output_dir},
      {"log_wall_time", c.log_wall_time},
  };
}

/// Overlays every key present in `j` onto `c`.
inline void overlay(RunConfig& c, const nlohmann::json& j) {
  using detail::take;
  if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.contains("kind")) c.dataset.kind = parse_dataset_kind(d.at("kind").get<std::string>());
    take(d, "root", c.dataset.root, "dataset.root");
    take(d, "split_dir", c.dataset.split_dir, "dataset.split_dir");
    take(d, "train_class_limit", c.dataset.train_class_limit, "dataset.train_class_limit");
    take(d, "val_classes", c.dataset.val_classes, "dataset.val_classes");
    take(d, "test_classes", c.dataset.test_classes, "dataset.test_classes");
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      auto& syn = c.dataset.synthetic;
      take(s, "n_classes", syn.n_classes, "dataset.synthetic.n_classes");
      take(s, "dim", syn.dim, "dataset.synthetic.dim");
      take(s, "per_class", syn.per_class, "dataset.synthetic.per_class");
      take(s, "cluster_std", syn.cluster_std, "dataset.synthetic.cluster_std");
      take(s, "radius", syn.radius, "dataset.synthetic.radius");
    }
    if (d.contains("random_images")) {
      const auto& s = d.at("random_images");
      auto& ri = c.dataset.random_images;
      take(s, "n_classes", ri.n_classes, "dataset.random_images.n_classes");
      take(s, "per_class", ri.per_class, "dataset.random_images.per_class");
      take(s, "channels", ri.shape.channels, "dataset.random_images.channels");
      take(s, "height", ri.shape.height, "dataset.random_images.height");
      take(s, "width", ri.shape.width, "dataset.random_images.width");
      take(s, "contrast", ri.contrast, "dataset.random_images.contrast");
      take(s, "noise_std", ri.noise_std, "dataset.random_images.noise_std");
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("variant")) c.variant = parse_variant(m.at("variant").get<std::string>());
    take(m, "linear_out", c.linear_out, "model.linear_out");
  }
  if (j.contains("metric")) {
    const auto& m = j.at("metric");
    if (m.contains("kind")) c.metric.kind = parse_metric_kind(m.at("kind").get<std::string>());
    take(m, "s", c.metric.s, "metric.s");
    take(m, "r", c.metric.r, "metric.r");
  }
  detail::take_shape(j, "train_episode", c.train_shape, "train_episode");
  detail::take_shape(j, "eval_episode", c.eval_shape, "eval_episode");
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    take(o, "lr", c.lr, "optimizer.lr");
    take(o, "halving_interval", c.halving_interval, "optimizer.halving_interval");
  }
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    take(b, "train_episodes", c.train_episodes, "budget.train_episodes");
    take(b, "eval_episodes", c.eval_episodes, "budget.eval_episodes");
    take(b, "val_interval", c.val_interval, "budget.val_interval");
    take(b, "val_episodes", c.val_episodes, "budget.val_episodes");
  }
  take(j, "seed", c.seed, "seed");
  if (j.contains("snapshots")) {
    const auto& s = j.at("snapshots");
    take(s, "iterations", c.snapshot_iterations, "snapshots.iterations");
    take(s, "bins", c.snapshot_bins, "snapshots.bins");
    take(s, "episodes", c.snapshot_episodes, "snapshots.episodes");
    take(s, "tau", c.sparsity_tau, "snapshots.tau");
  }
  take(j, "output_dir", c.output_dir, "output_dir");
  take(j, "log_wall_time", c.log_wall_time, "log_wall_time");
}

/// Throws ConfigError naming the first invalid field.
inline void validate(const RunConfig& c) {
  c.metric.resolve();
  auto check_shape = [](const EpisodeShape& s, const std::string& field) {
    if (s.n_way < 2) throw ConfigError(field + ".n_way", "must be >= 2");
    if (s.k_shot < 1) throw ConfigError(field + ".k_shot", "must be >= 1");
    if (s.q_query < 1) throw ConfigError(field + ".q_query", "must be >= 1");
  };
  check_shape(c.train_shape, "train_episode");
  check_shape(c.eval_shape, "eval_episode");
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("optimizer.lr", "must be finite and >= 0");
  if (c.val_interval > 0 && c.val_episodes == 0) {
    throw ConfigError("budget.val_episodes", "must be positive when validation is enabled");
  }
  if (c.snapshot_bins == 0) throw ConfigError("snapshots.bins", "must be positive");
  if (c.snapshot_episodes == 0) throw ConfigError("snapshots.episodes", "must be positive");
  if (!(c.sparsity_tau > 0.0 && c.sparsity_tau < 0.5)) {
    throw ConfigError("snapshots.tau", "must lie in (0, 0.5)");
  }
  SnapshotRecorder(c.snapshot_iterations, nullptr);
  if ((c.dataset.kind == DatasetKind::omniglot || c.dataset.kind == DatasetKind::image_folder) &&
      c.dataset.root.empty()) {
    throw ConfigError("dataset.root", "required for dataset kind " +
                                          std::string(to_string(c.dataset.kind)));
  }
  if (c.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  DatasetKind kind = DatasetKind::omniglot;
  if (j.contains("dataset") && j.at("dataset").contains("kind")) {
    kind = parse_dataset_kind(j.at("dataset").at("kind").get<std::string>());
  }
  RunConfig c = defaults_for(kind);
  overlay(c, j);
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", std::string("parse error: ") + e.what());
  }
}

/// Command-line values; each one set overrides the config file.
struct Overrides {
  std::optional<std::string> dataset, root, split_dir, metric, variant, out;
  std::optional<double> s, r, lr;
  std::optional<std::size_t> n_way, k_shot, q_query;
  std::optional<std::size_t> train_n_way, eval_n_way;
  std::optional<std::size_t> episodes, eval_episodes, val_interval, val_episodes;
  std::optional<std::size_t> train_class_limit;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::size_t>> snapshot_iterations;
  std::optional<bool> wall_time;
};

inline void apply(RunConfig& c, const Overrides& o) {
  if (o.root) c.dataset.root = *o.root;
  if (o.split_dir) c.dataset.split_dir = *o.split_dir;
  if (o.train_class_limit) c.dataset.train_class_limit = *o.train_class_limit;
  if (o.variant) c.variant = parse_variant(*o.variant);
  if (o.metric) c.metric.kind = parse_metric_kind(*o.metric);
  if (o.s) c.metric.s = *o.s;
  if (o.r) c.metric.r = *o.r;
  if (o.lr) c.lr = *o.lr;
  for (EpisodeShape* s : {&c.train_shape, &c.eval_shape}) {
    if (o.n_way) s->n_way = *o.n_way;
    if (o.k_shot) s->k_shot = *o.k_shot;
    if (o.q_query) s->q_query = *o.q_query;
  }
  if (o.train_n_way) c.train_shape.n_way = *o.train_n_way;
  if (o.eval_n_way) c.eval_shape.n_way = *o.eval_n_way;
  if (o.episodes) c.train_episodes = *o.episodes;
  if (o.eval_episodes) c.eval_episodes = *o.eval_episodes;
  if (o.val_interval) c.val_interval = *o.val_interval;
  if (o.val_episodes) c.val_episodes = *o.val_episodes;
  if (o.seed) c.seed = *o.seed;
  if (o.snapshot_iterations) c.snapshot_iterations = *o.snapshot_iterations;
  if (o.out) c.output_dir = *o.out;
  if (o.wall_time) c.log_wall_time = *o.wall_time;
}

/**
 * Defaults (chosen by dataset kind) < config file < command line. The
 * dataset kind itself follows the same precedence.
 */
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const Overrides& o) {
  const nlohmann::json j = file ? read_json_file(*file) : nlohmann::json::object();
  DatasetKind kind = DatasetKind::omniglot;
  if (j.contains("dataset") && j.at("dataset").contains("kind")) {
    kind = parse_dataset_kind(j.at("dataset").at("kind").get<std::string>());
  }
  if (o.dataset) kind = parse_dataset_kind(*o.dataset);
  RunConfig c = defaults_for(kind);
  overlay(c, j);
  c.dataset.kind = kind;
  apply(c, o);
  validate(c);
  return c;
}

inline TrainOptions train_options(const RunConfig& c) {
  TrainOptions t;
  t.train_shape = c.train_shape;
  t.eval_shape = c.eval_shape;
  t.metric = c.metric.resolve();
  t.adam.lr = c.lr;
  t.adam.halving_interval = c.halving_interval;
  t.episodes = c.train_episodes;
  t.val_interval = c.val_interval;
  t.val_episodes = c.val_episodes;
  t.seed = c.seed;
  t.record_wall_time = c.log_wall_time;
  t.snapshot_episodes = c.snapshot_episodes;
  return t;
}

}  // namespace fewshot
