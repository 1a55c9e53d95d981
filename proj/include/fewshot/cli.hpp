#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fewshot/config.hpp"
#include "fewshot/loaders.hpp"
#include "fewshot/training.hpp"

namespace fewshot {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int config = 2;
inline constexpr int runtime = 3;
}  // namespace exit_code

/// Loads or generates the train/val/test splits a config describes.
inline SplitSet load_data(const RunConfig& c) {
  const auto& d = c.dataset;
  const std::optional<fs::path> split_dir =
      d.split_dir.empty() ? std::nullopt : std::optional<fs::path>(d.split_dir);
  SplitSet s;
  switch (d.kind) {
    case DatasetKind::omniglot:
      s = load_omniglot_splits(d.root, split_dir);
      break;
    case DatasetKind::image_folder:
      s = load_image_folder_splits(d.root, split_dir);
      break;
    case DatasetKind::synthetic: {
      SyntheticSpec spec = d.synthetic;
      spec.n_classes += d.val_classes + d.test_classes;
      spec.seed = c.seed;
      s = partition_classes(synth_gaussian(spec), d.synthetic.n_classes, d.val_classes);
      break;
    }
    case DatasetKind::random_images: {
      RandomImageSpec spec = d.random_images;
      spec.n_classes += d.val_classes + d.test_classes;
      spec.seed = c.seed;
      s = partition_classes(synth_images(spec), d.random_images.n_classes, d.val_classes);
      break;
    }
  }
  limit_classes(s.train, d.train_class_limit);
  return s;
}

/// ConfigError when the model variant cannot consume the split's images.
inline void check_input_shape(const EmbedNetParams& p, const DatasetSplit& split) {
  if (!(p.input_shape() == split.shape)) {
    throw ConfigError("model.variant",
                      std::string(to_string(p.variant)) + " expects " +
                          std::to_string(p.input_shape().channels) + "x" +
                          std::to_string(p.input_shape().height) + "x" +
                          std::to_string(p.input_shape().width) + " inputs, dataset provides " +
                          std::to_string(split.shape.channels) + "x" +
                          std::to_string(split.shape.height) + "x" +
                          std::to_string(split.shape.width));
  }
}

inline EmbedNetParams fresh_params(const RunConfig& c, const DatasetSplit& split) {
  auto rng = make_rng(c.seed, rng_stream::init);
  EmbedNetParams p = init_embednet(c.variant, split.shape.channels, rng, split.shape.size(),
                                   c.linear_out);
  check_input_shape(p, split);
  return p;
}

struct TrainArtifacts {
  TrainResult result;
  fs::path checkpoint;
};

/**
 * Trains per `c` and writes into c.output_dir: config.json, training_log.csv,
 * best.ckpt and, when snapshot iterations are set, snapshots/.
 */
inline TrainArtifacts run_train(const RunConfig& c, const SplitSet& data) {
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  write_text_file(out / "config.json", to_json(c).dump(2) + "\n");
  EmbedNetParams params = fresh_params(c, data.train);
  std::optional<SnapshotRecorder> recorder;
  if (!c.snapshot_iterations.empty()) {
    recorder.emplace(c.snapshot_iterations,
                     directory_sink(out / "snapshots", c.snapshot_bins, c.sparsity_tau));
  }
  TrainArtifacts a;
  try {
    a.result = train(params, data.train, data.val.classes.empty() ? nullptr : &data.val,
                     train_options(c), recorder ? &*recorder : nullptr);
  } catch (const TrainingAborted& e) {
    write_text_file(out / "abort_dump.csv", e.dump());
    throw;
  }
  std::ostringstream log;
  a.result.log.write_csv(log);
  write_text_file(out / "training_log.csv", log.str());
  a.checkpoint = out / "best.ckpt";
  save_checkpoint(a.checkpoint, a.result.best);
  return a;
}

/// Test-split accuracy of a checkpoint; writes eval.csv and eval_episodes.csv.
inline AccuracyStats run_eval(const RunConfig& c, const SplitSet& data, const fs::path& checkpoint) {
  EmbedNetParams params = load_checkpoint(checkpoint);
  if (params.variant != c.variant) {
    throw ConfigError("model.variant", "checkpoint holds a " + std::string(to_string(params.variant)) +
                                           " network, config asks for " +
                                           std::string(to_string(c.variant)));
  }
  check_input_shape(params, data.test);
  const AccuracyStats stats = evaluate(params, data.test, c.eval_shape, c.metric.resolve(),
                                       c.eval_episodes, make_rng(c.seed, rng_stream::test));
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  write_text_file(out / "eval.csv", "episodes,mean_acc,ci95\n" + std::to_string(c.eval_episodes) +
                                        "," + format_double(stats.mean) + "," +
                                        format_double(stats.ci95) + "\n");
  std::ostringstream per;
  per << "episode,accuracy\n";
  for (std::size_t i = 0; i < stats.per_episode.size(); ++i) {
    per << i << ',' << format_double(stats.per_episode[i]) << '\n';
  }
  write_text_file(out / "eval_episodes.csv", per.str());
  return stats;
}

struct SweepCell {
  double s = 0.0;
  double r = 0.0;
  double best_val_acc = 0.0;
  std::size_t best_episode = 0;
  AccuracyStats test;
};

/// Empty when no validation ran.
inline std::string val_field(double acc) { return acc < 0.0 ? "" : format_double(acc); }

inline std::string cell_dir_name(double s, double r) {
  return "s" + format_double(s) + "_r" + format_double(r);
}

/// Train + eval for every (s, r) pair; one subdirectory per cell and sweep.csv.
inline std::vector<SweepCell> run_sweep(const RunConfig& base, const SplitSet& data,
                                        const std::vector<double>& s_grid,
                                        const std::vector<double>& r_grid) {
  if (s_grid.empty()) throw ConfigError("sweep.s_grid", "must not be empty");
  if (r_grid.empty()) throw ConfigError("sweep.r_grid", "must not be empty");
  for (double s : s_grid) MetricConfig::leaky(s, 1.0);
  for (double r : r_grid) MetricConfig::leaky(0.0, r);
  std::vector<SweepCell> cells;
  std::ostringstream csv;
  csv << "s,r,best_val_acc,best_episode,test_acc,test_ci95\n";
  for (double s : s_grid) {
    for (double r : r_grid) {
      RunConfig c = base;
      c.metric = {MetricKind::leaky_squared_euclidean, s, r};
      c.output_dir = (fs::path(base.output_dir) / cell_dir_name(s, r)).string();
      const TrainArtifacts a = run_train(c, data);
      SweepCell cell{s, r, a.result.best_val_acc, a.result.best_episode,
                     run_eval(c, data, a.checkpoint)};
      csv << format_double(s) << ',' << format_double(r) << ',' << val_field(cell.best_val_acc) << ','
          << cell.best_episode << ',' << format_double(cell.test.mean) << ','
          << format_double(cell.test.ci95) << '\n';
      cells.push_back(std::move(cell));
    }
  }
  fs::create_directories(base.output_dir);
  write_text_file(fs::path(base.output_dir) / "sweep.csv", csv.str());
  return cells;
}

/**
 * Gradient and distance snapshots at the configured iterations, starting
 * from a checkpoint or a fresh network. Runs last_iteration + 1 training
 * episodes without validation; files land in <out>/snapshots.
 */
inline std::size_t run_diagnose(const RunConfig& c, const SplitSet& data,
                                const std::optional<fs::path>& checkpoint) {
  if (c.snapshot_iterations.empty()) {
    throw ConfigError("snapshots.iterations", "diagnose needs at least one iteration");
  }
  EmbedNetParams params = checkpoint ? load_checkpoint(*checkpoint) : fresh_params(c, data.train);
  check_input_shape(params, data.train);
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  write_text_file(out / "config.json", to_json(c).dump(2) + "\n");
  SnapshotRecorder recorder(c.snapshot_iterations,
                            directory_sink(out / "snapshots", c.snapshot_bins, c.sparsity_tau));
  TrainOptions opts = train_options(c);
  opts.episodes = recorder.last_iteration() + 1;
  opts.val_interval = 0;
  train(params, data.train, nullptr, opts, &recorder);
  return recorder.captured();
}

namespace detail {

struct CliState {
  std::optional<std::string> config_path;
  Overrides o;
  std::optional<std::string> checkpoint;
  std::vector<double> s_grid, r_grid;
};

template <class T>
CLI::Option* optional_opt(CLI::App& app, const std::string& name, std::optional<T>& dst,
                          const std::string& help) {
  return app.add_option_function<T>(name, [&dst](const T& v) { dst = v; }, help);
}

inline void add_common(CLI::App& app, CliState& st) {
  optional_opt(app, "--config", st.config_path, "JSON config file");
  optional_opt(app, "--seed", st.o.seed, "run seed");
  optional_opt(app, "--out", st.o.out, "output directory");
  optional_opt(app, "--dataset", st.o.dataset, "omniglot | image_folder | synthetic | random_images");
  optional_opt(app, "--root", st.o.root, "dataset root directory");
  optional_opt(app, "--split-dir", st.o.split_dir, "directory with train.txt/val.txt/test.txt");
  optional_opt(app, "--train-classes", st.o.train_class_limit, "keep only the first N training classes");
  optional_opt(app, "--variant", st.o.variant, "omniglot | standard | linear");
  optional_opt(app, "--metric", st.o.metric, "euc | lsed | cosine");
  optional_opt(app, "--s", st.o.s, "leaky threshold s >= 0");
  optional_opt(app, "--r", st.o.r, "leaky slope r in (0, 1]");
  optional_opt(app, "--lr", st.o.lr, "Adam learning rate");
  optional_opt(app, "--n-way", st.o.n_way, "classes per episode (train and eval)");
  optional_opt(app, "--k-shot", st.o.k_shot, "support samples per class");
  optional_opt(app, "--q-query", st.o.q_query, "query samples per class");
  optional_opt(app, "--train-n-way", st.o.train_n_way, "classes per training episode");
  optional_opt(app, "--eval-n-way", st.o.eval_n_way, "classes per evaluation episode");
  optional_opt(app, "--episodes", st.o.episodes, "training episodes");
  optional_opt(app, "--eval-episodes", st.o.eval_episodes, "test episodes");
  optional_opt(app, "--val-interval", st.o.val_interval, "episodes between validations (0 disables)");
  optional_opt(app, "--val-episodes", st.o.val_episodes, "episodes per validation");
  app.add_option_function<std::vector<std::size_t>>(
         "--iterations", [&st](const std::vector<std::size_t>& v) { st.o.snapshot_iterations = v; },
         "snapshot iterations, e.g. 0,8,16")
      ->delimiter(',');
  app.add_flag_function("--wall-time", [&st](std::int64_t) { st.o.wall_time = true; },
                        "record per-episode wall time in the training log");
}

}  // namespace detail

/**
 * fewshot <train|eval|sweep|diagnose> [options]. Returns 0 on success, 2 on
 * a configuration error and 3 on a runtime failure.
 */
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Prototypical few-shot training with leaky squared Euclidean distances"};
  app.require_subcommand(1);
  detail::CliState st;
  CLI::App* train_cmd = app.add_subcommand("train", "train and keep the best-validation checkpoint");
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "train and evaluate over an (s, r) grid");
  CLI::App* diag_cmd = app.add_subcommand("diagnose", "gradient and distance histograms");
  for (CLI::App* cmd : {train_cmd, eval_cmd, sweep_cmd, diag_cmd}) detail::add_common(*cmd, st);
  eval_cmd->add_option("--checkpoint", st.checkpoint, "checkpoint file")->required();
  diag_cmd->add_option("--checkpoint", st.checkpoint, "start from this checkpoint");
  sweep_cmd->add_option("--s-grid", st.s_grid, "comma-separated s values")->delimiter(',');
  sweep_cmd->add_option("--r-grid", st.r_grid, "comma-separated r values")->delimiter(',');

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? exit_code::ok : exit_code::config;
  }

  try {
    const std::optional<fs::path> cfg_file =
        st.config_path ? std::optional<fs::path>(*st.config_path) : std::nullopt;
    const RunConfig cfg = resolve_config(cfg_file, st.o);
    const SplitSet data = load_data(cfg);

    if (train_cmd->parsed()) {
      const TrainArtifacts a = run_train(cfg, data);
      out << "trained " << cfg.train_episodes << " episodes; best val acc "
          << (a.result.best_val_acc < 0.0 ? "n/a" : val_field(a.result.best_val_acc)) << " at episode "
          << a.result.best_episode
          << "; checkpoint " << a.checkpoint.string() << '\n';
    } else if (eval_cmd->parsed()) {
      const AccuracyStats s = run_eval(cfg, data, *st.checkpoint);
      out << "test accuracy " << format_double(100.0 * s.mean) << "% +- "
          << format_double(100.0 * s.ci95) << "% over " << cfg.eval_episodes << " episodes\n";
    } else if (sweep_cmd->parsed()) {
      if (st.s_grid.empty()) st.s_grid = {cfg.metric.s};
      if (st.r_grid.empty()) st.r_grid = {cfg.metric.r};
      for (const SweepCell& c : run_sweep(cfg, data, st.s_grid, st.r_grid)) {
        out << "s=" << format_double(c.s) << " r=" << format_double(c.r)
            << " val=" << (c.best_val_acc < 0.0 ? "n/a" : val_field(c.best_val_acc)) << " test=" << format_double(c.test.mean)
            << '\n';
      }
    } else if (diag_cmd->parsed()) {
      const std::optional<fs::path> ckpt =
          st.checkpoint ? std::optional<fs::path>(*st.checkpoint) : std::nullopt;
      const std::size_t n = run_diagnose(cfg, data, ckpt);
      out << "wrote " << n << " snapshots to " << (fs::path(cfg.output_dir) / "snapshots").string()
          << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code::config;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::runtime;
  }
  return exit_code::ok;
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(std::move(args));
}

}  // namespace fewshot
