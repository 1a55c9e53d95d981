#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewshot/episodic.hpp"
#include "fewshot/metrics.hpp"

namespace fewshot {

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

/// Distances and ∂ℓ/∂d recorded for one training iteration.
struct GradSnapshot {
  std::size_t iteration = 0;
  std::vector<double> dist_euc;     // squared Euclidean, pre-metric
  std::vector<double> dist_metric;  // post-metric
  std::vector<double> grad_values;  // per-query ∂ℓ/∂d, in [-1, 1]
  MetricConfig metric;

  /// Appends one episode's Q*K entries.
  void append(const EpisodeResult& r) {
    const auto& e = r.distances.euclidean.data();
    const auto& m = r.distances.values.data();
    const auto& g = r.distance_grads.data();
    dist_euc.insert(dist_euc.end(), e.begin(), e.end());
    dist_metric.insert(dist_metric.end(), m.begin(), m.end());
    grad_values.insert(grad_values.end(), g.begin(), g.end());
  }

  static GradSnapshot from(std::size_t iteration, const EpisodeResult& r) {
    GradSnapshot s;
    s.iteration = iteration;
    s.metric = r.distances.metric;
    s.append(r);
    return s;
  }
};

enum class HistogramTransform { identity, log10_abs_biased };

inline constexpr double kGradBias = 1e-5;
inline constexpr double kGradHistLo = -5.0;
inline constexpr double kGradHistHi = 0.01;
inline constexpr std::size_t kDefaultBins = 60;
inline constexpr double kDefaultTau = 1e-4;

/// x -> log10(|x| + 1e-5)
inline double log10_abs_biased(double x) { return std::log10(std::abs(x) + kGradBias); }

struct Histogram {
  std::vector<double> bin_edges;  // bins + 1, strictly ascending
  std::vector<std::size_t> counts;
  HistogramTransform transform = HistogramTransform::identity;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }

  /// Index of the bin holding (already transformed) value v; edges are clamped.
  std::size_t bin_of(double v) const {
    const double lo = bin_edges.front(), hi = bin_edges.back();
    const std::size_t bins = counts.size();
    if (!(v > lo)) return 0;
    if (v >= hi) return bins - 1;
    auto i = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    return std::min(i, bins - 1);
  }
};

/// Uniform bins over [lo, hi]; values outside are clamped into the end bins.
inline Histogram make_histogram(std::span<const double> values, double lo, double hi,
                                std::size_t bins, HistogramTransform transform) {
  if (bins == 0) throw std::invalid_argument("histogram: bins must be positive");
  if (!(hi > lo)) throw std::invalid_argument("histogram: empty range");
  Histogram h;
  h.transform = transform;
  h.counts.assign(bins, 0);
  h.bin_edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.bin_edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  for (double v : values) {
    const double t = transform == HistogramTransform::log10_abs_biased ? log10_abs_biased(v) : v;
    ++h.counts[h.bin_of(t)];
  }
  return h;
}

/// Histogram of log10(|∂ℓ/∂d| + 1e-5) over [-5, 0.01].
inline Histogram grad_histogram(const GradSnapshot& snap, std::size_t bins = kDefaultBins) {
  if (snap.grad_values.empty()) throw std::invalid_argument("grad_histogram: empty snapshot");
  return make_histogram(snap.grad_values, kGradHistLo, kGradHistHi, bins,
                        HistogramTransform::log10_abs_biased);
}

/// Histogram of raw distances over [min, max] of the data.
inline Histogram distance_histogram(std::span<const double> distances,
                                    std::size_t bins = kDefaultBins) {
  if (distances.empty()) throw std::invalid_argument("distance_histogram: no values");
  auto [lo, hi] = std::minmax_element(distances.begin(), distances.end());
  double a = *lo, b = *hi;
  if (!(b > a)) {
    a -= 0.5;
    b += 0.5;
  }
  return make_histogram(distances, a, b, bins, HistogramTransform::identity);
}

/**
 * Fraction of gradient entries within tau of a saturated value:
 * |g| <= tau or |g| >= 1 - tau. 1 means no usable learning signal.
 */
inline double sparsity_index(std::span<const double> grads, double tau = kDefaultTau) {
  if (!(tau > 0.0 && tau < 0.5)) throw std::invalid_argument("sparsity_index: tau must be in (0, 0.5)");
  if (grads.empty()) return 0.0;
  std::size_t saturated = 0;
  for (double g : grads) {
    const double a = std::abs(g);
    if (a <= tau || a >= 1.0 - tau) ++saturated;
  }
  return static_cast<double>(saturated) / static_cast<double>(grads.size());
}

inline double sparsity_index(const GradSnapshot& snap, double tau = kDefaultTau) {
  return sparsity_index(snap.grad_values, tau);
}

/**
 * Training-loop hook that fires at a fixed, strictly ascending list of
 * iterations. The loop calls capture() before that iteration's optimizer
 * step; the sink persists the snapshot synchronously.
 */
class SnapshotRecorder {
 public:
  using Sink = std::function<void(const GradSnapshot&)>;

  SnapshotRecorder() = default;

  SnapshotRecorder(std::vector<std::size_t> iterations, Sink sink)
      : iterations_(std::move(iterations)), sink_(std::move(sink)) {
    for (std::size_t i = 1; i < iterations_.size(); ++i) {
      if (iterations_[i] == iterations_[i - 1]) {
        throw ConfigError("snapshots.iterations",
                          "duplicate iteration " + std::to_string(iterations_[i]));
      }
      if (iterations_[i] < iterations_[i - 1]) {
        throw ConfigError("snapshots.iterations", "iterations must be ascending");
      }
    }
  }

  bool wants(std::size_t iteration) const {
    return !iterations_.empty() &&
           std::binary_search(iterations_.begin(), iterations_.end(), iteration);
  }

  void capture(const GradSnapshot& snap) {
    if (sink_) sink_(snap);
    ++captured_;
  }

  const std::vector<std::size_t>& iterations() const noexcept { return iterations_; }
  std::size_t last_iteration() const { return iterations_.empty() ? 0 : iterations_.back(); }
  std::size_t captured() const noexcept { return captured_; }

 private:
  std::vector<std::size_t> iterations_;
  Sink sink_;
  std::size_t captured_ = 0;
};

// CSV export

inline void write_snapshot_csv(std::ostream& os, const GradSnapshot& s) {
  os << "iteration,kind,value\n";
  for (double v : s.grad_values) os << s.iteration << ",grad," << format_double(v) << '\n';
  for (double v : s.dist_euc) os << s.iteration << ",dist_euc," << format_double(v) << '\n';
  for (double v : s.dist_metric) os << s.iteration << ",dist_metric," << format_double(v) << '\n';
}

inline void write_histogram_csv(std::ostream& os, const Histogram& h) {
  os << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    os << format_double(h.bin_edges[i]) << ',' << format_double(h.bin_edges[i + 1]) << ','
       << h.counts[i] << '\n';
  }
}

/// Static bar chart of a histogram.
inline std::string histogram_svg(const Histogram& h, const std::string& title,
                                 const std::string& x_label) {
  const double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  std::size_t peak = 1;
  for (auto c : h.counts) peak = std::max(peak, c);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"16\">"
     << title << "</text>\n";
  const double bar_w = plot_w / static_cast<double>(h.counts.size());
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double bh = plot_h * static_cast<double>(h.counts[i]) / static_cast<double>(peak);
    os << "<rect x=\"" << format_double(left + bar_w * static_cast<double>(i)) << "\" y=\""
       << format_double(top + plot_h - bh) << "\" width=\"" << format_double(bar_w * 0.9)
       << "\" height=\"" << format_double(bh) << "\" fill=\"steelblue\"/>\n";
  }
  os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w
     << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left << "\" y=\"" << top + plot_h + 18
     << "\" font-family=\"sans-serif\" font-size=\"12\">" << format_double(h.bin_edges.front())
     << "</text>\n";
  os << "<text x=\"" << left + plot_w << "\" y=\"" << top + plot_h + 18
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">"
     << format_double(h.bin_edges.back()) << "</text>\n";
  os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 16
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << x_label
     << "</text>\n";
  os << "<text x=\"" << left - 8 << "\" y=\"" << top + 4
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << peak
     << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

/// Writes `content` to `path`, replacing any existing file.
inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
}

inline std::string iteration_tag(std::size_t iteration) {
  std::string digits = std::to_string(iteration);
  if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
  return "it" + digits;
}

/**
 * Sink that writes, per snapshot, into `dir`:
 *   snapshot_itNNNNN.csv, hist_grad_itNNNNN.{csv,svg}, hist_dist_itNNNNN.{csv,svg}
 * and one row per snapshot in sparsity.csv (restarted when the sink is made).
 */
inline SnapshotRecorder::Sink directory_sink(std::filesystem::path dir,
                                             std::size_t bins = kDefaultBins,
                                             double tau = kDefaultTau) {
  std::filesystem::remove(dir / "sparsity.csv");
  return [dir = std::move(dir), bins, tau](const GradSnapshot& s) {
    std::filesystem::create_directories(dir);
    const std::string tag = iteration_tag(s.iteration);
    {
      std::ostringstream os;
      write_snapshot_csv(os, s);
      write_text_file(dir / ("snapshot_" + tag + ".csv"), os.str());
    }
    const Histogram gh = grad_histogram(s, bins);
    const Histogram dh = distance_histogram(s.dist_metric, bins);
    {
      std::ostringstream os;
      write_histogram_csv(os, gh);
      write_text_file(dir / ("hist_grad_" + tag + ".csv"), os.str());
    }
    {
      std::ostringstream os;
      write_histogram_csv(os, dh);
      write_text_file(dir / ("hist_dist_" + tag + ".csv"), os.str());
    }
    const std::string metric_name(to_string(s.metric.kind()));
    write_text_file(dir / ("hist_grad_" + tag + ".svg"),
                    histogram_svg(gh, "log10(|dl/dd| + 1e-5), " + metric_name + ", iteration " +
                                          std::to_string(s.iteration),
                                  "log10(|gradient| + 1e-5)"));
    write_text_file(dir / ("hist_dist_" + tag + ".svg"),
                    histogram_svg(dh, "query-prototype distance, " + metric_name +
                                          ", iteration " + std::to_string(s.iteration),
                                  "distance"));
    const auto sparsity_path = dir / "sparsity.csv";
    const bool fresh = !std::filesystem::exists(sparsity_path);
    std::ofstream f(sparsity_path, std::ios::app);
    if (fresh) f << "iteration,sparsity_index,mean_dist_euc,mean_dist_metric\n";
    double me = 0.0, mm = 0.0;
    for (double v : s.dist_euc) me += v;
    for (double v : s.dist_metric) mm += v;
    const double n = static_cast<double>(std::max<std::size_t>(s.dist_euc.size(), 1));
    f << s.iteration << ',' << format_double(sparsity_index(s, tau)) << ','
      << format_double(me / n) << ',' << format_double(mm / n) << '\n';
  };
}

}  // namespace fewshot
