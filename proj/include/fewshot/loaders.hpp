#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/dataset.hpp"
#include "fewshot/errors.hpp"

namespace fewshot {

namespace fs = std::filesystem;

inline constexpr std::size_t kOmniglotSize = 28;
inline constexpr std::size_t kImageFolderSize = 84;

// Character counts of the 1028/172/423 split (x4 rotations: 4112/688/1692).
inline constexpr std::size_t kOmniglotTrainChars = 1028;
inline constexpr std::size_t kOmniglotValChars = 172;
inline constexpr std::size_t kOmniglotChars = 1623;

/// Counter-clockwise quarter turn of a square single-channel image.
inline std::vector<float> rotate90(const std::vector<float>& img, std::size_t side) {
  std::vector<float> out(img.size());
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) out[y * side + x] = img[x * side + (side - 1 - y)];
  }
  return out;
}

namespace detail {

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<fs::path> sorted_images(const fs::path& dir, bool png_only) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto& p = entry.path();
    if (png_only ? p.extension() == ".png" : is_image_file(p)) files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> read_id_list(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open split file " + file.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (!line.empty() && line[0] != '#') ids.push_back(line);
  }
  return ids;
}

}  // namespace detail

/// Grayscale decode, area resize to 28x28, inverted so strokes are 1 and background 0.
inline std::vector<float> decode_omniglot_image(const fs::path& file) {
  cv::Mat img = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw LoadError("cannot decode image " + file.string());
  cv::Mat small;
  cv::resize(img, small, cv::Size(kOmniglotSize, kOmniglotSize), 0, 0, cv::INTER_AREA);
  std::vector<float> out(kOmniglotSize * kOmniglotSize);
  for (std::size_t y = 0; y < kOmniglotSize; ++y) {
    for (std::size_t x = 0; x < kOmniglotSize; ++x) {
      out[y * kOmniglotSize + x] =
          1.0f - static_cast<float>(small.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x))) / 255.0f;
    }
  }
  return out;
}

/// RGB decode, area resize to side x side, CHW layout in [0, 1].
inline std::vector<float> decode_rgb_image(const fs::path& file, std::size_t side) {
  cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw LoadError("cannot decode image " + file.string());
  cv::Mat rgb, small;
  cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
  cv::resize(rgb, small, cv::Size(static_cast<int>(side), static_cast<int>(side)), 0, 0,
             cv::INTER_AREA);
  std::vector<float> out(3 * side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const auto px = small.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * side + y) * side + x] = static_cast<float>(px[static_cast<int>(c)]) / 255.0f;
      }
    }
  }
  return out;
}

/**
 * Loads the characters listed in `split_file` from an
 * alphabet/character/<name>.png tree. A line "Alphabet/character01" yields the
 * four rotation classes 0/90/180/270; a line ending in "/rotNNN" yields
 * that rotation only. Class order follows the file.
 */
inline DatasetSplit load_omniglot(const fs::path& root, const std::vector<std::string>& ids) {
  DatasetSplit split;
  split.shape = ImageShape{1, kOmniglotSize, kOmniglotSize};
  for (const std::string& raw : ids) {
    std::string id = raw;
    std::vector<int> rotations{0, 90, 180, 270};
    if (const auto slash = id.rfind('/'); slash != std::string::npos &&
                                          id.compare(slash + 1, 3, "rot") == 0) {
      const int deg = std::stoi(id.substr(slash + 4));
      if (deg % 90 != 0 || deg < 0 || deg >= 360) {
        throw LoadError("bad rotation in split entry '" + raw + "'");
      }
      rotations = {deg};
      id = id.substr(0, slash);
    }
    const fs::path dir = root / id;
    if (!fs::is_directory(dir)) throw LoadError("missing character directory: " + id);
    std::vector<std::vector<float>> base;
    for (const auto& file : detail::sorted_images(dir, true)) {
      base.push_back(decode_omniglot_image(file));
    }
    if (base.empty()) throw LoadError("no images for character: " + id);
    for (int deg : rotations) {
      ClassRecord rec;
      rec.class_id = split.classes.size();
      rec.source = id;
      rec.rotation = deg;
      for (const auto& img : base) {
        std::vector<float> r = img;
        for (int k = 0; k < deg / 90; ++k) r = rotate90(r, kOmniglotSize);
        rec.samples.push_back(std::move(r));
      }
      split.classes.push_back(std::move(rec));
    }
  }
  return split;
}

inline DatasetSplit load_omniglot(const fs::path& root, const fs::path& split_file) {
  return load_omniglot(root, detail::read_id_list(split_file));
}

/// Every alphabet/character id under `root`, sorted.
inline std::vector<std::string> list_omniglot_characters(const fs::path& root) {
  if (!fs::is_directory(root)) throw LoadError("omniglot root not found: " + root.string());
  std::vector<std::string> ids;
  for (const auto& alphabet : detail::sorted_subdirs(root)) {
    for (const auto& character : detail::sorted_subdirs(alphabet)) {
      ids.push_back(alphabet.filename().string() + "/" + character.filename().string());
    }
  }
  return ids;
}

struct SplitIds {
  std::vector<std::string> train, val, test;
};

/// Consecutive runs of sorted ids in the 1028:172:423 proportion.
inline SplitIds count_matched_split(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  const std::size_t n = ids.size();
  const auto n_train = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * kOmniglotTrainChars / kOmniglotChars));
  const auto n_val = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * kOmniglotValChars / kOmniglotChars));
  SplitIds s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
               ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  return s;
}

/// train.txt / val.txt / test.txt from `split_dir`, or count_matched_split of the tree.
inline SplitIds omniglot_split_ids(const fs::path& root, const std::optional<fs::path>& split_dir) {
  if (!split_dir) return count_matched_split(list_omniglot_characters(root));
  return SplitIds{detail::read_id_list(*split_dir / "train.txt"),
                  detail::read_id_list(*split_dir / "val.txt"),
                  detail::read_id_list(*split_dir / "test.txt")};
}

inline SplitSet load_omniglot_splits(const fs::path& root, const std::optional<fs::path>& split_dir) {
  const SplitIds ids = omniglot_split_ids(root, split_dir);
  return SplitSet{load_omniglot(root, ids.train), load_omniglot(root, ids.val),
                  load_omniglot(root, ids.test)};
}

/// root/<class>/*.{png,jpg}; classes in the given order (all subdirectories, sorted, if empty).
inline DatasetSplit load_image_folder(const fs::path& root, std::vector<std::string> classes = {},
                                      std::size_t side = kImageFolderSize) {
  if (!fs::is_directory(root)) throw LoadError("image folder root not found: " + root.string());
  if (classes.empty()) {
    for (const auto& d : detail::sorted_subdirs(root)) classes.push_back(d.filename().string());
  }
  DatasetSplit split;
  split.shape = ImageShape{3, side, side};
  for (const std::string& name : classes) {
    const fs::path dir = root / name;
    if (!fs::is_directory(dir)) throw LoadError("missing class directory: " + name);
    ClassRecord rec;
    rec.class_id = split.classes.size();
    rec.source = name;
    for (const auto& file : detail::sorted_images(dir, false)) {
      rec.samples.push_back(decode_rgb_image(file, side));
    }
    if (rec.samples.empty()) throw LoadError("no images for class: " + name);
    split.classes.push_back(std::move(rec));
  }
  return split;
}

/// Split files from `split_dir`, or consecutive sorted classes in a 64:16:20 proportion.
inline SplitSet load_image_folder_splits(const fs::path& root,
                                         const std::optional<fs::path>& split_dir,
                                         std::size_t side = kImageFolderSize) {
  if (split_dir) {
    return SplitSet{load_image_folder(root, detail::read_id_list(*split_dir / "train.txt"), side),
                    load_image_folder(root, detail::read_id_list(*split_dir / "val.txt"), side),
                    load_image_folder(root, detail::read_id_list(*split_dir / "test.txt"), side)};
  }
  DatasetSplit all = load_image_folder(root, {}, side);
  const std::size_t n = all.classes.size();
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 0.64));
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 0.16));
  return partition_classes(std::move(all), n_train, n_val);
}

/// Keeps the first `limit` classes (0 keeps all).
inline void limit_classes(DatasetSplit& split, std::size_t limit) {
  if (limit != 0 && split.classes.size() > limit) split.classes.resize(limit);
}

}  // namespace fewshot
