#pragma once

#include "crate/model.hpp"
#include "crate/numerics.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace crate {

struct ChannelStats {
  std::vector<double> mean, stdev;
};

template <class S>
struct Dataset {
  InputKind kind = InputKind::image;
  int channels = 0, side = 0;
  int token_dim = 0, tokens_per_sample = 0;
  std::vector<Vec<S>> images;  // unit-interval pixels, channel-major
  std::vector<Mat<S>> tokens;  // token matrices, token_dim x tokens_per_sample
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

namespace cifar {
inline constexpr int kSide = 32;
inline constexpr int kChannels = 3;
inline constexpr int kRecordBytes = 1 + kChannels * kSide * kSide;
inline constexpr int kClasses = 10;
}  // namespace cifar

/// Reads the standard binary batches: per record one label byte followed by
/// 3072 pixel bytes (R, G, B planes, row-major 32x32). Pixels are scaled to
/// [0,1]; normalization constants are applied later at batch assembly.
template <class S>
Dataset<S> load_cifar10(const std::string& dir, const std::string& split,
                        std::size_t max_records = 0) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) {
      const auto p = fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(p)) files.push_back(p.string());
    }
    if (files.empty())
      throw DataError("load_cifar10: no data_batch_*.bin under " + dir);
  } else if (split == "test") {
    const auto p = fs::path(dir) / "test_batch.bin";
    if (!fs::exists(p)) throw DataError("load_cifar10: missing " + p.string());
    files.push_back(p.string());
  } else {
    throw ConfigError("load_cifar10: split must be train or test");
  }

  Dataset<S> ds;
  ds.kind = InputKind::image;
  ds.channels = cifar::kChannels;
  ds.side = cifar::kSide;
  std::vector<unsigned char> rec(cifar::kRecordBytes);
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("load_cifar10: cannot open " + file);
    std::uint64_t offset = 0;
    for (;;) {
      in.read(reinterpret_cast<char*>(rec.data()), cifar::kRecordBytes);
      const auto got = in.gcount();
      if (got == 0) break;
      if (got != cifar::kRecordBytes)
        throw DataError("load_cifar10: truncated record in " + file +
                        " at byte offset " + std::to_string(offset));
      if (rec[0] >= cifar::kClasses)
        throw DataError("load_cifar10: label byte " + std::to_string(int(rec[0])) +
                        " out of range in " + file + " at byte offset " +
                        std::to_string(offset));
      Vec<S> img(cifar::kRecordBytes - 1);
      for (int i = 0; i < cifar::kRecordBytes - 1; ++i)
        img(i) = static_cast<S>(rec[static_cast<std::size_t>(i) + 1]) / S(255);
      ds.images.push_back(std::move(img));
      ds.labels.push_back(rec[0]);
      offset += cifar::kRecordBytes;
      if (max_records > 0 && ds.labels.size() >= max_records) return ds;
    }
  }
  return ds;
}

template <class S>
ChannelStats compute_channel_stats(const Dataset<S>& ds) {
  if (ds.kind != InputKind::image || ds.images.empty())
    throw DataError("compute_channel_stats: image dataset required");
  const int plane = ds.side * ds.side;
  ChannelStats st;
  st.mean.assign(static_cast<std::size_t>(ds.channels), 0.0);
  st.stdev.assign(static_cast<std::size_t>(ds.channels), 0.0);
  const double n = static_cast<double>(ds.images.size()) * plane;
  for (const auto& img : ds.images)
    for (int c = 0; c < ds.channels; ++c)
      st.mean[static_cast<std::size_t>(c)] +=
          img.segment(c * plane, plane).template cast<double>().sum();
  for (auto& m : st.mean) m /= n;
  for (const auto& img : ds.images)
    for (int c = 0; c < ds.channels; ++c)
      st.stdev[static_cast<std::size_t>(c)] +=
          (img.segment(c * plane, plane).template cast<double>().array() -
           st.mean[static_cast<std::size_t>(c)])
              .square()
              .sum();
  for (auto& s : st.stdev) s = std::max(std::sqrt(s / n), 1e-8);
  return st;
}

inline void save_channel_stats(const std::string& path, const ChannelStats& st) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.precision(17);
  out << "mean";
  for (double m : st.mean) out << ' ' << m;
  out << "\nstd";
  for (double s : st.stdev) out << ' ' << s;
  out << '\n';
}

inline ChannelStats load_channel_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  ChannelStats st;
  std::string tag;
  in >> tag;
  if (tag != "mean") throw DataError("bad channel stats file: " + path);
  for (double v; in >> v;) st.mean.push_back(v);
  in.clear();
  in >> tag;
  if (tag != "std") throw DataError("bad channel stats file: " + path);
  for (double v; in >> v;) st.stdev.push_back(v);
  if (st.stdev.size() != st.mean.size() || st.mean.empty())
    throw DataError("bad channel stats file: " + path);
  return st;
}

template <class S>
Vec<S> normalize_image(const Vec<S>& img, int channels, int side,
                       const ChannelStats& st) {
  const int plane = side * side;
  Vec<S> out(img.size());
  for (int c = 0; c < channels; ++c)
    out.segment(c * plane, plane) =
        (img.segment(c * plane, plane).array() -
         static_cast<S>(st.mean[static_cast<std::size_t>(c)])) /
        static_cast<S>(st.stdev[static_cast<std::size_t>(c)]);
  return out;
}

/// Zero-pad by `pad`, crop back to the original side at a random offset, and
/// flip horizontally with probability one half.
template <class S>
Vec<S> augment_crop_flip(const Vec<S>& img, int channels, int side, int pad,
                         RngState& rng) {
  const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad + 1)));
  const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad + 1)));
  const bool flip = rng.below(2) == 1;
  const int plane = side * side;
  Vec<S> out = Vec<S>::Zero(img.size());
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < side; ++y) {
      const int sy = y + oy - pad;
      if (sy < 0 || sy >= side) continue;
      for (int x = 0; x < side; ++x) {
        const int sx0 = x + ox - pad;
        if (sx0 < 0 || sx0 >= side) continue;
        const int sx = flip ? side - 1 - sx0 : sx0;
        out(c * plane + y * side + x) = img(c * plane + sy * side + sx);
      }
    }
  return out;
}

/// Epoch shuffle as a pure function of (seed, epoch).
inline std::vector<int> shuffle_order(std::uint64_t seed, int epoch, int n) {
  return RngState(seed)
      .derive({0x73687566666cULL, static_cast<std::uint64_t>(epoch)})
      .permutation(n);
}

struct SubspaceDatasetSpec {
  int k_true = 4;
  int ambient = 64;
  int p_true = 4;
  double noise_sigma = 0.05;
  int tokens_per_sample = 8;
  int train_samples = 4096;
  int test_samples = 1024;

  void validate() const {
    if (k_true < 1) throw ConfigError("synthetic.k_true must be >= 1");
    if (p_true < 1 || p_true >= ambient)
      throw ConfigError("synthetic.p_true must lie in [1, ambient)");
    if (noise_sigma < 0) throw ConfigError("synthetic.noise_sigma must be >= 0");
    if (tokens_per_sample < 1)
      throw ConfigError("synthetic.tokens_per_sample must be >= 1");
    if (train_samples < 1 || test_samples < 1)
      throw ConfigError("synthetic sample counts must be >= 1");
  }
};

/// Union-of-subspaces token sets: each sample draws one of k_true orthonormal
/// bases (shared across splits), Gaussian coefficients per token, and optional
/// isotropic noise. The label is the subspace index.
template <class S>
Dataset<S> gen_subspace_data(const SubspaceDatasetSpec& spec, std::uint64_t seed,
                             const std::string& split, int count) {
  spec.validate();
  std::vector<Mat<double>> bases;
  bases.reserve(static_cast<std::size_t>(spec.k_true));
  RngState brng = RngState(seed).derive({0xba5e5ULL});
  for (int k = 0; k < spec.k_true; ++k) {
    Mat<double> g = gaussian<double>(brng, spec.ambient, spec.p_true);
    Eigen::HouseholderQR<Mat<double>> qr(g);
    Mat<double> q = qr.householderQ() * Mat<double>::Identity(spec.ambient, spec.p_true);
    bases.push_back(std::move(q));
  }

  const std::uint64_t split_tag = split == "train" ? 1 : 2;
  Dataset<S> ds;
  ds.kind = InputKind::tokens;
  ds.token_dim = spec.ambient;
  ds.tokens_per_sample = spec.tokens_per_sample;
  ds.tokens.reserve(static_cast<std::size_t>(count));
  ds.labels.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    RngState rng = RngState(seed).derive(
        {0x70a75ULL, split_tag, static_cast<std::uint64_t>(i)});
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.k_true)));
    Mat<double> coeff = gaussian<double>(rng, spec.p_true, spec.tokens_per_sample);
    Mat<double> x = bases[static_cast<std::size_t>(label)] * coeff;
    if (spec.noise_sigma > 0)
      x += gaussian<double>(rng, spec.ambient, spec.tokens_per_sample, spec.noise_sigma);
    ds.tokens.push_back(x.template cast<S>());
    ds.labels.push_back(label);
  }
  return ds;
}

/// Writes class-structured images in the CIFAR-10 binary layout, for running
/// the image pipeline where the real dataset is not available. Each class is
/// a smooth random template plus per-image noise and brightness jitter.
inline void make_cifar10_surrogate(const std::string& dir, int train_records,
                                   int test_records, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int side = cifar::kSide, plane = side * side;

  RngState trng = RngState(seed).derive({0x7e3a91ULL});
  std::vector<Vec<double>> templates;
  for (int cls = 0; cls < cifar::kClasses; ++cls) {
    Vec<double> t(cifar::kChannels * plane);
    for (int c = 0; c < cifar::kChannels; ++c) {
      const double base = 60.0 + trng.uniform() * 120.0;
      const double gx = (trng.uniform() - 0.5) * 3.0;
      const double gy = (trng.uniform() - 0.5) * 3.0;
      const double cx = trng.uniform() * side, cy = trng.uniform() * side;
      const double amp = (trng.uniform() - 0.5) * 160.0;
      const double rad = 4.0 + trng.uniform() * 10.0;
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          t(c * plane + y * side + x) =
              base + gx * x + gy * y + amp * std::exp(-r2 / (2 * rad * rad));
        }
    }
    templates.push_back(std::move(t));
  }

  auto write_split = [&](const std::string& stem, int records, std::uint64_t tag) {
    int written = 0, file_idx = 1;
    while (written < records) {
      const int chunk = std::min(records - written, 10000);
      const std::string path =
          stem == "test"
              ? (fs::path(dir) / "test_batch.bin").string()
              : (fs::path(dir) / ("data_batch_" + std::to_string(file_idx) + ".bin"))
                    .string();
      std::ofstream out(path, std::ios::binary);
      if (!out) throw DataError("cannot write " + path);
      for (int i = 0; i < chunk; ++i) {
        RngState rng = RngState(seed).derive(
            {tag, static_cast<std::uint64_t>(written + i)});
        const int cls = static_cast<int>(rng.below(cifar::kClasses));
        const double bright = (rng.uniform() - 0.5) * 40.0;
        out.put(static_cast<char>(cls));
        const auto& t = templates[static_cast<std::size_t>(cls)];
        for (int j = 0; j < cifar::kChannels * plane; ++j) {
          double v = t(j) + bright + rng.normal() * 18.0;
          v = std::clamp(v, 0.0, 255.0);
          out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
        }
      }
      written += chunk;
      ++file_idx;
    }
  };
  write_split("train", train_records, 0x7261ULL);
  write_split("test", test_records, 0x7465ULL);
}

}  // namespace crate
