#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "hce/common.hpp"
#include "hce/rng.hpp"
#include "hce/tensor.hpp"

namespace hce {

struct Batch {
  Tensor inputs;            // N x C x H x W
  std::vector<int> labels;  // length N, each in [0, K)
};

struct Dataset {
  Tensor inputs;  // N x C x H x W
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return inputs.shape.empty() ? 0 : inputs.dim(0); }
  std::array<int, 3> sample_shape() const { return {inputs.dim(1), inputs.dim(2), inputs.dim(3)}; }

  void validate() const {
    if (size() < 1) throw InputError("dataset is empty");
    if (static_cast<int>(labels.size()) != size())
      throw InputError("dataset label count does not match inputs");
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw InputError("dataset label out of range");
  }

  Batch batch(const std::vector<int>& indices) const {
    const auto s = sample_shape();
    const int64_t stride = static_cast<int64_t>(s[0]) * s[1] * s[2];
    Batch b;
    b.inputs = Tensor({static_cast<int>(indices.size()), s[0], s[1], s[2]});
    b.labels.resize(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
      const int idx = indices[i];
      std::copy_n(inputs.ptr() + idx * stride, stride, b.inputs.ptr() + static_cast<int64_t>(i) * stride);
      b.labels[i] = labels[static_cast<size_t>(idx)];
    }
    return b;
  }
};

struct DataBundle {
  Dataset train;
  Dataset test;
};

struct BlobsConfig {
  int num_classes = 10;
  int train_size = 2000;
  int test_size = 1000;
  std::array<int, 3> input_shape = {3, 8, 8};
  double sigma = 1.0;       // within-class noise scale
  double mean_scale = 1.0;  // class-mean amplitude
  uint64_t seed = 1;
};

// Gaussian-mixture classification task: one isotropic blob per class with a
// random mean in input space. Deterministic per config.
inline DataBundle make_blobs(const BlobsConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("blobs: num_classes must be >= 2");
  if (cfg.train_size < cfg.num_classes) throw ConfigError("blobs: train_size too small");
  if (cfg.test_size < 1) throw ConfigError("blobs: test_size must be >= 1");
  const int64_t d =
      static_cast<int64_t>(cfg.input_shape[0]) * cfg.input_shape[1] * cfg.input_shape[2];
  Rng master(cfg.seed);
  Rng mean_rng = master.fork("means");
  std::vector<std::vector<float>> means(static_cast<size_t>(cfg.num_classes));
  for (auto& m : means) {
    m.resize(static_cast<size_t>(d));
    for (auto& v : m) v = static_cast<float>(mean_rng.uniform(-cfg.mean_scale, cfg.mean_scale));
  }

  auto fill = [&](Dataset& ds, int n, Rng rng) {
    ds.inputs = Tensor({n, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]});
    ds.labels.resize(static_cast<size_t>(n));
    ds.num_classes = cfg.num_classes;
    for (int i = 0; i < n; ++i) {
      const int y = i % cfg.num_classes;  // balanced classes
      ds.labels[static_cast<size_t>(i)] = y;
      float* p = ds.inputs.ptr() + static_cast<int64_t>(i) * d;
      const auto& m = means[static_cast<size_t>(y)];
      for (int64_t j = 0; j < d; ++j)
        p[j] = m[static_cast<size_t>(j)] + static_cast<float>(rng.normal(0.0, cfg.sigma));
    }
  };

  DataBundle out;
  fill(out.train, cfg.train_size, master.fork("train"));
  fill(out.test, cfg.test_size, master.fork("test"));
  return out;
}

struct Cifar10Config {
  std::string dir;           // directory holding data_batch_*.bin / test_batch.bin
  int train_size = 5000;     // cap on loaded training images
  int test_size = 1000;
  int num_classes = 10;      // keep only labels < num_classes
  int downscale = 1;         // average-pool factor: 1, 2 or 4
};

namespace detail {

inline void load_cifar_file(const std::string& path, int keep_classes, int cap, int downscale,
                            std::vector<float>& pixels, std::vector<int>& labels) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open CIFAR batch file " + path);
  const int side = 32 / downscale;
  std::vector<unsigned char> rec(3073);
  while (cap < 0 || static_cast<int>(labels.size()) < cap) {
    f.read(reinterpret_cast<char*>(rec.data()), 3073);
    if (f.gcount() == 0) break;
    if (f.gcount() != 3073) throw IoError("truncated CIFAR record in " + path);
    const int y = rec[0];
    if (y >= keep_classes) continue;
    labels.push_back(y);
    for (int c = 0; c < 3; ++c)
      for (int oh = 0; oh < side; ++oh)
        for (int ow = 0; ow < side; ++ow) {
          float acc = 0.0f;
          for (int dh = 0; dh < downscale; ++dh)
            for (int dw = 0; dw < downscale; ++dw)
              acc += rec[1 + (c * 32 + oh * downscale + dh) * 32 + ow * downscale + dw];
          acc /= static_cast<float>(downscale * downscale);
          pixels.push_back(acc / 127.5f - 1.0f);  // map [0,255] to [-1,1]
        }
  }
}

}  // namespace detail

// Reads the CIFAR-10 binary distribution (3073-byte records). A reduced subset
// (class cap, image cap, optional downscale) keeps experiments desk-scale.
inline DataBundle load_cifar10(const Cifar10Config& cfg) {
  if (cfg.downscale != 1 && cfg.downscale != 2 && cfg.downscale != 4)
    throw ConfigError("cifar10: downscale must be 1, 2 or 4");
  if (cfg.num_classes < 2 || cfg.num_classes > 10)
    throw ConfigError("cifar10: num_classes must be in [2,10]");
  const int side = 32 / cfg.downscale;
  DataBundle out;
  {
    std::vector<float> px;
    std::vector<int> ys;
    for (int i = 1; i <= 5 && static_cast<int>(ys.size()) < cfg.train_size; ++i)
      detail::load_cifar_file(cfg.dir + "/data_batch_" + std::to_string(i) + ".bin",
                              cfg.num_classes, cfg.train_size, cfg.downscale, px, ys);
    if (ys.empty()) throw IoError("no CIFAR training records loaded from " + cfg.dir);
    out.train.inputs = Tensor({static_cast<int>(ys.size()), 3, side, side}, std::move(px));
    out.train.labels = std::move(ys);
    out.train.num_classes = cfg.num_classes;
  }
  {
    std::vector<float> px;
    std::vector<int> ys;
    detail::load_cifar_file(cfg.dir + "/test_batch.bin", cfg.num_classes, cfg.test_size,
                            cfg.downscale, px, ys);
    if (ys.empty()) throw IoError("no CIFAR test records loaded from " + cfg.dir);
    out.test.inputs = Tensor({static_cast<int>(ys.size()), 3, side, side}, std::move(px));
    out.test.labels = std::move(ys);
    out.test.num_classes = cfg.num_classes;
  }
  return out;
}

// Deterministic epoch batching: Fisher-Yates shuffle under the given rng,
// then contiguous slices of batch_size (last batch may be short).
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng rng,
                                                   bool shuffle = true) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (shuffle)
    for (int i = n - 1; i > 0; --i) std::swap(idx[static_cast<size_t>(i)],
                                              idx[static_cast<size_t>(rng.uniform_int(0, i))]);
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    out.emplace_back(idx.begin() + start, idx.begin() + end);
  }
  return out;
}

}  // namespace hce
