#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "rsaforge/dataset.hpp"
#include "rsaforge/errors.hpp"
#include "rsaforge/image.hpp"
#include "rsaforge/model.hpp"
#include "rsaforge/optim.hpp"
#include "rsaforge/random.hpp"

#include <json.hpp>

namespace rsaforge {

inline constexpr int kDefaultMaxEpochs = 120;

// An epoch produces a checkpoint iff it is the first one or a multiple of 5.
inline bool is_checkpoint_epoch(int epoch) { return epoch == 1 || (epoch >= 5 && epoch % 5 == 0); }

struct TrainConfig {
  int epochs = kDefaultMaxEpochs;
  int max_epochs = kDefaultMaxEpochs;
  int batch_size = 32;
  float learning_rate = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  std::uint64_t seed = 1;
  std::array<float, 3> mean = kDefaultMean;
  std::array<float, 3> std_dev = kDefaultStd;
  std::size_t resize_h = 64;
  std::size_t resize_w = 64;
  std::filesystem::path out_dir = ".";
  bool write_log_file = true;  // JSONL alongside the checkpoints
};

struct EpochLogEntry {
  int epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
  std::optional<std::string> checkpoint_path;
};

struct TrainResult {
  std::vector<EpochLogEntry> log;
  std::vector<std::filesystem::path> checkpoints;
};

inline nlohmann::ordered_json log_entry_json(const EpochLogEntry& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["mean_loss"] = e.mean_loss;
  j["accuracy"] = e.accuracy;
  if (e.checkpoint_path) j["checkpoint_path"] = *e.checkpoint_path;
  return j;
}

namespace detail {

// Resize and normalize the whole dataset once, up front.
inline Tensor preprocess_images(const Tensor& images, const TrainConfig& cfg) {
  const std::size_t m = images.dim(0), h = images.dim(2), w = images.dim(3);
  Tensor out({m, 3, cfg.resize_h, cfg.resize_w});
  const std::size_t in_plane = 3 * h * w;
  const std::size_t out_plane = 3 * cfg.resize_h * cfg.resize_w;
  for (std::size_t i = 0; i < m; ++i) {
    Tensor img = Tensor::from_data(
        {3, h, w}, std::vector<float>(images.data() + i * in_plane,
                                      images.data() + (i + 1) * in_plane));
    img = bilinear_resize(img, cfg.resize_h, cfg.resize_w);
    img = normalize_image(img, cfg.mean, cfg.std_dev);
    std::copy(img.data(), img.data() + out_plane, out.data() + i * out_plane);
  }
  return out;
}

} // namespace detail

// Full training loop: per epoch one seeded shuffle and a complete pass of
// mini-batches through the softmax cross-entropy loss. Deterministic for a
// fixed seed; two runs with the same seed produce byte-identical checkpoints.
inline TrainResult train_model(Model& model, const LabeledDataset& dataset,
                               const TrainConfig& cfg) {
  validate_dataset(dataset);
  if (cfg.epochs < 0) throw ValueError("train: epochs must be >= 0");
  if (cfg.epochs > cfg.max_epochs)
    throw ValueError("train: epochs " + std::to_string(cfg.epochs) + " exceeds max_epochs " +
                     std::to_string(cfg.max_epochs));
  if (cfg.batch_size < 1) throw ValueError("train: batch_size must be >= 1");
  if (dataset.images.dim(0) < static_cast<std::size_t>(cfg.batch_size))
    throw ValueError("train: dataset smaller than one batch");

  TrainResult result;
  if (cfg.epochs == 0) return result;

  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream log_file;
  if (cfg.write_log_file) {
    log_file.open(cfg.out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw Error("cannot open training log in " + cfg.out_dir.string());
  }

  const Tensor images = detail::preprocess_images(dataset.images, cfg);
  const std::size_t m = images.dim(0);
  const std::size_t plane = 3 * cfg.resize_h * cfg.resize_w;

  OptimState opt(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  opt.init(model.params());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(m, cfg.seed + static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t start = 0, batch_idx = 0; start < m;
         start += static_cast<std::size_t>(cfg.batch_size), ++batch_idx) {
      const std::size_t bs = std::min(static_cast<std::size_t>(cfg.batch_size), m - start);
      Tensor batch({bs, 3, cfg.resize_h, cfg.resize_w});
      std::vector<int> labels(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t src = order[start + i];
        std::copy(images.data() + src * plane, images.data() + (src + 1) * plane,
                  batch.data() + i * plane);
        labels[i] = dataset.labels[src];
      }

      ForwardTape tape;
      const double loss = model_forward_train(model, batch, labels, tape);
      if (!std::isfinite(loss))
        throw ValueError("train: non-finite loss at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch_idx));
      loss_sum += loss * static_cast<double>(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const float* row = tape.probs.data() + i * tape.probs.dim(1);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < tape.probs.dim(1); ++j)
          if (row[j] > row[arg]) arg = j;
        if (static_cast<int>(arg) == labels[i]) ++correct;
      }

      const auto grads = model_backward(model, tape, labels);
      sgd_step(model.params(), grads, opt);
    }

    EpochLogEntry entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / static_cast<double>(m);
    entry.accuracy = static_cast<double>(correct) / static_cast<double>(m);
    if (is_checkpoint_epoch(epoch)) {
      const auto path = cfg.out_dir / ("ckpt_epoch_" + std::to_string(epoch) + ".rdma");
      save_checkpoint_file(path, model, epoch);
      entry.checkpoint_path = path.string();
      result.checkpoints.push_back(path);
    }
    if (cfg.write_log_file) log_file << log_entry_json(entry).dump() << '\n';
    result.log.push_back(std::move(entry));
  }
  return result;
}

} // namespace rsaforge
