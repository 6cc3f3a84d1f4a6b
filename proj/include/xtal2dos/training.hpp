// SPDX-License-Identifier: Apache-2.0
//
// Training configuration, Adam, the epoch loop, evaluation, prediction export
// and checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xtal2dos/graph_data.hpp"
#include "xtal2dos/losses_metrics.hpp"
#include "xtal2dos/model.hpp"

namespace xtal2dos {

/// Flat, JSON-serializable training configuration. Keys in JSON match the
/// member names.
struct TrainConfig {
  // encoder
  std::string encoder = "unimp";
  std::size_t d_atom = 92;
  std::size_t d_edge = 41;
  std::size_t d_hid = 128;
  std::size_t encoder_layers = 3;
  std::size_t encoder_heads = 4;
  std::size_t n_max_nbr = 12;
  double r_cut = 8.0;
  // decoder
  std::string decoder = "transformer";
  std::size_t l_y = 51;
  std::size_t chunk = 0;
  std::size_t decoder_layers = 6;
  std::size_t decoder_heads = 4;
  std::size_t ff = 0;
  std::string activation = "leaky_relu";
  double leaky_slope = 0.01;
  std::string head = "softmax";
  // optimization
  std::string loss = "kl";
  std::size_t batch_size = 32;
  std::size_t epochs = 200;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  // data
  std::string train_data;
  std::string val_data;
  std::string grid = "synthetic";
  double bin_width = 1.0;
  double split_train = 0.8;
  double split_val = 0.1;
  double split_test = 0.1;

  std::string to_json(int indent = 2) const;
  /// Unknown keys and wrong types are ConfigErrors; missing keys keep the
  /// values already in `base`.
  static TrainConfig from_json(const std::string& text, const TrainConfig& base);
  static TrainConfig from_json(const std::string& text);

  /// Every cross-field problem, empty when the config is usable.
  std::vector<std::string> problems() const;
  /// Throws one ConfigError listing all problems.
  void validate() const;

  ModelConfig model_config() const;
  GraphLimits limits() const { return {d_atom, n_max_nbr}; }
  GaussianBasis basis() const;
  SplitRatios split_ratios() const { return {split_train, split_val, split_test}; }
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  void reset(std::span<Parameter* const> params);
};

/// One bias-corrected Adam update from each parameter's grad. Throws
/// NumericError naming the first parameter with a non-finite gradient, before
/// touching any state.
void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamOptions& options);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns
/// the norm before scaling.
double clip_gradient_norm(std::span<Parameter* const> params, double max_norm);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over batches
  double seconds = 0.0;
};

/// Batches of dataset indices; a trailing single-sample batch is folded into
/// the previous one (train-mode batch norm needs two samples).
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);

  /// Shuffles `indices` with the trainer's stream and runs one Adam step per batch.
  EpochStats train_epoch(const Dataset& data, std::span<const std::size_t> indices);
  /// Eval-mode predictions (after the output head), one row per index.
  std::vector<std::vector<double>> predict(const Dataset& data, std::span<const std::size_t> indices);
  MetricReport evaluate(const Dataset& data, std::span<const std::size_t> indices);
  /// CSV lines "id,position,prediction,target" with a header row.
  std::string predict_csv(const Dataset& data, std::span<const std::size_t> indices);

  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Trainer> load(const std::filesystem::path& path);
  /// Checkpoint bytes as written by save().
  std::string serialize() const;
  static std::unique_ptr<Trainer> deserialize(const std::string& bytes);

  const TrainConfig& config() const { return config_; }
  /// Evaluation-only setting; ConfigError unless positive and finite.
  void set_bin_width(double bin_width);
  /// Epoch target recorded in later checkpoints (resuming with a new total).
  void set_epochs(std::size_t epochs);
  Model& model() { return *model_; }
  const AdamState& adam() const { return adam_; }
  std::size_t epoch() const { return epoch_; }
  const Rng& rng() const { return rng_; }

 private:
  GraphBatch batch_of(const Dataset& data, std::span<const std::size_t> indices) const;

  TrainConfig config_;
  std::unique_ptr<Model> model_;
  AdamState adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
};

/// Header of the per-epoch CSV log.
inline constexpr const char* kTrainLogHeader = "epoch,train_loss,val_r2,val_wd,seconds";
/// One log row; doubles use shortest round-trip formatting, flagged metrics are empty.
std::string train_log_row(const EpochStats& stats, const MetricReport* val);

}  // namespace xtal2dos
