#ifndef CONVREC_TRAINING_HPP_
#define CONVREC_TRAINING_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "convrec/dataset.hpp"
#include "convrec/model.hpp"
#include "convrec/numerics.hpp"

namespace convrec {

enum class StopMetric { validation_loss, rmse, recall50 };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;  // users per optimizer step
  int epoch_block = 10;
  int max_blocks = 4;
  StopMetric stop_metric = StopMetric::validation_loss;
  std::uint64_t seed = 0;
  int depth = 3;                // decoder layers L
  int bottleneck = 32;          // r
  int conv_width = 12;          // K
  int encoder_conv_width = 6;   // channels of the encoder conv layer
  double weight_decay = 0.0;
  bool with_bias = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_metric = 0.0;
};

struct TrainState {
  ModelParams params;
  std::vector<ModelParams> checkpoints;  // one per completed epoch block
  std::vector<EpochRecord> history;
  std::vector<double> block_metrics;
  bool stopped_early = false;
  TrainConfig config;
};

// Per-cell soft targets for training on weighted observations. A row holds
// k+1 weights summing to 1; items without a row fall back to the one-hot
// target taken from the input slice.
struct SoftTargets {
  int channels = 0;
  std::vector<std::unordered_map<std::int32_t, std::vector<double>>> rows;  // per user

  const std::vector<double>* find(std::int32_t user, std::int32_t item) const {
    if (rows.empty()) return nullptr;
    const auto& map = rows[static_cast<std::size_t>(user - 1)];
    auto it = map.find(item);
    return it == map.end() ? nullptr : &it->second;
  }
};

struct Gradients {
  std::vector<Matrix> enc_w;
  std::vector<Matrix> dec_w;
  std::vector<std::vector<double>> enc_b;
  std::vector<std::vector<double>> dec_b;

  static Gradients like(const ModelParams& p);
  void zero();
};

// Mean cross-entropy over all cells of the listed users: each observed cell
// charges -log G at its rating channel, each unobserved cell -log G at
// channel 0. The log argument is clamped at 1e-30.
double reconstruction_loss(const ModelParams& params, const std::vector<std::int32_t>& users,
                           const ObservedDataset& train, const SoftTargets* targets = nullptr);

// Exact analytic gradient of reconstruction_loss for the same user list,
// accumulated into `grads` (callers zero the buffers).
void backward(const ModelParams& params, const std::vector<std::int32_t>& users,
              const ObservedDataset& train, Gradients& grads,
              const SoftTargets* targets = nullptr);

// Epoch-block training with seeded user shuffling, one checkpoint per block
// and block-level early stopping on the validation metric. An empty
// validation set disables early stopping (all max_blocks run).
TrainState train(const TrainConfig& config, const ObservedDataset& train,
                 const ObservedDataset& validation, const SoftTargets* targets = nullptr);

// Averages the probability tensors of all checkpoints, then recomputes the
// conditional distribution, predicted rating and interaction probability.
ForwardOutput averaged_predict(const std::vector<ModelParams>& checkpoints,
                               const UserSlice& slice);
ForwardOutput averaged_predict(const TrainState& state, const UserSlice& slice);

// History file: one line per epoch, tab-separated, replayable byte-for-byte.
void write_history(const std::string& path, const TrainState& state);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
};

// Central finite differences against the analytic gradient over every
// parameter of a randomly initialized model on a random dataset.
GradCheckResult gradient_check(const ModelParams& params, const ObservedDataset& data,
                               const std::vector<std::int32_t>& users, double step = 1e-5);

ObservedDataset make_random_dataset(std::int64_t m, std::int64_t n, int k, double density,
                                    std::uint64_t seed);

GradCheckResult gradcheck_random_model(std::int64_t m, std::int64_t n, int k, int r, int depth,
                                       int conv_width, std::uint64_t seed, bool with_bias = false,
                                       double step = 1e-5);

}  // namespace convrec

#endif  // CONVREC_TRAINING_HPP_
