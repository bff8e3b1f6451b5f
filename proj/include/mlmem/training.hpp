#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mlmem/corpus.hpp"
#include "mlmem/evaluation.hpp"
#include "mlmem/model.hpp"

namespace mlmem {

struct TrainConfig {
  double learning_rate = 2.5e-4;
  std::size_t batch_size = 8;
  std::size_t hidden_size = 64;
  std::size_t embedding_size = 32;
  std::size_t attention_size = 0;  // 0: same as hidden_size
  std::size_t max_epochs = 30;
  std::size_t max_steps = 0;  // 0: no limit besides max_epochs
  std::uint64_t seed = 1;
  double gradient_clip_norm = 5.0;
  /// Validation every this many optimizer steps; 0 evaluates once per epoch.
  std::size_t eval_every = 0;
  std::string selection_metric = "entity_f1";
  ScorerKind scorer = ScorerKind::Nested;
  MemoryKind memory = MemoryKind::MultiLevel;
  BagMode bag = BagMode::Sum;
  bool context_includes_api_calls = true;
  std::size_t min_freq = 1;
  std::size_t max_decode_len = 40;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Grid search axes; an empty axis keeps the scalar value above.
  std::vector<std::size_t> grid_hidden_sizes;
  std::vector<std::size_t> grid_batch_sizes;

  bool operator==(const TrainConfig&) const = default;
};

/// Reads the JSON config file format: an object whose keys mirror the
/// fields above (unknown keys are rejected).
TrainConfig parse_train_config(const std::string& json_text);
std::string train_config_to_json(const TrainConfig& config);
void validate(const TrainConfig& config);

ModelConfig model_config_for(const TrainConfig& config, const Vocabulary& vocab);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Optimizer

template <typename Real>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<Real>> m, v;
};

struct AdamConfig {
  double learning_rate = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update of every listed tensor from its grad buffer.
/// Throws TrainingError naming the parameter on a non-finite gradient.
template <typename Real>
void adam_step(const std::vector<std::pair<std::string, Tensor<Real>*>>& params, AdamState<Real>& state,
               const AdamConfig& config);

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename Real>
double clip_gradients(const std::vector<std::pair<std::string, Tensor<Real>*>>& params, double max_norm);

// ---------------------------------------------------------------------------
// Training loop

struct EvalLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;  // mean per token since the previous log entry
  double valid_bleu = 0.0;
  double valid_f1 = 0.0;
  bool selected = false;
};

struct TrainResult {
  Model best;
  std::vector<EvalLog> log;
  std::size_t steps = 0;
  std::size_t floor_events = 0;
  bool diverged = false;
  std::string message;
};

/// Called after each validation; returning true stops training early.
using EvalCallback = std::function<bool(const EvalLog&, Model& current)>;

/// Builds the vocabulary from `train_set`, initializes from the seed and runs
/// teacher-forced Adam over shuffled batches. Keeps the parameters with the
/// best validation entity F1 (earliest wins ties).
TrainResult train(const std::vector<Dialog>& train_set, const std::vector<Dialog>& valid_set,
                  const std::string& domain, const TrainConfig& config, const EvalCallback& on_eval = {});

/// Every combination of the grid axes, hidden size varying slowest.
std::vector<TrainConfig> expand_grid(const TrainConfig& config);

struct GridResult {
  std::vector<TrainConfig> configs;
  std::vector<double> best_f1;
  std::size_t best = 0;
  TrainResult result;
};

GridResult train_grid(const std::vector<Dialog>& train_set, const std::vector<Dialog>& valid_set,
                      const std::string& domain, const TrainConfig& config, const EvalCallback& on_eval = {});

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

/// 8-byte little-endian header length, JSON header (format version, model
/// config, vocabulary, tensor directory) and a little-endian float32 payload.
std::string checkpoint_bytes(const Model& model, const TrainConfig* train_config = nullptr);
Model parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path, const TrainConfig* train_config = nullptr);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace mlmem
