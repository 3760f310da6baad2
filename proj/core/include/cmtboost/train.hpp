#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmtboost/data.hpp"
#include "cmtboost/metrics.hpp"
#include "cmtboost/model.hpp"

namespace cmtboost {

/// Step-decay schedule: base * decay^floor(epoch/period). Evaluated through
/// exact decimal rationals when base and decay have short decimal forms, so
/// the documented values (1e-3, 8.5e-4, 7.225e-4, ...) come out exactly.
struct LrSchedule {
  double base = 1e-3;
  double decay = 0.85;
  std::size_t period = 20;

  double at(std::size_t epoch) const;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  LrSchedule lr;
  double weight_decay = 0.04;
  bool augment = true;
  AugmentationSpec augmentation;
  std::uint64_t seed = 42;
  std::size_t checkpoint_every = 0;  // epochs between snapshots; 0 = best/final only
  std::string checkpoint_dir;       // where cadence snapshots go; empty = none
  std::string init_checkpoint;      // optional pre-trained weights
  std::string init_prefix;          // e.g. "res." to load only that branch
};

/// Bias-corrected Adam with decoupled weight decay (p -= lr*wd*p applied
/// separately from the moment update). beta1=0.9, beta2=0.999, eps=1e-8.
template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update from the accumulated gradients; zeroes them afterwards.
  /// Throws DivergenceError naming the parameter on a non-finite gradient.
  void step(std::vector<Parameter<T>>& params, double lr);

  std::size_t step_count() const { return t_; }

 private:
  double wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochStats {
  std::size_t epoch;
  double train_loss;
  double lr;
  double val_acc, val_f1, val_sen, val_pre;
};

template <typename T>
struct TrainResult {
  std::vector<EpochStats> history;
  bool diverged = false;
  std::string divergence_reason;
  std::size_t best_epoch = 0;
  double best_val_f1 = -1.0;
  std::vector<std::vector<T>> best_params;  // snapshot at the best epoch
};

template <typename T>
std::vector<std::vector<T>> snapshot_params(const BoostedHybridModel<T>& model);
template <typename T>
void restore_params(BoostedHybridModel<T>& model, const std::vector<std::vector<T>>& snapshot);

/// Seeded shuffling per epoch, augmentation on the training split only, best
/// model by validation F1 (ties resolved toward the later epoch).
/// Deterministic end to end for a fixed seed. On divergence the result is
/// marked and the best snapshot so far is retained.
template <typename T>
TrainResult<T> train(BoostedHybridModel<T>& model, const DatasetSplit& split,
                     const TrainConfig& cfg);

extern template class AdamOptimizer<float>;
extern template class AdamOptimizer<double>;

}  // namespace cmtboost
