#include "cmtboost/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "cmtboost/checkpoint.hpp"
#include "cmtboost/ops.hpp"
#include "cmtboost/rng.hpp"

namespace cmtboost {

namespace {

// Shortest decimal rational p / 10^m reproducing the double exactly, if one
// exists with m <= 9 digits.
bool decimal_rational(double value, long long* num, long long* den) {
  long long d = 1;
  for (int m = 0; m <= 9; ++m) {
    const double scaled = value * static_cast<double>(d);
    const double rounded = std::nearbyint(scaled);
    if (std::abs(rounded) < 9.1e15 &&
        rounded / static_cast<double>(d) == value) {
      *num = static_cast<long long>(rounded);
      *den = d;
      return true;
    }
    d *= 10;
  }
  return false;
}

}  // namespace

double LrSchedule::at(std::size_t epoch) const {
  const std::size_t k = period == 0 ? 0 : epoch / period;
  long long bn, bd, dn, dd;
  if (decimal_rational(base, &bn, &bd) && decimal_rational(decay, &dn, &dd)) {
    // lr = (bn * dn^k) / (bd * dd^k): when both sides stay exactly
    // representable, the single division is correctly rounded, giving the
    // decimal value of the schedule.
    __int128 num = bn, den = bd;
    bool exact = true;
    for (std::size_t i = 0; i < k && exact; ++i) {
      num *= dn;
      den *= dd;
      if (num > (static_cast<__int128>(1) << 53) || den > (static_cast<__int128>(1) << 53)) {
        exact = false;
      }
    }
    if (exact) {
      return static_cast<double>(static_cast<long long>(num)) /
             static_cast<double>(static_cast<long long>(den));
    }
  }
  return static_cast<double>(static_cast<long double>(base) *
                             powl(static_cast<long double>(decay), static_cast<long double>(k)));
}

template <typename T>
void AdamOptimizer<T>::step(std::vector<Parameter<T>>& params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value.numel(), 0.0);
      v_[i].assign(params[i].value.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ParameterError("adam: parameter set changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].value.data();
    auto& grad = params[i].value.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      if (!std::isfinite(g)) {
        throw DivergenceError("adam: non-finite gradient in parameter " + params[i].name);
      }
      if (wd_ != 0.0) {
        // Decoupled decay, separate from the moment update.
        value[j] -= static_cast<T>(lr * wd_ * static_cast<double>(value[j]));
      }
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
    params[i].value.zero_grad();
  }
}

template <typename T>
std::vector<std::vector<T>> snapshot_params(const BoostedHybridModel<T>& model) {
  std::vector<std::vector<T>> snap;
  snap.reserve(model.registry().params().size());
  for (const auto& p : model.registry().params()) snap.push_back(p.value.data());
  return snap;
}

template <typename T>
void restore_params(BoostedHybridModel<T>& model, const std::vector<std::vector<T>>& snapshot) {
  auto& params = model.registry().params();
  if (snapshot.size() != params.size()) {
    throw ParameterError("restore_params: snapshot does not match model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value.data() = snapshot[i];
}

namespace {

template <typename T>
Tensor<T> make_batch(const std::vector<const ImageRecord*>& records, const ModelConfig& cfg) {
  const std::size_t stride = cfg.input_channels * cfg.input_height * cfg.input_width;
  Tensor<T> batch({records.size(), cfg.input_channels, cfg.input_height, cfg.input_width});
  auto& bv = batch.data();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& px = records[i]->pixels.data();
    if (px.size() != stride) {
      throw DimensionError("train: record " + records[i]->id +
                           " does not match model input dims");
    }
    for (std::size_t j = 0; j < stride; ++j) bv[i * stride + j] = static_cast<T>(px[j]);
  }
  return batch;
}

}  // namespace

template <typename T>
TrainResult<T> train(BoostedHybridModel<T>& model, const DatasetSplit& split,
                     const TrainConfig& cfg) {
  if (split.train.empty()) throw DataError("train: empty training split");
  if (split.validation.empty()) throw DataError("train: empty validation split");
  if (cfg.batch_size < 1) throw ParameterError("train.batch_size must be >= 1");
  if (cfg.epochs < 1) throw ParameterError("train.epochs must be >= 1");

  TrainResult<T> result;
  AdamOptimizer<T> opt(cfg.weight_decay);
  auto& params = model.registry().params();
  model.registry().zero_grad();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch);
    std::vector<std::size_t> order(split.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto shuffle_rng = make_rng(mix_seed(cfg.seed, 0x54FF1Eu, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    bool diverged = false;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<ImageRecord> augmented;
      std::vector<const ImageRecord*> batch_records(n);
      std::vector<int> labels(n);
      augmented.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const ImageRecord& rec = split.train[order[start + i]];
        labels[i] = rec.label;
        if (cfg.augment) {
          const std::uint64_t draw =
              mix_seed(mix_seed(cfg.seed, 0xA06u, epoch), hash_string(rec.id));
          augmented.push_back(augment(rec, cfg.augmentation, draw));
          batch_records[i] = &augmented.back();
        } else {
          batch_records[i] = &rec;
        }
      }
      Tensor<T> batch = make_batch<T>(batch_records, model.config());

      GradientTape<T> tape;
      Tensor<T> loss;
      {
        typename GradientTape<T>::Scope scope(tape);
        auto out = model.forward(batch, /*training=*/true,
                                 mix_seed(cfg.seed, 0xD0u, epoch * 100003 + start));
        loss = cross_entropy(out.logits, labels);
      }
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        diverged = true;
        result.divergence_reason = "non-finite loss at epoch " + std::to_string(epoch);
        break;
      }
      tape.backward(loss);
      try {
        opt.step(params, lr);
      } catch (const DivergenceError& e) {
        diverged = true;
        result.divergence_reason = e.what();
        break;
      }
      loss_sum += loss_value * static_cast<double>(n);
      seen += n;
    }

    if (diverged) {
      result.diverged = true;
      break;
    }

    EvalReport val = evaluate(model, split.validation, cfg.batch_size);
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    stats.lr = lr;
    stats.val_acc = val.acc;
    stats.val_f1 = val.f1;
    stats.val_sen = val.sen;
    stats.val_pre = val.pre;
    result.history.push_back(stats);

    if (val.f1 >= result.best_val_f1) {
      result.best_val_f1 = val.f1;
      result.best_epoch = epoch;
      result.best_params = snapshot_params(model);
    }

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04zu.ckpt", epoch);
      save_checkpoint(model, cfg.checkpoint_dir + "/" + name);
    }
  }

  if (result.best_params.empty()) result.best_params = snapshot_params(model);
  return result;
}

template class AdamOptimizer<float>;
template class AdamOptimizer<double>;
template std::vector<std::vector<float>> snapshot_params(const BoostedHybridModel<float>&);
template std::vector<std::vector<double>> snapshot_params(const BoostedHybridModel<double>&);
template void restore_params(BoostedHybridModel<float>&, const std::vector<std::vector<float>>&);
template void restore_params(BoostedHybridModel<double>&,
                             const std::vector<std::vector<double>>&);
template TrainResult<float> train(BoostedHybridModel<float>&, const DatasetSplit&,
                                  const TrainConfig&);
template TrainResult<double> train(BoostedHybridModel<double>&, const DatasetSplit&,
                                   const TrainConfig&);

}  // namespace cmtboost
