#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmtboost/blocks.hpp"
#include "cmtboost/tensor.hpp"

namespace cmtboost {

/// Complete architectural hyperparameter record. Stage i runs CMT blocks at
/// width base_width * 2^i, then a regional-boundary downsampler doubles the
/// channels and halves the spatial dims.
struct ModelConfig {
  std::size_t input_channels = 1;
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t base_width = 16;
  std::array<std::size_t, 4> stage_depths{1, 1, 2, 1};
  std::array<std::size_t, 4> heads{1, 2, 4, 8};
  std::array<int, 4> kv_reduction{8, 4, 2, 1};
  std::size_t irffn_ratio = 4;
  double dropout = 0.3;
  bool residual_enabled = true;
  std::array<std::size_t, 4> residual_channels{16, 32, 48, 64};
  std::size_t pa_ratio = 8;
  bool pa_residual_add = false;
  std::size_t head_hidden = 256;
  std::size_t classes = 2;
  std::uint64_t seed = 42;

  static ModelConfig desk64();
  static ModelConfig paper224();

  std::size_t stage_width(std::size_t stage) const { return base_width << stage; }
  /// CMT grid extent at stage i for an input extent (stem plus i RB halvings).
  std::size_t stage_extent(std::size_t input, std::size_t stage) const {
    return input >> (stage + 1);
  }

  /// Throws ConfigError naming the violated rule.
  void validate() const;
};

template <typename T>
class ParamRegistry {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
    return params_.back().value;
  }

  Tensor<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].value;
  }
  const Tensor<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].value;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  std::size_t tensor_count() const { return params_.size(); }
  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TraceRow {
  std::string name;
  std::vector<std::size_t> out_shape;  // per-sample (no batch dim)
  std::size_t param_count;
};

namespace detail {
struct InitSpec {
  enum class Kind { kTruncNormal, kZero, kOne };
  Kind kind;
  std::size_t fan_in;
};
}  // namespace detail

/// Two-stream classifier: stem + four stages of (CMT blocks, RB downsampler),
/// a parallel residual CNN branch, channel boosting, pixel attention, and the
/// classifier head. Parameters are initialized deterministically from
/// cfg.seed at construction.
template <typename T>
class BoostedHybridModel {
 public:
  explicit BoostedHybridModel(const ModelConfig& cfg);

  struct ForwardOut {
    Tensor<T> logits;       // pre-softmax [N, classes]
    Tensor<T> probs;        // softmax rows, sum to 1
    Tensor<T> penultimate;  // hidden FC activations [N, head_hidden]
  };

  /// Eval mode (training=false) is deterministic; training mode draws the
  /// dropout mask from the given seed.
  ForwardOut forward(const Tensor<T>& batch, bool training, std::uint64_t seed) const;

  /// Re-draws every parameter from the given seed (truncated normal with
  /// fan-in scaling for weights; zeros for biases and bias tables; gamma=1,
  /// beta=0 for norms).
  void init_params(std::uint64_t seed);

  std::vector<TraceRow> shape_trace() const;

  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  void build();

  ModelConfig cfg_;
  std::vector<detail::InitSpec> init_specs_;  // aligned with registry order
  StemBlock<T> stem_;
  std::vector<std::vector<CmtBlock<T>>> stages_;
  std::vector<RbBlock<T>> rbs_;
  Conv2dLayer<T> res_stem_;
  std::vector<ResidualBlockMN<T>> res_blocks_;
  PixelAttentionBlock<T> pa_;
  ClassifierHead<T> head_;
  ParamRegistry<T> registry_;
};

extern template class BoostedHybridModel<float>;
extern template class BoostedHybridModel<double>;

}  // namespace cmtboost
