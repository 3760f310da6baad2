#include "cmtboost/model.hpp"

#include <cmath>

#include "cmtboost/rng.hpp"

namespace cmtboost {

ModelConfig ModelConfig::desk64() { return ModelConfig{}; }

ModelConfig ModelConfig::paper224() {
  ModelConfig cfg;
  cfg.input_channels = 3;
  cfg.input_height = 224;
  cfg.input_width = 224;
  cfg.base_width = 64;
  cfg.residual_channels = {64, 128, 192, 256};
  return cfg;
}

void ModelConfig::validate() const {
  if (input_channels < 1) throw ConfigError("model.input_channels must be >= 1");
  if (base_width < 1) throw ConfigError("model.base_width must be >= 1");
  if (classes < 2) throw ConfigError("model.classes must be >= 2");
  if (head_hidden < 1) throw ConfigError("model.head_hidden must be >= 1");
  if (irffn_ratio < 1) throw ConfigError("model.irffn_ratio must be >= 1");
  if (pa_ratio < 1) throw ConfigError("model.pa_ratio must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0,1)");
  // One stem halving plus one RB halving per stage; odd extents would other-
  // wise reach rb_forward.
  const std::size_t divisor = 1u << 5;
  if (input_height % divisor != 0 || input_width % divisor != 0) {
    throw ConfigError("model.input dims must be divisible by " + std::to_string(divisor) +
                      ", got " + std::to_string(input_height) + "x" + std::to_string(input_width));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (stage_depths[i] < 1) throw ConfigError("model.stage_depths must be >= 1 per stage");
    if (heads[i] < 1) throw ConfigError("model.heads must be >= 1 per stage");
    if (kv_reduction[i] < 1) throw ConfigError("model.kv_reduction must be >= 1 per stage");
    if (stage_width(i) % heads[i] != 0) {
      throw ConfigError("model.heads: stage " + std::to_string(i + 1) + " width " +
                        std::to_string(stage_width(i)) + " not divisible by " +
                        std::to_string(heads[i]) + " heads");
    }
    if (residual_enabled && residual_channels[i] < 1) {
      throw ConfigError("model.residual_channels must be >= 1 per block");
    }
  }
}

namespace {

using InitKind = detail::InitSpec::Kind;

template <typename T>
struct BuildState {
  ParamRegistry<T>* registry;
  std::vector<detail::InitSpec>* specs;

  Tensor<T>& weight(const std::string& name, Shape shape, std::size_t fan_in) {
    specs->push_back({InitKind::kTruncNormal, fan_in});
    return registry->add(name, Tensor<T>(std::move(shape)));
  }
  Tensor<T>& zeros(const std::string& name, Shape shape) {
    specs->push_back({InitKind::kZero, 0});
    return registry->add(name, Tensor<T>(std::move(shape)));
  }
  Tensor<T>& ones(const std::string& name, Shape shape) {
    specs->push_back({InitKind::kOne, 0});
    return registry->add(name, Tensor<T>(std::move(shape)));
  }

  Conv2dLayer<T> conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k,
                      int stride, int pad, bool bias = true) {
    Conv2dLayer<T> layer;
    layer.w = weight(name + ".w", {out, in, k, k}, in * k * k);
    if (bias) layer.b = zeros(name + ".b", {out});
    layer.stride = stride;
    layer.pad = pad;
    return layer;
  }

  Tensor<T> depthwise(const std::string& name, std::size_t channels, std::size_t k) {
    return weight(name, {channels, 1, k, k}, k * k);
  }

  LinearLayer<T> linear_layer(const std::string& name, std::size_t in, std::size_t out) {
    LinearLayer<T> layer;
    layer.w = weight(name + ".w", {in, out}, in);
    layer.b = zeros(name + ".b", {out});
    return layer;
  }

  LayerNormLayer<T> norm(const std::string& name, std::size_t c) {
    LayerNormLayer<T> layer;
    layer.gamma = ones(name + ".gamma", {c});
    layer.beta = zeros(name + ".beta", {c});
    return layer;
  }
};

}  // namespace

template <typename T>
BoostedHybridModel<T>::BoostedHybridModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build();
  init_params(cfg_.seed);
}

template <typename T>
void BoostedHybridModel<T>::build() {
  init_specs_.clear();
  BuildState<T> b{&registry_, &init_specs_};

  const std::size_t base = cfg_.base_width;
  stem_.conv1 = b.conv("stem.conv1", base, cfg_.input_channels, 3, 2, 1);
  stem_.conv2 = b.conv("stem.conv2", base, base, 3, 1, 1);
  stem_.conv3 = b.conv("stem.conv3", base, base, 3, 1, 1);

  stages_.resize(4);
  rbs_.resize(4);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t width = cfg_.stage_width(s);
    const std::size_t h = cfg_.stage_extent(cfg_.input_height, s);
    const std::size_t w = cfg_.stage_extent(cfg_.input_width, s);
    const int r = cfg_.kv_reduction[s];
    for (std::size_t j = 0; j < cfg_.stage_depths[s]; ++j) {
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(j);
      CmtBlock<T> block;
      block.lpu_dw = b.depthwise(p + ".lpu.dw", width, 3);
      block.norm1 = b.norm(p + ".norm1", width);
      block.lmhsa.dim = width;
      block.lmhsa.heads = cfg_.heads[s];
      block.lmhsa.reduction = r;
      block.lmhsa.height = h;
      block.lmhsa.width = w;
      block.lmhsa.rheight = LmhsaBlock<T>::reduced_extent(h, r);
      block.lmhsa.rwidth = LmhsaBlock<T>::reduced_extent(w, r);
      block.lmhsa.kv_dw = b.depthwise(p + ".lmhsa.kv_dw", width, 3);
      block.lmhsa.wq = b.linear_layer(p + ".lmhsa.wq", width, width);
      block.lmhsa.wk = b.linear_layer(p + ".lmhsa.wk", width, width);
      block.lmhsa.wv = b.linear_layer(p + ".lmhsa.wv", width, width);
      block.lmhsa.wo = b.linear_layer(p + ".lmhsa.wo", width, width);
      block.lmhsa.bias_table =
          b.zeros(p + ".lmhsa.bias_table",
                  {cfg_.heads[s], 2 * block.lmhsa.rheight - 1, 2 * block.lmhsa.rwidth - 1});
      block.lmhsa.bias_index = LmhsaBlock<T>::build_bias_index(
          h, w, block.lmhsa.rheight, block.lmhsa.rwidth, r);
      block.norm2 = b.norm(p + ".norm2", width);
      const std::size_t expanded = width * cfg_.irffn_ratio;
      block.irffn.expand = b.conv(p + ".irffn.expand", expanded, width, 1, 1, 0);
      block.irffn.dw = b.depthwise(p + ".irffn.dw", expanded, 3);
      block.irffn.project = b.conv(p + ".irffn.project", width, expanded, 1, 1, 0);
      stages_[s].push_back(std::move(block));
    }
    rbs_[s].conv = b.conv("stage" + std::to_string(s + 1) + ".rb.conv", width, width, 3, 1, 1);
  }

  if (cfg_.residual_enabled) {
    res_stem_ = b.conv("res.stem", cfg_.residual_channels[0], cfg_.input_channels, 3, 2, 1);
    std::size_t in = cfg_.residual_channels[0];
    res_blocks_.clear();
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t out = cfg_.residual_channels[k];
      const std::string p = "res.block" + std::to_string(k + 1);
      ResidualBlockMN<T> block;
      block.m = b.conv(p + ".m", out, in, 1, 1, 0);
      block.n = b.conv(p + ".n", out, out, 3, 2, 1);
      // Stride 2 always changes the spatial extent, so the shortcut is a
      // stride-matched projection (Eq.-18 form) in every branch block.
      block.shortcut = b.conv(p + ".shortcut", out, in, 1, 2, 0, /*bias=*/false);
      res_blocks_.push_back(std::move(block));
      in = out;
    }
  }

  const std::size_t boosted = cfg_.stage_width(3) * 2 +
                              (cfg_.residual_enabled ? cfg_.residual_channels[3] : 0);
  const std::size_t squeezed = std::max<std::size_t>(1, boosted / cfg_.pa_ratio);
  pa_.squeeze = b.conv("pa.squeeze", squeezed, boosted, 1, 1, 0);
  pa_.excite = b.conv("pa.excite", 1, squeezed, 1, 1, 0);
  pa_.residual_add = cfg_.pa_residual_add;

  head_.fc1 = b.linear_layer("head.fc1", boosted, cfg_.head_hidden);
  head_.fc2 = b.linear_layer("head.fc2", cfg_.head_hidden, cfg_.classes);
  head_.dropout_p = cfg_.dropout;
}

template <typename T>
void BoostedHybridModel<T>::init_params(std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto& params = registry_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].value.data();
    const detail::InitSpec& spec = init_specs_[i];
    switch (spec.kind) {
      case InitKind::kZero:
        std::fill(data.begin(), data.end(), T(0));
        break;
      case InitKind::kOne:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case InitKind::kTruncNormal: {
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (auto& v : data) {
          double draw;
          do {
            draw = normal(rng);
          } while (std::abs(draw) > 2.0);
          v = static_cast<T>(draw * std_dev);
        }
        break;
      }
    }
    params[i].value.zero_grad();
  }
}

template <typename T>
typename BoostedHybridModel<T>::ForwardOut BoostedHybridModel<T>::forward(
    const Tensor<T>& batch, bool training, std::uint64_t seed) const {
  if (batch.rank() != 4 || batch.dim(1) != cfg_.input_channels ||
      batch.dim(2) != cfg_.input_height || batch.dim(3) != cfg_.input_width) {
    throw DimensionError("model forward: batch " + shape_str(batch.shape()) +
                         " does not match configured input " +
                         std::to_string(cfg_.input_channels) + "x" +
                         std::to_string(cfg_.input_height) + "x" +
                         std::to_string(cfg_.input_width));
  }
  Tensor<T> c = stem_.forward(batch);
  for (std::size_t s = 0; s < 4; ++s) {
    for (const auto& block : stages_[s]) c = block.forward(c);
    c = rbs_[s].forward(c);
  }
  if (cfg_.residual_enabled) {
    Tensor<T> r = relu(res_stem_.forward(batch));
    for (const auto& block : res_blocks_) r = block.forward(r);
    c = channel_boost(c, r);
  }
  Tensor<T> gated = pa_.forward(c);
  auto head_out = head_.forward(gated, training, seed);
  return {head_out.logits, head_out.probs, head_out.hidden};
}

namespace {

template <typename T>
std::size_t prefix_param_count(const ParamRegistry<T>& reg, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& p : reg.params()) {
    if (p.name.size() > prefix.size() && p.name.compare(0, prefix.size(), prefix) == 0 &&
        p.name[prefix.size()] == '.') {
      n += p.value.numel();
    }
  }
  return n;
}

}  // namespace

template <typename T>
std::vector<TraceRow> BoostedHybridModel<T>::shape_trace() const {
  std::vector<TraceRow> rows;
  const std::size_t h2 = cfg_.input_height / 2, w2 = cfg_.input_width / 2;
  rows.push_back({"input", {cfg_.input_channels, cfg_.input_height, cfg_.input_width}, 0});
  rows.push_back({"stem", {cfg_.base_width, h2, w2}, prefix_param_count(registry_, "stem")});
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t width = cfg_.stage_width(s);
    const std::size_t h = cfg_.stage_extent(cfg_.input_height, s);
    const std::size_t w = cfg_.stage_extent(cfg_.input_width, s);
    for (std::size_t j = 0; j < cfg_.stage_depths[s]; ++j) {
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(j);
      rows.push_back({p, {width, h, w}, prefix_param_count(registry_, p)});
    }
    const std::string rp = "stage" + std::to_string(s + 1) + ".rb";
    rows.push_back({rp, {2 * width, h / 2, w / 2}, prefix_param_count(registry_, rp)});
  }
  const std::size_t fh = cfg_.stage_extent(cfg_.input_height, 4);
  const std::size_t fw = cfg_.stage_extent(cfg_.input_width, 4);
  std::size_t boosted = cfg_.stage_width(3) * 2;
  if (cfg_.residual_enabled) {
    rows.push_back({"res.stem",
                    {cfg_.residual_channels[0], h2, w2},
                    prefix_param_count(registry_, "res.stem")});
    for (std::size_t k = 0; k < 4; ++k) {
      const std::string p = "res.block" + std::to_string(k + 1);
      rows.push_back({p,
                      {cfg_.residual_channels[k], h2 >> (k + 1), w2 >> (k + 1)},
                      prefix_param_count(registry_, p)});
    }
    boosted += cfg_.residual_channels[3];
    rows.push_back({"boost", {boosted, fh, fw}, 0});
  }
  rows.push_back({"pa", {boosted, fh, fw}, prefix_param_count(registry_, "pa")});
  rows.push_back({"head.gap", {boosted}, 0});
  rows.push_back({"head.fc1", {cfg_.head_hidden}, prefix_param_count(registry_, "head.fc1")});
  rows.push_back({"head.fc2", {cfg_.classes}, prefix_param_count(registry_, "head.fc2")});
  return rows;
}

template class BoostedHybridModel<float>;
template class BoostedHybridModel<double>;

}  // namespace cmtboost
