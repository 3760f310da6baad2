#include "cmtboost/gradcheck.hpp"

#include <cmath>

#include "cmtboost/model.hpp"
#include "cmtboost/ops.hpp"
#include "cmtboost/rng.hpp"

namespace cmtboost {

double gradcheck(const GradcheckFn& f, std::vector<Tensor<double>> inputs,
                 const GradcheckOptions& opts) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  GradientTape<double> tape;
  Tensor<double> loss;
  {
    GradientTape<double>::Scope scope(tape);
    loss = f(inputs);
  }
  if (loss.numel() != 1) throw DimensionError("gradcheck: f must be scalar-valued");
  tape.backward(loss);

  double max_rel = 0.0;
  for (auto& t : inputs) {
    auto& data = t.data();
    const auto& analytic = t.grad();
    const std::size_t n = data.size();
    std::size_t step = 1;
    if (opts.max_elems_per_input > 0 && n > opts.max_elems_per_input) {
      step = (n + opts.max_elems_per_input - 1) / opts.max_elems_per_input;
    }
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = data[i];
      data[i] = orig + opts.h;
      const double fp = f(inputs).item();
      data[i] = orig - opts.h;
      const double fm = f(inputs).item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = opts.negate_analytic ? -analytic[i] : analytic[i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

double gradcheck(const GradcheckFn& f, std::vector<Tensor<double>> inputs, double h) {
  GradcheckOptions opts;
  opts.h = h;
  return gradcheck(f, std::move(inputs), opts);
}

namespace {

using D = double;
using TensorD = Tensor<double>;

TensorD rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uni(rng);
  return TensorD::from_data(std::move(shape), std::move(v));
}

// Values in +-[0.2, 1.0]: keeps relu/max-pool finite differences away from
// kinks and argmax flips.
TensorD rand_tensor_off_kink(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return TensorD::from_data(std::move(shape), std::move(v));
}

// Scalarize through a fixed weighting so every output component contributes.
TensorD weighted_sum(const TensorD& out, std::uint64_t weight_seed) {
  auto rng = make_rng(weight_seed);
  TensorD w = rand_tensor(out.shape(), rng, 0.5, 1.5);
  return sum_all(mul(out, w));
}

struct BatteryBuilder {
  std::vector<GradcheckItem> items;
  std::string fault;

  void check(const std::string& name, double threshold, const GradcheckFn& f,
             std::vector<TensorD> inputs, std::size_t max_elems = 0) {
    GradcheckOptions opts;
    opts.max_elems_per_input = max_elems;
    opts.negate_analytic = (name == fault);
    items.push_back({name, gradcheck(f, std::move(inputs), opts), threshold});
  }
};

}  // namespace

std::vector<GradcheckItem> gradcheck_battery(const std::string& inject_fault) {
  BatteryBuilder b;
  b.fault = inject_fault;
  auto rng = make_rng(0xBA77E21);
  const double kPrim = 1e-6;
  const double kBlock = 1e-4;

  // ---- primitives ----
  b.check("conv2d", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1), 11);
          },
          {rand_tensor({1, 2, 5, 5}, rng), rand_tensor({3, 2, 3, 3}, rng),
           rand_tensor({3}, rng)});
  b.check("depthwise_conv2d", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(depthwise_conv2d(in[0], in[1], 2, 1), 12);
          },
          {rand_tensor({2, 3, 5, 5}, rng), rand_tensor({3, 1, 3, 3}, rng)});
  b.check("pool2d_max", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(pool2d(in[0], PoolMode::kMax, 2, 1), 13);
          },
          {rand_tensor_off_kink({1, 2, 5, 5}, rng)});
  b.check("pool2d_avg", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(pool2d(in[0], PoolMode::kAvg, 3, 2), 14);
          },
          {rand_tensor({1, 2, 5, 5}, rng)});
  b.check("linear", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(linear(in[0], in[1], in[2]), 15);
          },
          {rand_tensor({3, 4}, rng), rand_tensor({4, 5}, rng), rand_tensor({5}, rng)});
  b.check("layer_norm", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-5), 16);
          },
          {rand_tensor({2, 4, 3, 3}, rng), rand_tensor({4}, rng, 0.5, 1.5),
           rand_tensor({4}, rng)});
  b.check("relu", kPrim,
          [](const std::vector<TensorD>& in) { return weighted_sum(relu(in[0]), 17); },
          {rand_tensor_off_kink({3, 7}, rng)});
  b.check("gelu", kPrim,
          [](const std::vector<TensorD>& in) { return weighted_sum(gelu(in[0]), 18); },
          {rand_tensor({3, 7}, rng, -2.0, 2.0)});
  b.check("sigmoid", kPrim,
          [](const std::vector<TensorD>& in) { return weighted_sum(sigmoid(in[0]), 19); },
          {rand_tensor({3, 7}, rng, -3.0, 3.0)});
  b.check("softmax", kPrim,
          [](const std::vector<TensorD>& in) { return weighted_sum(softmax(in[0], 1), 20); },
          {rand_tensor({3, 5}, rng, -2.0, 2.0)});
  b.check("bmm", kPrim,
          [](const std::vector<TensorD>& in) { return weighted_sum(bmm(in[0], in[1]), 21); },
          {rand_tensor({2, 3, 4}, rng), rand_tensor({2, 4, 5}, rng)});
  b.check("transpose_last2", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(transpose_last2(in[0]), 22);
          },
          {rand_tensor({2, 3, 4}, rng)});
  b.check("token_layout", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(tokens_to_nchw(nchw_to_tokens(in[0]), 3, 4), 23);
          },
          {rand_tensor({2, 3, 3, 4}, rng)});
  b.check("slice_concat_last", kPrim,
          [](const std::vector<TensorD>& in) {
            std::vector<TensorD> parts = {slice_last(in[0], 3, 2), slice_last(in[0], 0, 3)};
            return weighted_sum(concat_last(parts), 24);
          },
          {rand_tensor({2, 3, 5}, rng)});
  b.check("concat_channels", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(concat_channels(in[0], in[1]), 25);
          },
          {rand_tensor({2, 2, 3, 3}, rng), rand_tensor({2, 3, 3, 3}, rng)});
  b.check("add_rowmat", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(add_rowmat(in[0], in[1]), 26);
          },
          {rand_tensor({2, 3, 4}, rng), rand_tensor({3, 4}, rng)});
  b.check("gather_bias", kPrim,
          [](const std::vector<TensorD>& in) {
            std::vector<std::size_t> idx = {0, 2, 4, 1, 1, 5, 3, 0};
            return weighted_sum(gather(in[0], idx, {2, 4}), 27);
          },
          {rand_tensor({2, 3}, rng)});
  b.check("broadcast_mul_gate", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(broadcast_mul_gate(in[0], in[1]), 28);
          },
          {rand_tensor({2, 1, 3, 3}, rng), rand_tensor({2, 4, 3, 3}, rng)});
  b.check("global_avg_pool", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(global_avg_pool(in[0]), 29);
          },
          {rand_tensor({2, 3, 4, 4}, rng)});
  b.check("dropout", kPrim,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(dropout(in[0], 0.3, true, 99), 30);
          },
          {rand_tensor({4, 8}, rng)});
  b.check("cross_entropy", kPrim,
          [](const std::vector<TensorD>& in) {
            return cross_entropy(in[0], std::vector<int>{1, 0, 1});
          },
          {rand_tensor({3, 2}, rng, -1.5, 1.5)});
  b.check("elementwise", kPrim,
          [](const std::vector<TensorD>& in) {
            return sum_all(mul(add(in[0], in[1]), scale(in[0], 0.7)));
          },
          {rand_tensor({3, 4}, rng), rand_tensor({3, 4}, rng)});

  // ---- blocks at desk widths ----
  {
    StemBlock<D> stem;
    stem.conv1 = {rand_tensor({4, 1, 3, 3}, rng), rand_tensor({4}, rng, -0.1, 0.1), 2, 1};
    stem.conv2 = {rand_tensor({4, 4, 3, 3}, rng), rand_tensor({4}, rng, -0.1, 0.1), 1, 1};
    stem.conv3 = {rand_tensor({4, 4, 3, 3}, rng), rand_tensor({4}, rng, -0.1, 0.1), 1, 1};
    b.check("stem_block", kBlock,
            [stem](const std::vector<TensorD>& in) {
              StemBlock<D> s = stem;
              s.conv1.w = in[1];
              s.conv2.w = in[2];
              s.conv3.w = in[3];
              return weighted_sum(s.forward(in[0]), 41);
            },
            {rand_tensor({1, 1, 8, 8}, rng), stem.conv1.w, stem.conv2.w, stem.conv3.w});
  }
  b.check("lpu", kBlock,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(lpu_forward(in[0], in[1]), 42);
          },
          {rand_tensor({1, 3, 4, 4}, rng), rand_tensor({3, 1, 3, 3}, rng)});
  b.check("lightweight_attention", kBlock,
          [](const std::vector<TensorD>& in) {
            return weighted_sum(lightweight_attention(in[0], in[1], in[2], in[3]), 43);
          },
          {rand_tensor({5, 4}, rng), rand_tensor({3, 4}, rng), rand_tensor({3, 4}, rng),
           rand_tensor({5, 3}, rng, -0.5, 0.5)});
  {
    const std::size_t d = 4, h = 4, w = 4;
    LmhsaBlock<D> att;
    att.dim = d;
    att.heads = 2;
    att.reduction = 2;
    att.height = h;
    att.width = w;
    att.rheight = LmhsaBlock<D>::reduced_extent(h, 2);
    att.rwidth = LmhsaBlock<D>::reduced_extent(w, 2);
    att.kv_dw = rand_tensor({d, 1, 3, 3}, rng);
    att.wq = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    att.wk = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    att.wv = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    att.wo = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    att.bias_table = rand_tensor({2, 2 * att.rheight - 1, 2 * att.rwidth - 1}, rng, -0.3, 0.3);
    att.bias_index = LmhsaBlock<D>::build_bias_index(h, w, att.rheight, att.rwidth, 2);
    b.check("lmhsa", kBlock,
            [att](const std::vector<TensorD>& in) {
              LmhsaBlock<D> a = att;
              a.kv_dw = in[1];
              a.wq.w = in[2];
              a.wk.w = in[3];
              a.wv.w = in[4];
              a.wo.w = in[5];
              a.bias_table = in[6];
              return weighted_sum(a.forward(in[0]), 44);
            },
            {rand_tensor({1, d, h, w}, rng), att.kv_dw, att.wq.w, att.wk.w, att.wv.w, att.wo.w,
             att.bias_table});
  }
  {
    IrffnBlock<D> ir;
    ir.expand = {rand_tensor({6, 3, 1, 1}, rng), rand_tensor({6}, rng, -0.1, 0.1), 1, 0};
    ir.dw = rand_tensor({6, 1, 3, 3}, rng);
    ir.project = {rand_tensor({3, 6, 1, 1}, rng), rand_tensor({3}, rng, -0.1, 0.1), 1, 0};
    b.check("irffn", kBlock,
            [ir](const std::vector<TensorD>& in) {
              IrffnBlock<D> blk = ir;
              blk.expand.w = in[1];
              blk.dw = in[2];
              blk.project.w = in[3];
              return weighted_sum(blk.forward(in[0]), 45);
            },
            {rand_tensor({1, 3, 4, 4}, rng), ir.expand.w, ir.dw, ir.project.w});
  }
  {
    const std::size_t d = 4;
    CmtBlock<D> blk;
    blk.lpu_dw = rand_tensor({d, 1, 3, 3}, rng);
    blk.norm1 = {rand_tensor({d}, rng, 0.5, 1.5), rand_tensor({d}, rng, -0.2, 0.2)};
    blk.norm2 = {rand_tensor({d}, rng, 0.5, 1.5), rand_tensor({d}, rng, -0.2, 0.2)};
    blk.lmhsa.dim = d;
    blk.lmhsa.heads = 1;
    blk.lmhsa.reduction = 2;
    blk.lmhsa.height = 4;
    blk.lmhsa.width = 4;
    blk.lmhsa.rheight = LmhsaBlock<D>::reduced_extent(4, 2);
    blk.lmhsa.rwidth = LmhsaBlock<D>::reduced_extent(4, 2);
    blk.lmhsa.kv_dw = rand_tensor({d, 1, 3, 3}, rng);
    blk.lmhsa.wq = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    blk.lmhsa.wk = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    blk.lmhsa.wv = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    blk.lmhsa.wo = {rand_tensor({d, d}, rng), rand_tensor({d}, rng, -0.1, 0.1)};
    blk.lmhsa.bias_table =
        rand_tensor({1, 2 * blk.lmhsa.rheight - 1, 2 * blk.lmhsa.rwidth - 1}, rng, -0.3, 0.3);
    blk.lmhsa.bias_index =
        LmhsaBlock<D>::build_bias_index(4, 4, blk.lmhsa.rheight, blk.lmhsa.rwidth, 2);
    blk.irffn.expand = {rand_tensor({8, d, 1, 1}, rng), rand_tensor({8}, rng, -0.1, 0.1), 1, 0};
    blk.irffn.dw = rand_tensor({8, 1, 3, 3}, rng);
    blk.irffn.project = {rand_tensor({d, 8, 1, 1}, rng), rand_tensor({d}, rng, -0.1, 0.1), 1, 0};
    b.check("cmt_block", kBlock,
            [blk](const std::vector<TensorD>& in) {
              CmtBlock<D> c = blk;
              c.lpu_dw = in[1];
              c.lmhsa.wq.w = in[2];
              c.lmhsa.wo.w = in[3];
              c.irffn.expand.w = in[4];
              c.norm1.gamma = in[5];
              return weighted_sum(c.forward(in[0]), 46);
            },
            {rand_tensor({1, d, 4, 4}, rng), blk.lpu_dw, blk.lmhsa.wq.w, blk.lmhsa.wo.w,
             blk.irffn.expand.w, blk.norm1.gamma});
  }
  {
    RbBlock<D> rb;
    rb.conv = {rand_tensor({3, 3, 3, 3}, rng), rand_tensor({3}, rng, -0.1, 0.1), 1, 1};
    b.check("rb_block", kBlock,
            [rb](const std::vector<TensorD>& in) {
              RbBlock<D> blk = rb;
              blk.conv.w = in[1];
              blk.conv.b = in[2];
              return weighted_sum(blk.forward(in[0]), 47);
            },
            {rand_tensor_off_kink({1, 3, 4, 4}, rng), rb.conv.w, rb.conv.b});
  }
  {
    ResidualBlockMN<D> res;
    res.m = {rand_tensor({5, 3, 1, 1}, rng), rand_tensor({5}, rng, -0.1, 0.1), 1, 0};
    res.n = {rand_tensor({5, 5, 3, 3}, rng), rand_tensor({5}, rng, -0.1, 0.1), 2, 1};
    res.shortcut = {rand_tensor({5, 3, 1, 1}, rng), Tensor<D>(), 2, 0};
    b.check("residual_block", kBlock,
            [res](const std::vector<TensorD>& in) {
              ResidualBlockMN<D> blk = res;
              blk.m.w = in[1];
              blk.n.w = in[2];
              blk.shortcut.w = in[3];
              return weighted_sum(blk.forward(in[0]), 48);
            },
            {rand_tensor({1, 3, 4, 4}, rng), res.m.w, res.n.w, res.shortcut.w});
  }
  {
    PixelAttentionBlock<D> pa;
    pa.squeeze = {rand_tensor({3, 6, 1, 1}, rng), rand_tensor({3}, rng, -0.1, 0.1), 1, 0};
    pa.excite = {rand_tensor({1, 3, 1, 1}, rng), rand_tensor({1}, rng, -0.1, 0.1), 1, 0};
    b.check("pixel_attention", kBlock,
            [pa](const std::vector<TensorD>& in) {
              PixelAttentionBlock<D> blk = pa;
              blk.squeeze.w = in[1];
              blk.excite.w = in[2];
              return weighted_sum(blk.forward(in[0]), 49);
            },
            {rand_tensor({1, 6, 3, 3}, rng), pa.squeeze.w, pa.excite.w});
  }
  {
    ClassifierHead<D> head;
    head.fc1 = {rand_tensor({5, 6}, rng), rand_tensor({6}, rng, -0.1, 0.1)};
    head.fc2 = {rand_tensor({6, 2}, rng), rand_tensor({2}, rng, -0.1, 0.1)};
    head.dropout_p = 0.0;
    b.check("classifier_head", kBlock,
            [head](const std::vector<TensorD>& in) {
              ClassifierHead<D> h = head;
              h.fc1.w = in[1];
              h.fc2.w = in[2];
              auto out = h.forward(in[0], false, 0);
              return cross_entropy(out.logits, std::vector<int>{1, 0});
            },
            {rand_tensor({2, 5, 3, 3}, rng), head.fc1.w, head.fc2.w});
  }

  // ---- end-to-end tiny model ----
  // Smallest input the four-stage layout admits is 32x32 (divisible by 2^5).
  {
    ModelConfig cfg;
    cfg.input_channels = 1;
    cfg.input_height = 32;
    cfg.input_width = 32;
    cfg.base_width = 8;
    cfg.head_hidden = 32;
    cfg.residual_channels = {8, 16, 24, 32};
    cfg.seed = 7;
    auto model = std::make_shared<BoostedHybridModel<D>>(cfg);
    std::vector<TensorD> inputs;
    inputs.push_back(rand_tensor({1, 1, 32, 32}, rng, 0.0, 1.0));
    for (auto& p : model->registry().params()) inputs.push_back(p.value);
    b.check("end_to_end_desk_tiny", 1e-3,
            [model](const std::vector<TensorD>& in) {
              auto out = model->forward(in[0], false, 0);
              return cross_entropy(out.logits, std::vector<int>{1});
            },
            std::move(inputs), /*max_elems=*/16);
  }

  return b.items;
}

}  // namespace cmtboost
