#include "cmtboost/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cmtboost {

double confidence_interval(double error_rate, std::size_t n) {
  if (error_rate < 0.0 || error_rate > 1.0) {
    throw ParameterError("confidence_interval: error rate must be in [0,1]");
  }
  if (n < 1) throw ParameterError("confidence_interval: n must be >= 1");
  return 1.96 * std::sqrt(error_rate * (1.0 - error_rate) / static_cast<double>(n));
}

RocPrCurves roc_pr_curves(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("roc_pr_curves: score/label count mismatch");
  }
  std::size_t pos = 0, neg = 0;
  for (int lab : labels) (lab == 1 ? pos : neg) += 1;
  if (pos == 0 || neg == 0) {
    throw DegeneracyError("roc_pr_curves: both classes must be present");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  RocPrCurves out;
  out.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  out.pr.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});

  std::size_t tp = 0, fp = 0;
  double prev_fpr = 0.0, prev_tpr = 0.0, prev_recall = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    // Consume the whole tie group at this threshold.
    while (i < order.size() && scores[order[i]] == threshold) {
      (labels[order[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    const double recall = tpr;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    out.roc.push_back({threshold, fpr, tpr});
    out.pr.push_back({threshold, recall, precision});
    out.auc_roc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    out.auc_pr += (recall - prev_recall) * precision;
    prev_fpr = fpr;
    prev_tpr = tpr;
    prev_recall = recall;
  }
  return out;
}

EvalReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty() || scores.size() != labels.size()) {
    throw ParameterError("evaluate_scores: nonempty matching scores/labels required");
  }
  EvalReport rep;
  rep.scores = scores;
  rep.labels = labels;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted_malignant = scores[i] >= 0.5;
    if (labels[i] == 1) {
      (predicted_malignant ? rep.counts.tp : rep.counts.fn) += 1;
    } else {
      (predicted_malignant ? rep.counts.fp : rep.counts.tn) += 1;
    }
  }
  const auto& c = rep.counts;
  rep.acc = 100.0 * static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  rep.sen = (c.tp + c.fn) == 0
                ? 0.0
                : 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tp + c.fp == 0) {
    rep.pre = 0.0;
    rep.precision_degenerate = true;
  } else {
    rep.pre = 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  }
  rep.f1 = (rep.pre + rep.sen) == 0.0 ? 0.0 : 2.0 * rep.pre * rep.sen / (rep.pre + rep.sen);
  rep.sen_ci_half_width = confidence_interval(1.0 - rep.sen / 100.0, c.total());

  std::size_t pos = 0;
  for (int lab : labels) pos += (lab == 1);
  if (pos == 0 || pos == labels.size()) {
    rep.curves_degenerate = true;
  } else {
    rep.curves = roc_pr_curves(scores, labels);
  }
  return rep;
}

template <typename T>
EvalReport evaluate(const BoostedHybridModel<T>& model, const std::vector<ImageRecord>& records,
                    std::size_t batch_size, std::vector<std::vector<double>>* features) {
  if (records.empty()) throw ParameterError("evaluate: no records");
  if (batch_size < 1) batch_size = 1;
  const auto& cfg = model.config();
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(records.size());
  if (features) features->clear();

  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, records.size() - start);
    Tensor<T> batch({n, cfg.input_channels, cfg.input_height, cfg.input_width});
    auto& bv = batch.data();
    const std::size_t stride = cfg.input_channels * cfg.input_height * cfg.input_width;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& px = records[start + i].pixels.data();
      if (px.size() != stride) {
        throw DimensionError("evaluate: record " + records[start + i].id +
                             " does not match model input dims");
      }
      for (std::size_t j = 0; j < stride; ++j) bv[i * stride + j] = static_cast<T>(px[j]);
    }
    auto out = model.forward(batch, /*training=*/false, /*seed=*/0);
    const auto& probs = out.probs.data();
    for (std::size_t i = 0; i < n; ++i) {
      scores.push_back(static_cast<double>(probs[i * cfg.classes + 1]));
      labels.push_back(records[start + i].label);
    }
    if (features) {
      const auto& hidden = out.penultimate.data();
      const std::size_t width = out.penultimate.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(width);
        for (std::size_t j = 0; j < width; ++j) {
          row[j] = static_cast<double>(hidden[i * width + j]);
        }
        features->push_back(std::move(row));
      }
    }
  }
  return evaluate_scores(scores, labels);
}

template EvalReport evaluate(const BoostedHybridModel<float>&, const std::vector<ImageRecord>&,
                             std::size_t, std::vector<std::vector<double>>*);
template EvalReport evaluate(const BoostedHybridModel<double>&, const std::vector<ImageRecord>&,
                             std::size_t, std::vector<std::vector<double>>*);

}  // namespace cmtboost
