#pragma once

#include <cstddef>
#include <vector>

#include "cmtboost/data.hpp"
#include "cmtboost/model.hpp"

namespace cmtboost {

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
};

struct CurvePoint {
  double threshold;
  double x;  // ROC: FPR, PR: recall
  double y;  // ROC: TPR, PR: precision
};

struct RocPrCurves {
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;
  double auc_roc = 0.0;
  double auc_pr = 0.0;
};

/// Confusion counts at threshold 0.5 on the malignant score, the percent
/// metrics, the Eq.-style sensitivity CI half-width, and the ROC/PR curves.
struct EvalReport {
  ConfusionCounts counts;
  double acc = 0.0, sen = 0.0, pre = 0.0, f1 = 0.0;  // percent
  bool precision_degenerate = false;                 // TP+FP == 0
  double sen_ci_half_width = 0.0;                    // z=1.96, n = record count
  RocPrCurves curves;
  bool curves_degenerate = false;  // single-class input: curves omitted
  std::vector<double> scores;      // malignant probability per record
  std::vector<int> labels;
};

/// 1.96 * sqrt(error * (1 - error) / n).
double confidence_interval(double error_rate, std::size_t n);

/// Thresholds at distinct scores descending, ties grouped. Trapezoidal AUC
/// for ROC (equals the Mann-Whitney statistic with ties counted 1/2);
/// step-interpolated AUC for PR. Throws DegeneracyError on single-class
/// input.
RocPrCurves roc_pr_curves(const std::vector<double>& scores, const std::vector<int>& labels);

/// Report from raw malignant scores and labels; prediction = score >= 0.5.
EvalReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels);

/// Runs the model over the records in order (eval mode) and reports. Also
/// returns penultimate features when `features` is non-null (one row per
/// record, for PCA export).
template <typename T>
EvalReport evaluate(const BoostedHybridModel<T>& model, const std::vector<ImageRecord>& records,
                    std::size_t batch_size = 16,
                    std::vector<std::vector<double>>* features = nullptr);

}  // namespace cmtboost
