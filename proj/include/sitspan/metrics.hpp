#pragma once

#include <filesystem>

#include "sitspan/core.hpp"
#include "sitspan/panmerge.hpp"

namespace sitspan::metrics {

struct ConfusionMatrix {
  Tensor<int64_t> counts;  // [K_eval,K_eval], rows = truth, cols = prediction
  std::vector<std::string> names;
};

struct SemanticReport {
  double oa = 0;
  double miou = 0;
  std::vector<double> iou;     // per class, meaningful where present[k]
  std::vector<bool> present;   // class has nonzero union in truth or prediction
  ConfusionMatrix confusion;
};

// OA / per-class IoU / mIoU with void-truth pixels excluded everywhere and
// the void class never averaged. Throws EmptyEvaluation on all-void input.
SemanticReport semantic_metrics(const Tensor<int32_t>& pred,
                                const Tensor<int32_t>& truth,
                                const core::LabelSpec& labels);
SemanticReport semantic_metrics_from_confusion(const Tensor<int64_t>& counts,
                                               const core::LabelSpec& labels);

// Additive per-class match counts (things classes 1..K).
struct PanopticStats {
  std::vector<int64_t> tp, fp, fn;
  std::vector<double> iou_sum;

  PanopticStats() = default;
  explicit PanopticStats(int k)
      : tp(size_t(k), 0), fp(size_t(k), 0), fn(size_t(k), 0), iou_sum(size_t(k), 0) {}
  int n_classes() const { return int(tp.size()); }
  void merge(const PanopticStats& o);
};

// Segment matching at IoU > 0.5 with the void correction: prediction pixels
// lying on void parcels are removed from every IoU denominator, and a
// prediction whose IoU with a void parcel exceeds 0.5 leaves the evaluation
// entirely. Setting void_ignore=false reproduces the historical bug where
// such predictions count as false positives.
PanopticStats panoptic_match(const panmerge::PanopticMap& pred,
                             const core::SITSSample& truth,
                             const core::LabelSpec& labels,
                             bool void_ignore = true);

struct PanopticQuality {
  std::vector<double> sq, rq, pq;  // per class
  std::vector<bool> has_sq, has_rq;
  double mean_sq = 0, mean_rq = 0, mean_pq = 0;
  std::vector<std::string> warnings;
};

// SQ = sum IoU / TP (classes with TP = 0 are excluded from the SQ mean, with
// a warning); RQ = TP / (TP + FP/2 + FN/2); PQ = SQ * RQ. Class means run
// over classes that appear at all.
PanopticQuality panoptic_quality(const PanopticStats& stats);

void write_semantic_report(const std::filesystem::path& dir,
                           const SemanticReport& report);
void write_panoptic_report(const std::filesystem::path& dir,
                           const PanopticQuality& pq,
                           const std::vector<std::string>& class_names);

}  // namespace sitspan::metrics
