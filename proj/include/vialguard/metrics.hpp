#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vialguard/geometry.hpp"

namespace vialguard {

// A detection is a labelled box with a post-softmax score.
using Detection = BoundingBox;

struct RankedDetection {
  double score = 0.0;
  bool is_tp = false;
};

// All-point interpolated AP over a ranking sorted by descending score.
// Precision at each recall level is the maximum precision at any equal or
// higher recall. With n_gt = 0 the result is 1 for an empty ranking and 0
// otherwise. Throws ContractError if the ranking is not sorted.
double average_precision(std::span<const RankedDetection> ranked, int n_gt);

// Greedy score-ordered assignment: each detection claims the unclaimed gt
// of its class with the highest IoU >= threshold. Detections must be sorted
// by descending score (ContractError otherwise).
std::vector<bool> match_detections_to_gt(const std::vector<Detection>& dets,
                                         const std::vector<BoundingBox>& gts, double iou_threshold);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ClassMetrics {
  double ap = 0.0;
  double auc = 0.0;
  std::vector<PrPoint> pr;  // one point per rank
  int tp = 0;
  int fp = 0;
  int fn = 0;
  int n_gt = 0;
};

struct EvalReport {
  std::map<Label, ClassMetrics> per_class;
  double map = 0.0;
  double auc = 0.0;  // mean of per-class PR AUC
  double iou_threshold = 0.5;

  double ap(Label cls) const { return per_class.at(cls).ap; }
};

double mean_average_precision(std::span<const double> class_aps);

// Trapezoidal area under a rank-ordered PR list with (0, p_1) prepended.
double pr_auc(const std::vector<PrPoint>& pr);

// Pools detections over images per foreground class. dets[i] and gts[i]
// belong to image i; both use the same coordinate frame.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<BoundingBox>>& gts,
                               double iou_threshold = 0.5);

std::string to_json(const EvalReport& report);
void write_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace vialguard
