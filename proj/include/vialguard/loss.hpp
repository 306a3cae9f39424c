#pragma once

#include <span>
#include <vector>

#include "vialguard/geometry.hpp"
#include "vialguard/network.hpp"

namespace vialguard {

struct LossBreakdown {
  // Batch mean of per-image (conf + alpha * loc) / N.
  double total = 0.0;
  // Raw sums over the batch (before normalization by N).
  double conf = 0.0;
  double loc = 0.0;
  int n_positive = 0;
  int n_negative_mined = 0;
};

struct LossParams {
  double alpha = 0.5;
  double neg_pos_ratio = 3.0;
  double match_threshold = 0.5;
};

double smooth_l1(double x);
double smooth_l1_grad(double x);

// Per-anchor regression targets; rows of non-positive anchors are zero.
std::vector<OffsetVector> encode_targets(const AnchorSet& anchors, const std::vector<BoundingBox>& gts,
                                         const MatchAssignment& assignment);

// Sum over positive anchors of smooth_l1(pred - target) across the four
// offsets. pred_loc is one image's [anchors, 4] block. If grad is non-empty it
// receives dL/dpred (accumulated).
double localization_loss(std::span<const double> pred_loc, const std::vector<OffsetVector>& targets,
                         const MatchAssignment& assignment, std::span<double> grad = {});

struct ConfidenceTerms {
  double loss = 0.0;
  int n_negative_mined = 0;
  std::vector<int> mined;  // anchor indices of the selected negatives
};

// Softmax cross-entropy over positives (their matched class) plus the
// hardest floor(neg_pos_ratio * N) negatives (background class). Zero when
// N = 0. pred_conf is one image's [anchors, classes] block; labels holds the
// class index per anchor (0 for non-positive anchors).
ConfidenceTerms confidence_loss(std::span<const double> pred_conf, int classes,
                                const std::vector<int>& labels, const MatchAssignment& assignment,
                                double neg_pos_ratio, std::span<double> grad = {});

// Multibox objective over a batch. gts[b] holds normalized boxes of image b.
// If grad is given it is resized to match pred and receives d total / d pred.
LossBreakdown total_loss(const Predictions& pred, const std::vector<std::vector<BoundingBox>>& gts,
                         const AnchorSet& anchors, const LossParams& params = {},
                         Predictions* grad = nullptr);

}  // namespace vialguard
