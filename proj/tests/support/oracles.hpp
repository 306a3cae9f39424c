#pragma once

// Reference implementations written independently of the library, used as
// ground truth by the unit tests and the acceptance runner.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vialguard/geometry.hpp"
#include "vialguard/metrics.hpp"

namespace oracle {

using vialguard::BoundingBox;

// Area of the intersection polygon (Sutherland-Hodgman clip of one
// rectangle against the other) over the area of the union, each area by
// the shoelace formula.
double iou(const BoundingBox& a, const BoundingBox& b);

struct Offsets {
  double cx, cy, w, h;
};

// Center-size SSD encoding written straight from the corner coordinates.
Offsets encode(const BoundingBox& gt, const BoundingBox& anchor, double v_center, double v_size);
BoundingBox decode(const Offsets& t, const BoundingBox& anchor, double v_center, double v_size);

// All (anchor, gt) pairs sorted by overlap[anchor][gt]; pairs are taken while
// both ends are free. Remaining anchors take their best gt when it reaches the
// threshold.
std::vector<int> match(const std::vector<std::vector<double>>& overlap, double threshold);

// Per-class greedy suppression restated as: a candidate survives iff no
// already-kept, higher-ranked box of its class overlaps it at or above the
// threshold. Candidates must have distinct scores.
std::vector<BoundingBox> nms(const std::vector<BoundingBox>& dets, double iou_threshold, double score_threshold,
                             int top_k);

// Sum over true positives of (1 / n_gt) times the best precision reached at
// that rank or any later one.
double average_precision(const std::vector<vialguard::RankedDetection>& ranked, int n_gt);

// Enumerates every one-to-one assignment of detections to same-class gts
// with IoU >= threshold and returns the TP flags of the one whose per-rank
// IoU sequence is lexicographically largest (what score-ordered greedy
// claiming should produce).
std::vector<bool> exhaustive_match(const std::vector<BoundingBox>& dets, const std::vector<BoundingBox>& gts,
                                   double threshold);

// Random valid normalized box with sides in [min_side, max_side].
BoundingBox random_box(std::mt19937_64& rng, double min_side = 0.02, double max_side = 0.6);

// Relative error |a - b| / max(|a| + |b|, floor).
double rel_error(double a, double b, double floor = 1e-8);

}  // namespace oracle
