#include "vialguard/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vialguard/errors.hpp"

namespace vialguard {

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

std::vector<OffsetVector> encode_targets(const AnchorSet& anchors, const std::vector<BoundingBox>& gts,
                                         const MatchAssignment& assignment) {
  std::vector<OffsetVector> targets(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const int j = assignment.matched_gt[i];
    if (j != kNoMatch) targets[i] = encode(gts[j], anchors.boxes[i], anchors.variances);
  }
  return targets;
}

double localization_loss(std::span<const double> pred_loc, const std::vector<OffsetVector>& targets,
                         const MatchAssignment& assignment, std::span<double> grad) {
  const std::size_t n = assignment.matched_gt.size();
  if (pred_loc.size() != n * 4 || targets.size() != n || (!grad.empty() && grad.size() != n * 4)) {
    throw ContractError("localization_loss: prediction, target and assignment sizes disagree");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!assignment.is_positive(i)) continue;
    const OffsetVector& t = targets[i];
    const double diff[4] = {pred_loc[i * 4] - t.t_cx, pred_loc[i * 4 + 1] - t.t_cy,
                            pred_loc[i * 4 + 2] - t.t_w, pred_loc[i * 4 + 3] - t.t_h};
    for (int m = 0; m < 4; ++m) {
      loss += smooth_l1(diff[m]);
      if (!grad.empty()) grad[i * 4 + m] += smooth_l1_grad(diff[m]);
    }
  }
  return loss;
}

namespace {

// log-softmax of one row, stabilized by the row max.
void log_softmax(const double* logits, int classes, double* out) {
  const double mx = *std::max_element(logits, logits + classes);
  double s = 0.0;
  for (int c = 0; c < classes; ++c) s += std::exp(logits[c] - mx);
  const double lse = mx + std::log(s);
  for (int c = 0; c < classes; ++c) out[c] = logits[c] - lse;
}

}  // namespace

ConfidenceTerms confidence_loss(std::span<const double> pred_conf, int classes,
                                const std::vector<int>& labels, const MatchAssignment& assignment,
                                double neg_pos_ratio, std::span<double> grad) {
  const std::size_t n = assignment.matched_gt.size();
  if (classes < 2 || pred_conf.size() != n * classes || labels.size() != n ||
      (!grad.empty() && grad.size() != pred_conf.size())) {
    throw ContractError("confidence_loss: logits, labels and assignment sizes disagree");
  }
  ConfidenceTerms out;
  const int n_pos = assignment.num_positive;
  if (n_pos == 0) return out;

  std::vector<double> logp(static_cast<std::size_t>(n) * classes);
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax(pred_conf.data() + i * classes, classes, logp.data() + i * classes);
  }

  auto add_term = [&](std::size_t i, int cls) {
    out.loss -= logp[i * classes + cls];
    if (grad.empty()) return;
    for (int c = 0; c < classes; ++c) {
      grad[i * classes + c] += std::exp(logp[i * classes + c]) - (c == cls ? 1.0 : 0.0);
    }
  };

  std::vector<int> negatives;
  negatives.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (assignment.is_positive(i)) {
      add_term(i, labels[i]);
    } else {
      negatives.push_back(static_cast<int>(i));
    }
  }
  const auto budget = static_cast<std::size_t>(std::floor(neg_pos_ratio * n_pos));
  const std::size_t k = std::min(budget, negatives.size());
  // Hardest negatives: largest background loss -log p0; ties keep index order.
  std::stable_sort(negatives.begin(), negatives.end(), [&](int a, int b) {
    return logp[static_cast<std::size_t>(a) * classes] < logp[static_cast<std::size_t>(b) * classes];
  });
  negatives.resize(k);
  for (int i : negatives) add_term(static_cast<std::size_t>(i), 0);
  out.n_negative_mined = static_cast<int>(k);
  out.mined = std::move(negatives);
  return out;
}

LossBreakdown total_loss(const Predictions& pred, const std::vector<std::vector<BoundingBox>>& gts,
                         const AnchorSet& anchors, const LossParams& params, Predictions* grad) {
  if (pred.anchors != static_cast<int>(anchors.size())) {
    throw ContractError("total_loss: predictions cover " + std::to_string(pred.anchors) +
                        " anchors, anchor set has " + std::to_string(anchors.size()));
  }
  if (gts.size() != static_cast<std::size_t>(pred.batch)) {
    throw ContractError("total_loss: one ground-truth list per image required");
  }
  if (!(params.alpha >= 0.0)) throw ContractError("total_loss: alpha must be non-negative");
  for (int b = 0; b < pred.batch; ++b) {
    const std::size_t a4 = static_cast<std::size_t>(pred.anchors) * 4;
    const std::size_t ac = static_cast<std::size_t>(pred.anchors) * pred.classes;
    auto finite = [](double v) { return std::isfinite(v); };
    if (!std::all_of(pred.loc.begin() + b * a4, pred.loc.begin() + (b + 1) * a4, finite) ||
        !std::all_of(pred.conf.begin() + b * ac, pred.conf.begin() + (b + 1) * ac, finite)) {
      throw TrainingFault("total_loss: non-finite predictions in batch element " + std::to_string(b), b);
    }
  }
  if (grad) *grad = Predictions(pred.batch, pred.anchors, pred.classes);

  LossBreakdown out;
  const std::size_t na = anchors.size();
  const double inv_batch = 1.0 / static_cast<double>(pred.batch);
  for (int b = 0; b < pred.batch; ++b) {
    const MatchAssignment assignment = match(anchors, gts[b], params.match_threshold);
    if (assignment.num_positive == 0) continue;
    const auto targets = encode_targets(anchors, gts[b], assignment);
    std::vector<int> labels(na, 0);
    for (std::size_t i = 0; i < na; ++i) {
      const int j = assignment.matched_gt[i];
      if (j != kNoMatch) labels[i] = static_cast<int>(gts[b][j].label);
    }
    std::span<const double> loc(pred.loc.data() + b * na * 4, na * 4);
    std::span<const double> conf(pred.conf.data() + b * na * pred.classes, na * pred.classes);
    std::vector<double> dloc, dconf;
    if (grad) {
      dloc.assign(na * 4, 0.0);
      dconf.assign(na * pred.classes, 0.0);
    }
    const double l = localization_loss(loc, targets, assignment, dloc);
    const ConfidenceTerms c =
        confidence_loss(conf, pred.classes, labels, assignment, params.neg_pos_ratio, dconf);
    const double n = assignment.num_positive;
    out.loc += l;
    out.conf += c.loss;
    out.n_positive += assignment.num_positive;
    out.n_negative_mined += c.n_negative_mined;
    out.total += (c.loss + params.alpha * l) / n * inv_batch;
    if (grad) {
      const double s = inv_batch / n;
      for (std::size_t i = 0; i < dloc.size(); ++i) grad->loc[b * na * 4 + i] = params.alpha * s * dloc[i];
      for (std::size_t i = 0; i < dconf.size(); ++i) grad->conf[b * na * pred.classes + i] = s * dconf[i];
    }
  }
  return out;
}

}  // namespace vialguard
