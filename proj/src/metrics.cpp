#include "vialguard/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "vialguard/errors.hpp"

namespace vialguard {

double average_precision(std::span<const RankedDetection> ranked, int n_gt) {
  if (n_gt < 0) throw ContractError("average_precision: n_gt must be non-negative");
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    if (ranked[i].score > ranked[i - 1].score) {
      throw ContractError("average_precision: ranking not sorted by descending score at rank " +
                          std::to_string(i));
    }
  }
  if (n_gt == 0) return ranked.empty() ? 1.0 : 0.0;

  const std::size_t n = ranked.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked[i].is_tp) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / n_gt;
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

std::vector<bool> match_detections_to_gt(const std::vector<Detection>& dets,
                                         const std::vector<BoundingBox>& gts, double iou_threshold) {
  for (std::size_t i = 1; i < dets.size(); ++i) {
    if (dets[i].score.value_or(0.0) > dets[i - 1].score.value_or(0.0)) {
      throw ContractError("match_detections_to_gt: detections not sorted by descending score");
    }
  }
  std::vector<bool> claimed(gts.size(), false), tp(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    double best = -1.0;
    int best_j = -1;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (claimed[j] || gts[j].label != dets[i].label) continue;
      const double v = iou(dets[i], gts[j]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      claimed[best_j] = true;
      tp[i] = true;
    }
  }
  return tp;
}

double mean_average_precision(std::span<const double> class_aps) {
  if (class_aps.empty()) return 0.0;
  return std::accumulate(class_aps.begin(), class_aps.end(), 0.0) / static_cast<double>(class_aps.size());
}

double pr_auc(const std::vector<PrPoint>& pr) {
  if (pr.empty()) return 0.0;
  double area = 0.0;
  PrPoint prev{0.0, pr.front().precision};
  for (const auto& p : pr) {
    area += (p.recall - prev.recall) * 0.5 * (p.precision + prev.precision);
    prev = p;
  }
  return area;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<BoundingBox>>& gts, double iou_threshold) {
  if (dets.size() != gts.size()) {
    throw ContractError("evaluate_detections: one detection list per ground-truth list required");
  }
  EvalReport report;
  report.iou_threshold = iou_threshold;

  struct Scored {
    double score;
    bool tp;
  };
  std::map<Label, std::vector<Scored>> pooled;
  std::map<Label, int> n_gt;
  for (Label cls : {Label::success, Label::failure}) {
    pooled[cls];
    n_gt[cls] = 0;
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const auto& g : gts[i]) ++n_gt[g.label];
    std::vector<Detection> sorted = dets[i];
    std::stable_sort(sorted.begin(), sorted.end(), [](const Detection& a, const Detection& b) {
      return a.score.value_or(0.0) > b.score.value_or(0.0);
    });
    const auto flags = match_detections_to_gt(sorted, gts[i], iou_threshold);
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      if (sorted[k].label == Label::background) continue;
      pooled[sorted[k].label].push_back({sorted[k].score.value_or(0.0), flags[k]});
    }
  }

  std::vector<double> aps, aucs;
  for (auto& [cls, list] : pooled) {
    // Equal scores rank false positives first so the result does not
    // depend on image order.
    std::sort(list.begin(), list.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score > b.score;
      return !a.tp && b.tp;
    });
    std::vector<RankedDetection> ranked;
    ranked.reserve(list.size());
    for (const auto& s : list) ranked.push_back({s.score, s.tp});

    ClassMetrics m;
    m.n_gt = n_gt[cls];
    m.ap = average_precision(ranked, m.n_gt);
    for (const auto& r : ranked) {
      r.is_tp ? ++m.tp : ++m.fp;
      const double recall = m.n_gt > 0 ? static_cast<double>(m.tp) / m.n_gt : 0.0;
      m.pr.push_back({recall, static_cast<double>(m.tp) / (m.tp + m.fp)});
    }
    m.fn = m.n_gt - m.tp;
    m.auc = m.n_gt == 0 && ranked.empty() ? 1.0 : pr_auc(m.pr);
    aps.push_back(m.ap);
    aucs.push_back(m.auc);
    report.per_class[cls] = std::move(m);
  }
  report.map = mean_average_precision(aps);
  report.auc = mean_average_precision(aucs);
  return report;
}

std::string to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["iou_threshold"] = report.iou_threshold;
  j["mAP"] = report.map;
  j["AUC"] = report.auc;
  for (const auto& [cls, m] : report.per_class) {
    nlohmann::ordered_json c;
    c["AP"] = m.ap;
    c["AUC"] = m.auc;
    c["n_gt"] = m.n_gt;
    c["TP"] = m.tp;
    c["FP"] = m.fp;
    c["FN"] = m.fn;
    auto pr = nlohmann::ordered_json::array();
    for (const auto& p : m.pr) pr.push_back({p.recall, p.precision});
    c["pr_points"] = std::move(pr);
    j["classes"][std::string(to_string(cls))] = std::move(c);
  }
  return j.dump(2) + "\n";
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report to " + path.string());
  out << to_json(report);
}

}  // namespace vialguard
