#include "vialguard/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vialguard/errors.hpp"

namespace vialguard {

std::string_view to_string(Label label) {
  switch (label) {
    case Label::background:
      return "background";
    case Label::success:
      return "success";
    case Label::failure:
      return "failure";
  }
  return "background";
}

Label label_from_string(std::string_view text) {
  if (text == "success") return Label::success;
  if (text == "failure") return Label::failure;
  if (text == "background") return Label::background;
  throw ParseError("unknown class label '" + std::string(text) + "'");
}

bool BoundingBox::is_valid() const {
  if (!std::isfinite(x_min) || !std::isfinite(y_min) || !std::isfinite(x_max) ||
      !std::isfinite(y_max)) {
    return false;
  }
  if (!(x_min < x_max) || !(y_min < y_max)) return false;
  if (score && !(*score >= 0.0 && *score <= 1.0)) return false;
  return true;
}

BoundingBox BoundingBox::to_normalized(double image_width, double image_height) const {
  BoundingBox out = *this;
  out.x_min = x_min / image_width;
  out.x_max = x_max / image_width;
  out.y_min = y_min / image_height;
  out.y_max = y_max / image_height;
  return out;
}

BoundingBox BoundingBox::to_pixels(double image_width, double image_height) const {
  BoundingBox out = *this;
  out.x_min = x_min * image_width;
  out.x_max = x_max * image_width;
  out.y_min = y_min * image_height;
  out.y_max = y_max * image_height;
  return out;
}

BoundingBox CenterBox::to_corners() const {
  BoundingBox b;
  b.x_min = cx - 0.5 * w;
  b.y_min = cy - 0.5 * h;
  b.x_max = cx + 0.5 * w;
  b.y_max = cy + 0.5 * h;
  return b;
}

CenterBox CenterBox::from_corners(const BoundingBox& box) {
  return {box.center_x(), box.center_y(), box.width(), box.height()};
}

namespace {

std::vector<double> aspect_set(int boxes_per_location, bool& extra) {
  switch (boxes_per_location) {
    case 1:
      extra = false;
      return {1.0};
    case 2:
      extra = true;
      return {1.0};
    case 4:
      extra = true;
      return {1.0, 2.0, 0.5};
    case 6:
      extra = true;
      return {1.0, 2.0, 0.5, 3.0, 1.0 / 3.0};
    default:
      throw ConfigError("unsupported boxes-per-location count " +
                        std::to_string(boxes_per_location) + " (expected 1, 2, 4 or 6)");
  }
}

}  // namespace

AnchorConfig AnchorConfig::from_grids(const std::vector<int>& grids,
                                      const std::vector<int>& boxes_per_location, double s_min,
                                      double s_max) {
  if (grids.empty() || grids.size() != boxes_per_location.size()) {
    throw ConfigError("anchor grids and boxes-per-location must be non-empty and equal length");
  }
  if (!(s_min > 0.0) || !(s_max > 0.0)) throw ConfigError("anchor scales must be positive");
  AnchorConfig cfg;
  const auto m = grids.size();
  std::vector<double> scales(m + 1);
  for (std::size_t k = 0; k < m; ++k) {
    scales[k] = m == 1 ? s_min : s_min + (s_max - s_min) * static_cast<double>(k) / (m - 1);
  }
  scales[m] = 1.0;
  for (std::size_t k = 0; k < m; ++k) {
    AnchorLevel level;
    level.grid = grids[k];
    level.scale = scales[k];
    level.next_scale = scales[k + 1];
    level.aspect_ratios = aspect_set(boxes_per_location[k], level.extra_square);
    cfg.levels.push_back(std::move(level));
  }
  return cfg;
}

AnchorConfig AnchorConfig::default_config() {
  return from_grids({38, 19, 10, 5, 3, 1}, {4, 6, 6, 6, 4, 4});
}

AnchorSet generate_default_boxes(const AnchorConfig& cfg) {
  if (cfg.levels.empty()) throw ConfigError("anchor config has no levels");
  if (!(cfg.variances.center > 0.0) || !(cfg.variances.size > 0.0)) {
    throw ConfigError("anchor variances must be positive");
  }
  AnchorSet set;
  set.variances = cfg.variances;
  std::size_t total = 0;
  for (const auto& level : cfg.levels) {
    if (level.grid <= 0) throw ConfigError("anchor grid size must be positive");
    if (!(level.scale > 0.0) || !(level.next_scale > 0.0)) {
      throw ConfigError("anchor scale must be positive");
    }
    if (level.aspect_ratios.empty()) throw ConfigError("anchor aspect ratio list is empty");
    for (double r : level.aspect_ratios) {
      if (!(r > 0.0)) throw ConfigError("anchor aspect ratios must be positive");
    }
    total += static_cast<std::size_t>(level.grid) * level.grid * level.boxes_per_location();
  }
  set.boxes.reserve(total);

  for (const auto& level : cfg.levels) {
    set.grids.push_back(level.grid);
    set.boxes_per_location.push_back(level.boxes_per_location());
    const double g = level.grid;
    for (int row = 0; row < level.grid; ++row) {
      for (int col = 0; col < level.grid; ++col) {
        const double cx = (col + 0.5) / g;
        const double cy = (row + 0.5) / g;
        for (std::size_t a = 0; a < level.aspect_ratios.size(); ++a) {
          const double r = std::sqrt(level.aspect_ratios[a]);
          set.boxes.push_back({cx, cy, level.scale * r, level.scale / r});
          if (a == 0 && level.extra_square) {
            const double s = std::sqrt(level.scale * level.next_scale);
            set.boxes.push_back({cx, cy, s, s});
          }
        }
      }
    }
  }
  return set;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  if (!(a.area() > 0.0) || !(b.area() > 0.0) || !std::isfinite(a.area()) ||
      !std::isfinite(b.area())) {
    throw DomainError("iou: degenerate or non-finite box");
  }
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

OffsetVector encode(const BoundingBox& gt, const CenterBox& anchor, const Variances& v) {
  if (!(anchor.w > 0.0) || !(anchor.h > 0.0)) throw DomainError("encode: anchor has no extent");
  if (!(gt.width() > 0.0) || !(gt.height() > 0.0)) {
    throw DomainError("encode: ground-truth box has non-positive width or height");
  }
  return {(gt.center_x() - anchor.cx) / (anchor.w * v.center),
          (gt.center_y() - anchor.cy) / (anchor.h * v.center),
          std::log(gt.width() / anchor.w) / v.size, std::log(gt.height() / anchor.h) / v.size};
}

BoundingBox decode(const OffsetVector& off, const CenterBox& anchor, const Variances& v) {
  if (!(anchor.w > 0.0) || !(anchor.h > 0.0)) throw DomainError("decode: anchor has no extent");
  if (!std::isfinite(off.t_cx) || !std::isfinite(off.t_cy) || !std::isfinite(off.t_w) ||
      !std::isfinite(off.t_h)) {
    throw DomainError("decode: non-finite offsets");
  }
  CenterBox c{anchor.cx + off.t_cx * v.center * anchor.w,
              anchor.cy + off.t_cy * v.center * anchor.h, anchor.w * std::exp(off.t_w * v.size),
              anchor.h * std::exp(off.t_h * v.size)};
  return c.to_corners();
}

MatchAssignment match(const AnchorSet& anchors, const std::vector<BoundingBox>& gts,
                      double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ContractError("match: threshold must lie in (0,1]");
  }
  const std::size_t n_anchor = anchors.size();
  const std::size_t n_gt = gts.size();
  MatchAssignment out;
  out.matched_gt.assign(n_anchor, kNoMatch);
  if (n_gt == 0) return out;

  std::vector<BoundingBox> corners(n_anchor);
  for (std::size_t i = 0; i < n_anchor; ++i) corners[i] = anchors.boxes[i].to_corners();

  // overlaps[i * n_gt + j]
  std::vector<double> overlaps(n_anchor * n_gt);
  for (std::size_t i = 0; i < n_anchor; ++i) {
    for (std::size_t j = 0; j < n_gt; ++j) overlaps[i * n_gt + j] = iou(corners[i], gts[j]);
  }

  std::vector<bool> anchor_taken(n_anchor, false);
  std::vector<bool> gt_done(n_gt, false);
  for (std::size_t round = 0; round < n_gt; ++round) {
    double best = 0.0;
    std::size_t best_i = n_anchor, best_j = n_gt;
    for (std::size_t i = 0; i < n_anchor; ++i) {
      if (anchor_taken[i]) continue;
      for (std::size_t j = 0; j < n_gt; ++j) {
        if (gt_done[j]) continue;
        if (overlaps[i * n_gt + j] > best) {
          best = overlaps[i * n_gt + j];
          best_i = i;
          best_j = j;
        }
      }
    }
    if (best_i == n_anchor) break;
    anchor_taken[best_i] = true;
    gt_done[best_j] = true;
    out.matched_gt[best_i] = static_cast<int>(best_j);
  }

  for (std::size_t i = 0; i < n_anchor; ++i) {
    if (anchor_taken[i]) continue;
    double best = -1.0;
    int best_j = kNoMatch;
    for (std::size_t j = 0; j < n_gt; ++j) {
      if (overlaps[i * n_gt + j] > best) {
        best = overlaps[i * n_gt + j];
        best_j = static_cast<int>(j);
      }
    }
    if (best >= threshold) out.matched_gt[i] = best_j;
  }
  out.num_positive = static_cast<int>(
      std::count_if(out.matched_gt.begin(), out.matched_gt.end(), [](int m) { return m != kNoMatch; }));
  return out;
}

std::vector<BoundingBox> nms(std::vector<BoundingBox> dets, const NmsParams& params) {
  std::erase_if(dets, [&](const BoundingBox& d) {
    return !d.score || *d.score <= params.score_threshold || !(d.area() > 0.0);
  });
  std::stable_sort(dets.begin(), dets.end(),
                   [](const BoundingBox& a, const BoundingBox& b) { return *a.score > *b.score; });
  std::vector<BoundingBox> kept;
  for (const auto& d : dets) {
    if (static_cast<int>(kept.size()) >= params.top_k) break;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const BoundingBox& k) {
      return k.label == d.label && iou(k, d) >= params.iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

BoundingBox flip_horizontal(const BoundingBox& box, double width) {
  BoundingBox out = box;
  out.x_min = width - box.x_max;
  out.x_max = width - box.x_min;
  return out;
}

}  // namespace vialguard
