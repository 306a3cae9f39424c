#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vialguard {

// Class index used by the detector. Background is column 0 of the
// confidence logits; foreground classes follow.
enum class Label : int { background = 0, success = 1, failure = 2 };

inline constexpr int kNumForegroundClasses = 2;

std::string_view to_string(Label label);
Label label_from_string(std::string_view text);

// Axis-aligned box in corner form. Coordinates are normalized to [0,1]
// inside the library; pixel coordinates appear only at file boundaries.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  Label label = Label::background;
  std::optional<double> score;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  // Finite, positive extent, score in [0,1] when present.
  bool is_valid() const;

  BoundingBox to_normalized(double image_width, double image_height) const;
  BoundingBox to_pixels(double image_width, double image_height) const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Center-size box; the representation anchors are stored in.
struct CenterBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  BoundingBox to_corners() const;
  static CenterBox from_corners(const BoundingBox& box);

  friend bool operator==(const CenterBox&, const CenterBox&) = default;
};

struct OffsetVector {
  double t_cx = 0.0;
  double t_cy = 0.0;
  double t_w = 0.0;
  double t_h = 0.0;
};

struct Variances {
  double center = 0.1;
  double size = 0.2;
};

struct AnchorLevel {
  int grid = 1;
  double scale = 0.1;
  // Aspect ratios (width/height) emitted at each location, in order.
  std::vector<double> aspect_ratios{1.0};
  // Adds a square box of side sqrt(scale * next_scale) after ratio 1.
  bool extra_square = false;
  double next_scale = 1.0;

  int boxes_per_location() const {
    return static_cast<int>(aspect_ratios.size()) + (extra_square ? 1 : 0);
  }
};

struct AnchorConfig {
  std::vector<AnchorLevel> levels;
  Variances variances;

  // Linear scale interpolation between s_min and s_max across the given
  // grids. boxes_per_location picks the aspect set: 1 -> {1},
  // 2 -> {1}+extra, 4 -> {1,2,1/2}+extra, 6 -> {1,2,1/2,3,1/3}+extra.
  static AnchorConfig from_grids(const std::vector<int>& grids,
                                 const std::vector<int>& boxes_per_location,
                                 double s_min = 0.1, double s_max = 0.9);

  // Six-level SSD300-style layout: grids {38,19,10,5,3,1}, boxes {4,6,6,6,4,4}.
  static AnchorConfig default_config();
};

// Ordering is level-major, then row-major over the grid, then aspect-minor.
struct AnchorSet {
  std::vector<int> grids;
  std::vector<int> boxes_per_location;
  std::vector<CenterBox> boxes;
  Variances variances;

  std::size_t size() const { return boxes.size(); }
};

AnchorSet generate_default_boxes(const AnchorConfig& cfg);

double iou(const BoundingBox& a, const BoundingBox& b);

OffsetVector encode(const BoundingBox& gt, const CenterBox& anchor, const Variances& variances);
BoundingBox decode(const OffsetVector& off, const CenterBox& anchor, const Variances& variances);

inline constexpr int kNoMatch = -1;

struct MatchAssignment {
  // Ground-truth index per anchor, or kNoMatch.
  std::vector<int> matched_gt;
  int num_positive = 0;

  bool is_positive(std::size_t anchor) const { return matched_gt[anchor] != kNoMatch; }
};

// Greedy bipartite matching (every ground truth claims a distinct best
// anchor), then every remaining anchor whose best IoU reaches `threshold`.
MatchAssignment match(const AnchorSet& anchors, const std::vector<BoundingBox>& gts,
                      double threshold = 0.5);

struct NmsParams {
  double iou_threshold = 0.45;
  double score_threshold = 0.3;
  int top_k = 200;
};

// Class-wise greedy suppression. Input boxes must carry a score; boxes with
// score <= score_threshold are dropped. Output is sorted by descending score.
std::vector<BoundingBox> nms(std::vector<BoundingBox> dets, const NmsParams& params);

BoundingBox flip_horizontal(const BoundingBox& box, double width);

}  // namespace vialguard
