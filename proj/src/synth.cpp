// Synthetic vial scenes: a 2-D stand-in for photographs of a stirrer plate
// with vials in holders, viewed from one of four camera elevations.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include <opencv2/imgproc.hpp>

#include "vialguard/data.hpp"
#include "vialguard/errors.hpp"

namespace vialguard {

namespace {

constexpr int kShift = 4;  // fixed-point bits for polygon rasterization
constexpr double kFixed = 1 << kShift;

struct Dimensions {
  double unit;        // pixels per reference pixel of a 150x150 canvas
  double foreshorten; // vertical compression of the plate plane
  double vial_w;
  double vial_len;
  double ring_w;
  double ring_h;
};

Dimensions dimensions(const GeneratorConfig& cfg) {
  Dimensions d{};
  const double theta = cfg.camera_angle_deg * std::numbers::pi / 180.0;
  d.unit = std::min(cfg.width, cfg.height) / 150.0;
  d.foreshorten = std::sin(theta);
  d.vial_w = 10.0 * d.unit;
  d.vial_len = 26.0 * d.unit;
  d.ring_w = 18.0 * d.unit;
  d.ring_h = std::max(4.0 * d.unit, d.ring_w * d.foreshorten);
  return d;
}

using Polygon = std::vector<cv::Point2d>;

Polygon ellipse_polygon(cv::Point2d c, double ax, double ay, double angle_rad, int n = 40) {
  Polygon p;
  p.reserve(n);
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  for (int i = 0; i < n; ++i) {
    const double t = 2.0 * std::numbers::pi * i / n;
    const double x = ax * std::cos(t), y = ay * std::sin(t);
    p.emplace_back(c.x + x * ca - y * sa, c.y + x * sa + y * ca);
  }
  return p;
}

// A vial of length `length` and diameter `width` standing at `base`, tipped
// by `tilt` radians in the plane facing the camera and seen from elevation
// `elevation`. Vertical extents shrink by cos(elevation); the cap disc shows
// its face in proportion to how squarely it points at the camera.
struct VialGlyph {
  cv::Point2d base;
  double tilt = 0.0;
  double elevation = 0.0;
  double width = 0.0;
  double length = 0.0;
  double min_cap = 0.0;

  cv::Point2d axis() const {
    return {length * std::sin(tilt), -length * std::cos(tilt) * std::cos(elevation)};
  }
  double axis_angle() const {
    const cv::Point2d a = axis();
    return std::hypot(a.x, a.y) < 1e-9 ? 0.0 : std::atan2(a.x, -a.y);
  }
  cv::Point2d to_image(double lx, double frac) const {
    const cv::Point2d a = axis();
    const double ang = axis_angle();
    return {base.x + frac * a.x + lx * std::cos(ang), base.y + frac * a.y + lx * std::sin(ang)};
  }

  Polygon body_polygon(double from = 0.0, double to = 1.0) const {
    const double hw = 0.5 * width;
    return {to_image(-hw, from), to_image(hw, from), to_image(hw, to), to_image(-hw, to)};
  }

  Polygon cap_polygon() const {
    const double face = std::abs(std::cos(tilt)) * std::sin(elevation);
    const double thick = std::max(min_cap, width * face);
    return ellipse_polygon(to_image(0.0, 1.0), 0.5 * width, 0.5 * thick, axis_angle());
  }
};

std::vector<cv::Point> to_fixed(const Polygon& poly) {
  std::vector<cv::Point> out;
  out.reserve(poly.size());
  for (const auto& p : poly) {
    out.emplace_back(static_cast<int>(std::lround(p.x * kFixed)), static_cast<int>(std::lround(p.y * kFixed)));
  }
  return out;
}

void fill(cv::Mat& img, const Polygon& poly, const cv::Scalar& color) {
  const auto pts = to_fixed(poly);
  cv::fillConvexPoly(img, pts.data(), static_cast<int>(pts.size()), color, cv::LINE_8, kShift);
}

cv::Scalar rgb(const cv::Vec3b& v) { return {double(v[0]), double(v[1]), double(v[2])}; }

cv::Vec3b hsv_to_rgb(double h, double s, double v) {
  cv::Mat hsv(1, 1, CV_32FC3, cv::Scalar(h, s, v)), out;
  cv::cvtColor(hsv, out, cv::COLOR_HSV2RGB);
  const auto px = out.at<cv::Vec3f>(0, 0);
  return {cv::saturate_cast<uchar>(px[0] * 255.0), cv::saturate_cast<uchar>(px[1] * 255.0),
          cv::saturate_cast<uchar>(px[2] * 255.0)};
}

BoundingBox glyph_box(const VialGlyph& g, cv::Size size) {
  cv::Mat mask = cv::Mat::zeros(size, CV_8UC1);
  fill(mask, g.body_polygon(), cv::Scalar(255));
  fill(mask, g.cap_polygon(), cv::Scalar(255));
  const cv::Rect r = cv::boundingRect(mask);
  BoundingBox b;
  b.x_min = r.x;
  b.y_min = r.y;
  b.x_max = r.x + r.width;
  b.y_max = r.y + r.height;
  return b;
}

bool overlaps(const BoundingBox& a, const BoundingBox& b, double gap) {
  return a.x_min < b.x_max + gap && b.x_min < a.x_max + gap && a.y_min < b.y_max + gap &&
         b.y_min < a.y_max + gap;
}

bool inside(const BoundingBox& b, cv::Size size) {
  return b.x_min >= 0 && b.y_min >= 0 && b.x_max <= size.width && b.y_max <= size.height &&
         b.x_min < b.x_max && b.y_min < b.y_max;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (width < 32 || height < 32) throw ConfigError("generator canvas must be at least 32x32");
  if (holder_rows <= 0 || holder_cols <= 0) throw ConfigError("holder grid must be non-empty");
  const std::array<double, 5> p{p_success, p_fall_out, p_lie_down, p_lean_in, p_stand_on};
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError("status probabilities must be non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("status probabilities must sum to 1 (got " + std::to_string(sum) + ")");
  }
  if (std::find(std::begin(kCameraAngles), std::end(kCameraAngles), camera_angle_deg) ==
      std::end(kCameraAngles)) {
    throw ConfigError("camera angle must be one of 30, 45, 60, 90 degrees");
  }
  if (pixel_noise_sigma < 0.0 || clutter_count < 0 || background_jitter < 0) {
    throw ConfigError("noise, clutter and jitter must be non-negative");
  }
}

HolderLayout holder_layout(const GeneratorConfig& cfg) {
  const Dimensions d = dimensions(cfg);
  HolderLayout out;
  const double row_step = 0.36 * cfg.height * d.foreshorten;
  const double y_mid = 0.56 * cfg.height;
  for (int r = 0; r < cfg.holder_rows; ++r) {
    const double y = y_mid + (r - 0.5 * (cfg.holder_rows - 1)) * row_step;
    for (int c = 0; c < cfg.holder_cols; ++c) {
      const double x =
          cfg.holder_cols == 1 ? 0.5 * cfg.width : cfg.width * (0.2 + 0.6 * c / (cfg.holder_cols - 1));
      out.centers.emplace_back(x, y);
      BoundingBox fp;
      fp.x_min = x - 0.5 * d.ring_w;
      fp.x_max = x + 0.5 * d.ring_w;
      fp.y_min = y - 0.5 * d.ring_h;
      fp.y_max = y + 0.5 * d.ring_h;
      out.footprints.push_back(fp);
    }
  }
  return out;
}

Scene synthesize_scene(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const Dimensions d = dimensions(cfg);
  const cv::Size size(cfg.width, cfg.height);
  const HolderLayout layout = holder_layout(cfg);
  const VialPalette palette;

  Scene scene;
  scene.id = "scene_" + std::to_string(seed);
  scene.metadata = {cfg.camera_angle_deg, cfg.vial_fill, SceneSource::synthetic};

  // Background and plate.
  const int jitter = cfg.background_jitter > 0
                         ? static_cast<int>(std::floor(uniform(-cfg.background_jitter, cfg.background_jitter + 1)))
                         : 0;
  const int bg = std::clamp(205 + jitter, 0, 255);
  cv::Mat img(size, CV_8UC3, cv::Scalar(bg, bg, bg - 4));
  double px0 = cfg.width, px1 = 0, py0 = cfg.height, py1 = 0;
  for (const auto& fp : layout.footprints) {
    px0 = std::min(px0, fp.x_min);
    px1 = std::max(px1, fp.x_max);
    py0 = std::min(py0, fp.y_min);
    py1 = std::max(py1, fp.y_max);
  }
  const double margin = 8.0 * d.unit;
  fill(img,
       {{px0 - margin, py0 - margin}, {px1 + margin, py0 - margin}, {px1 + margin, py1 + margin},
        {px0 - margin, py1 + margin}},
       cv::Scalar(bg - 35, bg - 33, bg - 30));

  // Low-saturation clutter; drawn first so vials overwrite it.
  for (int i = 0; i < cfg.clutter_count; ++i) {
    const double x = uniform(0, cfg.width), y = uniform(0, cfg.height);
    const double r = uniform(1.5, 4.5) * d.unit;
    const int shade = static_cast<int>(uniform(90, 160));
    const cv::Scalar color(shade + 20, shade + 10, shade);
    if (unit(rng) < 0.5) {
      fill(img, ellipse_polygon({x, y}, r, r * uniform(0.5, 1.0), uniform(0, std::numbers::pi), 16), color);
    } else {
      const double a = uniform(0, std::numbers::pi), len = uniform(6, 16) * d.unit;
      const cv::Point2d dir(std::cos(a) * 0.5 * len, std::sin(a) * 0.5 * len);
      const cv::Point2d nrm(-std::sin(a) * 0.6 * d.unit, std::cos(a) * 0.6 * d.unit);
      fill(img, {{x - dir.x - nrm.x, y - dir.y - nrm.y}, {x + dir.x - nrm.x, y + dir.y - nrm.y},
                 {x + dir.x + nrm.x, y + dir.y + nrm.y}, {x - dir.x + nrm.x, y - dir.y + nrm.y}},
           color);
    }
  }

  // Holders.
  for (const auto& c : layout.centers) {
    fill(img, ellipse_polygon(c, 0.5 * d.ring_w, 0.5 * d.ring_h, 0.0), cv::Scalar(70, 70, 76));
    fill(img, ellipse_polygon(c, 0.32 * d.ring_w, 0.32 * d.ring_h, 0.0), cv::Scalar(112, 112, 120));
  }

  // Statuses and glyph placement.
  struct Placed {
    VialGlyph glyph;
    BoundingBox box;
    Label cls;
    std::optional<FailureMode> mode;
  };
  std::vector<Placed> placed;
  const std::array<double, 5> probs{cfg.p_success, cfg.p_fall_out, cfg.p_lie_down, cfg.p_lean_in,
                                    cfg.p_stand_on};
  auto draw_status = [&]() {
    const double u = unit(rng);
    double acc = 0.0;
    for (int k = 0; k < 5; ++k) {
      acc += probs[k];
      if (u < acc && probs[k] > 0.0) return k;
    }
    for (int k = 4; k >= 0; --k)
      if (probs[k] > 0.0) return k;
    return 0;
  };
  auto upright = [&](cv::Point2d base) {
    VialGlyph g;
    g.base = base;
    g.elevation = cfg.camera_angle_deg * std::numbers::pi / 180.0;
    g.width = d.vial_w;
    g.length = d.vial_len;
    g.min_cap = 2.0 * d.unit;
    return g;
  };
  const double gap = 4.0;
  auto clear_of_vials = [&](const BoundingBox& b) {
    return std::none_of(placed.begin(), placed.end(), [&](const Placed& p) { return overlaps(p.box, b, gap); });
  };
  auto clear_of_holders = [&](const BoundingBox& b) {
    return std::none_of(layout.footprints.begin(), layout.footprints.end(),
                        [&](const BoundingBox& fp) { return overlaps(fp, b, 1.0); });
  };

  // Holder-bound glyphs first, then fallen vials placed around them.
  const std::size_t n_holders = layout.centers.size();
  std::vector<int> statuses(n_holders);
  std::vector<double> sides(n_holders);
  for (std::size_t h = 0; h < n_holders; ++h) {
    statuses[h] = draw_status();
    sides[h] = unit(rng) < 0.5 ? -1.0 : 1.0;
  }
  std::vector<Placed> slots(n_holders);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t h = 0; h < n_holders; ++h) {
      const int status = statuses[h];
      if ((status == 1) != (pass == 1)) continue;
      const cv::Point2d c = layout.centers[h];
      const double side = sides[h];
      Placed p;
      p.cls = status == 0 ? Label::success : Label::failure;
      switch (status) {
        case 0:  // seated in the holder
          p.glyph = upright({c.x, c.y + 0.25 * d.ring_h});
          break;
        case 1: {  // fell out: anywhere off the holders
          p.mode = FailureMode::fall_out;
          const bool lying = unit(rng) < 0.5;
          bool ok = false;
          for (int attempt = 0; attempt < 400 && !ok; ++attempt) {
            VialGlyph g = upright({uniform(0, cfg.width), uniform(0, cfg.height)});
            if (lying) g.tilt = side * uniform(75, 105) * std::numbers::pi / 180.0;
            const BoundingBox b = glyph_box(g, size);
            const bool room = attempt < 300 ? clear_of_vials(b) : true;
            if (inside(b, size) && clear_of_holders(b) && room && b.x_min >= 1 && b.y_min >= 1 &&
                b.x_max <= cfg.width - 1 && b.y_max <= cfg.height - 1) {
              p.glyph = g;
              ok = true;
            }
          }
          if (!ok) {
            throw ConfigError("generator canvas has no room for a fallen vial outside the holders");
          }
          break;
        }
        case 2: {  // lying on the plate in front of its holder
          p.mode = FailureMode::lie_down;
          VialGlyph g = upright({0, 0});
          g.tilt = side * uniform(80, 100) * std::numbers::pi / 180.0;
          const double reach = 0.5 * d.vial_len;
          g.base = {c.x - side * reach + uniform(-2, 2) * d.unit, c.y + 0.5 * d.ring_h + 0.3 * d.vial_w};
          p.glyph = g;
          break;
        }
        case 3:  // tilted against the holder rim
          p.mode = FailureMode::lean_in;
          p.glyph = upright({c.x, c.y + 0.25 * d.ring_h});
          p.glyph.tilt = side * uniform(22, 38) * std::numbers::pi / 180.0;
          break;
        default:  // standing on top of the holder
          p.mode = FailureMode::stand_on;
          p.glyph = upright({c.x + uniform(-2, 2) * d.unit, c.y - 0.5 * d.ring_h - 1.5 * d.unit});
          break;
      }
      p.box = glyph_box(p.glyph, size);
      p.box.label = p.cls;
      placed.push_back(p);
      slots[h] = p;
    }
  }
  placed = slots;

  std::uniform_real_distribution<double> hue_dist(0.0, 360.0);
  for (const auto& p : placed) {
    fill(img, p.glyph.body_polygon(), rgb(palette.body));
    if (cfg.vial_fill == VialFill::solution) {
      const cv::Vec3b liquid = hsv_to_rgb(hue_dist(rng), 0.75, 0.85);
      fill(img, p.glyph.body_polygon(0.0, 0.6), rgb(liquid));
    }
    fill(img, p.glyph.cap_polygon(), rgb(palette.cap));
  }

  if (cfg.pixel_noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.pixel_noise_sigma);
    for (auto it = img.begin<cv::Vec3b>(); it != img.end<cv::Vec3b>(); ++it) {
      for (int ch = 0; ch < 3; ++ch) (*it)[ch] = cv::saturate_cast<uchar>((*it)[ch] + noise(rng));
    }
  }

  scene.image = img;
  for (const auto& p : placed) {
    Annotation a;
    a.cls = p.cls;
    a.failure_mode = p.mode;
    a.box = p.box;
    a.box.label = p.cls;
    scene.annotations.push_back(a);
  }
  return scene;
}

}  // namespace vialguard
