#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "vialguard/geometry.hpp"

namespace vialguard {

enum class FailureMode { fall_out, lie_down, lean_in, stand_on };

std::string_view to_string(FailureMode mode);
FailureMode failure_mode_from_string(std::string_view text);

enum class VialFill { empty, solution };
enum class SceneSource { real, synthetic };

std::string_view to_string(VialFill fill);
std::string_view to_string(SceneSource source);

// One labelled vial. Box corners are integer pixel coordinates with
// exclusive max edges: [x_min, x_max) x [y_min, y_max).
struct Annotation {
  Label cls = Label::success;
  std::optional<FailureMode> failure_mode;
  BoundingBox box;

  bool operator==(const Annotation&) const = default;
};

struct SceneMetadata {
  int camera_angle_deg = 45;
  VialFill vial_fill = VialFill::empty;
  SceneSource source = SceneSource::synthetic;

  bool operator==(const SceneMetadata&) const = default;
};

inline constexpr int kCameraAngles[] = {30, 45, 60, 90};

struct Scene {
  std::string id;
  cv::Mat image;  // CV_8UC3, RGB channel order
  std::vector<Annotation> annotations;
  SceneMetadata metadata;

  int width() const { return image.cols; }
  int height() const { return image.rows; }
  // Annotation boxes normalized by the image size, labelled by class.
  std::vector<BoundingBox> normalized_boxes() const;
};

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path annotation;
};

// Line-oriented index `image_path<TAB>annotation_path`, paths relative to
// the manifest's directory. Lines starting with '#' carry `key=value`
// metadata (split_seed, recipe, camera_angle, vial_fill, source).
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::uint64_t split_seed = 0;
  std::string recipe_id = "none";
  SceneMetadata metadata;

  static DatasetManifest read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
};

// Annotation record text: `class<TAB>failure_mode|-<TAB>x_min<TAB>y_min<TAB>x_max<TAB>y_max`.
std::string format_annotations(const std::vector<Annotation>& annotations);
// Throws ParseError naming `source` and the line for malformed records,
// including zero-area boxes and class/failure-mode mismatches.
std::vector<Annotation> parse_annotations(std::string_view text, const std::string& source);

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& annotations);

cv::Mat read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const cv::Mat& rgb);
std::vector<std::uint8_t> encode_png(const cv::Mat& rgb);

std::vector<Scene> load_dataset(const DatasetManifest& manifest);

// Writes images/<id>.png and annotations/<id>.txt under `dir` and a manifest
// at dir/manifest_name. Returns the written manifest.
DatasetManifest save_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                             const std::string& manifest_name = "all.manifest",
                             std::uint64_t split_seed = 0, const std::string& recipe_id = "none");

enum class AugmentKind { flip, brightness, saturation, hue, gaussian_blur };

struct AugmentOp {
  AugmentKind kind = AugmentKind::flip;
  double probability = 1.0;
  // Uniform parameter range: multiplicative factor for brightness and
  // saturation, degrees for hue, sigma for blur. Unused by flip.
  double min = 0.0;
  double max = 0.0;
};

struct AugmentRecipe {
  std::string id = "default";
  std::vector<AugmentOp> ops;

  // flip p=0.5; brightness and saturation 0.6-1.4; hue +/-18 deg; blur sigma 0.5-1.5.
  static AugmentRecipe default_recipe();
  // Comma-separated `name[:probability[:min:max]]`, e.g. "flip:0.5,hue:1:-18:18".
  static AugmentRecipe parse(std::string_view text);
};

Scene augment(const Scene& scene, const AugmentRecipe& recipe, std::uint64_t seed);

// Individual transforms, exposed for tests and tools.
cv::Mat adjust_brightness(const cv::Mat& rgb, double factor);
cv::Mat adjust_saturation(const cv::Mat& rgb, double factor);
cv::Mat shift_hue(const cv::Mat& rgb, double degrees);
cv::Mat gaussian_blur(const cv::Mat& rgb, double sigma);

// Deterministic shuffle-split at scene granularity.
std::pair<std::vector<Scene>, std::vector<Scene>> split(const std::vector<Scene>& scenes,
                                                        double val_fraction, std::uint64_t seed);

struct GeneratorConfig {
  int width = 150;
  int height = 150;
  int holder_rows = 2;
  int holder_cols = 4;
  double p_success = 0.6;
  double p_fall_out = 0.1;
  double p_lie_down = 0.1;
  double p_lean_in = 0.1;
  double p_stand_on = 0.1;
  int camera_angle_deg = 45;
  VialFill vial_fill = VialFill::empty;
  int clutter_count = 6;
  double pixel_noise_sigma = 4.0;
  int background_jitter = 12;

  void validate() const;
};

struct HolderLayout {
  std::vector<cv::Point2d> centers;
  // Pixel footprint of each holder ring.
  std::vector<BoundingBox> footprints;
};

HolderLayout holder_layout(const GeneratorConfig& cfg);

// Flat-shaded vial scene with exact ground truth; deterministic per seed.
Scene synthesize_scene(const GeneratorConfig& cfg, std::uint64_t seed);

// Fixed palette of the vial glyphs (RGB), for ground-truth checks.
struct VialPalette {
  cv::Vec3b body{150, 196, 228};
  cv::Vec3b cap{36, 40, 72};
};

}  // namespace vialguard
