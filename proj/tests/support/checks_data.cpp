#include <algorithm>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "checks.hpp"
#include "fixtures.hpp"
#include "vialguard/data.hpp"

namespace checks {

using namespace vialguard;
namespace fs = std::filesystem;

namespace {

bool same_pixels(const cv::Mat& a, const cv::Mat& b) {
  return a.size() == b.size() && a.type() == b.type() && cv::countNonZero(a.reshape(1) != b.reshape(1)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Scene random_scene(std::mt19937_64& rng) {
  GeneratorConfig cfg;
  const int angles[] = {30, 45, 60, 90};
  cfg.camera_angle_deg = angles[rng() % 4];
  cfg.vial_fill = rng() % 2 ? VialFill::solution : VialFill::empty;
  Scene s = synthesize_scene(cfg, rng());
  s.id = fmt::format("scene_{}", rng() % 100000);
  return s;
}

}  // namespace

Result scene_determinism(int seeds) {
  Result r;
  GeneratorConfig cfg;
  for (int s = 0; s < seeds; ++s, ++r.instances) {
    const Scene a = synthesize_scene(cfg, static_cast<std::uint64_t>(s));
    const Scene b = synthesize_scene(cfg, static_cast<std::uint64_t>(s));
    if (encode_png(a.image) != encode_png(b.image)) r.fail(fmt::format("seed {}: image bytes differ", s));
    if (format_annotations(a.annotations) != format_annotations(b.annotations)) {
      r.fail(fmt::format("seed {}: annotations differ", s));
    }
  }
  if (r.ok) r.detail = fmt::format("{} seeds regenerate byte-identical PNGs and annotations", r.instances);
  return r;
}

Result flip_involution(int instances, std::uint64_t seed) {
  Result r;
  std::mt19937_64 rng(seed);
  AugmentRecipe flip;
  flip.id = "flip";
  flip.ops = {AugmentOp{AugmentKind::flip, 1.0, 0.0, 0.0}};
  for (int i = 0; i < instances; ++i, ++r.instances) {
    const Scene s = random_scene(rng);
    const Scene once = augment(s, flip, rng());
    const Scene twice = augment(once, flip, rng());
    if (!same_pixels(twice.image, s.image) || twice.annotations != s.annotations) {
      r.fail(fmt::format("instance {}: double flip is not the identity", i));
    }
    for (std::size_t k = 0; k < s.annotations.size(); ++k) {
      const BoundingBox want = flip_horizontal(s.annotations[k].box, s.width());
      const auto& got = once.annotations[k];
      if (got.box != want || got.cls != s.annotations[k].cls || got.failure_mode != s.annotations[k].failure_mode) {
        r.fail(fmt::format("instance {}: flipped box {} does not follow the image", i, k));
      }
      if (got.box.x_min < 0 || got.box.x_max > s.width() || got.box.y_min < 0 || got.box.y_max > s.height()) {
        r.fail(fmt::format("instance {}: flipped box {} leaves the image", i, k));
      }
    }
  }
  if (r.ok) r.detail = fmt::format("{} scenes: flip twice is the identity, boxes follow the pixels", r.instances);
  return r;
}

Result photometric_annotation_immutability(int instances, std::uint64_t seed) {
  Result r;
  std::mt19937_64 rng(seed);
  AugmentRecipe photo;
  photo.id = "photometric";
  photo.ops = {AugmentOp{AugmentKind::brightness, 1.0, 0.6, 1.4}, AugmentOp{AugmentKind::saturation, 1.0, 0.6, 1.4},
               AugmentOp{AugmentKind::hue, 1.0, -18.0, 18.0}, AugmentOp{AugmentKind::gaussian_blur, 1.0, 0.5, 1.5}};
  int changed = 0;
  for (int i = 0; i < instances; ++i, ++r.instances) {
    const Scene s = random_scene(rng);
    const Scene out = augment(s, photo, rng());
    if (format_annotations(out.annotations) != format_annotations(s.annotations) || out.annotations != s.annotations) {
      r.fail(fmt::format("instance {}: photometric ops touched the annotations", i));
    }
    changed += !same_pixels(out.image, s.image);
  }
  if (changed == 0) r.fail("photometric ops never changed an image");
  if (r.ok) r.detail = fmt::format("{} scenes: annotations bit-identical after photometric ops", r.instances);
  return r;
}

Result loader_round_trip(int scenes, std::uint64_t seed) {
  Result r;
  std::mt19937_64 rng(seed);
  fixture::TempDir dir("roundtrip");
  std::vector<Scene> original;
  for (int i = 0; i < scenes; ++i) {
    Scene s = random_scene(rng);
    s.id = fmt::format("rt_{:03d}", i);
    original.push_back(std::move(s));
  }
  fs::create_directories(dir / "a/images");
  fs::create_directories(dir / "a/annotations");
  fs::create_directories(dir / "b/images");
  fs::create_directories(dir / "b/annotations");
  const DatasetManifest first = save_dataset(original, dir / "a", "all.manifest", seed);
  const std::vector<Scene> loaded = load_dataset(DatasetManifest::read(dir / "a/all.manifest"));
  save_dataset(loaded, dir / "b", "all.manifest", seed);
  for (std::size_t i = 0; i < original.size(); ++i, ++r.instances) {
    const auto& e = first.entries[i];
    if (slurp(dir / "a" / e.annotation) != slurp(dir / "b" / e.annotation)) {
      r.fail(fmt::format("{}: annotation file changed across load/save", original[i].id));
    }
    if (slurp(dir / "a" / e.image) != slurp(dir / "b" / e.image)) {
      r.fail(fmt::format("{}: image file changed across load/save", original[i].id));
    }
    if (i >= loaded.size() || !same_pixels(loaded[i].image, original[i].image) ||
        loaded[i].annotations != original[i].annotations || loaded[i].id != original[i].id) {
      r.fail(fmt::format("{}: loaded scene differs from the saved one", original[i].id));
    }
  }
  if (slurp(dir / "a/all.manifest") != slurp(dir / "b/all.manifest")) r.fail("manifest changed across load/save");
  if (r.ok) r.detail = fmt::format("{} scenes: save(load(manifest)) byte-identical", r.instances);
  return r;
}

Result fixture_case_counts() {
  Result r;
  fixture::TempDir dir("fixture");
  struct Case {
    const char* name;
    fixture::SplitCounts counts;
  };
  for (const Case& c : {Case{"test_45_empty", fixture::kEmpty45Test},
                        Case{"train_45_empty_augmented", fixture::kEmpty45TrainAugmented}}) {
    ++r.instances;
    fixture::write_count_fixture(dir.path(), std::string(c.name) + ".manifest", c.counts);
    const auto scenes = load_dataset(DatasetManifest::read(dir / (std::string(c.name) + ".manifest")));
    int success = 0, failure = 0;
    for (const auto& s : scenes) {
      for (const auto& a : s.annotations) (a.cls == Label::success ? success : failure)++;
    }
    const std::string line = fmt::format("{}: {} images, {} success + {} failure = {}", c.name, scenes.size(), success,
                                         failure, success + failure);
    if (static_cast<int>(scenes.size()) != c.counts.images || success != c.counts.success ||
        failure != c.counts.failure) {
      r.fail(line + fmt::format(" (expected {} + {})", c.counts.success, c.counts.failure));
    }
    r.detail += (r.detail.empty() ? "" : "; ") + line;
  }
  return r;
}

}  // namespace checks
