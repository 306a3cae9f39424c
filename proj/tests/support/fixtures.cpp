#include "fixtures.hpp"

#include <atomic>
#include <stdexcept>

#include <fmt/format.h>
#include <unistd.h>

namespace fixture {

using namespace vialguard;
namespace fs = std::filesystem;

DatasetManifest write_count_fixture(const fs::path& dir, const std::string& manifest_name, const SplitCounts& counts) {
  constexpr int kSide = 64;
  constexpr int kSlots = 8;
  if (counts.success + counts.failure > kSlots * counts.images) {
    throw std::invalid_argument("fixture: too many cases for the image count");
  }
  const cv::Mat image(kSide, kSide, CV_8UC3, cv::Scalar(90, 110, 130));
  const FailureMode modes[] = {FailureMode::fall_out, FailureMode::lie_down, FailureMode::lean_in,
                               FailureMode::stand_on};

  std::vector<Scene> scenes;
  int success_left = counts.success, failure_left = counts.failure, mode = 0;
  for (int i = 0; i < counts.images; ++i) {
    const int images_left = counts.images - i;
    const int n_success = (success_left + images_left - 1) / images_left;
    const int n_failure = (failure_left + images_left - 1) / images_left;
    Scene s;
    s.id = fmt::format("case_{:05d}", i);
    s.image = image;
    for (int k = 0; k < n_success + n_failure; ++k) {
      Annotation a;
      const int col = k % 4, row = k / 4;
      a.box.x_min = 2 + col * 16;
      a.box.x_max = a.box.x_min + 12;
      a.box.y_min = 2 + row * 32;
      a.box.y_max = a.box.y_min + 28;
      if (k < n_success) {
        a.cls = Label::success;
      } else {
        a.cls = Label::failure;
        a.failure_mode = modes[mode++ % 4];
      }
      a.box.label = a.cls;
      s.annotations.push_back(a);
    }
    success_left -= n_success;
    failure_left -= n_failure;
    scenes.push_back(std::move(s));
  }
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  return save_dataset(scenes, dir, manifest_name);
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() / fmt::format("vialguard_{}_{}_{}", tag, ::getpid(), counter++);
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

}  // namespace fixture
