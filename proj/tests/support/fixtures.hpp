#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "vialguard/data.hpp"

namespace fixture {

// Image and vial-case counts of one dataset split.
struct SplitCounts {
  int images = 0;
  int success = 0;
  int failure = 0;
};

// Empty vials at 45 degrees.
inline constexpr SplitCounts kEmpty45Test{343, 1099, 403};
inline constexpr SplitCounts kEmpty45TrainAugmented{1966, 6492, 2272};

// Writes `counts.images` small PNG scenes under dir with the given numbers of
// success and failure annotations spread evenly over the images (at most
// eight per image, failure modes cycling), plus dir/<manifest_name>.
vialguard::DatasetManifest write_count_fixture(const std::filesystem::path& dir, const std::string& manifest_name,
                                               const SplitCounts& counts);

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
