#include "vialguard/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vialguard/errors.hpp"

namespace fs = std::filesystem;

namespace vialguard {

std::string_view to_string(FailureMode mode) {
  switch (mode) {
    case FailureMode::fall_out:
      return "fall_out";
    case FailureMode::lie_down:
      return "lie_down";
    case FailureMode::lean_in:
      return "lean_in";
    case FailureMode::stand_on:
      return "stand_on";
  }
  return "fall_out";
}

FailureMode failure_mode_from_string(std::string_view text) {
  if (text == "fall_out") return FailureMode::fall_out;
  if (text == "lie_down") return FailureMode::lie_down;
  if (text == "lean_in") return FailureMode::lean_in;
  if (text == "stand_on") return FailureMode::stand_on;
  throw ParseError("unknown failure mode '" + std::string(text) + "'");
}

std::string_view to_string(VialFill fill) { return fill == VialFill::empty ? "empty" : "solution"; }

std::string_view to_string(SceneSource source) {
  return source == SceneSource::real ? "real" : "synthetic";
}

std::vector<BoundingBox> Scene::normalized_boxes() const {
  std::vector<BoundingBox> out;
  out.reserve(annotations.size());
  for (const auto& a : annotations) {
    BoundingBox b = a.box.to_normalized(width(), height());
    b.label = a.cls;
    b.score.reset();
    out.push_back(b);
  }
  return out;
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

long parse_int(std::string_view field, const std::string& where) {
  long v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw ParseError(where + ": expected an integer, got '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace

std::string format_annotations(const std::vector<Annotation>& annotations) {
  std::ostringstream os;
  for (const auto& a : annotations) {
    os << to_string(a.cls) << '\t' << (a.failure_mode ? to_string(*a.failure_mode) : "-") << '\t'
       << std::lround(a.box.x_min) << '\t' << std::lround(a.box.y_min) << '\t'
       << std::lround(a.box.x_max) << '\t' << std::lround(a.box.y_max) << '\n';
  }
  return os.str();
}

std::vector<Annotation> parse_annotations(std::string_view text, const std::string& source) {
  std::vector<Annotation> out;
  int line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto fields = split_fields(line, '\t');
    if (fields.size() != 6) {
      throw ParseError(where + ": expected 6 tab-separated fields, got " + std::to_string(fields.size()));
    }
    Annotation a;
    try {
      a.cls = label_from_string(fields[0]);
      if (fields[1] != "-") a.failure_mode = failure_mode_from_string(fields[1]);
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (a.cls == Label::background) throw ParseError(where + ": background is not an annotation class");
    if ((a.cls == Label::failure) != a.failure_mode.has_value()) {
      throw ParseError(where + ": failure_mode must be given exactly for failure records");
    }
    a.box.x_min = static_cast<double>(parse_int(fields[2], where));
    a.box.y_min = static_cast<double>(parse_int(fields[3], where));
    a.box.x_max = static_cast<double>(parse_int(fields[4], where));
    a.box.y_max = static_cast<double>(parse_int(fields[5], where));
    a.box.label = a.cls;
    if (!(a.box.x_min < a.box.x_max) || !(a.box.y_min < a.box.y_max)) {
      throw ParseError(where + ": zero-area or inverted box");
    }
    out.push_back(a);
  }
  return out;
}

void write_annotations(const fs::path& path, const std::vector<Annotation>& annotations) {
  write_text(path, format_annotations(annotations));
}

cv::Mat read_png(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFileError("missing image " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw ParseError("cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

std::vector<std::uint8_t> encode_png(const cv::Mat& rgb) {
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", bgr, buf)) throw std::runtime_error("PNG encoding failed");
  return buf;
}

void write_png(const fs::path& path, const cv::Mat& rgb) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto buf = encode_png(rgb);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

DatasetManifest DatasetManifest::read(const fs::path& path) {
  const std::string text = read_text(path);
  DatasetManifest m;
  m.root = path.parent_path();
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (line.front() == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      std::string value = line.substr(eq + 1);
      key.erase(0, key.find_first_not_of(' '));
      if (key == "split_seed") {
        m.split_seed = static_cast<std::uint64_t>(parse_int(value, where));
      } else if (key == "recipe") {
        m.recipe_id = value;
      } else if (key == "camera_angle") {
        m.metadata.camera_angle_deg = static_cast<int>(parse_int(value, where));
      } else if (key == "vial_fill") {
        if (value != "empty" && value != "solution") throw ParseError(where + ": bad vial_fill");
        m.metadata.vial_fill = value == "empty" ? VialFill::empty : VialFill::solution;
      } else if (key == "source") {
        if (value != "real" && value != "synthetic") throw ParseError(where + ": bad source");
        m.metadata.source = value == "real" ? SceneSource::real : SceneSource::synthetic;
      }
      continue;
    }
    const auto fields = split_fields(line, '\t');
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
      throw ParseError(where + ": expected image_path<TAB>annotation_path");
    }
    m.entries.push_back({fs::path(std::string(fields[0])), fs::path(std::string(fields[1]))});
  }
  if (m.entries.empty()) throw ParseError(path.string() + ": manifest has no entries");
  return m;
}

void DatasetManifest::write(const fs::path& path) const {
  std::ostringstream os;
  os << "# split_seed=" << split_seed << '\n'
     << "# recipe=" << recipe_id << '\n'
     << "# camera_angle=" << metadata.camera_angle_deg << '\n'
     << "# vial_fill=" << to_string(metadata.vial_fill) << '\n'
     << "# source=" << to_string(metadata.source) << '\n';
  for (const auto& e : entries) os << e.image.generic_string() << '\t' << e.annotation.generic_string() << '\n';
  write_text(path, os.str());
}

std::vector<Scene> load_dataset(const DatasetManifest& manifest) {
  if (manifest.entries.empty()) throw ParseError("manifest has no entries");
  std::vector<Scene> scenes;
  scenes.reserve(manifest.entries.size());
  for (const auto& entry : manifest.entries) {
    const fs::path image_path = manifest.root / entry.image;
    const fs::path ann_path = manifest.root / entry.annotation;
    if (!fs::exists(image_path)) throw MissingFileError("missing image " + image_path.string());
    if (!fs::exists(ann_path)) throw MissingFileError("missing annotation " + ann_path.string());
    Scene s;
    s.id = entry.image.stem().string();
    s.metadata = manifest.metadata;
    s.image = read_png(image_path);
    s.annotations = parse_annotations(read_text(ann_path), ann_path.string());
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
      const auto& b = s.annotations[i].box;
      if (b.x_min < 0 || b.y_min < 0 || b.x_max > s.width() || b.y_max > s.height()) {
        throw OutOfBoundsError(ann_path.string() + ":" + std::to_string(i + 1) +
                               ": box exceeds the " + std::to_string(s.width()) + "x" +
                               std::to_string(s.height()) + " image");
      }
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

DatasetManifest save_dataset(const std::vector<Scene>& scenes, const fs::path& dir,
                             const std::string& manifest_name, std::uint64_t split_seed,
                             const std::string& recipe_id) {
  DatasetManifest m;
  m.root = dir;
  m.split_seed = split_seed;
  m.recipe_id = recipe_id;
  if (!scenes.empty()) m.metadata = scenes.front().metadata;
  for (const auto& s : scenes) {
    ManifestEntry e{fs::path("images") / (s.id + ".png"), fs::path("annotations") / (s.id + ".txt")};
    const fs::path image_path = dir / e.image;
    write_png(image_path, s.image);
    write_annotations(dir / e.annotation, s.annotations);
    m.entries.push_back(std::move(e));
  }
  m.write(dir / manifest_name);
  return m;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

AugmentKind augment_kind(std::string_view name) {
  if (name == "flip") return AugmentKind::flip;
  if (name == "brightness") return AugmentKind::brightness;
  if (name == "saturation") return AugmentKind::saturation;
  if (name == "hue") return AugmentKind::hue;
  if (name == "gaussian_blur" || name == "blur") return AugmentKind::gaussian_blur;
  throw RecipeError("unknown augmentation op '" + std::string(name) + "'");
}

AugmentOp default_op(AugmentKind kind) {
  switch (kind) {
    case AugmentKind::flip:
      return {kind, 0.5, 0.0, 0.0};
    case AugmentKind::brightness:
    case AugmentKind::saturation:
      return {kind, 0.5, 0.6, 1.4};
    case AugmentKind::hue:
      return {kind, 0.5, -18.0, 18.0};
    case AugmentKind::gaussian_blur:
      return {kind, 0.3, 0.5, 1.5};
  }
  return {};
}

double parse_double(std::string_view s, std::string_view what) {
  try {
    std::size_t used = 0;
    const std::string str(s);
    const double v = std::stod(str, &used);
    if (used != str.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw RecipeError("bad number '" + std::string(s) + "' in recipe op " + std::string(what));
  }
}

// Float RGB in [0,1] -> HSV with H in degrees.
cv::Mat to_hsv(const cv::Mat& rgb) {
  cv::Mat f, hsv;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  cv::cvtColor(f, hsv, cv::COLOR_RGB2HSV);
  return hsv;
}

cv::Mat from_hsv(const cv::Mat& hsv) {
  cv::Mat f, out;
  cv::cvtColor(hsv, f, cv::COLOR_HSV2RGB);
  f.convertTo(out, CV_8UC3, 255.0);
  return out;
}

}  // namespace

AugmentRecipe AugmentRecipe::default_recipe() {
  AugmentRecipe r;
  r.id = "default";
  for (auto k : {AugmentKind::flip, AugmentKind::brightness, AugmentKind::saturation, AugmentKind::hue,
                 AugmentKind::gaussian_blur}) {
    r.ops.push_back(default_op(k));
  }
  return r;
}

AugmentRecipe AugmentRecipe::parse(std::string_view text) {
  AugmentRecipe r;
  r.id = std::string(text);
  if (text.empty() || text == "none") {
    r.id = "none";
    return r;
  }
  if (text == "default") return default_recipe();
  for (auto item : split_fields(text, ',')) {
    if (item.empty()) continue;
    const auto parts = split_fields(item, ':');
    AugmentOp op = default_op(augment_kind(parts[0]));
    if (parts.size() >= 2) op.probability = parse_double(parts[1], parts[0]);
    if (parts.size() == 4) {
      op.min = parse_double(parts[2], parts[0]);
      op.max = parse_double(parts[3], parts[0]);
    } else if (parts.size() != 1 && parts.size() != 2) {
      throw RecipeError("recipe op '" + std::string(item) + "' must be name[:p[:min:max]]");
    }
    if (!(op.probability >= 0.0 && op.probability <= 1.0) || op.min > op.max) {
      throw RecipeError("recipe op '" + std::string(item) + "' has an invalid range");
    }
    r.ops.push_back(op);
  }
  return r;
}

cv::Mat adjust_brightness(const cv::Mat& rgb, double factor) {
  if (factor == 1.0) return rgb.clone();
  cv::Mat out;
  rgb.convertTo(out, CV_8UC3, factor, 0.0);
  return out;
}

cv::Mat adjust_saturation(const cv::Mat& rgb, double factor) {
  if (factor == 1.0) return rgb.clone();
  cv::Mat hsv = to_hsv(rgb);
  for (auto it = hsv.begin<cv::Vec3f>(); it != hsv.end<cv::Vec3f>(); ++it) {
    (*it)[1] = std::clamp(static_cast<float>((*it)[1] * factor), 0.0f, 1.0f);
  }
  return from_hsv(hsv);
}

cv::Mat shift_hue(const cv::Mat& rgb, double degrees) {
  if (degrees == 0.0) return rgb.clone();
  cv::Mat hsv = to_hsv(rgb);
  for (auto it = hsv.begin<cv::Vec3f>(); it != hsv.end<cv::Vec3f>(); ++it) {
    double h = std::fmod((*it)[0] + degrees, 360.0);
    if (h < 0) h += 360.0;
    (*it)[0] = static_cast<float>(h);
  }
  return from_hsv(hsv);
}

cv::Mat gaussian_blur(const cv::Mat& rgb, double sigma) {
  if (sigma <= 0.0) return rgb.clone();
  cv::Mat out;
  cv::GaussianBlur(rgb, out, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  return out;
}

Scene augment(const Scene& scene, const AugmentRecipe& recipe, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Scene out = scene;
  out.image = scene.image.clone();
  for (const auto& op : recipe.ops) {
    const bool apply = unit(rng) < op.probability;
    const double value = op.min + (op.max - op.min) * unit(rng);
    if (!apply) continue;
    switch (op.kind) {
      case AugmentKind::flip: {
        cv::Mat flipped;
        cv::flip(out.image, flipped, 1);
        out.image = flipped;
        for (auto& a : out.annotations) a.box = flip_horizontal(a.box, out.width());
        break;
      }
      case AugmentKind::brightness:
        out.image = adjust_brightness(out.image, value);
        break;
      case AugmentKind::saturation:
        out.image = adjust_saturation(out.image, value);
        break;
      case AugmentKind::hue:
        out.image = shift_hue(out.image, value);
        break;
      case AugmentKind::gaussian_blur:
        out.image = gaussian_blur(out.image, value);
        break;
    }
  }
  return out;
}

std::pair<std::vector<Scene>, std::vector<Scene>> split(const std::vector<Scene>& scenes,
                                                        double val_fraction, std::uint64_t seed) {
  if (scenes.size() < 2) throw SplitError("split needs at least two scenes");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw SplitError("validation fraction must lie strictly between 0 and 1");
  }
  const std::size_t n = scenes.size();
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::pair<std::vector<Scene>, std::vector<Scene>> out;
  for (auto i : train_idx) out.first.push_back(scenes[i]);
  for (auto i : val_idx) out.second.push_back(scenes[i]);
  return out;
}

}  // namespace vialguard
