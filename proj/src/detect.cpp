#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "vialguard/errors.hpp"
#include "vialguard/pipeline.hpp"

namespace vialguard {

nn::Tensor images_to_tensor(const std::vector<cv::Mat>& rgb, int size) {
  const std::size_t n = rgb.size(), s = static_cast<std::size_t>(size), hw = s * s;
  nn::Tensor out({n, 3, s, s});
  for (std::size_t b = 0; b < n; ++b) {
    const cv::Mat& src = rgb[b];
    if (src.empty() || src.type() != CV_8UC3) throw ShapeError("images_to_tensor: expected 8-bit RGB images");
    cv::Mat resized = src;
    if (src.cols != size || src.rows != size) {
      const bool shrink = src.cols > size || src.rows > size;
      cv::resize(src, resized, {size, size}, 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
    }
    double* dst = out.data() + b * 3 * hw;
    for (int y = 0; y < size; ++y) {
      const auto* row = resized.ptr<cv::Vec3b>(y);
      for (int x = 0; x < size; ++x) {
        for (int c = 0; c < 3; ++c) {
          dst[c * hw + static_cast<std::size_t>(y) * s + x] = (row[x][c] / 255.0 - 0.5) / 0.25;
        }
      }
    }
  }
  return out;
}

std::vector<std::vector<Detection>> postprocess(const Predictions& pred, const AnchorSet& anchors,
                                                const DetectParams& params) {
  if (pred.anchors != static_cast<int>(anchors.size())) {
    throw ContractError("postprocess: predictions and anchors disagree");
  }
  std::vector<std::vector<Detection>> out(pred.batch);
  std::vector<double> probs(pred.classes);
  for (int b = 0; b < pred.batch; ++b) {
    std::vector<std::vector<std::pair<double, int>>> candidates(pred.classes);
    for (int a = 0; a < pred.anchors; ++a) {
      double mx = pred.conf_at(b, a, 0);
      for (int c = 1; c < pred.classes; ++c) mx = std::max(mx, pred.conf_at(b, a, c));
      double sum = 0.0;
      for (int c = 0; c < pred.classes; ++c) sum += probs[c] = std::exp(pred.conf_at(b, a, c) - mx);
      for (int c = 1; c < pred.classes; ++c) {
        const double p = probs[c] / sum;
        if (p > params.nms.score_threshold) candidates[c].emplace_back(p, a);
      }
    }
    std::vector<Detection> dets;
    for (int c = 1; c < pred.classes; ++c) {
      auto& list = candidates[c];
      std::stable_sort(list.begin(), list.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
      if (static_cast<int>(list.size()) > params.pre_nms_top_k) list.resize(params.pre_nms_top_k);
      for (const auto& [p, a] : list) {
        const OffsetVector off{pred.loc_at(b, a, 0), pred.loc_at(b, a, 1), pred.loc_at(b, a, 2),
                               pred.loc_at(b, a, 3)};
        if (!std::isfinite(off.t_cx) || !std::isfinite(off.t_cy) || !std::isfinite(off.t_w) ||
            !std::isfinite(off.t_h)) {
          continue;
        }
        Detection d = decode(off, anchors.boxes[a], anchors.variances);
        d.x_min = std::clamp(d.x_min, 0.0, 1.0);
        d.y_min = std::clamp(d.y_min, 0.0, 1.0);
        d.x_max = std::clamp(d.x_max, 0.0, 1.0);
        d.y_max = std::clamp(d.y_max, 0.0, 1.0);
        if (!(d.x_max > d.x_min && d.y_max > d.y_min)) continue;
        d.label = static_cast<Label>(c);
        d.score = p;
        dets.push_back(d);
      }
    }
    out[b] = nms(std::move(dets), params.nms);
  }
  return out;
}

namespace {

void to_pixels_inplace(std::vector<Detection>& dets, int width, int height) {
  for (auto& d : dets) {
    d.x_min *= width;
    d.x_max *= width;
    d.y_min *= height;
    d.y_max *= height;
  }
}

}  // namespace

std::vector<Detection> detect(const Model& model, const cv::Mat& rgb, const NmsParams& nms_params,
                              double score_threshold) {
  DetectParams params;
  params.nms = nms_params;
  params.nms.score_threshold = score_threshold;
  const Predictions pred = model.infer(images_to_tensor({rgb}, model.config().input_size));
  auto dets = postprocess(pred, model.anchors(), params);
  to_pixels_inplace(dets[0], rgb.cols, rgb.rows);
  return dets[0];
}

std::vector<std::vector<Detection>> detect_scenes(const Model& model, const std::vector<Scene>& scenes,
                                                  const DetectParams& params, int batch_size) {
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  const std::size_t step = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < scenes.size(); start += step) {
    const std::size_t end = std::min(scenes.size(), start + step);
    std::vector<cv::Mat> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(scenes[i].image);
    const Predictions pred = model.infer(images_to_tensor(images, model.config().input_size));
    auto dets = postprocess(pred, model.anchors(), params);
    for (std::size_t i = start; i < end; ++i) {
      to_pixels_inplace(dets[i - start], scenes[i].width(), scenes[i].height());
      out.push_back(std::move(dets[i - start]));
    }
  }
  return out;
}

std::vector<std::vector<BoundingBox>> ground_truth(const std::vector<Scene>& scenes) {
  std::vector<std::vector<BoundingBox>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    std::vector<BoundingBox> boxes;
    for (const auto& a : s.annotations) {
      BoundingBox b = a.box;
      b.label = a.cls;
      boxes.push_back(b);
    }
    out.push_back(std::move(boxes));
  }
  return out;
}

DetectParams evaluation_detect_params() {
  DetectParams p;
  p.nms.score_threshold = 0.01;
  return p;
}

EvalReport evaluate(const Model& model, const std::vector<Scene>& scenes, double iou_threshold,
                    const DetectParams& params) {
  return evaluate_detections(detect_scenes(model, scenes, params), ground_truth(scenes), iou_threshold);
}

std::string format_detections(const std::string& image_id, const std::vector<Detection>& dets) {
  std::string out;
  for (const auto& d : dets) {
    out += fmt::format("{}\t{}\t{:.6f}\t{:.2f}\t{:.2f}\t{:.2f}\t{:.2f}\n", image_id, to_string(d.label),
                       d.score.value_or(0.0), d.x_min, d.y_min, d.x_max, d.y_max);
  }
  return out;
}

}  // namespace vialguard
