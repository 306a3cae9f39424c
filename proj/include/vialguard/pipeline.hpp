#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "vialguard/data.hpp"
#include "vialguard/loss.hpp"
#include "vialguard/metrics.hpp"
#include "vialguard/network.hpp"

namespace vialguard {

struct TrainConfig {
  double learning_rate = 1e-3;
  // The rate is multiplied by lr_decay once each listed epoch is reached, so
  // the rate of an epoch never depends on the total epoch count.
  std::vector<int> lr_milestones;
  double lr_decay = 0.1;
  double weight_decay = 1e-8;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 500;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  double neg_pos_ratio = 3.0;
  bool augment = true;
  AugmentRecipe recipe = AugmentRecipe::default_recipe();

  // Rates and decay may be zero (a zero rate freezes the weights).
  void validate(bool allow_zero_epochs = false) const;
  double rate_at(int epoch) const;

  // Settings that train the tiny model on a few hundred synthetic scenes in
  // minutes on one CPU core.
  static TrainConfig desk_scale();
};

// Momentum SGD with L2 weight decay:
//   g = grad + wd * p;  v = momentum * v + g;  p -= lr * v
class Sgd {
 public:
  Sgd(double learning_rate, double momentum, double weight_decay)
      : lr_(learning_rate), momentum_(momentum), wd_(weight_decay) {}

  void step(nn::ParameterStore& params);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  double wd_;
  std::vector<std::vector<double>> velocity_;
};

// RGB images to a normalized [B, 3, size, size] tensor.
nn::Tensor images_to_tensor(const std::vector<cv::Mat>& rgb, int size);

struct DetectParams {
  NmsParams nms{};
  // Per-class candidates kept before NMS.
  int pre_nms_top_k = 400;
};

// Softmax, background dropped, decoded against the anchors, clamped to
// [0,1], class-wise NMS. One list per batch element, normalized coordinates.
std::vector<std::vector<Detection>> postprocess(const Predictions& pred, const AnchorSet& anchors,
                                                const DetectParams& params);

// Single image; boxes in the image's pixel frame, sorted by score.
std::vector<Detection> detect(const Model& model, const cv::Mat& rgb, const NmsParams& nms,
                              double score_threshold);

// Batched detection over scenes, pixel coordinates.
std::vector<std::vector<Detection>> detect_scenes(const Model& model, const std::vector<Scene>& scenes,
                                                  const DetectParams& params, int batch_size = 8);

// Ground-truth boxes of each scene in pixel coordinates.
std::vector<std::vector<BoundingBox>> ground_truth(const std::vector<Scene>& scenes);

// Evaluation detections keep every candidate down to a score of 0.01.
DetectParams evaluation_detect_params();

EvalReport evaluate(const Model& model, const std::vector<Scene>& scenes, double iou_threshold = 0.5,
                    const DetectParams& params = evaluation_detect_params());

// `image_id<TAB>class<TAB>score<TAB>x_min<TAB>y_min<TAB>x_max<TAB>y_max`
std::string format_detections(const std::string& image_id, const std::vector<Detection>& dets);

struct CheckpointInfo {
  std::string id;
  std::optional<std::string> parent_id;
  // Ancestor ids, oldest first; excludes this checkpoint.
  std::vector<std::string> provenance;
  std::uint64_t model_seed = 0;
  int epoch = 0;
  double val_map = 0.0;
  TrainConfig train;
};

struct Checkpoint {
  CheckpointInfo info;
  Model model;
};

// Binary layout: 8-byte magic, u64 header length, JSON header (config,
// metadata, tensor index), then every tensor's doubles in index order.
// The id is a content hash and is assigned on save.
std::string save_checkpoint(const std::filesystem::path& path, const Model& model, CheckpointInfo info);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Throws CheckpointError naming the first config field that differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, const DenseSSDConfig& expected);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_map = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  std::string last_id;
  std::string best_id;
  double best_map = -1.0;
};

// Writes metrics.tsv, last.ckpt (every epoch) and best.ckpt (best val mAP)
// into out_dir. Throws TrainingFault on a non-finite loss after writing
// fault.json with the epoch, batch, batch seed and scene ids.
TrainResult train(Model& model, const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// Resumes training from a checkpoint. New checkpoints record the parent id
// and extend its provenance chain. Zero epochs writes the parent weights.
TrainResult fine_tune(const std::filesystem::path& parent, const DenseSSDConfig& expected,
                      const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
                      const TrainConfig& cfg, const std::filesystem::path& out_dir,
                      const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace vialguard
