#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vialguard/geometry.hpp"
#include "vialguard/nn.hpp"

namespace vialguard {

struct DenseSSDConfig {
  int input_size = 300;
  int input_channels = 3;
  int stem_channels = 64;
  int growth_rate = 32;
  // Bottleneck width of each dense layer is bottleneck_factor * growth_rate.
  int bottleneck_factor = 4;
  std::vector<int> db_layer_counts{6, 8, 16, 6};
  std::vector<int> pyramid_grids{38, 19, 10, 5, 3, 1};
  std::vector<int> head_boxes_per_location{4, 6, 6, 6, 4, 4};
  // Foreground classes; background is added implicitly.
  int num_classes = kNumForegroundClasses;
  // Output width of every feature block, reduction and stride-2 conv.
  int fb_channels = 128;
  double anchor_s_min = 0.1;
  double anchor_s_max = 0.9;

  void validate() const;
  AnchorConfig anchor_config() const;

  // Desk-scale model: growth 8, blocks [2,2,4,2], 150x150 input.
  static DenseSSDConfig tiny();
  // Smallest practical model, for fast unit tests (64x64 input).
  static DenseSSDConfig micro();

  friend bool operator==(const DenseSSDConfig&, const DenseSSDConfig&) = default;
};

// Per-anchor outputs. loc is [batch, anchors, 4]; conf holds raw logits,
// [batch, anchors, num_classes + 1] with background in column 0.
struct Predictions {
  int batch = 0;
  int anchors = 0;
  int classes = 0;  // including background
  std::vector<double> loc;
  std::vector<double> conf;

  Predictions() = default;
  Predictions(int batch, int anchors, int classes);

  double& loc_at(int b, int a, int m) { return loc[(static_cast<std::size_t>(b) * anchors + a) * 4 + m]; }
  double loc_at(int b, int a, int m) const {
    return loc[(static_cast<std::size_t>(b) * anchors + a) * 4 + m];
  }
  double& conf_at(int b, int a, int c) {
    return conf[(static_cast<std::size_t>(b) * anchors + a) * classes + c];
  }
  double conf_at(int b, int a, int c) const {
    return conf[(static_cast<std::size_t>(b) * anchors + a) * classes + c];
  }
  bool all_finite() const;
};

namespace net {

struct DenseLayer {
  int in_channels = 0;
  nn::BatchNorm2d bn1;
  nn::Conv2d bottleneck;  // 1x1
  nn::BatchNorm2d bn2;
  nn::Conv2d conv;  // 3x3, emits growth_rate channels
};

struct DenseBlock {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<DenseLayer> layers;
};

struct Transition {
  nn::BatchNorm2d bn;
  nn::Conv2d conv;
  nn::AvgPool2d pool;
};

struct Reduction {
  nn::AvgPool2d pool;
  nn::Conv2d conv;
};

// Stride-2 3x3 conv feeding the lateral stream of FB_4..FB_6.
struct DownConv {
  nn::BatchNorm2d bn;
  nn::Conv2d conv;
};

struct FeatureBlock {
  std::vector<std::string> inputs;  // names of the concatenated streams
  int in_channels = 0;
  int grid = 0;
  nn::BatchNorm2d bn;
  nn::Conv2d conv;
};

struct Head {
  int boxes_per_location = 0;
  nn::Conv2d loc;
  nn::Conv2d conf;
};

}  // namespace net

struct LayerCount {
  std::string path;
  std::int64_t parameters = 0;
  std::int64_t macs = 0;
};

class Model {
 public:
  Model(const DenseSSDConfig& cfg, std::uint64_t seed);

  const DenseSSDConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const AnchorSet& anchors() const { return anchors_; }

  bool training() const { return training_; }
  void set_training(bool training) { training_ = training; }

  nn::ParameterStore& parameters() { return params_; }
  const nn::ParameterStore& parameters() const { return params_; }

  // images: [batch, channels, H, W] with H = W = input_size.
  // In training mode the pass is recorded for backward().
  Predictions forward(const nn::Tensor& images);
  // Evaluation-mode pass; does not touch model state.
  Predictions infer(const nn::Tensor& images) const;
  // Channel-averaged feature-block activations of a single-image pass.
  std::vector<nn::Tensor> feature_maps(const nn::Tensor& image) const;

  // Accumulates parameter gradients from dL/dPredictions of the last
  // training-mode forward, then releases the recorded graph.
  void backward(const Predictions& grad);

  std::int64_t count_parameters() const;
  std::int64_t count_macs(int input_size) const;
  std::vector<LayerCount> layer_counts(int input_size) const;

  // Structure, exposed for inspection.
  const nn::Conv2d& stem() const { return stem_; }
  const std::array<net::DenseBlock, 4>& dense_blocks() const { return blocks_; }
  const std::array<net::Transition, 4>& transitions() const { return transitions_; }
  const std::array<net::FeatureBlock, 6>& feature_blocks() const { return fbs_; }
  const std::array<net::Reduction, 5>& reductions() const { return reductions_; }
  const std::array<net::DownConv, 3>& down_convs() const { return downs_; }
  const std::array<net::Head, 6>& heads() const { return heads_; }

 private:
  struct Pass {
    std::vector<nn::Var> fb_outputs;
    std::vector<nn::Var> loc_outputs;
    std::vector<nn::Var> conf_outputs;
  };

  Pass run(nn::Tape& tape, const nn::Tensor& images, bool training, bool with_heads);
  Predictions gather(const Pass& pass, int batch) const;
  void check_input(const nn::Tensor& images) const;

  DenseSSDConfig cfg_;
  std::uint64_t seed_;
  bool training_ = false;
  nn::ParameterStore params_;
  AnchorSet anchors_;

  nn::Conv2d stem_;
  std::array<net::DenseBlock, 4> blocks_;
  std::array<net::Transition, 4> transitions_;
  std::array<net::FeatureBlock, 6> fbs_;
  std::array<net::Reduction, 5> reductions_;
  std::array<net::DownConv, 3> downs_;
  std::array<net::Head, 6> heads_;

  // Graph of the last training-mode forward. Copies and moves start empty
  // because the recorded closures refer to the source model's parameters.
  struct Recording {
    nn::Tape tape{true};
    Pass pass;
    Recording() = default;
    Recording(const Recording&) {}
    Recording& operator=(const Recording&) {
      tape.clear();
      pass = {};
      return *this;
    }
    Recording(Recording&&) noexcept {}
    Recording& operator=(Recording&&) noexcept {
      tape.clear();
      pass = {};
      return *this;
    }
  };
  Recording recording_;
};

Model build_model(const DenseSSDConfig& cfg, std::uint64_t seed);
Predictions forward(Model& model, const nn::Tensor& images);
std::int64_t count_parameters(const Model& model);
std::int64_t count_macs(const Model& model, int input_size);

// Six maps, one per feature block, each min-max normalized to [0,1]
// (constant maps are returned as zeros).
std::vector<nn::Tensor> extract_feature_maps(const Model& model, const nn::Tensor& image);

}  // namespace vialguard
