#include "vialguard/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vialguard/errors.hpp"

namespace vialguard {

using nn::Tensor;
using nn::Var;

void DenseSSDConfig::validate() const {
  if (input_size <= 0 || input_channels <= 0 || stem_channels <= 0 || growth_rate <= 0 ||
      bottleneck_factor <= 0 || fb_channels <= 0) {
    throw ConfigError("network sizes and channel counts must be positive");
  }
  if (db_layer_counts.size() != 4) throw ConfigError("db_layer_counts must list four dense blocks");
  for (int n : db_layer_counts) {
    if (n <= 0) throw ConfigError("every dense block needs at least one layer");
  }
  if (pyramid_grids.size() != 6) throw ConfigError("pyramid_grids must list six levels");
  if (head_boxes_per_location.size() != 6) {
    throw ConfigError("head_boxes_per_location must list six levels");
  }
  for (std::size_t k = 0; k < 6; ++k) {
    if (pyramid_grids[k] <= 0 || head_boxes_per_location[k] <= 0) {
      throw ConfigError("pyramid grids and boxes per location must be positive");
    }
  }
  if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
}

AnchorConfig DenseSSDConfig::anchor_config() const {
  return AnchorConfig::from_grids(pyramid_grids, head_boxes_per_location, anchor_s_min,
                                  anchor_s_max);
}

DenseSSDConfig DenseSSDConfig::tiny() {
  DenseSSDConfig cfg;
  cfg.input_size = 150;
  cfg.stem_channels = 16;
  cfg.growth_rate = 8;
  cfg.db_layer_counts = {2, 2, 4, 2};
  cfg.pyramid_grids = {19, 10, 5, 3, 2, 1};
  cfg.fb_channels = 48;
  return cfg;
}

DenseSSDConfig DenseSSDConfig::micro() {
  DenseSSDConfig cfg;
  cfg.input_size = 64;
  cfg.stem_channels = 8;
  cfg.growth_rate = 4;
  cfg.db_layer_counts = {1, 1, 1, 1};
  cfg.pyramid_grids = {8, 4, 2, 1, 1, 1};
  cfg.head_boxes_per_location = {4, 4, 4, 4, 4, 4};
  cfg.fb_channels = 8;
  return cfg;
}

Predictions::Predictions(int batch_, int anchors_, int classes_)
    : batch(batch_),
      anchors(anchors_),
      classes(classes_),
      loc(static_cast<std::size_t>(batch_) * anchors_ * 4, 0.0),
      conf(static_cast<std::size_t>(batch_) * anchors_ * classes_, 0.0) {}

bool Predictions::all_finite() const {
  auto finite = [](double v) { return std::isfinite(v); };
  return std::all_of(loc.begin(), loc.end(), finite) && std::all_of(conf.begin(), conf.end(), finite);
}

namespace {

std::string level_name(const char* prefix, int k) { return std::string(prefix) + std::to_string(k); }

// Stride-2 3x3 conv padding that lands on the requested grid.
int down_padding(int in, int target, const std::string& stage) {
  for (int pad : {1, 0}) {
    if ((in + 2 * pad - 3) / 2 + 1 == target && in + 2 * pad >= 3) return pad;
  }
  throw ConfigError(stage + ": a 3x3 stride-2 conv cannot map " + std::to_string(in) + "x" +
                    std::to_string(in) + " onto the " + std::to_string(target) + "x" +
                    std::to_string(target) + " pyramid level");
}

nn::AvgPool2d reduction_pool(int in, int target, const std::string& stage) {
  nn::AvgPool2d pool;
  if (pool.out_size(in) == target) return pool;
  if (target == 1) {
    pool.kernel = in;
    pool.stride = in;
    return pool;
  }
  throw ConfigError(stage + ": 2x2 ceil-mode pooling maps " + std::to_string(in) + "x" +
                    std::to_string(in) + " to " + std::to_string(pool.out_size(in)) +
                    ", but the next pyramid level is " + std::to_string(target) + "x" +
                    std::to_string(target));
}

void check_grid(int actual, int expected, const std::string& stage, int level) {
  if (actual != expected) {
    throw ConfigError(stage + " produces " + std::to_string(actual) + "x" + std::to_string(actual) + " maps but " +
                      level_name("fb", level) + " expects " + std::to_string(expected) + "x" +
                      std::to_string(expected));
  }
}

}  // namespace

Model::Model(const DenseSSDConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  const auto& grids = cfg_.pyramid_grids;

  stem_ = nn::make_conv(params_, "stem", cfg_.input_channels, cfg_.stem_channels, 3, 2, 1);
  int size = stem_.out_size(cfg_.input_size);
  if (size <= 0) throw ConfigError("stem: input too small");
  int channels = cfg_.stem_channels;
  std::array<int, 4> trans_sizes{};
  std::array<int, 4> trans_channels{};
  for (int k = 0; k < 4; ++k) {
    auto& block = blocks_[k];
    block.in_channels = channels;
    const std::string bname = level_name("db", k + 1);
    for (int j = 0; j < cfg_.db_layer_counts[k]; ++j) {
      net::DenseLayer layer;
      const std::string lname = bname + ".layer" + std::to_string(j);
      const int bottleneck = cfg_.bottleneck_factor * cfg_.growth_rate;
      layer.in_channels = channels;
      layer.bn1 = nn::make_batch_norm(params_, lname + ".bn1", channels);
      layer.bottleneck = nn::make_conv(params_, lname + ".conv1", channels, bottleneck, 1, 1, 0);
      layer.bn2 = nn::make_batch_norm(params_, lname + ".bn2", bottleneck);
      layer.conv = nn::make_conv(params_, lname + ".conv2", bottleneck, cfg_.growth_rate, 3, 1, 1);
      block.layers.push_back(std::move(layer));
      channels += cfg_.growth_rate;
    }
    block.out_channels = channels;

    auto& trans = transitions_[k];
    const std::string tname = level_name("trans", k + 1);
    const int out = std::max(1, channels / 2);
    trans.bn = nn::make_batch_norm(params_, tname + ".bn", channels);
    trans.conv = nn::make_conv(params_, tname + ".conv", channels, out, 1, 1, 0);
    size = trans.pool.out_size(size);
    if (size <= 0) throw ConfigError(tname + ": feature map vanished");
    channels = out;
    trans_sizes[k] = size;
    trans_channels[k] = channels;
  }
  check_grid(trans_sizes[1], grids[0], "trans2", 1);
  check_grid(trans_sizes[2], grids[1], "trans3", 2);
  check_grid(trans_sizes[3], grids[2], "trans4", 3);

  const int fbc = cfg_.fb_channels;
  for (int k = 0; k < 6; ++k) {
    auto& fb = fbs_[k];
    fb.grid = grids[k];
    if (k == 0) {
      fb.inputs = {"trans2"};
      fb.in_channels = trans_channels[1];
    } else {
      auto& red = reductions_[k - 1];
      const std::string rname = level_name("reduction", k);
      red.pool = reduction_pool(grids[k - 1], grids[k], rname);
      red.conv = nn::make_conv(params_, rname + ".conv", fbc, fbc, 1, 1, 0);
      if (k < 3) {
        fb.inputs = {rname, level_name("trans", k + 2)};
        fb.in_channels = fbc + trans_channels[k + 1];
      } else {
        auto& down = downs_[k - 3];
        const std::string dname = level_name("conv", k + 1);
        const int pad = down_padding(grids[k - 1], grids[k], dname);
        down.bn = nn::make_batch_norm(params_, dname + ".bn", fbc);
        down.conv = nn::make_conv(params_, dname, fbc, fbc, 3, 2, pad);
        fb.inputs = {rname, dname};
        fb.in_channels = 2 * fbc;
      }
    }
    const std::string fname = level_name("fb", k + 1);
    fb.bn = nn::make_batch_norm(params_, fname + ".bn", fb.in_channels);
    fb.conv = nn::make_conv(params_, fname + ".conv", fb.in_channels, fbc, 3, 1, 1);
  }

  const int nc = cfg_.num_classes + 1;
  for (int k = 0; k < 6; ++k) {
    auto& head = heads_[k];
    const std::string hname = level_name("head", k + 1);
    head.boxes_per_location = cfg_.head_boxes_per_location[k];
    head.loc = nn::make_conv(params_, hname + ".loc", fbc, head.boxes_per_location * 4, 3, 1, 1);
    head.conf = nn::make_conv(params_, hname + ".conf", fbc, head.boxes_per_location * nc, 3, 1, 1);
  }

  anchors_ = generate_default_boxes(cfg_.anchor_config());

  // He fan-in initialization in parameter creation order; biases stay zero.
  std::mt19937_64 rng(seed);
  for (auto& p : params_.all()) {
    if (!p.trainable || p.value.rank() != 4) continue;
    const double fan_in = static_cast<double>(p.value.dim(1) * p.value.dim(2) * p.value.dim(3));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : p.value.values()) v = dist(rng);
  }
}

void Model::check_input(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(cfg_.input_channels) ||
      images.dim(2) != static_cast<std::size_t>(cfg_.input_size) ||
      images.dim(3) != static_cast<std::size_t>(cfg_.input_size) || images.dim(0) == 0) {
    throw ShapeError("forward: expected images of shape (B," + std::to_string(cfg_.input_channels) +
                     "," + std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) +
                     "), got " + nn::shape_string(images.shape()));
  }
}

Model::Pass Model::run(nn::Tape& tape, const Tensor& images, bool training, bool with_heads) {
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  Tensor x({c, n, images.dim(2), images.dim(3)});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy(images.data() + (b * c + ch) * hw, images.data() + (b * c + ch + 1) * hw,
                x.data() + (ch * n + b) * hw);

  auto bn_relu_conv = [&](const Var& in, const nn::BatchNorm2d& bn, const nn::Conv2d& conv) {
    return nn::conv2d(tape, nn::relu(tape, nn::batch_norm(tape, in, bn, params_, training)), conv,
                      params_);
  };

  Var h = nn::conv2d(tape, tape.leaf(std::move(x)), stem_, params_);
  std::array<Var, 4> trans_out;
  for (int k = 0; k < 4; ++k) {
    for (const auto& layer : blocks_[k].layers) {
      Var mid = bn_relu_conv(h, layer.bn1, layer.bottleneck);
      Var fresh = bn_relu_conv(mid, layer.bn2, layer.conv);
      h = nn::concat_channels(tape, {h, fresh});
    }
    const auto& t = transitions_[k];
    h = nn::avg_pool(tape, bn_relu_conv(h, t.bn, t.conv), t.pool);
    trans_out[k] = h;
  }

  Pass pass;
  for (int k = 0; k < 6; ++k) {
    std::vector<Var> streams;
    if (k == 0) {
      streams = {trans_out[1]};
    } else {
      const Var& prev = pass.fb_outputs[k - 1];
      const auto& red = reductions_[k - 1];
      streams.push_back(nn::conv2d(tape, nn::avg_pool(tape, prev, red.pool), red.conv, params_));
      if (k < 3) {
        streams.push_back(trans_out[k + 1]);
      } else {
        const auto& down = downs_[k - 3];
        streams.push_back(bn_relu_conv(prev, down.bn, down.conv));
      }
    }
    Var in = streams.size() == 1 ? streams[0] : nn::concat_channels(tape, streams);
    pass.fb_outputs.push_back(bn_relu_conv(in, fbs_[k].bn, fbs_[k].conv));
  }
  if (with_heads) {
    for (int k = 0; k < 6; ++k) {
      pass.loc_outputs.push_back(nn::conv2d(tape, pass.fb_outputs[k], heads_[k].loc, params_));
      pass.conf_outputs.push_back(nn::conv2d(tape, pass.fb_outputs[k], heads_[k].conf, params_));
    }
  }
  return pass;
}

Predictions Model::gather(const Pass& pass, int batch) const {
  const int nc = cfg_.num_classes + 1;
  Predictions out(batch, static_cast<int>(anchors_.size()), nc);
  int offset = 0;
  for (int k = 0; k < 6; ++k) {
    const Tensor& loc = pass.loc_outputs[k]->value;
    const Tensor& conf = pass.conf_outputs[k]->value;
    const int g = cfg_.pyramid_grids[k];
    const int per = heads_[k].boxes_per_location;
    const std::size_t plane = static_cast<std::size_t>(batch) * g * g;
    for (int b = 0; b < batch; ++b) {
      for (int cell = 0; cell < g * g; ++cell) {
        const std::size_t pos = static_cast<std::size_t>(b) * g * g + cell;
        for (int a = 0; a < per; ++a) {
          const int anchor = offset + cell * per + a;
          for (int m = 0; m < 4; ++m) out.loc_at(b, anchor, m) = loc[(a * 4 + m) * plane + pos];
          for (int c = 0; c < nc; ++c) out.conf_at(b, anchor, c) = conf[(a * nc + c) * plane + pos];
        }
      }
    }
    offset += g * g * per;
  }
  return out;
}

Predictions Model::forward(const Tensor& images) {
  if (!training_) return infer(images);
  check_input(images);
  recording_.tape.clear();
  recording_.pass = run(recording_.tape, images, true, true);
  return gather(recording_.pass, static_cast<int>(images.dim(0)));
}

Predictions Model::infer(const Tensor& images) const {
  check_input(images);
  nn::Tape tape(false);
  // Evaluation mode only reads parameters; run() is shared with training.
  auto& self = const_cast<Model&>(*this);
  Pass pass = self.run(tape, images, false, true);
  return gather(pass, static_cast<int>(images.dim(0)));
}

std::vector<Tensor> Model::feature_maps(const Tensor& image) const {
  check_input(image);
  if (image.dim(0) != 1) throw ShapeError("feature_maps: expected a single image");
  nn::Tape tape(false);
  auto& self = const_cast<Model&>(*this);
  Pass pass = self.run(tape, image, false, false);
  std::vector<Tensor> maps;
  for (const auto& fb : pass.fb_outputs) {
    const Tensor& v = fb->value;
    const std::size_t c = v.dim(0), h = v.dim(2), w = v.dim(3);
    Tensor m({h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h * w; ++i) m[i] += v[ch * h * w + i];
    for (auto& x : m.values()) x /= static_cast<double>(c);
    maps.push_back(std::move(m));
  }
  return maps;
}

void Model::backward(const Predictions& grad) {
  auto& pass = recording_.pass;
  if (pass.loc_outputs.empty()) {
    throw ContractError("backward: no recorded training-mode forward pass");
  }
  const int nc = cfg_.num_classes + 1;
  const int batch = grad.batch;
  int offset = 0;
  for (int k = 0; k < 6; ++k) {
    Tensor& dloc = pass.loc_outputs[k]->grad_buffer();
    Tensor& dconf = pass.conf_outputs[k]->grad_buffer();
    const int g = cfg_.pyramid_grids[k];
    const int per = heads_[k].boxes_per_location;
    const std::size_t plane = static_cast<std::size_t>(batch) * g * g;
    for (int b = 0; b < batch; ++b) {
      for (int cell = 0; cell < g * g; ++cell) {
        const std::size_t pos = static_cast<std::size_t>(b) * g * g + cell;
        for (int a = 0; a < per; ++a) {
          const int anchor = offset + cell * per + a;
          for (int m = 0; m < 4; ++m) dloc[(a * 4 + m) * plane + pos] += grad.loc_at(b, anchor, m);
          for (int c = 0; c < nc; ++c) dconf[(a * nc + c) * plane + pos] += grad.conf_at(b, anchor, c);
        }
      }
    }
    offset += g * g * per;
  }
  recording_.tape.backward();
  recording_.tape.clear();
  pass = {};
}

std::int64_t Model::count_parameters() const {
  std::int64_t total = 0;
  for (const auto& p : params_.all()) {
    if (p.trainable) total += static_cast<std::int64_t>(p.value.size());
  }
  return total;
}

std::vector<LayerCount> Model::layer_counts(int input_size) const {
  std::vector<LayerCount> out;
  auto add = [&](const nn::Conv2d& conv, int in_size) {
    const int o = conv.out_size(in_size);
    if (o <= 0) throw ConfigError(conv.path + ": input " + std::to_string(in_size) + " too small");
    out.push_back({conv.path, conv.parameter_count(), conv.macs(o, o)});
    return o;
  };
  auto add_bn = [&](const nn::BatchNorm2d& bn) {
    out.push_back({bn.path, 2 * static_cast<std::int64_t>(bn.channels), 0});
  };

  int size = add(stem_, input_size);
  std::array<int, 4> trans_sizes{};
  for (int k = 0; k < 4; ++k) {
    for (const auto& layer : blocks_[k].layers) {
      add_bn(layer.bn1);
      add(layer.bottleneck, size);
      add_bn(layer.bn2);
      add(layer.conv, size);
    }
    add_bn(transitions_[k].bn);
    add(transitions_[k].conv, size);
    size = transitions_[k].pool.out_size(size);
    trans_sizes[k] = size;
  }
  std::array<int, 6> fb_sizes{};
  for (int k = 0; k < 6; ++k) {
    int lateral = 0;
    if (k == 0) {
      lateral = trans_sizes[1];
    } else {
      const int reduced = add(reductions_[k - 1].conv, reductions_[k - 1].pool.out_size(fb_sizes[k - 1]));
      if (k < 3) {
        lateral = trans_sizes[k + 1];
      } else {
        add_bn(downs_[k - 3].bn);
        lateral = add(downs_[k - 3].conv, fb_sizes[k - 1]);
      }
      if (reduced != lateral) {
        throw ConfigError("fb_" + std::to_string(k + 1) + ": streams disagree spatially at input " +
                          std::to_string(input_size));
      }
    }
    add_bn(fbs_[k].bn);
    fb_sizes[k] = add(fbs_[k].conv, lateral);
  }
  for (int k = 0; k < 6; ++k) {
    add(heads_[k].loc, fb_sizes[k]);
    add(heads_[k].conf, fb_sizes[k]);
  }
  return out;
}

std::int64_t Model::count_macs(int input_size) const {
  std::int64_t total = 0;
  for (const auto& l : layer_counts(input_size)) total += l.macs;
  return total;
}

Model build_model(const DenseSSDConfig& cfg, std::uint64_t seed) { return Model(cfg, seed); }

Predictions forward(Model& model, const Tensor& images) { return model.forward(images); }

std::int64_t count_parameters(const Model& model) { return model.count_parameters(); }

std::int64_t count_macs(const Model& model, int input_size) { return model.count_macs(input_size); }

std::vector<Tensor> extract_feature_maps(const Model& model, const Tensor& image) {
  auto maps = model.feature_maps(image);
  for (auto& m : maps) {
    const auto [lo, hi] = std::minmax_element(m.values().begin(), m.values().end());
    const double mn = *lo, mx = *hi;
    for (auto& v : m.values()) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
  }
  return maps;
}

}  // namespace vialguard
