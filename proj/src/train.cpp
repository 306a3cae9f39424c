#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <json.hpp>

#include "vialguard/errors.hpp"
#include "vialguard/pipeline.hpp"

namespace vialguard {

void TrainConfig::validate(bool allow_zero_epochs) const {
  auto non_negative = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!non_negative(learning_rate)) throw ConfigError("learning_rate must be a finite non-negative number");
  if (!non_negative(weight_decay)) throw ConfigError("weight_decay must be a finite non-negative number");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < (allow_zero_epochs ? 0 : 1)) throw ConfigError("epochs must be at least 1");
  if (!non_negative(alpha)) throw ConfigError("alpha must be a finite non-negative number");
  if (!non_negative(lr_decay)) throw ConfigError("lr_decay must be a finite non-negative number");
  if (std::any_of(lr_milestones.begin(), lr_milestones.end(), [](int e) { return e < 1; })) {
    throw ConfigError("lr_milestones must be epochs of at least 1");
  }
  if (!non_negative(neg_pos_ratio)) throw ConfigError("neg_pos_ratio must be a finite non-negative number");
}

double TrainConfig::rate_at(int epoch) const {
  double lr = learning_rate;
  for (int m : lr_milestones) {
    if (epoch >= m) lr *= lr_decay;
  }
  return lr;
}

TrainConfig TrainConfig::desk_scale() {
  TrainConfig c;
  c.learning_rate = 0.02;
  c.weight_decay = 5e-4;
  c.momentum = 0.9;
  c.batch_size = 8;
  c.epochs = 30;
  c.lr_milestones = {20, 25};
  return c;
}

void Sgd::step(nn::ParameterStore& params) {
  auto& all = params.all();
  if (velocity_.size() != all.size()) {
    velocity_.assign(all.size(), {});
    for (std::size_t i = 0; i < all.size(); ++i) velocity_[i].assign(all[i].value.size(), 0.0);
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& p = all[i];
    if (!p.trainable || p.grad.size() != p.value.size()) continue;
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* v = velocity_[i].data();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k] + wd_ * w[k];
      w[k] -= lr_ * v[k];
    }
  }
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::vector<std::vector<BoundingBox>> normalized_gts(const std::vector<const Scene*>& scenes) {
  std::vector<std::vector<BoundingBox>> out;
  out.reserve(scenes.size());
  for (const Scene* s : scenes) out.push_back(s->normalized_boxes());
  return out;
}

double validation_loss(const Model& model, const std::vector<Scene>& scenes, const LossParams& lp, int batch) {
  double sum = 0.0;
  const std::size_t step = static_cast<std::size_t>(std::max(1, batch));
  for (std::size_t start = 0; start < scenes.size(); start += step) {
    const std::size_t end = std::min(scenes.size(), start + step);
    std::vector<cv::Mat> images;
    std::vector<const Scene*> refs;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(scenes[i].image);
      refs.push_back(&scenes[i]);
    }
    const Predictions pred = model.infer(images_to_tensor(images, model.config().input_size));
    sum += total_loss(pred, normalized_gts(refs), model.anchors(), lp).total * static_cast<double>(end - start);
  }
  return sum / static_cast<double>(scenes.size());
}

void write_fault(const std::filesystem::path& out_dir, int epoch, std::size_t batch, std::uint64_t batch_seed,
                 const std::vector<const Scene*>& scenes, const std::string& message) {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["batch_index"] = batch;
  j["batch_seed"] = batch_seed;
  auto ids = nlohmann::json::array();
  for (const Scene* s : scenes) ids.push_back(s->id);
  j["scene_ids"] = std::move(ids);
  j["message"] = message;
  std::ofstream(out_dir / "fault.json") << j.dump(2) << "\n";
}

struct Lineage {
  std::optional<std::string> parent_id;
  std::vector<std::string> provenance;
};

TrainResult run_training(Model& model, const std::vector<Scene>& train_scenes,
                         const std::vector<Scene>& val_scenes, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir, const Lineage& lineage,
                         const std::function<void(const EpochRecord&)>& on_epoch) {
  if (train_scenes.empty()) throw ContractError("train: no training scenes");
  if (val_scenes.empty()) throw ContractError("train: no validation scenes");
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  result.last_checkpoint = out_dir / "last.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";
  auto info_for = [&](int epoch, double val_map) {
    CheckpointInfo info;
    info.parent_id = lineage.parent_id;
    info.provenance = lineage.provenance;
    info.model_seed = model.seed();
    info.epoch = epoch;
    info.val_map = val_map;
    info.train = cfg;
    return info;
  };

  if (cfg.epochs == 0) {
    result.last_id = save_checkpoint(result.last_checkpoint, model, info_for(0, 0.0));
    result.best_id = save_checkpoint(result.best_checkpoint, model, info_for(0, 0.0));
    return result;
  }

  std::ofstream log(out_dir / "metrics.tsv", std::ios::trunc);
  log << "# epoch\ttrain_loss\tval_loss\tval_mAP\n";

  const LossParams lp{cfg.alpha, cfg.neg_pos_ratio, 0.5};
  Sgd sgd(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  const std::size_t n = train_scenes.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const int input = model.config().input_size;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.set_training(true);
    sgd.set_learning_rate(cfg.rate_at(epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0, batch = 0; start < n; start += bs, ++batch) {
      const std::size_t end = std::min(n, start + bs);
      const std::uint64_t batch_seed = mix(mix(cfg.seed, static_cast<std::uint64_t>(epoch)), batch);
      std::vector<Scene> augmented;
      std::vector<const Scene*> refs;
      augmented.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Scene& s = train_scenes[order[i]];
        augmented.push_back(cfg.augment ? augment(s, cfg.recipe, mix(batch_seed, i - start)) : s);
      }
      std::vector<cv::Mat> images;
      for (const auto& s : augmented) {
        images.push_back(s.image);
        refs.push_back(&s);
      }

      Predictions grad;
      LossBreakdown loss;
      try {
        const Predictions pred = model.forward(images_to_tensor(images, input));
        loss = total_loss(pred, normalized_gts(refs), model.anchors(), lp, &grad);
        if (!std::isfinite(loss.total)) throw TrainingFault("non-finite training loss", 0);
      } catch (const TrainingFault& e) {
        const std::string msg = fmt::format("epoch {} batch {} (seed {}): {}", epoch, batch, batch_seed, e.what());
        write_fault(out_dir, epoch, batch, batch_seed, refs, msg);
        throw TrainingFault(msg, static_cast<long>(batch));
      }
      model.parameters().zero_grad();
      model.backward(grad);
      sgd.step(model.parameters());
      loss_sum += loss.total * static_cast<double>(end - start);
    }

    model.set_training(false);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_loss = validation_loss(model, val_scenes, lp, cfg.batch_size);
    rec.val_map = evaluate(model, val_scenes).map;
    result.log.push_back(rec);
    log << fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\n", rec.epoch, rec.train_loss, rec.val_loss, rec.val_map);
    log.flush();

    result.last_id = save_checkpoint(result.last_checkpoint, model, info_for(epoch, rec.val_map));
    if (rec.val_map > result.best_map) {
      result.best_map = rec.val_map;
      result.best_id = save_checkpoint(result.best_checkpoint, model, info_for(epoch, rec.val_map));
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace

TrainResult train(Model& model, const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  return run_training(model, train_scenes, val_scenes, cfg, out_dir, {}, on_epoch);
}

TrainResult fine_tune(const std::filesystem::path& parent, const DenseSSDConfig& expected,
                      const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
                      const TrainConfig& cfg, const std::filesystem::path& out_dir,
                      const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate(true);
  Checkpoint ckpt = load_checkpoint(parent, expected);
  Lineage lineage;
  lineage.parent_id = ckpt.info.id;
  lineage.provenance = ckpt.info.provenance;
  lineage.provenance.push_back(ckpt.info.id);
  return run_training(ckpt.model, train_scenes, val_scenes, cfg, out_dir, lineage, on_epoch);
}

}  // namespace vialguard
