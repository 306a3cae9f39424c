#include <array>
#include <cstring>
#include <fstream>

#include <json.hpp>
#include <sodium.h>

#include "vialguard/errors.hpp"
#include "vialguard/pipeline.hpp"

namespace vialguard {

namespace {

using nlohmann::ordered_json;

constexpr std::array<char, 8> kMagic{'V', 'G', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

ordered_json config_json(const DenseSSDConfig& c) {
  return {{"input_size", c.input_size},
          {"input_channels", c.input_channels},
          {"stem_channels", c.stem_channels},
          {"growth_rate", c.growth_rate},
          {"bottleneck_factor", c.bottleneck_factor},
          {"db_layer_counts", c.db_layer_counts},
          {"pyramid_grids", c.pyramid_grids},
          {"head_boxes_per_location", c.head_boxes_per_location},
          {"num_classes", c.num_classes},
          {"fb_channels", c.fb_channels},
          {"anchor_s_min", c.anchor_s_min},
          {"anchor_s_max", c.anchor_s_max}};
}

DenseSSDConfig config_from_json(const ordered_json& j) {
  DenseSSDConfig c;
  c.input_size = j.at("input_size");
  c.input_channels = j.at("input_channels");
  c.stem_channels = j.at("stem_channels");
  c.growth_rate = j.at("growth_rate");
  c.bottleneck_factor = j.at("bottleneck_factor");
  c.db_layer_counts = j.at("db_layer_counts").get<std::vector<int>>();
  c.pyramid_grids = j.at("pyramid_grids").get<std::vector<int>>();
  c.head_boxes_per_location = j.at("head_boxes_per_location").get<std::vector<int>>();
  c.num_classes = j.at("num_classes");
  c.fb_channels = j.at("fb_channels");
  c.anchor_s_min = j.at("anchor_s_min");
  c.anchor_s_max = j.at("anchor_s_max");
  return c;
}

ordered_json train_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"lr_milestones", t.lr_milestones}, {"lr_decay", t.lr_decay},
          {"weight_decay", t.weight_decay}, {"momentum", t.momentum},
          {"batch_size", t.batch_size},       {"epochs", t.epochs},             {"alpha", t.alpha},
          {"seed", t.seed},                   {"neg_pos_ratio", t.neg_pos_ratio}, {"augment", t.augment},
          {"recipe", t.recipe.id}};
}

TrainConfig train_from_json(const ordered_json& j) {
  TrainConfig t;
  t.learning_rate = j.at("learning_rate");
  t.lr_milestones = j.at("lr_milestones").get<std::vector<int>>();
  t.lr_decay = j.at("lr_decay");
  t.weight_decay = j.at("weight_decay");
  t.momentum = j.at("momentum");
  t.batch_size = j.at("batch_size");
  t.epochs = j.at("epochs");
  t.alpha = j.at("alpha");
  t.seed = j.at("seed");
  t.neg_pos_ratio = j.at("neg_pos_ratio");
  t.augment = j.at("augment");
  t.recipe.id = j.at("recipe");
  return t;
}

std::string hex(const unsigned char* bytes, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    out += digits[bytes[i] >> 4];
    out += digits[bytes[i] & 15];
  }
  return out;
}

// Names the first field where the two configs differ, or returns empty.
std::string first_difference(const DenseSSDConfig& have, const DenseSSDConfig& want) {
  const ordered_json a = config_json(have), b = config_json(want);
  for (const auto& [key, value] : a.items()) {
    if (value != b.at(key)) {
      return key + " (checkpoint " + value.dump() + ", expected " + b.at(key).dump() + ")";
    }
  }
  return {};
}

}  // namespace

std::string save_checkpoint(const std::filesystem::path& path, const Model& model, CheckpointInfo info) {
  if (sodium_init() < 0) throw CheckpointError("libsodium failed to initialize");
  const auto& params = model.parameters().all();

  ordered_json header;
  header["format_version"] = kFormatVersion;
  header["parent_id"] = info.parent_id ? ordered_json(*info.parent_id) : ordered_json(nullptr);
  header["provenance"] = info.provenance;
  header["model_seed"] = info.model_seed;
  header["epoch"] = info.epoch;
  header["val_map"] = info.val_map;
  header["config"] = config_json(model.config());
  header["train"] = train_json(info.train);
  auto index = ordered_json::array();
  for (const auto& p : params) {
    index.push_back({{"path", p.path}, {"shape", p.value.shape()}, {"trainable", p.trainable}});
  }
  header["tensors"] = std::move(index);

  // Content id over the id-less header and the raw weights.
  crypto_generichash_state state;
  crypto_generichash_init(&state, nullptr, 0, 16);
  const std::string pre = header.dump();
  crypto_generichash_update(&state, reinterpret_cast<const unsigned char*>(pre.data()), pre.size());
  for (const auto& p : params) {
    crypto_generichash_update(&state, reinterpret_cast<const unsigned char*>(p.value.data()),
                              p.value.size() * sizeof(double));
  }
  unsigned char digest[16];
  crypto_generichash_final(&state, digest, sizeof digest);
  const std::string id = hex(digest, sizeof digest);
  header["id"] = id;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) {
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
  return id;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  std::uint64_t len = 0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || magic != kMagic) throw CheckpointError(path.string() + " is not a checkpoint");
  if (len > (1u << 26)) throw CheckpointError(path.string() + ": header length out of range");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(path.string() + ": truncated header");

  ordered_json header;
  try {
    header = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  try {
    if (header.at("format_version") != kFormatVersion) {
      throw CheckpointError(path.string() + ": unsupported format version " + header.at("format_version").dump());
    }
    CheckpointInfo info;
    info.id = header.at("id");
    if (!header.at("parent_id").is_null()) info.parent_id = header.at("parent_id").get<std::string>();
    info.provenance = header.at("provenance").get<std::vector<std::string>>();
    info.model_seed = header.at("model_seed");
    info.epoch = header.at("epoch");
    info.val_map = header.at("val_map");
    info.train = train_from_json(header.at("train"));
    const DenseSSDConfig cfg = config_from_json(header.at("config"));

    Checkpoint ckpt{info, Model(cfg, info.model_seed)};
    auto& params = ckpt.model.parameters().all();
    const auto& index = header.at("tensors");
    if (index.size() != params.size()) {
      throw CheckpointError(path.string() + ": tensor count " + std::to_string(index.size()) +
                            " does not match the model's " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = index[i];
      if (entry.at("path") != params[i].path ||
          entry.at("shape").get<std::vector<std::size_t>>() != params[i].value.shape()) {
        throw CheckpointError(path.string() + ": tensor " + entry.at("path").get<std::string>() +
                              " does not match the model layout");
      }
      in.read(reinterpret_cast<char*>(params[i].value.data()),
              static_cast<std::streamsize>(params[i].value.size() * sizeof(double)));
      if (!in) throw CheckpointError(path.string() + ": truncated tensor data at " + params[i].path);
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": invalid model config: " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const DenseSSDConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  const std::string diff = first_difference(ckpt.model.config(), expected);
  if (!diff.empty()) throw CheckpointError(path.string() + ": config mismatch in " + diff);
  return ckpt;
}

}  // namespace vialguard
