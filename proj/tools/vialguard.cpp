// vialguard command-line tool.
//
// Exit codes: 0 success, 1 usage error, 2 runtime fault.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "vialguard/errors.hpp"
#include "vialguard/nn.hpp"
#include "vialguard/pipeline.hpp"
#include "vialguard/sentinel.hpp"

namespace fs = std::filesystem;
using namespace vialguard;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t splitmix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

DenseSSDConfig named_config(const std::string& name) {
  if (name == "default") return DenseSSDConfig{};
  if (name == "tiny") return DenseSSDConfig::tiny();
  if (name == "micro") return DenseSSDConfig::micro();
  throw UsageError("unknown model config '" + name + "' (expected default, tiny or micro)");
}

// `best`/`last` name the checkpoints of a training run directory.
fs::path resolve_checkpoint(const std::string& ckpt, const fs::path& run) {
  if (ckpt == "best" || ckpt == "last") return run / (ckpt + ".ckpt");
  return ckpt;
}

// A split name (`train`, `val`, `all`) inside the dataset directory, a
// dataset directory (its all.manifest), or a manifest file.
fs::path resolve_manifest(const std::string& data, const fs::path& dataset) {
  if (data == "train" || data == "val" || data == "all") return dataset / (data + ".manifest");
  const fs::path p(data);
  if (fs::is_directory(p)) return p / "all.manifest";
  return p;
}

std::vector<Scene> load_split(const fs::path& manifest) {
  return load_dataset(DatasetManifest::read(manifest));
}

void write_subset_manifest(const DatasetManifest& all, const std::vector<Scene>& subset, const fs::path& path) {
  DatasetManifest m = all;
  m.entries.clear();
  for (const auto& s : subset) {
    m.entries.push_back({fs::path("images") / (s.id + ".png"), fs::path("annotations") / (s.id + ".txt")});
  }
  m.write(path);
}

std::vector<fs::path> collect_images(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> dir;
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.is_regular_file() && e.path().extension() == ".png") dir.push_back(e.path());
      }
      std::sort(dir.begin(), dir.end());
      out.insert(out.end(), dir.begin(), dir.end());
    } else {
      out.emplace_back(in);
    }
  }
  return out;
}

// --- config file -----------------------------------------------------------

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::map<std::string, std::string> kv;
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(fmt::format("{}:{}: expected key=value", path.string(), lineno));
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError(fmt::format("{}:{}: empty key", path.string(), lineno));
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

bool has_flag(const std::vector<std::string>& args, const std::string& name) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == name || a.rfind(name + "=", 0) == 0; });
}

// Command-line values win; config keys fill in the options of the chosen
// subcommand that were not given.
std::vector<std::string> apply_config(CLI::App& app, std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config-file" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config-file=", 0) == 0) path = args[i].substr(14);
  }
  if (path.empty()) {
    if (const char* env = std::getenv("VIALGUARD_CONFIG"); env && *env) path = env;
  }
  if (path.empty()) return args;

  CLI::App* sub = nullptr;
  for (const auto& a : args) {
    if (auto* s = app.get_subcommand_no_throw(a)) {
      sub = s;
      break;
    }
  }
  if (!sub) return args;
  for (const auto& [key, value] : read_config_file(path)) {
    const std::string flag = "--" + key;
    if (sub->get_option_no_throw(flag) == nullptr) {
      bool known = false;
      for (auto* other : app.get_subcommands([](CLI::App*) { return true; })) {
        known = known || other->get_option_no_throw(flag) != nullptr;
      }
      if (!known) std::cerr << "warning: ignoring unknown config key '" << key << "'\n";
      continue;
    }
    if (!has_flag(args, flag)) args.push_back(flag + "=" + value);
  }
  return args;
}

// --- subcommands -------------------------------------------------------------

struct GenerateArgs {
  int scenes = 200;
  std::uint64_t seed = 0;
  std::string out;
  int angle = 45;
  std::string fill = "empty";
  int size = 150;
  double val_fraction = 0.2;
};

int run_generate(const GenerateArgs& a) {
  GeneratorConfig cfg;
  cfg.width = cfg.height = a.size;
  cfg.camera_angle_deg = a.angle;
  if (a.fill == "solution") {
    cfg.vial_fill = VialFill::solution;
  } else if (a.fill != "empty") {
    throw UsageError("--fill must be empty or solution");
  }
  cfg.validate();
  if (a.scenes < 1) throw UsageError("--scenes must be at least 1");

  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(a.scenes));
  for (int i = 0; i < a.scenes; ++i) {
    Scene s = synthesize_scene(cfg, splitmix(a.seed, static_cast<std::uint64_t>(i)));
    s.id = fmt::format("scene_{:05d}", i);
    scenes.push_back(std::move(s));
  }
  const fs::path out(a.out);
  fs::create_directories(out / "images");
  fs::create_directories(out / "annotations");
  const DatasetManifest all = save_dataset(scenes, out, "all.manifest", a.seed);
  auto [train_set, val_set] = split(scenes, a.val_fraction, a.seed);
  write_subset_manifest(all, train_set, out / "train.manifest");
  write_subset_manifest(all, val_set, out / "val.manifest");
  std::cout << fmt::format("wrote {} scenes to {} ({} train, {} val)\n", scenes.size(), out.string(),
                           train_set.size(), val_set.size());
  return 0;
}

struct TrainArgs {
  std::string dataset = "data";
  std::string out = "run";
  std::string model = "tiny";
  std::string from;
  std::uint64_t model_seed = 0;
  TrainConfig cfg = TrainConfig::desk_scale();
  bool no_augment = false;
  std::string recipe;
};

int run_train(TrainArgs a) {
  a.cfg.augment = !a.no_augment;
  if (!a.recipe.empty()) a.cfg.recipe = AugmentRecipe::parse(a.recipe);
  const fs::path dataset(a.dataset);
  const auto train_scenes = load_split(dataset / "train.manifest");
  const auto val_scenes = load_split(dataset / "val.manifest");
  std::cout << fmt::format("train {} scenes, val {} scenes\n", train_scenes.size(), val_scenes.size());

  auto report = [](const EpochRecord& r) {
    std::cout << fmt::format("epoch {:4d}  train_loss {:.4f}  val_loss {:.4f}  val_mAP {:.4f}\n", r.epoch,
                             r.train_loss, r.val_loss, r.val_map)
              << std::flush;
  };
  TrainResult result;
  if (!a.from.empty()) {
    const DenseSSDConfig expected = load_checkpoint(a.from).model.config();
    result = fine_tune(a.from, expected, train_scenes, val_scenes, a.cfg, a.out, report);
  } else {
    Model model = build_model(named_config(a.model), a.model_seed);
    result = train(model, train_scenes, val_scenes, a.cfg, a.out, report);
  }
  std::cout << fmt::format("best val_mAP {:.4f}  best {}  last {}\n", result.best_map,
                           result.best_checkpoint.string(), result.last_checkpoint.string());
  return 0;
}

struct EvaluateArgs {
  std::string ckpt = "best";
  std::string run = "run";
  std::string data = "val";
  std::string dataset = "data";
  double iou = 0.5;
  std::string report;
};

int run_evaluate(const EvaluateArgs& a) {
  const fs::path ckpt = resolve_checkpoint(a.ckpt, a.run);
  const Checkpoint cp = load_checkpoint(ckpt);
  const auto scenes = load_split(resolve_manifest(a.data, a.dataset));
  const EvalReport report = evaluate(cp.model, scenes, a.iou);
  const fs::path out = a.report.empty() ? ckpt.parent_path() / "eval_report.json" : fs::path(a.report);
  write_report(out, report);
  std::cout << fmt::format("mAP {:.4f}  AUC {:.4f}", report.map, report.auc);
  for (const auto& [cls, m] : report.per_class) {
    std::cout << fmt::format("  AP[{}] {:.4f}", to_string(cls), m.ap);
  }
  std::cout << fmt::format("\nreport written to {}\n", out.string());
  return 0;
}

struct DetectArgs {
  std::string ckpt = "best";
  std::string run = "run";
  std::vector<std::string> inputs;
  double score = 0.3;
  double nms_iou = 0.45;
};

int run_detect(const DetectArgs& a) {
  const Checkpoint cp = load_checkpoint(resolve_checkpoint(a.ckpt, a.run));
  NmsParams nms;
  nms.iou_threshold = a.nms_iou;
  for (const auto& path : collect_images(a.inputs)) {
    const cv::Mat image = read_png(path);
    std::cout << format_detections(path.stem().string(), detect(cp.model, image, nms, a.score));
  }
  return 0;
}

struct WatchArgs {
  std::string ckpt = "best";
  std::string run = "run";
  std::string frames;
  std::string endpoint;
  std::string socket;
  std::string token;
  std::string log = "incidents.jsonl";
  double score = 0.3;
  AlertPolicy policy;
  RetryPolicy retry;
  bool auto_resume = false;
  bool replay = false;
};

std::unique_ptr<Transport> make_transport(const WatchArgs& a) {
  if (!a.endpoint.empty() == !a.socket.empty()) throw UsageError("give exactly one of --endpoint or --socket");
  if (!a.endpoint.empty()) {
    HttpEndpoint ep = HttpEndpoint::parse(a.endpoint);
    ep.bearer_token = a.token;
    return std::make_unique<HttpTransport>(ep);
  }
  const auto colon = a.socket.rfind(':');
  if (colon == std::string::npos) throw UsageError("--socket expects host:port");
  int port = 0;
  try {
    port = std::stoi(a.socket.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--socket expects host:port");
  }
  return std::make_unique<SocketTransport>(a.socket.substr(0, colon), port);
}

int run_watch(const WatchArgs& a) {
  a.policy.validate();
  auto transport = make_transport(a);

  if (a.replay) {
    const auto events = failed_events(a.log);
    IncidentLog log(a.log);
    int failed = 0;
    for (const auto& e : events) {
      const DeliveryResult r = dispatch_alert(e, *transport, a.retry, &log);
      std::cout << fmt::format("replay {} -> {} (attempts {})\n", e.frame_id, to_string(r.status), r.attempts);
      failed += r.status == DeliveryStatus::failed;
    }
    log.flush();
    return failed == 0 ? 0 : 2;
  }

  if (a.frames.empty()) throw UsageError("--frames is required");
  const Checkpoint cp = load_checkpoint(resolve_checkpoint(a.ckpt, a.run));
  DirectoryFrameSource source(a.frames);
  IncidentLog log(a.log);
  ControlChannel control;

  // Halt signals go to stdout for the hardware controller; operator
  // commands (`resume`, `stop`) arrive on stdin. Without an operator (stdin
  // closed) the first halt ends the watch.
  std::atomic<bool> stdin_closed = false;
  std::atomic<std::size_t> resumes = 0;
  std::thread halts([&] {
    std::size_t seen = 0;
    while (true) {
      if (control.wait_for_halt(seen, std::chrono::milliseconds(100))) {
        const auto all = control.halts();
        for (; seen < all.size(); ++seen) std::cout << "HALT " << all[seen] << std::endl;
        if (a.auto_resume) {
          control.resume();
        } else if (stdin_closed) {
          control.stop();
        }
      } else if (control.stopped()) {
        return;
      }
    }
  });
  if (!a.auto_resume) {
    std::thread([&] {
      for (std::string cmd; std::getline(std::cin, cmd);) {
        if (cmd == "resume") {
          ++resumes;
          control.resume();
        } else if (cmd == "stop") {
          control.stop();
          return;
        }
      }
      stdin_closed = true;
      if (control.halts().size() > resumes) control.stop();
    }).detach();
  }

  const WatchStats stats = watch(source, model_detector(cp.model, a.score), a.policy, *transport, control, log,
                                 a.retry);
  control.stop();
  halts.join();
  for (const auto& t : stats.transitions) std::cerr << t << '\n';
  for (const auto& d : stats.deliveries) {
    std::cout << fmt::format("alert via {}: {} (attempts {}, {:.3f} s){}\n", d.transport, to_string(d.status),
                             d.attempts, d.latency.count(), d.last_error.empty() ? "" : " " + d.last_error);
  }
  std::cout << fmt::format("frames {}  continues {}  halts {}  alerts {}  skipped {}\n", stats.frames,
                           stats.continues, stats.halts, stats.alerts, stats.skipped);
  const bool any_failed = std::any_of(stats.deliveries.begin(), stats.deliveries.end(),
                                      [](const DeliveryResult& d) { return d.status == DeliveryStatus::failed; });
  return any_failed ? 2 : 0;
}

struct BenchArgs {
  std::string config = "default";
  int input_size = 0;
  bool layers = false;
  int timing_runs = 0;
};

int run_bench(const BenchArgs& a) {
  DenseSSDConfig cfg = named_config(a.config);
  if (a.input_size > 0) cfg.input_size = a.input_size;
  const Model model = build_model(cfg, 0);
  const int size = cfg.input_size;
  if (a.layers) {
    for (const auto& l : model.layer_counts(size)) {
      std::cout << fmt::format("{:<40} {:>12} {:>16}\n", l.path, l.parameters, l.macs);
    }
  }
  std::cout << fmt::format("config {}  input {}x{}  anchors {}\n", a.config, size, size, model.anchors().size());
  std::cout << fmt::format("parameters {}\n", count_parameters(model));
  std::cout << fmt::format("MACs {}\n", count_macs(model, size));
  if (a.timing_runs > 0) {
    const nn::Tensor input({1, 3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)}, 0.0);
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < a.timing_runs; ++i) (void)model.infer(input);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
    std::cout << fmt::format("forward {:.1f} ms/image\n", 1000.0 * dt.count() / a.timing_runs);
  }
  return 0;
}

struct VizArgs {
  std::string ckpt;
  std::string run = "run";
  std::string config = "tiny";
  std::uint64_t seed = 0;
  std::string image;
  std::string out = "viz";
};

int run_viz(const VizArgs& a) {
  std::optional<Model> model;
  if (!a.ckpt.empty()) {
    model.emplace(load_checkpoint(resolve_checkpoint(a.ckpt, a.run)).model);
  } else {
    model.emplace(build_model(named_config(a.config), a.seed));
  }
  const cv::Mat rgb = read_png(a.image);
  const int size = model->config().input_size;
  const auto maps = extract_feature_maps(*model, images_to_tensor({rgb}, size));

  const fs::path out(a.out);
  fs::create_directories(out);
  cv::Mat shown;
  cv::resize(rgb, shown, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  std::vector<cv::Mat> tiles{shown};
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    cv::Mat gray(static_cast<int>(m.dim(0)), static_cast<int>(m.dim(1)), CV_8UC1);
    for (int y = 0; y < gray.rows; ++y) {
      for (int x = 0; x < gray.cols; ++x) {
        gray.at<std::uint8_t>(y, x) =
            cv::saturate_cast<std::uint8_t>(255.0 * m[static_cast<std::size_t>(y * gray.cols + x)]);
      }
    }
    cv::Mat big, bgr, color;
    cv::resize(gray, big, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
    cv::applyColorMap(big, bgr, cv::COLORMAP_JET);
    cv::cvtColor(bgr, color, cv::COLOR_BGR2RGB);
    write_png(out / fmt::format("fb{}.png", i + 1), color);
    tiles.push_back(color);
  }
  cv::Mat strip;
  cv::hconcat(tiles, strip);
  write_png(out / "feature_maps.png", strip);
  std::cout << fmt::format("wrote {} feature maps to {}\n", maps.size(), out.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  nn::ensure_reliable_blas(argv);

  CLI::App app{"vial-placement failure detection and halt-and-alert", "vialguard"};
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config-file", config_file, "key=value defaults for the subcommand (env VIALGUARD_CONFIG)");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Synthesize a labelled scene dataset");
  g->add_option("--scenes", gen.scenes, "Number of scenes")->capture_default_str();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--angle", gen.angle, "Camera angle in degrees (30, 45, 60, 90)")->capture_default_str();
  g->add_option("--fill", gen.fill, "Vial fill: empty or solution")->capture_default_str();
  g->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  g->add_option("--val-fraction", gen.val_fraction, "Held-out fraction")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a detector (or fine-tune with --from)");
  t->add_option("--data", tr.dataset, "Dataset directory with train/val manifests")->capture_default_str();
  t->add_option("--out", tr.out, "Run directory for checkpoints and metrics")->capture_default_str();
  t->add_option("--model", tr.model, "Model config: default, tiny or micro")->capture_default_str();
  t->add_option("--from", tr.from, "Parent checkpoint to fine-tune");
  t->add_option("--model-seed", tr.model_seed, "Weight initialization seed")->capture_default_str();
  t->add_option("--seed", tr.cfg.seed, "Shuffle and augmentation seed")->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  t->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
  t->add_option("--lr-milestones", tr.cfg.lr_milestones, "Epochs at which the rate is multiplied by --lr-decay")
      ->delimiter(',')
      ->capture_default_str();
  t->add_option("--lr-decay", tr.cfg.lr_decay)->capture_default_str();
  t->add_option("--wd", tr.cfg.weight_decay)->capture_default_str();
  t->add_option("--momentum", tr.cfg.momentum)->capture_default_str();
  t->add_option("--batch", tr.cfg.batch_size)->capture_default_str();
  t->add_option("--alpha", tr.cfg.alpha, "Localization loss weight")->capture_default_str();
  t->add_option("--neg-pos-ratio", tr.cfg.neg_pos_ratio)->capture_default_str();
  t->add_flag("--no-augment", tr.no_augment);
  t->add_option("--recipe", tr.recipe, "Augmentation recipe, e.g. flip:0.5,hue:1:-18:18");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint on a dataset split");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint path, or best/last of --run")->capture_default_str();
  e->add_option("--run", ev.run, "Run directory")->capture_default_str();
  e->add_option("--data", ev.data, "Split name (train, val, all), dataset directory or manifest")
      ->capture_default_str();
  e->add_option("--dataset", ev.dataset, "Dataset directory for split names")->capture_default_str();
  e->add_option("--iou", ev.iou, "IoU threshold for a true positive")->capture_default_str();
  e->add_option("--report", ev.report, "Report path (default: eval_report.json beside the checkpoint)");

  DetectArgs de;
  auto* d = app.add_subcommand("detect", "Print detections for images");
  d->add_option("--ckpt", de.ckpt)->capture_default_str();
  d->add_option("--run", de.run)->capture_default_str();
  d->add_option("--score", de.score, "Score threshold")->capture_default_str();
  d->add_option("--nms-iou", de.nms_iou)->capture_default_str();
  d->add_option("inputs", de.inputs, "PNG files or directories")->required();

  WatchArgs wa;
  auto* w = app.add_subcommand("watch", "Monitor a frame directory and halt/alert on failures");
  w->add_option("--ckpt", wa.ckpt)->capture_default_str();
  w->add_option("--run", wa.run)->capture_default_str();
  w->add_option("--frames", wa.frames, "Directory of PNG frames, read in name order");
  w->add_option("--endpoint", wa.endpoint, "Webhook URL, http://host[:port][/path]");
  w->add_option("--socket", wa.socket, "Stream socket host:port");
  w->add_option("--token", wa.token, "Bearer token for the webhook");
  w->add_option("--log", wa.log, "Incident log (JSON lines)")->capture_default_str();
  w->add_option("--score", wa.score, "Detection score threshold")->capture_default_str();
  w->add_option("--threshold", wa.policy.failure_score_threshold, "Failure score that qualifies")
      ->capture_default_str();
  w->add_option("--frames-required", wa.policy.consecutive_frames_required)->capture_default_str();
  w->add_option("--cooldown", wa.policy.cooldown_seconds, "Seconds between alerts")->capture_default_str();
  w->add_option("--attempts", wa.retry.max_attempts)->capture_default_str();
  w->add_option("--backoff", wa.retry.initial_backoff_seconds)->capture_default_str();
  w->add_flag("--auto-resume", wa.auto_resume, "Resume immediately after each halt");
  w->add_flag("--replay", wa.replay, "Re-send the failed alerts recorded in --log and exit");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Report parameter and MAC counts");
  b->add_option("--config", be.config, "Model config: default, tiny or micro")->capture_default_str();
  b->add_option("--input-size", be.input_size, "Override the input size");
  b->add_flag("--layers", be.layers, "Per-layer breakdown");
  b->add_option("--time", be.timing_runs, "Time this many single-image forward passes");

  VizArgs vz;
  auto* v = app.add_subcommand("viz", "Render feature-block activation maps for an image");
  v->add_option("--ckpt", vz.ckpt, "Checkpoint (default: untrained --config model)");
  v->add_option("--run", vz.run)->capture_default_str();
  v->add_option("--config", vz.config)->capture_default_str();
  v->add_option("--seed", vz.seed)->capture_default_str();
  v->add_option("--image", vz.image)->required();
  v->add_option("--out", vz.out)->capture_default_str();

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = apply_config(app, std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 1;
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*e) return run_evaluate(ev);
    if (*d) return run_detect(de);
    if (*w) return run_watch(wa);
    if (*b) return run_bench(be);
    if (*v) return run_viz(vz);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n' << app.help();
    return 1;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const RecipeError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "fatal: " << err.what() << '\n';
    return 2;
  }
  return 1;
}
