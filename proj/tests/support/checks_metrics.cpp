#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "checks.hpp"
#include "oracles.hpp"
#include "vialguard/metrics.hpp"

namespace checks {

using namespace vialguard;

namespace {

// Sorted ranking with at most n_gt true positives.
std::vector<RankedDetection> random_ranking(std::mt19937_64& rng, int max_len, int n_gt) {
  std::uniform_int_distribution<int> len(0, max_len);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<RankedDetection> out(static_cast<std::size_t>(len(rng)));
  int tps = 0;
  const double p_tp = unit(rng);
  for (auto& d : out) {
    d.score = unit(rng);
    d.is_tp = tps < n_gt && unit(rng) < p_tp;
    tps += d.is_tp;
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

}  // namespace

Result average_precision_oracle(int instances, std::uint64_t seed) {
  Result r;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> gts(0, 10);
  for (int i = 0; i < instances; ++i, ++r.instances) {
    const int n_gt = gts(rng);
    const auto ranked = random_ranking(rng, 20, n_gt);
    const double got = average_precision(ranked, n_gt);
    const double want = oracle::average_precision(ranked, n_gt);
    r.worst = std::max(r.worst, std::abs(got - want));
    if (std::abs(got - want) > 1e-9) {
      r.fail(fmt::format("instance {}: AP {} vs oracle {} (n_gt {}, {} dets)", i, got, want, n_gt, ranked.size()));
    }
  }
  if (r.ok) r.detail = fmt::format("{} ranked lists, max |diff| {:.2e}", r.instances, r.worst);
  return r;
}

Result detection_matching_oracle(int instances, std::uint64_t seed) {
  Result r;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0), shift(-0.06, 0.06);
  int total_tp = 0;
  for (int i = 0; i < instances; ++i, ++r.instances) {
    std::vector<BoundingBox> gts;
    for (int k = 0; k < 5; ++k) {
      BoundingBox g = oracle::random_box(rng, 0.1, 0.4);
      g.label = unit(rng) < 0.5 ? Label::success : Label::failure;
      gts.push_back(g);
    }
    std::vector<Detection> dets;
    for (int k = 0; k < 10; ++k) {
      Detection d = gts[rng() % gts.size()];
      const double dx = shift(rng), dy = shift(rng);
      d.x_min += dx;
      d.x_max += dx + shift(rng) / 2;
      d.y_min += dy;
      d.y_max += dy + shift(rng) / 2;
      if (unit(rng) < 0.2) d.label = d.label == Label::success ? Label::failure : Label::success;
      d.score = unit(rng);
      dets.push_back(d);
    }
    std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return *a.score > *b.score; });
    const auto got = match_detections_to_gt(dets, gts, 0.5);
    const auto want = oracle::exhaustive_match(dets, gts, 0.5);
    const auto n_got = std::count(got.begin(), got.end(), true);
    const auto n_want = std::count(want.begin(), want.end(), true);
    total_tp += static_cast<int>(n_want);
    if (got != want || n_got != n_want) {
      r.fail(fmt::format("instance {}: {} TP vs exhaustive oracle {}", i, n_got, n_want));
    }
  }
  if (r.ok) {
    r.detail = fmt::format("{} instances of 10 dets / 5 gts agree ({} TP in total)", r.instances, total_tp);
  }
  return r;
}

Result ap_prepend_monotonicity(int instances, std::uint64_t seed) {
  Result r;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> gts(1, 10);
  for (int i = 0; i < instances; ++i, ++r.instances) {
    const int n_gt = gts(rng);
    auto ranked = random_ranking(rng, 20, n_gt - 1);
    const double before = average_precision(ranked, n_gt);
    const double top = ranked.empty() ? 1.0 : ranked.front().score + 1.0;
    ranked.insert(ranked.begin(), RankedDetection{top, true});
    const double after = average_precision(ranked, n_gt);
    if (after < before || std::abs(after - oracle::average_precision(ranked, n_gt)) > 1e-9) {
      r.fail(fmt::format("instance {}: AP {} -> {} after prepending a TP", i, before, after));
    }
  }
  if (r.ok) r.detail = fmt::format("{} rankings never lose AP", r.instances);
  return r;
}

}  // namespace checks
