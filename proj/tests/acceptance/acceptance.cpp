// Acceptance checks 1-8. One PASS/FAIL line per criterion; exit status is
// nonzero when any fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mhenet/checkpoint.hpp"
#include "mhenet/cli.hpp"
#include "mhenet/data.hpp"
#include "mhenet/gradcheck.hpp"
#include "mhenet/loss.hpp"
#include "mhenet/metrics.hpp"
#include "mhenet/optim.hpp"
#include "mhenet/train.hpp"
#include "oracles.hpp"

using namespace mhenet;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances and budgets
constexpr double kGradSuiteBudgetSec = 300;
constexpr double kSobelTol = 1e-12;
constexpr double kGateSumTol = 1e-6;
constexpr double kConvexTol = 1e-9;
constexpr std::size_t kGatePixels = 10000;
constexpr double kMetricTol = 1e-9;
constexpr double kMetricBudgetSec = 600;
constexpr double kComplementWfmMax = 1e-9;  // "~0"
constexpr double kComplementLowMax = 0.05;  // "low" for E and S
constexpr double kOverfitTotal = 0.05;
constexpr double kOverfitIou = 0.02;
constexpr double kReductionRatio = 0.5;
constexpr double kLearningBudgetSec = 1800;

// ---- criterion 6 setup
constexpr int kDeskSize = 64;
constexpr int kDeskChannels = 16;
constexpr int kDeskSamples = 64;
constexpr double kDeskLr = 1e-3;
constexpr int kOverfitSteps = 500;
constexpr int kTrainSteps = 200;
constexpr int kTestSamples = 16;
constexpr std::uint64_t kTrainSeed = 1;
constexpr std::uint64_t kTestSeed = 2;

struct Result {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

fs::path work_dir(const std::string& name) {
  const fs::path p = fs::path("acceptance_work") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(s);
  for (Real& v : t.mutable_data()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

NetworkConfig small_net(int channels, int size) {
  NetworkConfig c;
  c.height = c.width = size;
  c.channels = channels;
  c.stem_width = 8;
  c.stage_widths = {8, 8, 16, 16};
  return c;
}

Batch synthetic_batch(int count, int size, std::uint64_t seed) {
  std::vector<Sample> samples;
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i), 77));
    samples.push_back(synth_sample(size, rng, "s" + std::to_string(i)));
  }
  return make_batch(samples);
}

Mask to_mask(const Tensor& t, int index) {
  Mask m(t.h(), t.w());
  const std::size_t plane = t.shape().plane();
  for (std::size_t i = 0; i < plane; ++i) m.v[i] = t.data()[index * plane + i];
  return m;
}

// ------------------------------------------------------------------ 1
Result criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  const std::set<std::string> required = {
      "cbr",  "lgconv",          "texture",    "semantic", "geometry",   "channel_attention",
      "crc_gate", "adfm",        "prediction_head", "bce", "iou",        "total_loss",
      "network"};
  std::set<std::string> seen;
  double block_worst = 0, net_err = -1;
  bool all = true;
  std::string failed;
  for (const auto& e : entries) {
    seen.insert(e.name);
    if (!e.passed()) {
      all = false;
      failed += " " + e.name;
    }
    if (e.name == "network") net_err = e.max_rel_error;
    else block_worst = std::max(block_worst, e.max_rel_error);
  }
  const bool complete = std::includes(seen.begin(), seen.end(), required.begin(), required.end());
  Result r;
  r.pass = all && complete && secs < kGradSuiteBudgetSec;
  r.detail = fmt("%zu checks, worst block %.2e (tol %.0e), network %.2e (tol %.0e), %.0f s",
                 entries.size(), block_worst, kBlockGradTolerance, net_err,
                 kNetworkGradTolerance, secs);
  if (!failed.empty()) r.detail += ", failed:" + failed;
  if (!complete) r.detail += ", suite incomplete";
  return r;
}

// ------------------------------------------------------------------ 2
Result criterion2() {
  Rng rng(2024);
  double worst = 0;
  for (int img = 0; img < 10; ++img) {
    const int c = 3, h = 17 + img, w = 23 - img;
    ParamStore store;
    Rng init(img);
    // eps = 0 gives the classical magnitude
    LgConv lg(ParamScope(store, init), c, Real(0));
    Tensor x = uniform_tensor(Shape{1, c, h, w}, rng, -1, 1);
    NoGradGuard guard;
    const Tensor y = lg.forward(x);
    for (int ch = 0; ch < c; ++ch) {
      oracle::Grid g(h, w);
      for (int r = 0; r < h; ++r)
        for (int q = 0; q < w; ++q) g(r, q) = x.at(0, ch, r, q);
      for (int r = 1; r + 1 < h; ++r)
        for (int q = 1; q + 1 < w; ++q)
          worst = std::max(worst, std::fabs(y.at(0, ch, r, q) - oracle::sobel_magnitude(g, r, q)));
    }
  }

  // 100 optimizer steps on a whole network must leave every basis untouched
  Network net(small_net(8, 64));
  const Tensor sh = sobel_horizontal(), sv = sobel_vertical();
  std::vector<std::pair<std::string, std::vector<Real>>> lg_before;
  for (const auto& e : net.params().entries()) {
    if (e.kind == ParamKind::Learnable && e.name.find("lgconv") != std::string::npos) {
      lg_before.emplace_back(e.name, std::vector<Real>(e.tensor.data().begin(), e.tensor.data().end()));
    }
  }
  Adam adam(net.params().learnable(), AdamOptions{1e-3});
  const Batch b = synthetic_batch(2, 64, 5);
  for (int step = 0; step < 100; ++step) {
    const ForwardOutput out = net.forward(b.rgb, b.depth, Mode::Train);
    backward(total_loss(out, b.gt).total);
    adam.step();
    adam.zero_grad();
  }
  int bases = 0, intact = 0;
  for (const auto& e : net.params().entries()) {
    const bool h = e.name.ends_with("basis_h"), v = e.name.ends_with("basis_v");
    if (!h && !v) continue;
    ++bases;
    const Tensor& ref = h ? sh : sv;
    intact += e.tensor.numel() == ref.numel() &&
              std::memcmp(e.tensor.data().data(), ref.data().data(),
                          ref.numel() * sizeof(Real)) == 0;
  }
  int moved = 0;
  for (const auto& [name, before] : lg_before) {
    const ParamEntry* e = net.params().find(name);
    moved += !std::equal(before.begin(), before.end(), e->tensor.data().begin());
  }
  Result r;
  r.pass = worst <= kSobelTol && bases > 0 && intact == bases &&
           moved == static_cast<int>(lg_before.size());
  r.detail = fmt("max |LGConv - Sobel| %.2e over 10 images (tol %.0e); %d/%d bases bitwise intact "
                 "after 100 steps, %d/%zu LGConv weights moved",
                 worst, kSobelTol, intact, bases, moved, lg_before.size());
  return r;
}

// ------------------------------------------------------------------ 3
Result criterion3() {
  std::size_t pixels = 0;
  double sum_err = 0, convex_err = 0;
  for (int trial = 0; pixels < kGatePixels; ++trial) {
    ParamStore store;
    Rng rng(Rng::derive(3, trial));
    AdfmLevel level(ParamScope(store, rng), 8);
    for (Tensor p : store.learnable()) {
      for (Real& v : p.mutable_data()) v = static_cast<Real>(rng.uniform(-1, 1));
    }
    const Tensor r = uniform_tensor(Shape{2, 8, 24, 24}, rng, -3, 3);
    const Tensor d = uniform_tensor(Shape{2, 8, 24, 24}, rng, -3, 3);
    NoGradGuard guard;
    const FuseResult f = level.fuse(r, d);
    const std::size_t plane = r.shape().plane();
    for (int n = 0; n < 2; ++n) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double wr = f.w_r.data()[n * plane + i], wd = f.w_d.data()[n * plane + i];
        sum_err = std::max(sum_err, std::fabs(wr + wd - 1));
        for (int c = 0; c < 8; ++c) {
          const std::size_t k = (static_cast<std::size_t>(n) * 8 + c) * plane + i;
          const double a = f.r_hat.data()[k], b = f.d_hat.data()[k], m = f.fused.data()[k];
          const double below = std::min(a, b) - m, above = m - std::max(a, b);
          convex_err = std::max({convex_err, below, above});
        }
        ++pixels;
      }
    }
  }
  Result r;
  r.pass = sum_err < kGateSumTol && convex_err <= kConvexTol;
  r.detail = fmt("%zu pixels: max |Wr+Wd-1| %.2e (tol %.0e), max convexity excess %.2e (tol %.0e)",
                 pixels, sum_err, kGateSumTol, convex_err, kConvexTol);
  return r;
}

// ------------------------------------------------------------------ 4
Result criterion4() {
  NetworkConfig cfg;  // 416 x 416
  cfg.channels = 16;
  Network net(cfg);
  Rng rng(4);
  // batch of two so that train-mode normalization keeps activations in range
  const Tensor rgb = uniform_tensor(Shape{2, 3, 416, 416}, rng, 0, 1);
  Tensor depth = uniform_tensor(Shape{2, 1, 416, 416}, rng, 0, 1);
  depth.set_requires_grad(true);

  std::vector<int> sizes;
  bool shapes_ok = true, range_ok = true;
  double max_grad[3] = {0, 0, 0};
  for (int head = 0; head < 3; ++head) {
    Tape::current().clear();
    depth.zero_grad();
    const ForwardOutput out = net.forward(rgb, depth, Mode::Train);
    if (head == 0) {
      for (int i = 0; i < 4; ++i) {
        sizes.push_back(out.rgb_features[i].h());
        shapes_ok = shapes_ok && out.rgb_features[i].w() == out.rgb_features[i].h() &&
                    out.depth_features[i].shape() == out.rgb_features[i].shape();
      }
      for (const Tensor* m : {&out.m1, &out.m2, &out.m3}) {
        shapes_ok = shapes_ok && m->shape() == Shape{2, 1, 416, 416};
        for (Real v : m->data()) range_ok = range_ok && v > 0 && v < 1;
      }
    }
    const Tensor& m = head == 0 ? out.m1 : head == 1 ? out.m2 : out.m3;
    backward(ops::sum(m));
    if (depth.has_grad()) {
      for (Real g : depth.grad()) max_grad[head] = std::max(max_grad[head], std::fabs(double(g)));
    }
  }
  shapes_ok = shapes_ok && sizes == std::vector<int>{104, 52, 26, 13};
  Result r;
  r.pass = shapes_ok && range_ok && max_grad[0] == 0 && max_grad[1] > 0 && max_grad[2] > 0;
  r.detail = fmt("pyramid %d/%d/%d/%d, masks 416x416 %s (0,1); max |dM/dDepth|: M1 %.1e, "
                 "M2 %.1e, M3 %.1e",
                 sizes.size() > 0 ? sizes[0] : -1, sizes.size() > 1 ? sizes[1] : -1,
                 sizes.size() > 2 ? sizes[2] : -1, sizes.size() > 3 ? sizes[3] : -1,
                 range_ok ? "inside" : "NOT inside", max_grad[0], max_grad[1], max_grad[2]);
  return r;
}

// ------------------------------------------------------------------ 5
Result criterion5() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst[4] = {0, 0, 0, 0};
  for (int pm = 0; pm < 512; ++pm) {
    Mask pred(3, 3);
    oracle::Grid op(3, 3);
    for (int i = 0; i < 9; ++i) pred.v[i] = op.v[i] = (pm >> i) & 1;
    for (int gm = 0; gm < 512; ++gm) {
      Mask gt(3, 3);
      oracle::Grid og(3, 3);
      for (int i = 0; i < 9; ++i) gt.v[i] = og.v[i] = (gm >> i) & 1;
      worst[0] = std::max(worst[0], std::fabs(mae(pred, gt) - oracle::mae(op, og)));
      worst[1] = std::max(worst[1],
                          std::fabs(weighted_fmeasure(pred, gt).value - oracle::weighted_f(op, og)));
      worst[2] = std::max(worst[2], std::fabs(mean_emeasure(pred, gt) - oracle::mean_e(op, og)));
      worst[3] = std::max(worst[3], std::fabs(smeasure(pred, gt) - oracle::s_measure(op, og)));
    }
  }
  // identity and complement on a centred square
  Mask gt(16, 16);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) gt.at(y, x) = 1;
  Mask comp(16, 16);
  for (std::size_t i = 0; i < gt.size(); ++i) comp.v[i] = 1 - gt.v[i];
  const ImageMetrics same = evaluate_pair(gt, gt);
  const ImageMetrics inv = evaluate_pair(comp, gt);
  const double secs = seconds_since(t0);
  const bool oracles_ok = std::all_of(worst, worst + 4, [](double e) { return e <= kMetricTol; });
  // the 1e-12 guards in the denominators keep scores a hair under 1
  auto near_one = [](double v) { return std::fabs(v - 1) <= kMetricTol; };
  const bool identity_ok =
      same.mae == 0 && near_one(same.wfm) && near_one(same.em) && near_one(same.sm);
  const bool complement_ok = inv.mae == 1 && inv.wfm <= kComplementWfmMax &&
                             inv.em <= kComplementLowMax && inv.sm <= kComplementLowMax;
  Result r;
  r.pass = oracles_ok && identity_ok && complement_ok && secs < kMetricBudgetSec;
  r.detail = fmt("262144 pairs, max oracle gap MAE %.1e wF %.1e E %.1e S %.1e (tol %.0e); "
                 "identity (%g, %.12g, %.12g, %.12g); complement (%g, %.2g, %.3g, %.3g); %.0f s",
                 worst[0], worst[1], worst[2], worst[3], kMetricTol, same.mae, same.wfm, same.em,
                 same.sm, inv.mae, inv.wfm, inv.em, inv.sm, secs);
  return r;
}

// ------------------------------------------------------------------ 6
TrainConfig desk_config(const fs::path& out, const Ablation& ablation) {
  TrainConfig t;
  t.net.height = t.net.width = kDeskSize;
  t.net.channels = kDeskChannels;
  t.net.ablation = ablation;
  t.net.seed = kTrainSeed;
  t.seed = kTrainSeed;
  t.synth_count = kDeskSamples;
  t.batch = 8;
  t.lr = kDeskLr;
  t.epochs = kTrainSteps * t.batch / kDeskSamples;
  t.max_steps = kTrainSteps;
  t.out_dir = out.string();
  return t;
}

double mean_test_smeasure(const std::string& checkpoint, const DatasetManifest& test) {
  auto net = load_checkpoint(checkpoint);
  NoGradGuard guard;
  double acc = 0;
  for (const auto& e : test.entries) {
    const Sample s = load_sample(test, e, kDeskSize, kDeskSize);
    const ForwardOutput out = net->forward(s.rgb, s.depth, Mode::Eval);
    acc += smeasure(to_mask(out.m2, 0), to_mask(s.gt, 0));
  }
  return acc / static_cast<double>(test.entries.size());
}

Result criterion6() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = work_dir("c6");

  // (b) 200 steps on the full synthetic set
  const TrainSummary full = train(desk_config(root / "full", Ablation{}));
  double tail = 0;
  for (std::size_t i = full.step_losses.size() - 10; i < full.step_losses.size(); ++i) {
    tail += full.step_losses[i];
  }
  tail /= 10;
  const double first = full.step_losses.front();
  const bool b_ok = full.steps == kTrainSteps && tail <= kReductionRatio * first;

  // (a) one sample, duplicated to a batch of two, no augmentation
  const DatasetManifest set = load_manifest((root / "full" / "synth").string());
  const Sample s0 = load_sample(set, set.entries.front(), kDeskSize, kDeskSize);
  const Batch one = make_batch({s0, s0});
  NetworkConfig ncfg = desk_config(root, Ablation{}).net;
  Network net(ncfg);
  Adam adam(net.params().learnable(), AdamOptions{kDeskLr});
  LossBreakdown last;
  for (int step = 0; step < kOverfitSteps; ++step) {
    const ForwardOutput out = net.forward(one.rgb, one.depth, Mode::Train);
    last = total_loss(out, one.gt);
    backward(last.total);
    adam.step();
    adam.zero_grad();
  }
  const double iou_sum = last.iou[0] + last.iou[1] + last.iou[2];
  const bool a_ok = last.total_value < kOverfitTotal && iou_sum < kOverfitIou;

  // (c) RGB-only ablation (GHEM and ADFM off, depth withheld) on held-out samples
  const TrainSummary rgb_only =
      train(desk_config(root / "rgb_only", Ablation::parse("ghem,adfm,depth")));
  const DatasetManifest test =
      synth_generate((root / "test").string(), kTestSamples, kDeskSize, kTestSeed);
  const double s_full = mean_test_smeasure((root / "full" / "last.mhen").string(), test);
  const double s_rgb = mean_test_smeasure((root / "rgb_only" / "last.mhen").string(), test);
  const bool c_ok = rgb_only.steps == kTrainSteps && s_full > s_rgb;
  const double secs = seconds_since(t0);

  Result r;
  r.pass = a_ok && b_ok && c_ok && secs < kLearningBudgetSec;
  r.detail = fmt("(a) %s step %d total %.4f (<%.2f), IoU sum %.4f (<%.2f); "
                 "(b) %s step-1 %.3f, last-10 mean %.3f (ratio %.3f <= %.2f); "
                 "(c) %s S_alpha RGB-D %.4f vs RGB-only %.4f; %.0f s",
                 a_ok ? "ok" : "FAIL", kOverfitSteps, last.total_value, kOverfitTotal, iou_sum,
                 kOverfitIou, b_ok ? "ok" : "FAIL", first, tail, tail / first, kReductionRatio,
                 c_ok ? "ok" : "FAIL", s_full, s_rgb, secs);
  return r;
}

// ------------------------------------------------------------------ 7
Result criterion7() {
  // the five ablation rows as sets of disabled modules
  const std::vector<std::pair<std::string, std::set<std::string>>> rows = {
      {"them,ghem,adfm", {"them", "ghem", "adfm"}},
      {"ghem,adfm", {"ghem", "adfm"}},
      {"them,ghem", {"them", "ghem"}},
      {"adfm", {"adfm"}},
      {"", {}},
  };
  const Batch b = synthetic_batch(2, 64, 7);
  std::vector<CensusReport> census;
  bool trained = true;
  for (const auto& [list, off] : rows) {
    NetworkConfig cfg = small_net(8, 64);
    cfg.ablation = Ablation::parse(list);
    Network net(cfg);
    census.push_back(net.census());
    Adam adam(net.params().learnable(), AdamOptions{1e-3});
    const std::vector<Real> before(net.params().learnable().front().data().begin(),
                                   net.params().learnable().front().data().end());
    const LossBreakdown loss = total_loss(net.forward(b.rgb, b.depth, Mode::Train), b.gt);
    backward(loss.total);
    adam.step();
    const auto after = net.params().learnable().front().data();
    trained = trained && std::isfinite(loss.total_value) &&
              !std::equal(before.begin(), before.end(), after.begin());
  }
  const CensusReport& full = census.back();
  bool structure_ok = true;
  std::string summary;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::set<std::string> differing;
    for (const auto& [group, count] : full.groups) {
      auto it = census[i].groups.find(group);
      if (it == census[i].groups.end() || it->second != count) differing.insert(group);
    }
    for (const auto& [group, count] : census[i].groups) {
      if (!full.groups.count(group)) differing.insert(group);
    }
    structure_ok = structure_ok && differing == rows[i].second;
    summary += fmt("%s[%s]=%zu", i ? " " : "", rows[i].first.empty() ? "full" : rows[i].first.c_str(),
                   census[i].total);
  }
  Result r;
  r.pass = trained && structure_ok;
  r.detail = fmt("%s one-step training; census differs only in toggled groups: %s; totals %s",
                 trained ? "all" : "NOT all", structure_ok ? "yes" : "NO", summary.c_str());
  return r;
}

// ------------------------------------------------------------------ 8
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Result criterion8() {
  const fs::path root = work_dir("c8");
  auto run = [&](const std::string& name) {
    const std::string out = (root / name).string();
    std::vector<std::string> args = {"mhenet", "train", "--seed", "11", "--size", "64x64",
                                     "--channels", "8", "--synth", "12", "--epochs", "2",
                                     "--batch", "4", "--threads", "1", "--out", out};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    const int code = run_cli(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(old);
    return code;
  };
  const int c1 = run("run1"), c2 = run("run2");
  bool same = c1 == 0 && c2 == 0;
  std::string detail;
  for (const char* f : {"loss_log.tsv", "last.mhen", "best.mhen"}) {
    const std::string a = slurp(root / "run1" / f), b = slurp(root / "run2" / f);
    const bool eq = !a.empty() && a == b;
    same = same && eq;
    detail += fmt("%s%s %s (%zu bytes)", detail.empty() ? "" : ", ", f, eq ? "identical" : "DIFFER",
                  a.size());
  }
  Result r;
  r.pass = same;
  r.detail = detail;
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Result()>>> criteria = {
      {"gradient suite", criterion1},     {"Sobel oracle", criterion2},
      {"fusion normalization", criterion3}, {"shape contract", criterion4},
      {"metric oracles", criterion5},     {"desk-scale learning", criterion6},
      {"ablation structure", criterion7}, {"reproducibility", criterion8},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    failures += !r.pass;
    std::printf("criterion %d (%s): %s  %s\n", id, criteria[i].first, r.pass ? "PASS" : "FAIL",
                r.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
