#include "mhenet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "mhenet/loss.hpp"
#include "mhenet/network.hpp"

namespace mhenet {

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                           const GradCheckOptions& options) {
  for (Tensor t : wrt) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tape::current().clear();
  Tensor loss = f();
  backward(loss);

  GradCheckReport report;
  Rng rng(options.seed);
  auto probe = [&f](std::uint64_t* fingerprint) {
    ops::arm_branch_probe();
    const double v = static_cast<double>(f().item());
    *fingerprint = ops::disarm_branch_probe();
    return v;
  };
  std::uint64_t base = 0;
  double f0 = 0;
  {
    NoGradGuard guard;
    f0 = std::max(std::fabs(probe(&base)), 1.0);
  }
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    Tensor t = wrt[k];
    const std::vector<Real> analytic =
        t.has_grad() ? std::vector<Real>(t.grad().begin(), t.grad().end())
                     : std::vector<Real>(t.numel(), Real(0));
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords > 0 && coords.size() > options.max_coords) {
      rng.shuffle(coords);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto data = t.mutable_data();
    for (std::size_t i : coords) {
      const Real saved = data[i];
      double numeric = 0, h = options.step, used_step = h;
      double best_spread = 0;
      bool smooth = false;
      {
        NoGradGuard guard;
        // Two ways a step can misreport the derivative: it flips a relu or an
        // argmax (the fingerprint changes), or it is wide compared with the
        // sqrt_eps smoothing radius where a gradient magnitude sits at zero
        // (the h and h/2 estimates disagree). Either way, retry closer in.
        for (int attempt = 0; attempt <= options.max_refinements; ++attempt, h /= 10) {
          static constexpr double kOffsets[6] = {2, 1, 0.5, -0.5, -1, -2};
          double v[6];
          bool same = true;
          for (int j = 0; j < 6; ++j) {
            std::uint64_t fingerprint = 0;
            data[i] = saved + static_cast<Real>(kOffsets[j] * h);
            v[j] = probe(&fingerprint);
            same = same && fingerprint == base;
          }
          if (!same) continue;
          // fourth-order central stencils at h and h/2
          const double wide = (-v[0] + 8 * v[1] - 8 * v[4] + v[5]) / (12.0 * h);
          const double narrow = (-v[1] + 8 * v[2] - 8 * v[3] + v[4]) / (6.0 * h);
          // roundoff in a stencil is about eps * |f| / h; allow 64 ulps of it
          const double noise = 64 * std::numeric_limits<double>::epsilon() * f0 / h;
          const double spread =
              std::fabs(wide - narrow) / (options.stability * std::fabs(narrow) + noise);
          // keep the best-converged estimate: past some point a smaller step
          // only trades truncation error for roundoff
          if (!smooth || spread < best_spread) {
            numeric = wide;
            best_spread = spread;
            used_step = h;
          }
          smooth = true;
          if (spread <= 1) break;
        }
        if (smooth && used_step < options.step) ++report.refined;
      }
      data[i] = saved;
      if (!smooth) {
        ++report.unresolved;
        continue;
      }
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), options.floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.coords;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        std::ostringstream os;
        os << "tensor" << k << "#" << i << " analytic=" << a << " numeric=" << numeric;
        report.worst = os.str();
      }
    }
  }
  for (Tensor t : wrt) t.zero_grad();
  return report;
}

std::function<Tensor()> random_projection(std::function<std::vector<Tensor>()> outputs,
                                          std::uint64_t seed) {
  auto weights = std::make_shared<std::vector<Tensor>>();
  return [outputs = std::move(outputs), weights, seed] {
    std::vector<Tensor> outs = outputs();
    if (weights->empty()) {
      Rng rng(seed);
      for (const Tensor& o : outs) {
        Tensor r(o.shape());
        for (Real& v : r.mutable_data()) v = static_cast<Real>(rng.normal());
        weights->push_back(r);
      }
    }
    Tensor total;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      Tensor term = ops::sum(ops::mul(outs[k], (*weights)[k]));
      total = k == 0 ? term : ops::add(total, term);
    }
    return total;
  };
}

namespace {

using ops::Mode;

Tensor random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(s);
  for (Real& v : t.mutable_data()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

Tensor stack_pair(const Tensor& a, const Tensor& b) {
  Shape s = a.shape();
  s.n = 2;
  std::vector<Real> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor(s, std::move(v));
}

// Move affine and running-statistic parameters away from their identity
// initialization so the check exercises every term.
void randomize(ParamStore& store, Rng& rng) {
  for (const auto& e : store.entries()) {
    Tensor t = e.tensor;
    auto d = t.mutable_data();
    const std::string& n = e.name;
    auto fill = [&](double lo, double hi) {
      for (Real& v : d) v = static_cast<Real>(rng.uniform(lo, hi));
    };
    if (n.ends_with("gamma") || n.ends_with("running_var")) fill(0.5, 1.5);
    else if (n.ends_with("beta") || n.ends_with("bias") || n.ends_with("running_mean")) fill(-0.2, 0.2);
    else if (e.kind == ParamKind::Learnable && n.find("lgconv") != std::string::npos) fill(0.5, 1.5);
  }
}

struct Fixture {
  ParamStore store;
  Rng rng;
  explicit Fixture(std::uint64_t seed) : rng(seed) {}
  ParamScope scope() { return ParamScope(store, rng); }
  std::vector<Tensor> wrt(std::initializer_list<Tensor> inputs) const {
    std::vector<Tensor> out(inputs);
    for (const Tensor& p : store.learnable()) out.push_back(p);
    return out;
  }
};

constexpr int kC = 8;
constexpr std::size_t kBlockCoords = 48;
// 0.9^80 leaves under 0.03% of the initial running statistics
constexpr int kCalibrationPasses = 80;

}  // namespace

std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& options) {
  std::vector<SuiteEntry> entries;
  GradCheckOptions block_opts;
  block_opts.max_coords = kBlockCoords;
  block_opts.seed = options.seed;

  auto record = [&](const std::string& name, double tol, const GradCheckReport& r) {
    SuiteEntry e{name, r.max_rel_error, tol, r.coords, r.refined, r.unresolved, r.worst};
    if (options.on_entry) options.on_entry(e);
    entries.push_back(e);
  };
  auto seed_for = [&](std::uint64_t k) { return Rng::derive(options.seed, k); };

  {
    // eval mode on a single sample and train mode on a pair
    Fixture fx(seed_for(1));
    Cbr cbr(fx.scope(), 4, 4, 3);
    randomize(fx.store, fx.rng);
    Tensor x1 = random_tensor(Shape{1, 4, 6, 6}, fx.rng);
    Tensor x2 = random_tensor(Shape{2, 4, 6, 6}, fx.rng);
    GradCheckOptions all = block_opts;
    all.max_coords = 0;
    auto eval = grad_check(
        random_projection([&] { return std::vector<Tensor>{cbr.forward(x1, Mode::Eval)}; },
                          seed_for(101)),
        fx.wrt({x1}), all);
    auto train = grad_check(
        random_projection([&] { return std::vector<Tensor>{cbr.forward(x2, Mode::Train)}; },
                          seed_for(102)),
        fx.wrt({x2}), all);
    record("cbr", kBlockGradTolerance, eval.max_rel_error >= train.max_rel_error ? eval : train);
  }
  {
    Fixture fx(seed_for(2));
    LgConv lg(fx.scope(), 4);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{1, 4, 6, 6}, fx.rng);
    record("lgconv", kBlockGradTolerance,
           grad_check(random_projection([&] { return std::vector<Tensor>{lg.forward(x)}; },
                                        seed_for(103)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(3));
    TextureBlock block(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    record("texture", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] { return std::vector<Tensor>{block.forward(x, Mode::Train)}; },
                          seed_for(104)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(4));
    SemanticBlock block(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    record("semantic", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] { return std::vector<Tensor>{block.forward(x, Mode::Train)}; },
                          seed_for(105)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(5));
    GeometryBlock block(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    record("geometry", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] { return std::vector<Tensor>{block.forward(x, Mode::Train)}; },
                          seed_for(106)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(6));
    ChannelAttention block(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{2, kC, 5, 5}, fx.rng);
    record("channel_attention", kBlockGradTolerance,
           grad_check(random_projection([&] { return std::vector<Tensor>{block.forward(x)}; },
                                        seed_for(107)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(7));
    CrcGate gate(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{1, 2 * kC, 5, 5}, fx.rng);
    record("crc_gate", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] {
                            auto [wr, wd] = gate.forward(x);
                            return std::vector<Tensor>{wr, wd};
                          },
                          seed_for(108)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(8));
    AdfmLevel level(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor r = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    Tensor d = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    Tensor next = random_tensor(Shape{2, kC, 4, 4}, fx.rng);
    record("adfm", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] {
                            return std::vector<Tensor>{
                                level.refine(level.fuse(r, d).fused, next, Mode::Train)};
                          },
                          seed_for(109)),
                      fx.wrt({r, d, next}), block_opts));
  }
  {
    Fixture fx(seed_for(9));
    PredictionHead head(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor x = random_tensor(Shape{2, kC, 4, 4}, fx.rng);
    record("prediction_head", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] { return std::vector<Tensor>{head.forward(x, 16, 16, Mode::Train)}; },
                          seed_for(110)),
                      fx.wrt({x}), block_opts));
  }
  {
    Fixture fx(seed_for(10));
    AlignPair pair(fx.scope(), kC);
    randomize(fx.store, fx.rng);
    Tensor b = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    Tensor hi = random_tensor(Shape{2, kC, 4, 4}, fx.rng);
    record("align_pair", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] {
                            auto [f, c] = pair.forward(b, hi, Mode::Train);
                            return std::vector<Tensor>{f, c};
                          },
                          seed_for(111)),
                      fx.wrt({b, hi}), block_opts));
  }
  for (Modality m : {Modality::Texture, Modality::Geometry}) {
    const bool texture = m == Modality::Texture;
    Fixture fx(seed_for(texture ? 11 : 12));
    EnhancementLevel level(fx.scope(), kC, m, EnhancementSwitches{}, TextureAvgMode::Local3,
                           kLgConvEps);
    randomize(fx.store, fx.rng);
    // 16x16 keeps the semantic path's deepest map above 1x1, where batch
    // statistics over two values make the check ill-conditioned
    Tensor b = random_tensor(Shape{2, kC, 16, 16}, fx.rng);
    Tensor next = random_tensor(Shape{2, kC, 8, 8}, fx.rng);
    record(texture ? "them_level" : "ghem_level", kBlockGradTolerance,
           grad_check(random_projection(
                          [&] { return std::vector<Tensor>{level.forward(b, next, Mode::Train)}; },
                          seed_for(texture ? 112 : 113)),
                      fx.wrt({b, next}), block_opts));
  }
  {
    Rng rng(seed_for(14));
    Tensor logits = random_tensor(Shape{2, 1, 4, 4}, rng, -3, 3);
    Tensor g(Shape{2, 1, 4, 4});
    for (Real& v : g.mutable_data()) v = rng.uniform() < 0.4 ? 1 : 0;
    GradCheckOptions all = block_opts;
    all.max_coords = 0;
    record("bce", kBlockGradTolerance,
           grad_check([&] { return bce_loss(ops::sigmoid(logits), g); }, {logits}, all));
    record("iou", kBlockGradTolerance,
           grad_check([&] { return iou_loss(ops::sigmoid(logits), g); }, {logits}, all));
    Tensor l2 = random_tensor(Shape{2, 1, 4, 4}, rng, -3, 3);
    Tensor l3 = random_tensor(Shape{2, 1, 4, 4}, rng, -3, 3);
    record("total_loss", kBlockGradTolerance,
           grad_check(
               [&] {
                 return total_loss(std::array<Tensor, 3>{ops::sigmoid(logits), ops::sigmoid(l2),
                                                         ops::sigmoid(l3)},
                                   g)
                     .total;
               },
               {logits, l2, l3}, all));
  }
  if (options.include_network) {
    NetworkConfig cfg;
    cfg.height = cfg.width = 64;
    cfg.channels = kC;
    cfg.stem_width = 8;
    cfg.stage_widths = {8, 8, 16, 16};
    cfg.seed = seed_for(15);
    Network net(cfg);
    Rng rng(seed_for(16));
    randomize(net.params(), rng);
    Tensor rgb = random_tensor(Shape{1, 3, 64, 64}, rng, 0, 1);
    Tensor depth = random_tensor(Shape{1, 1, 64, 64}, rng, 0, 1);
    // Identity running statistics leave eval mode unnormalized: the geometry
    // path and the multiplicative fusion then push activations to ~1e6 and
    // every sigmoid saturates. Settle the statistics on a two-sample batch
    // holding the probe input, as training would.
    {
      NoGradGuard guard;
      const Tensor rgb2 = stack_pair(rgb, random_tensor(rgb.shape(), rng, 0, 1));
      const Tensor depth2 = stack_pair(depth, random_tensor(depth.shape(), rng, 0, 1));
      for (int pass = 0; pass < kCalibrationPasses; ++pass) net.forward(rgb2, depth2, Mode::Train);
    }
    std::vector<Tensor> wrt{rgb, depth};
    for (const Tensor& p : net.params().learnable()) wrt.push_back(p);
    GradCheckOptions net_opts;
    net_opts.max_coords = 3;
    net_opts.seed = options.seed;
    record("network", kNetworkGradTolerance,
           grad_check(random_projection(
                          [&] {
                            ForwardOutput out = net.forward(rgb, depth, Mode::Eval);
                            return std::vector<Tensor>{out.m1, out.m2, out.m3};
                          },
                          seed_for(114)),
                      wrt, net_opts));
  }
  return entries;
}

}  // namespace mhenet
