#include "mhenet/loss.hpp"

#include <algorithm>
#include <cmath>

namespace mhenet {

namespace {

void check_pair(const Tensor& m, const Tensor& g, const char* name) {
  if (!(m.shape() == g.shape()) || m.c() != 1) {
    throw ShapeError(std::string(name) + ": prediction " + m.shape().str() +
                     " and target " + g.shape().str() + " must both be (N,1,H,W)");
  }
}

Real clamp_prob(Real v) { return std::clamp(v, kProbClamp, Real(1) - kProbClamp); }

}  // namespace

Tensor bce_loss(const Tensor& m, const Tensor& g) {
  check_pair(m, g, "bce_loss");
  const auto md = m.data();
  const auto gd = g.data();
  const Real count = static_cast<Real>(md.size());
  if (ops::branch_probe_armed()) {
    std::vector<bool> clamped(md.size());
    for (std::size_t i = 0; i < md.size(); ++i) clamped[i] = clamp_prob(md[i]) != md[i];
    ops::note_branches(clamped);
  }
  Real acc = 0;
  for (std::size_t i = 0; i < md.size(); ++i) {
    const Real p = clamp_prob(md[i]);
    acc -= gd[i] * std::log(p) + (Real(1) - gd[i]) * std::log(Real(1) - p);
  }
  const bool track = grad_enabled() && m.requires_grad();
  Tensor out(Shape{1, 1, 1, 1}, acc / count, track);
  if (track) {
    auto pm = m.impl(), pg = g.impl(), po = out.impl();
    Tape::current().record(po, [pm, pg, po, count] {
      auto gm = pm->grad_buffer();
      const Real scale = po->grad[0] / count;
      for (std::size_t i = 0; i < gm.size(); ++i) {
        const Real p = clamp_prob(pm->data[i]);
        const Real t = pg->data[i];
        gm[i] += scale * (-t / p + (Real(1) - t) / (Real(1) - p));
      }
    });
  }
  return out;
}

Tensor iou_loss(const Tensor& m, const Tensor& g) {
  check_pair(m, g, "iou_loss");
  const int batch = m.n();
  const std::size_t plane = m.shape().plane();
  const auto md = m.data();
  const auto gd = g.data();
  std::vector<Real> inter(batch, 0), uni(batch, 0);
  Real acc = 0;
  for (int n = 0; n < batch; ++n) {
    for (std::size_t i = n * plane; i < (n + 1) * plane; ++i) {
      inter[n] += md[i] * gd[i];
      uni[n] += md[i] + gd[i] - md[i] * gd[i];
    }
    if (uni[n] > 0) acc += Real(1) - inter[n] / uni[n];
  }
  const bool track = grad_enabled() && m.requires_grad();
  Tensor out(Shape{1, 1, 1, 1}, acc / batch, track);
  if (track) {
    auto pm = m.impl(), pg = g.impl(), po = out.impl();
    Tape::current().record(po, [pm, pg, po, inter, uni, plane, batch] {
      auto gm = pm->grad_buffer();
      const Real scale = po->grad[0] / batch;
      for (int n = 0; n < batch; ++n) {
        if (!(uni[n] > 0)) continue;
        const Real u2 = uni[n] * uni[n];
        for (std::size_t i = n * plane; i < (n + 1) * plane; ++i) {
          const Real t = pg->data[i];
          // d/dm of -I/U with dI/dm = t and dU/dm = 1 - t
          gm[i] += scale * -(t * uni[n] - inter[n] * (Real(1) - t)) / u2;
        }
      }
    });
  }
  return out;
}

LossBreakdown total_loss(const std::array<Tensor, 3>& heads, const Tensor& g) {
  LossBreakdown b;
  for (int k = 0; k < 3; ++k) {
    Tensor bce = bce_loss(heads[k], g);
    Tensor iou = iou_loss(heads[k], g);
    b.bce[k] = static_cast<double>(bce.item());
    b.iou[k] = static_cast<double>(iou.item());
    Tensor head = ops::add(bce, iou);
    b.total = k == 0 ? head : ops::add(b.total, head);
  }
  b.total_value = static_cast<double>(b.total.item());
  return b;
}

LossBreakdown total_loss(const ForwardOutput& out, const Tensor& g) {
  return total_loss(std::array<Tensor, 3>{out.m1, out.m2, out.m3}, g);
}

}  // namespace mhenet
