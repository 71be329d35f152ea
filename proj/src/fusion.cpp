#include "mhenet/fusion.hpp"

#include <tuple>

namespace mhenet {

using namespace ops;

AdfmLevel::AdfmLevel(const ParamScope& scope, int channels)
    : guide_r(scope.child("guide_r"), channels, channels, 1),
      guide_d(scope.child("guide_d"), channels, channels, 1),
      gate(scope.child("crc"), channels),
      refine1(scope.child("refine1"), channels, channels, 3),
      refine2(scope.child("refine2"), channels, channels, 3),
      attention(scope.child("attention"), channels) {}

FuseResult AdfmLevel::fuse(const Tensor& r, const Tensor& d) const {
  if (!(r.shape() == d.shape())) {
    throw ShapeError("adfm_fuse: " + r.shape().str() + " vs " + d.shape().str());
  }
  FuseResult out;
  out.r_hat = add(mul(r, guide_r.forward(global_max_pool(d))), r);
  out.d_hat = add(mul(d, guide_d.forward(global_max_pool(r))), d);
  std::tie(out.w_r, out.w_d) = gate.forward(concat_channels(out.r_hat, out.d_hat));
  out.fused = add(mul(out.w_r, out.r_hat), mul(out.w_d, out.d_hat));
  return out;
}

Tensor AdfmLevel::refine(const Tensor& fused, const std::optional<Tensor>& next,
                         Mode mode) const {
  Tensor ref = refine2.forward(refine1.forward(fused, mode), mode);
  Tensor fv = mul(ref, attention.forward(ref));
  Tensor out = add(fv, fused);
  if (next) {
    if (next->h() * 2 != fused.h() || next->w() * 2 != fused.w()) {
      throw ShapeError("adfm_refine: coarser level " + next->shape().str() +
                       " must be half of " + fused.shape().str());
    }
    out = add(out, upsample(*next, 2));
  }
  return out;
}

Fusion::Fusion(const ParamScope& scope, int channels, bool adaptive) : adaptive_(adaptive) {
  for (int i = 0; i < 3; ++i) {
    const ParamScope level = scope.child("level" + std::to_string(i + 1));
    if (adaptive) {
      adfm_[i] = std::make_unique<AdfmLevel>(level, channels);
    } else {
      plain_[i] = std::make_unique<Cbr>(level.child("conv_fusion"), 2 * channels, channels, 3);
    }
  }
}

Pyramid3 Fusion::forward(const Pyramid3& r, const Pyramid3& d, Mode mode) const {
  Pyramid3 f;
  for (int i = 2; i >= 0; --i) {
    if (!adaptive_) {
      f[i] = plain_[i]->forward(concat_channels(r[i], d[i]), mode);
      continue;
    }
    std::optional<Tensor> next;
    if (i < 2) next = f[i + 1];
    f[i] = adfm_[i]->refine(adfm_[i]->fuse(r[i], d[i]).fused, next, mode);
  }
  return f;
}

}  // namespace mhenet
