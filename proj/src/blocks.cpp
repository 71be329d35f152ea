#include "mhenet/blocks.hpp"

#include <cmath>

namespace mhenet {

using namespace ops;

Conv2d::Conv2d(const ParamScope& scope, int cin, int cout, int k, bool with_bias,
               int stride_)
    : stride(stride_), padding((k - 1) / 2) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  weight = scope.uniform("weight", Shape{cout, cin, k, k}, bound);
  if (with_bias) bias = scope.constant("bias", Shape{1, cout, 1, 1}, 0);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return conv2d(x, weight, bias, stride, padding);
}

Cbr::Cbr(const ParamScope& scope, int cin, int cout, int k, int stride_)
    : stride(stride_), padding((k - 1) / 2) {
  if (k != 1 && k != 3 && k != 5) throw ShapeError("Cbr: kernel must be 1, 3 or 5");
  const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
  weight = scope.uniform("conv.weight", Shape{cout, cin, k, k}, bound);
  const Shape pc{1, cout, 1, 1};
  gamma = scope.constant("bn.gamma", pc, 1);
  beta = scope.constant("bn.beta", pc, 0);
  running_mean = scope.buffer("bn.running_mean", pc, 0);
  running_var = scope.buffer("bn.running_var", pc, 1);
}

Tensor Cbr::forward(const Tensor& x, Mode mode) const {
  Tensor rm = running_mean, rv = running_var;
  return relu(batch_norm(conv2d(x, weight, std::nullopt, stride, padding), gamma, beta, rm,
                         rv, mode));
}

Tensor sobel_horizontal() {
  return Tensor(Shape{1, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
}

Tensor sobel_vertical() {
  return Tensor(Shape{1, 1, 3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
}

LgConv::LgConv(const ParamScope& scope, int channels, Real eps_) : eps(eps_) {
  weight = scope.constant("weight", Shape{channels, 1, 3, 3}, 1);
  basis_h = scope.frozen("basis_h", sobel_horizontal());
  basis_v = scope.frozen("basis_v", sobel_vertical());
}

Tensor LgConv::forward(const Tensor& x) const {
  Tensor gh = depthwise_conv2d(x, mul(weight, basis_h), 1);
  Tensor gv = depthwise_conv2d(x, mul(weight, basis_v), 1);
  return sqrt_eps(add(square(gh), square(gv)), eps);
}

TextureBlock::TextureBlock(const ParamScope& scope, int channels, TextureAvgMode mode)
    : branch1(scope.child("branch1"), channels, channels, 1),
      branch3(scope.child("branch3"), channels, channels, 3),
      branch5(scope.child("branch5"), channels, channels, 5),
      merge(scope.child("merge"), channels, channels, 3),
      avg_mode(mode) {}

Tensor TextureBlock::merged(const Tensor& rt, Mode mode) const {
  Tensor sum3 = add(add(branch1.forward(rt, mode), branch3.forward(rt, mode)),
                    branch5.forward(rt, mode));
  return merge.forward(sum3, mode);
}

Tensor TextureBlock::forward(const Tensor& rt, Mode mode) const {
  Tensor rm = merged(rt, mode);
  Tensor local = avg_mode == TextureAvgMode::Local3 ? avg_pool(rt, 3, 1, 1)
                                                    : global_avg_pool(rt);
  return mul(sigmoid(sub(rm, local)), rm);
}

SemanticBlock::SemanticBlock(const ParamScope& scope, int channels)
    : down1(scope.child("down1"), channels, channels, 3),
      down2(scope.child("down2"), channels, channels, 3) {}

Tensor SemanticBlock::forward(const Tensor& s, Mode mode) const {
  Tensor s1 = down1.forward(downsample_ceil(s), mode);
  Tensor s2 = down2.forward(downsample_ceil(s1), mode);
  Tensor rc = add(resize_bilinear(s1, s.h(), s.w()), resize_bilinear(s2, s.h(), s.w()));
  return upsample(add(mul(rc, global_avg_pool(s)), s), 2);
}

GeometryBlock::GeometryBlock(const ParamScope& scope, int channels, Real eps)
    : grad1(scope.child("lgconv1"), channels, eps),
      grad2(scope.child("lgconv2"), channels, eps),
      refine1(scope.child("refine1"), channels, channels, 3),
      refine2(scope.child("refine2"), channels, channels, 3) {}

Tensor GeometryBlock::forward(const Tensor& dg, Mode mode) const {
  Tensor d = refine1.forward(add(grad1.forward(dg), dg), mode);
  return refine2.forward(add(grad2.forward(d), d), mode);
}

namespace {
int reduced_width(int channels) {
  if (channels % ChannelAttention::kReduction != 0) {
    throw ShapeError("channel attention needs C divisible by 4, got " +
                     std::to_string(channels));
  }
  return channels / ChannelAttention::kReduction;
}
}  // namespace

ChannelAttention::ChannelAttention(const ParamScope& scope, int channels)
    : reduce(scope.child("reduce"), channels, reduced_width(channels), 1),
      expand(scope.child("expand"), reduced_width(channels), channels, 1) {}

Tensor ChannelAttention::forward(const Tensor& x) const {
  return sigmoid(expand.forward(relu(reduce.forward(global_avg_pool(x)))));
}

CrcGate::CrcGate(const ParamScope& scope, int channels)
    : conv1(scope.child("conv1"), 2 * channels, channels, 3),
      conv2(scope.child("conv2"), channels, 2, 3) {}

std::pair<Tensor, Tensor> CrcGate::forward(const Tensor& rd) const {
  Tensor p = softmax_channels(conv2.forward(relu(conv1.forward(rd))), 2);
  return {slice_channels(p, 0, 1), slice_channels(p, 1, 1)};
}

PredictionHead::PredictionHead(const ParamScope& scope, int channels)
    : cbr(scope.child("cbr"), channels, channels, 3),
      project(scope.child("project"), channels, 1, 1) {}

Tensor PredictionHead::forward(const Tensor& x, int out_h, int out_w, Mode mode) const {
  return sigmoid(resize_bilinear(project.forward(cbr.forward(x, mode)), out_h, out_w));
}

}  // namespace mhenet
