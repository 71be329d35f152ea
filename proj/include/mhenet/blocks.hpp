#pragma once

#include <optional>
#include <utility>

#include "mhenet/ops.hpp"
#include "mhenet/params.hpp"

namespace mhenet {

using ops::Mode;

/// Plain convolution with optional bias; weights uniform in +-1/sqrt(fan_in).
struct Conv2d {
  Tensor weight;
  std::optional<Tensor> bias;
  int stride = 1;
  int padding = 0;

  Conv2d(const ParamScope& scope, int cin, int cout, int k, bool with_bias = true,
         int stride = 1);
  Tensor forward(const Tensor& x) const;
};

/// conv (no bias) -> batch norm -> relu. He-uniform weights.
struct Cbr {
  Tensor weight, gamma, beta, running_mean, running_var;
  int stride = 1;
  int padding = 0;

  Cbr(const ParamScope& scope, int cin, int cout, int k, int stride = 1);
  Tensor forward(const Tensor& x, Mode mode) const;
};

inline constexpr Real kLgConvEps = Real(1e-6);

/// Sobel basis in cross-correlation orientation; the vertical one is its transpose.
Tensor sobel_horizontal();
Tensor sobel_vertical();

/// Learnable gradient convolution: per-channel modulation of the fixed Sobel
/// pair, combined as a gradient magnitude.
struct LgConv {
  Tensor weight;   // (C,1,3,3), starts at ones
  Tensor basis_h;  // (1,1,3,3), frozen
  Tensor basis_v;
  Real eps = kLgConvEps;

  LgConv(const ParamScope& scope, int channels, Real eps = kLgConvEps);
  Tensor forward(const Tensor& x) const;
};

enum class TextureAvgMode { Local3, Global };

struct TextureBlock {
  Cbr branch1, branch3, branch5, merge;
  TextureAvgMode avg_mode;

  TextureBlock(const ParamScope& scope, int channels,
               TextureAvgMode avg_mode = TextureAvgMode::Local3);
  Tensor forward(const Tensor& rt, Mode mode) const;
  /// The merged response before gating (R_m); exposed for the gate-bound test.
  Tensor merged(const Tensor& rt, Mode mode) const;
};

/// Doubles the resolution of S while injecting two coarser context scales.
/// Internal halvings round up, so sizes like 13 or 2 are accepted.
struct SemanticBlock {
  Cbr down1, down2;

  SemanticBlock(const ParamScope& scope, int channels);
  Tensor forward(const Tensor& s, Mode mode) const;
};

struct GeometryBlock {
  LgConv grad1, grad2;
  Cbr refine1, refine2;

  GeometryBlock(const ParamScope& scope, int channels, Real eps = kLgConvEps);
  Tensor forward(const Tensor& dg, Mode mode) const;
};

/// Squeeze-excitation gate with reduction ratio 4; returns (N,C,1,1).
struct ChannelAttention {
  static constexpr int kReduction = 4;
  Conv2d reduce, expand;

  ChannelAttention(const ParamScope& scope, int channels);
  Tensor forward(const Tensor& x) const;
};

/// Two-way spatial gate: conv3x3 -> relu -> conv3x3 to 2 logits -> softmax.
struct CrcGate {
  Conv2d conv1, conv2;

  CrcGate(const ParamScope& scope, int channels);
  /// rd is (N,2C,H,W); returns the (N,1,H,W) weights for the two halves.
  std::pair<Tensor, Tensor> forward(const Tensor& rd) const;
};

struct PredictionHead {
  Cbr cbr;
  Conv2d project;

  PredictionHead(const ParamScope& scope, int channels);
  Tensor forward(const Tensor& x, int out_h, int out_w, Mode mode) const;
};

}  // namespace mhenet
