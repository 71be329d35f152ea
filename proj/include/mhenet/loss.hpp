#pragma once

#include <array>

#include "mhenet/network.hpp"

namespace mhenet {

inline constexpr Real kProbClamp = Real(1e-7);

/// Mean binary cross entropy; M is clamped to [1e-7, 1 - 1e-7]. The gradient
/// is evaluated at the clamped value and passed straight through.
Tensor bce_loss(const Tensor& m, const Tensor& g);

/// 1 - sum(MG) / sum(M + G - MG) per sample, averaged over the batch.
/// A sample with empty union scores 0.
Tensor iou_loss(const Tensor& m, const Tensor& g);

struct LossBreakdown {
  Tensor total;  // differentiable
  std::array<double, 3> bce{};
  std::array<double, 3> iou{};
  double total_value = 0;
};

/// Sum over the three heads of bce + iou.
LossBreakdown total_loss(const ForwardOutput& out, const Tensor& g);
LossBreakdown total_loss(const std::array<Tensor, 3>& heads, const Tensor& g);

}  // namespace mhenet
