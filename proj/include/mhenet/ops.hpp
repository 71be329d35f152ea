#pragma once

#include <cstdint>

#include <optional>
#include <utility>
#include <vector>

#include "mhenet/tensor.hpp"

// Differentiable tensor operations. Every function records its adjoint on
// the current thread's Tape when grad mode is on and an operand requires
// grad. Binary elementwise operations broadcast any extent-1 axis.
namespace mhenet::ops {

enum class Mode { Train, Eval };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real value);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
/// sqrt(x + eps), the numerically safe root used for gradient magnitudes.
Tensor sqrt_eps(const Tensor& x, Real eps);

/// Cross-correlation. kernel is (Cout, Cin, k, k); bias, when given, (1, Cout, 1, 1).
Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
              int stride, int padding);
/// One k x k filter per channel; kernel is (C, 1, k, k).
Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, int padding);

inline constexpr Real kBatchNormMomentum = Real(0.1);
inline constexpr Real kBatchNormEps = Real(1e-5);

/// gamma, beta, running_mean and running_var are (1, C, 1, 1). In train mode
/// the running statistics are updated in place (unbiased variance).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Mode mode,
                  Real momentum = kBatchNormMomentum, Real eps = kBatchNormEps);

/// Bilinear resampling with half-pixel centres (align_corners = false).
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
/// Integer-factor resampling; rejects sizes that do not divide evenly.
Tensor upsample(const Tensor& x, int factor);
Tensor downsample(const Tensor& x, int factor);
/// Halves each spatial extent, rounding up, never below one.
Tensor downsample_ceil(const Tensor& x);

Tensor global_avg_pool(const Tensor& x);
Tensor global_max_pool(const Tensor& x);
/// Window mean over in-bounds elements only (padding is not counted).
Tensor avg_pool(const Tensor& x, int kernel, int stride, int padding);

/// Softmax across `groups` equally sized channel groups at each location:
/// channel g * (C / groups) + j competes with the same j in other groups.
Tensor softmax_channels(const Tensor& x, int groups);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int start, int count);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Test-fixture switch: corrupts the relu adjoint so gradient checks fail.
void inject_backward_fault(bool on);

/// Branch fingerprint of the piecewise ops (relu signs, max-pool argmax, loss
/// clamps) evaluated on this thread while armed. Two evaluations with equal
/// fingerprints ran on the same smooth piece.
void arm_branch_probe();
std::uint64_t disarm_branch_probe();
bool branch_probe_armed();
void note_branches(const std::vector<bool>& taken);
void note_branch_index(std::size_t index);

}  // namespace mhenet::ops
