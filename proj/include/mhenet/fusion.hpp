#pragma once

#include <array>
#include <memory>
#include <optional>

#include "mhenet/enhancement.hpp"

namespace mhenet {

struct FuseResult {
  Tensor r_hat, d_hat;
  Tensor w_r, w_d;  // (N,1,H,W), sum to one
  Tensor fused;
};

/// One level of the gated cross-modal fusion with cross-scale refinement.
struct AdfmLevel {
  Conv2d guide_r;  // applied to GMP(D), modulates R
  Conv2d guide_d;  // applied to GMP(R), modulates D
  CrcGate gate;
  Cbr refine1, refine2;
  ChannelAttention attention;

  AdfmLevel(const ParamScope& scope, int channels);
  FuseResult fuse(const Tensor& r, const Tensor& d) const;
  Tensor refine(const Tensor& fused, const std::optional<Tensor>& next, Mode mode) const;
};

class Fusion {
 public:
  /// adaptive = false swaps every level for a CBR over the concatenated pair.
  Fusion(const ParamScope& scope, int channels, bool adaptive);

  Pyramid3 forward(const Pyramid3& r, const Pyramid3& d, Mode mode) const;
  bool adaptive() const { return adaptive_; }
  const AdfmLevel& level(int i) const { return *adfm_[i]; }

 private:
  bool adaptive_;
  std::array<std::unique_ptr<AdfmLevel>, 3> adfm_;
  std::array<std::unique_ptr<Cbr>, 3> plain_;
};

}  // namespace mhenet
