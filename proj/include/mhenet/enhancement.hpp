#pragma once

#include <array>
#include <memory>

#include "mhenet/blocks.hpp"

namespace mhenet {

/// Four backbone levels at strides 4, 8, 16, 32 (index 0 is the finest).
using FeaturePyramid = std::array<Tensor, 4>;
/// Three enhanced or fused levels at strides 4, 8, 16.
using Pyramid3 = std::array<Tensor, 3>;

enum class Modality { Texture, Geometry };

/// Cross-scale alignment of a level with the next coarser one.
struct AlignPair {
  Cbr fine, coarse;

  AlignPair(const ParamScope& scope, int channels);
  /// Returns (fine at b's size, coarse at higher's size).
  std::pair<Tensor, Tensor> forward(const Tensor& b, const Tensor& higher, Mode mode) const;
};

struct EnhancementSwitches {
  bool module = true;    // off: the level is a single CBR of its backbone feature
  bool modality = true;  // texture / geometry block; off: CBR
  bool semantic = true;  // off: upsampled CBR
};

class EnhancementLevel {
 public:
  EnhancementLevel(const ParamScope& scope, int channels, Modality modality,
                   EnhancementSwitches switches, TextureAvgMode avg_mode, Real eps);

  Tensor forward(const Tensor& b, const Tensor& next, Mode mode) const;

 private:
  Modality modality_;
  EnhancementSwitches switches_;
  std::unique_ptr<Cbr> plain_;  // module disabled
  std::unique_ptr<AlignPair> align_;
  std::unique_ptr<TextureBlock> texture_;
  std::unique_ptr<GeometryBlock> geometry_;
  std::unique_ptr<Cbr> modality_stub_;
  std::unique_ptr<SemanticBlock> semantic_;
  std::unique_ptr<Cbr> semantic_stub_;
  std::unique_ptr<Cbr> fuse_;
};

/// Top-down enhancement over a backbone pyramid, seeded with the coarsest level.
class HierarchicalEnhancement {
 public:
  HierarchicalEnhancement(const ParamScope& scope, int channels, Modality modality,
                          EnhancementSwitches switches,
                          TextureAvgMode avg_mode = TextureAvgMode::Local3,
                          Real eps = kLgConvEps);

  Pyramid3 forward(const FeaturePyramid& b, Mode mode) const;
  const EnhancementLevel& level(int i) const { return *levels_[i]; }

 private:
  std::array<std::unique_ptr<EnhancementLevel>, 3> levels_;
};

}  // namespace mhenet
