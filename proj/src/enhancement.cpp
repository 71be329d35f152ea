#include "mhenet/enhancement.hpp"

namespace mhenet {

using namespace ops;

AlignPair::AlignPair(const ParamScope& scope, int channels)
    : fine(scope.child("fine"), channels, channels, 3),
      coarse(scope.child("coarse"), channels, channels, 3) {}

std::pair<Tensor, Tensor> AlignPair::forward(const Tensor& b, const Tensor& higher,
                                             Mode mode) const {
  if (b.n() != higher.n() || b.c() != higher.c() || b.h() != 2 * higher.h() ||
      b.w() != 2 * higher.w()) {
    throw ShapeError("align_pair: coarser level " + higher.shape().str() +
                     " must be half of " + b.shape().str());
  }
  Tensor f = fine.forward(add(b, upsample(higher, 2)), mode);
  Tensor c = coarse.forward(add(higher, downsample(b, 2)), mode);
  return {f, c};
}

EnhancementLevel::EnhancementLevel(const ParamScope& scope, int channels, Modality modality,
                                   EnhancementSwitches switches, TextureAvgMode avg_mode,
                                   Real eps)
    : modality_(modality), switches_(switches) {
  if (!switches.module) {
    plain_ = std::make_unique<Cbr>(scope.child("plain"), channels, channels, 3);
    return;
  }
  align_ = std::make_unique<AlignPair>(scope.child("align"), channels);
  if (!switches.modality) {
    modality_stub_ = std::make_unique<Cbr>(scope.child("modality_cbr"), channels, channels, 3);
  } else if (modality == Modality::Texture) {
    texture_ = std::make_unique<TextureBlock>(scope.child("texture"), channels, avg_mode);
  } else {
    geometry_ = std::make_unique<GeometryBlock>(scope.child("geometry"), channels, eps);
  }
  if (switches.semantic) {
    semantic_ = std::make_unique<SemanticBlock>(scope.child("semantic"), channels);
  } else {
    semantic_stub_ = std::make_unique<Cbr>(scope.child("semantic_cbr"), channels, channels, 3);
  }
  fuse_ = std::make_unique<Cbr>(scope.child("fuse"), channels, channels, 3);
}

Tensor EnhancementLevel::forward(const Tensor& b, const Tensor& next, Mode mode) const {
  if (plain_) return plain_->forward(b, mode);
  auto [fine, coarse] = align_->forward(b, next, mode);
  Tensor local;
  if (modality_stub_) {
    local = modality_stub_->forward(fine, mode);
  } else if (texture_) {
    local = texture_->forward(fine, mode);
  } else {
    local = geometry_->forward(fine, mode);
  }
  Tensor context = semantic_ ? semantic_->forward(coarse, mode)
                             : upsample(semantic_stub_->forward(coarse, mode), 2);
  return fuse_->forward(add(local, context), mode);
}

HierarchicalEnhancement::HierarchicalEnhancement(const ParamScope& scope, int channels,
                                                 Modality modality,
                                                 EnhancementSwitches switches,
                                                 TextureAvgMode avg_mode, Real eps) {
  for (int i = 0; i < 3; ++i) {
    levels_[i] = std::make_unique<EnhancementLevel>(scope.child("level" + std::to_string(i + 1)),
                                                    channels, modality, switches, avg_mode, eps);
  }
}

Pyramid3 HierarchicalEnhancement::forward(const FeaturePyramid& b, Mode mode) const {
  Pyramid3 out;
  Tensor next = b[3];
  for (int i = 2; i >= 0; --i) {
    out[i] = levels_[i]->forward(b[i], next, mode);
    next = out[i];
  }
  return out;
}

}  // namespace mhenet
