#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhenet/params.hpp"
#include "mhenet/tensor.hpp"

namespace mhenet {

/// One RGB-D example. Tensors carry a leading batch axis of 1.
struct Sample {
  Tensor rgb;    // (1,3,H,W) in [0,1]
  Tensor depth;  // (1,1,H,W) in [0,1]
  Tensor gt;     // (1,1,H,W) in {0,1}
  std::string id;
};

struct ManifestEntry {
  std::string rgb, depth, gt;  // relative to the dataset root
  std::string id;
};

/// Dataset root with Imgs/, Depths/ and GT/ subdirectories sharing basenames.
struct DatasetManifest {
  std::string root;
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestFile = "manifest.txt";

/// Reads root/manifest.txt ("rgb depth gt" per line) or, without one, pairs
/// files in Imgs/, Depths/ and GT/ by basename. Entries missing any of the
/// three files are rejected.
DatasetManifest load_manifest(const std::string& root);
void write_manifest(const DatasetManifest& manifest);

/// Bilinear resize for rgb/depth, nearest neighbour plus re-threshold for gt.
Sample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry, int height,
                   int width);
void save_sample(const std::string& root, const Sample& sample);

struct AugmentParams {
  bool flip = false;
  double angle_deg = 0;
  double crop_scale = 1;
  double crop_dx = 0;  // crop centre offset as a fraction of the free margin, in [-1,1]
  double crop_dy = 0;
};

inline constexpr double kMaxRotationDeg = 15.0;
inline constexpr double kMinCropScale = 0.75;

AugmentParams draw_augment(Rng& rng);
/// One inverse mapping covers crop, rotation and flip; out-of-image samples are 0.
Sample apply_augment(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, Rng& rng);
Sample hflip(const Sample& s);

struct SynthStats {
  double fg_fraction = 0;
  double rgb_contrast = 0;    // max over channels of |mean fg - mean bg|
  double depth_contrast = 0;  // |mean fg - mean bg|
};

inline constexpr double kSynthMaxRgbContrast = 0.1;
inline constexpr double kSynthMinDepthContrast = 0.3;
inline constexpr double kSynthMinFg = 0.05;
inline constexpr double kSynthMaxFg = 0.4;

/// Camouflage-style sample: object and background share texture statistics
/// but the object sits nearer in depth. Values are multiples of 1/255.
Sample synth_sample(int size, Rng& rng, const std::string& id);
SynthStats synth_stats(const Sample& s);

/// Writes count samples under dir and returns the manifest.
DatasetManifest synth_generate(const std::string& dir, int count, int size, std::uint64_t seed);

struct Batch {
  Tensor rgb, depth, gt;
};
Batch make_batch(const std::vector<Sample>& samples);

}  // namespace mhenet
