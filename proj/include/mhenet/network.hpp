#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include "mhenet/fusion.hpp"
#include "json.hpp"

namespace mhenet {

/// Module switches. Every flag defaults to on; "off" swaps the module for a
/// plain CBR of matching width (depth off feeds a zero depth map instead).
struct Ablation {
  bool them = true;
  bool ghem = true;
  bool adfm = true;
  bool texture = true;
  bool geometry = true;
  bool semantic = true;
  bool depth = true;

  /// Comma-separated names of modules to switch off, e.g. "ghem,adfm".
  static Ablation parse(const std::string& list);
  std::string disabled_list() const;
  bool operator==(const Ablation&) const = default;
};

struct NetworkConfig {
  int height = 416;
  int width = 416;
  int channels = 32;
  int stem_width = 16;
  std::array<int, 4> stage_widths{16, 32, 64, 128};
  Ablation ablation;
  TextureAvgMode texture_avg = TextureAvgMode::Local3;
  Real lgconv_eps = kLgConvEps;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);
};

/// Convolutional stand-in for the transformer backbone: a stride-2 stem and
/// four stride-2 stages, each projected to the unified width.
class Backbone {
 public:
  Backbone(const ParamScope& scope, int in_channels, const NetworkConfig& config);
  FeaturePyramid forward(const Tensor& x, Mode mode) const;

 private:
  std::unique_ptr<Cbr> stem_;
  std::array<std::unique_ptr<Cbr>, 4> entry_, body_, project_;
};

struct ForwardOutput {
  Tensor m1, m2, m3;  // M2 is the final prediction
  FeaturePyramid rgb_features, depth_features;
  Pyramid3 r, d, f;
};

struct CensusReport {
  std::map<std::string, std::size_t> groups;
  std::size_t total = 0;
};

class Network {
 public:
  explicit Network(const NetworkConfig& config);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  ForwardOutput forward(const Tensor& rgb, const Tensor& depth, Mode mode) const;

  const NetworkConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  /// Learnable element counts grouped by top-level module.
  CensusReport census() const;

 private:
  NetworkConfig config_;
  ParamStore store_;
  Rng init_rng_;
  std::unique_ptr<Backbone> rgb_backbone_, depth_backbone_;
  std::unique_ptr<HierarchicalEnhancement> them_, ghem_;
  std::unique_ptr<Fusion> fusion_;
  std::unique_ptr<PredictionHead> head1_, head2_, head3_;
};

}  // namespace mhenet
