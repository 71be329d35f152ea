#include "mhenet/network.hpp"

#include <sstream>
#include <stdexcept>

namespace mhenet {

using namespace ops;

Ablation Ablation::parse(const std::string& list) {
  Ablation a;
  std::stringstream ss(list);
  std::string token;
  while (std::getline(ss, token, ',')) {
    const auto b = token.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    token = token.substr(b, token.find_last_not_of(" \t") - b + 1);
    if (token == "them") a.them = false;
    else if (token == "ghem") a.ghem = false;
    else if (token == "adfm") a.adfm = false;
    else if (token == "texture") a.texture = false;
    else if (token == "geometry") a.geometry = false;
    else if (token == "semantic") a.semantic = false;
    else if (token == "depth") a.depth = false;
    else throw std::invalid_argument("unknown ablation switch '" + token + "'");
  }
  return a;
}

std::string Ablation::disabled_list() const {
  std::string out;
  auto put = [&](bool on, const char* name) {
    if (on) return;
    if (!out.empty()) out += ",";
    out += name;
  };
  put(them, "them");
  put(ghem, "ghem");
  put(adfm, "adfm");
  put(texture, "texture");
  put(geometry, "geometry");
  put(semantic, "semantic");
  put(depth, "depth");
  return out;
}

void NetworkConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw std::invalid_argument("input size " + std::to_string(height) + "x" +
                                std::to_string(width) + " must be positive multiples of 32");
  }
  if (channels <= 0 || channels % ChannelAttention::kReduction != 0) {
    throw std::invalid_argument("channels must be a positive multiple of 4, got " +
                                std::to_string(channels));
  }
  if (stem_width <= 0) throw std::invalid_argument("stem width must be positive");
  for (int w : stage_widths) {
    if (w <= 0) throw std::invalid_argument("stage widths must be positive");
  }
  if (!(lgconv_eps > 0)) throw std::invalid_argument("lgconv eps must be positive");
}

nlohmann::json NetworkConfig::to_json() const {
  return nlohmann::json{
      {"height", height},
      {"width", width},
      {"channels", channels},
      {"stem_width", stem_width},
      {"stage_widths", stage_widths},
      {"ablate", ablation.disabled_list()},
      {"texture_avg", texture_avg == TextureAvgMode::Local3 ? "local3" : "global"},
      {"lgconv_eps", lgconv_eps},
      {"seed", seed},
  };
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.stem_width = j.value("stem_width", c.stem_width);
  if (j.contains("stage_widths")) c.stage_widths = j.at("stage_widths").get<std::array<int, 4>>();
  c.ablation = Ablation::parse(j.value("ablate", std::string()));
  const std::string avg = j.value("texture_avg", std::string("local3"));
  if (avg == "local3") c.texture_avg = TextureAvgMode::Local3;
  else if (avg == "global") c.texture_avg = TextureAvgMode::Global;
  else throw std::invalid_argument("texture_avg must be local3 or global, got " + avg);
  c.lgconv_eps = j.value("lgconv_eps", c.lgconv_eps);
  c.seed = j.value("seed", c.seed);
  return c;
}

Backbone::Backbone(const ParamScope& scope, int in_channels, const NetworkConfig& config) {
  stem_ = std::make_unique<Cbr>(scope.child("stem"), in_channels, config.stem_width, 3, 2);
  int prev = config.stem_width;
  for (int i = 0; i < 4; ++i) {
    const ParamScope stage = scope.child("stage" + std::to_string(i + 1));
    const int w = config.stage_widths[i];
    entry_[i] = std::make_unique<Cbr>(stage.child("entry"), prev, w, 3, 2);
    body_[i] = std::make_unique<Cbr>(stage.child("body"), w, w, 3);
    project_[i] = std::make_unique<Cbr>(stage.child("project"), w, config.channels, 1);
    prev = w;
  }
}

FeaturePyramid Backbone::forward(const Tensor& x, Mode mode) const {
  FeaturePyramid out;
  Tensor h = stem_->forward(x, mode);
  for (int i = 0; i < 4; ++i) {
    h = body_[i]->forward(entry_[i]->forward(h, mode), mode);
    out[i] = project_[i]->forward(h, mode);
  }
  return out;
}

Network::Network(const NetworkConfig& config) : config_(config), init_rng_(config.seed) {
  config_.validate();
  const Ablation& ab = config_.ablation;
  const int c = config_.channels;
  ParamScope root(store_, init_rng_);
  rgb_backbone_ = std::make_unique<Backbone>(root.child("backbone.rgb"), 3, config_);
  depth_backbone_ = std::make_unique<Backbone>(root.child("backbone.depth"), 1, config_);
  them_ = std::make_unique<HierarchicalEnhancement>(
      root.child("them"), c, Modality::Texture,
      EnhancementSwitches{ab.them, ab.texture, ab.semantic}, config_.texture_avg,
      config_.lgconv_eps);
  ghem_ = std::make_unique<HierarchicalEnhancement>(
      root.child("ghem"), c, Modality::Geometry,
      EnhancementSwitches{ab.ghem, ab.geometry, ab.semantic}, config_.texture_avg,
      config_.lgconv_eps);
  fusion_ = std::make_unique<Fusion>(root.child("adfm"), c, ab.adfm);
  const ParamScope heads = root.child("heads");
  head1_ = std::make_unique<PredictionHead>(heads.child("m1"), c);
  head2_ = std::make_unique<PredictionHead>(heads.child("m2"), c);
  head3_ = std::make_unique<PredictionHead>(heads.child("m3"), c);
}

ForwardOutput Network::forward(const Tensor& rgb, const Tensor& depth, Mode mode) const {
  if (rgb.c() != 3 || depth.c() != 1 || rgb.n() != depth.n() || rgb.h() != depth.h() ||
      rgb.w() != depth.w()) {
    throw ShapeError("forward: rgb " + rgb.shape().str() + " and depth " +
                     depth.shape().str() + " are not an (N,3,H,W)/(N,1,H,W) pair");
  }
  if (rgb.h() % 32 != 0 || rgb.w() % 32 != 0) {
    throw ShapeError("forward: input " + rgb.shape().str() + " is not a multiple of 32");
  }
  const Tensor depth_in = config_.ablation.depth ? depth : Tensor::zeros(depth.shape());
  ForwardOutput out;
  out.rgb_features = rgb_backbone_->forward(rgb, mode);
  out.depth_features = depth_backbone_->forward(depth_in, mode);
  out.r = them_->forward(out.rgb_features, mode);
  out.d = ghem_->forward(out.depth_features, mode);
  out.f = fusion_->forward(out.r, out.d, mode);
  out.m1 = head1_->forward(out.r[0], rgb.h(), rgb.w(), mode);
  out.m2 = head2_->forward(out.f[0], rgb.h(), rgb.w(), mode);
  out.m3 = head3_->forward(out.d[0], rgb.h(), rgb.w(), mode);
  return out;
}

CensusReport Network::census() const {
  CensusReport report;
  for (const auto& e : store_.entries()) {
    if (e.kind != ParamKind::Learnable) continue;
    std::string group = e.name.substr(0, e.name.find('.'));
    if (group == "backbone") {
      const auto second = e.name.find('.', group.size() + 1);
      group = e.name.substr(0, second);
    }
    report.groups[group] += e.tensor.numel();
    report.total += e.tensor.numel();
  }
  return report;
}

}  // namespace mhenet
