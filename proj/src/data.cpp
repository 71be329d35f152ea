#include "mhenet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "mhenet/image_io.hpp"
#include "mhenet/ops.hpp"

namespace mhenet {

namespace fs = std::filesystem;

namespace {

Real quantize(double v) {
  return static_cast<Real>(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
}

Tensor image_to_tensor(const Image& img, int channels) {
  Tensor t(Shape{1, channels, img.height, img.width});
  auto d = t.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * img.width + x;
      if (channels == img.channels) {
        for (int c = 0; c < channels; ++c) d[c * plane + p] = img.at(y, x, c) / Real(255);
      } else if (channels == 3) {
        for (int c = 0; c < 3; ++c) d[c * plane + p] = img.at(y, x, 0) / Real(255);
      } else {
        double acc = 0;
        for (int c = 0; c < img.channels; ++c) acc += img.at(y, x, c);
        d[p] = static_cast<Real>(acc / (255.0 * img.channels));
      }
    }
  }
  return t;
}

Image tensor_to_image(const Tensor& t) {
  Image img;
  img.width = t.w();
  img.height = t.h();
  img.channels = t.c();
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  const std::size_t plane = t.shape().plane();
  auto d = t.data();
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < img.channels; ++c) {
      const double v = std::clamp<double>(d[c * plane + p], 0.0, 1.0);
      img.pixels[p * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

Tensor resize_nearest(const Tensor& x, int h, int w) {
  Tensor out(Shape{x.n(), x.c(), h, w});
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int y = 0; y < h; ++y) {
        const int sy = std::min(x.h() - 1, static_cast<int>((y + 0.5) * x.h() / h));
        for (int xo = 0; xo < w; ++xo) {
          const int sx = std::min(x.w() - 1, static_cast<int>((xo + 0.5) * x.w() / w));
          out.at(n, c, y, xo) = x.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

Tensor threshold(const Tensor& x) {
  Tensor out = x.clone();
  for (Real& v : out.mutable_data()) v = v > Real(0.5) ? Real(1) : Real(0);
  return out;
}

std::map<std::string, std::string> stems(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::is_directory(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && has_image_extension(e.path().string())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) out.emplace(p.stem().string(), p.filename().string());
  return out;
}

}  // namespace

DatasetManifest load_manifest(const std::string& root) {
  DatasetManifest m;
  m.root = root;
  const fs::path base(root);
  if (!fs::is_directory(base)) throw std::invalid_argument("dataset root not found: " + root);
  const fs::path listing = base / kManifestFile;
  if (fs::exists(listing)) {
    std::ifstream in(listing);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      ManifestEntry e;
      if (!(ss >> e.rgb >> e.depth >> e.gt)) {
        throw std::invalid_argument(listing.string() + ":" + std::to_string(lineno) +
                                    ": expected 'rgb depth gt'");
      }
      e.id = fs::path(e.rgb).stem().string();
      m.entries.push_back(e);
    }
  } else {
    const auto rgb = stems(base / "Imgs");
    const auto depth = stems(base / "Depths");
    const auto gt = stems(base / "GT");
    for (const auto& [stem, file] : rgb) {
      if (!depth.count(stem) || !gt.count(stem)) {
        throw std::invalid_argument("dataset " + root + ": sample '" + stem +
                                    "' lacks a depth or GT file");
      }
      m.entries.push_back(ManifestEntry{"Imgs/" + file, "Depths/" + depth.at(stem),
                                        "GT/" + gt.at(stem), stem});
    }
  }
  for (const auto& e : m.entries) {
    for (const auto& f : {e.rgb, e.depth, e.gt}) {
      if (!fs::exists(base / f)) throw std::invalid_argument("dataset file missing: " + (base / f).string());
    }
  }
  if (m.entries.empty()) throw std::invalid_argument("dataset " + root + " is empty");
  return m;
}

void write_manifest(const DatasetManifest& manifest) {
  std::ofstream out(fs::path(manifest.root) / kManifestFile, std::ios::trunc);
  for (const auto& e : manifest.entries) out << e.rgb << " " << e.depth << " " << e.gt << "\n";
  if (!out) throw std::runtime_error("cannot write manifest under " + manifest.root);
}

Sample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry, int height,
                   int width) {
  NoGradGuard guard;
  const fs::path base(manifest.root);
  Sample s;
  s.id = entry.id;
  s.rgb = image_to_tensor(read_image((base / entry.rgb).string()), 3);
  s.depth = image_to_tensor(read_image((base / entry.depth).string()), 1);
  s.gt = image_to_tensor(read_image((base / entry.gt).string()), 1);
  if (s.rgb.h() != height || s.rgb.w() != width) s.rgb = ops::resize_bilinear(s.rgb, height, width);
  if (s.depth.h() != height || s.depth.w() != width) {
    s.depth = ops::resize_bilinear(s.depth, height, width);
  }
  if (s.gt.h() != height || s.gt.w() != width) s.gt = resize_nearest(s.gt, height, width);
  s.gt = threshold(s.gt);
  return s;
}

void save_sample(const std::string& root, const Sample& s) {
  const fs::path base(root);
  for (const char* d : {"Imgs", "Depths", "GT"}) fs::create_directories(base / d);
  write_image((base / "Imgs" / (s.id + ".png")).string(), tensor_to_image(s.rgb));
  write_image((base / "Depths" / (s.id + ".png")).string(), tensor_to_image(s.depth));
  write_image((base / "GT" / (s.id + ".png")).string(), tensor_to_image(s.gt));
}

AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.flip = rng.uniform() < 0.5;
  p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  p.crop_scale = rng.uniform(kMinCropScale, 1.0);
  p.crop_dx = rng.uniform(-1.0, 1.0);
  p.crop_dy = rng.uniform(-1.0, 1.0);
  return p;
}

Sample apply_augment(const Sample& s, const AugmentParams& p) {
  const int h = s.rgb.h(), w = s.rgb.w();
  const double cx = w / 2.0, cy = h / 2.0;
  const double theta = p.angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double ox = p.crop_dx * (1.0 - p.crop_scale) * w / 2.0;
  const double oy = p.crop_dy * (1.0 - p.crop_scale) * h / 2.0;

  Sample out;
  out.id = s.id;
  out.rgb = Tensor(s.rgb.shape());
  out.depth = Tensor(s.depth.shape());
  out.gt = Tensor(s.gt.shape());
  auto bilinear = [&](const Tensor& src, int c, double fx, double fy) {
    const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    const double ax = fx - x0, ay = fy - y0;
    double acc = 0;
    for (int dy = 0; dy < 2; ++dy) {
      const int yy = y0 + dy;
      const double wy = dy ? ay : 1.0 - ay;
      if (yy < 0 || yy >= h || wy == 0) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const int xx = x0 + dx;
        const double wx = dx ? ax : 1.0 - ax;
        if (xx < 0 || xx >= w || wx == 0) continue;
        acc += wy * wx * src.at(0, c, yy, xx);
      }
    }
    return static_cast<Real>(acc);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // output pixel centre -> crop window -> rotation about the image centre -> flip
      const double px = cx + ox + p.crop_scale * (x + 0.5 - cx);
      const double py = cy + oy + p.crop_scale * (y + 0.5 - cy);
      double sx = cx + ct * (px - cx) - st * (py - cy);
      const double sy = cy + st * (px - cx) + ct * (py - cy);
      if (p.flip) sx = w - sx;
      const double fx = sx - 0.5, fy = sy - 0.5;
      for (int c = 0; c < 3; ++c) out.rgb.at(0, c, y, x) = bilinear(s.rgb, c, fx, fy);
      out.depth.at(0, 0, y, x) = bilinear(s.depth, 0, fx, fy);
      const int nx = static_cast<int>(std::floor(sx)), ny = static_cast<int>(std::floor(sy));
      out.gt.at(0, 0, y, x) =
          (nx >= 0 && nx < w && ny >= 0 && ny < h) ? s.gt.at(0, 0, ny, nx) : Real(0);
    }
  }
  return out;
}

Sample augment(const Sample& s, Rng& rng) { return apply_augment(s, draw_augment(rng)); }

Sample hflip(const Sample& s) {
  Sample out;
  out.id = s.id;
  auto flip = [](const Tensor& t) {
    Tensor o(t.shape());
    for (int c = 0; c < t.c(); ++c) {
      for (int y = 0; y < t.h(); ++y) {
        for (int x = 0; x < t.w(); ++x) o.at(0, c, y, x) = t.at(0, c, y, t.w() - 1 - x);
      }
    }
    return o;
  };
  out.rgb = flip(s.rgb);
  out.depth = flip(s.depth);
  out.gt = flip(s.gt);
  return out;
}

namespace {

// Sum of bilinearly upsampled uniform noise at three octaves, zero mean-ish.
std::vector<double> band_limited_noise(int size, Rng& rng) {
  NoGradGuard guard;
  std::vector<double> field(static_cast<std::size_t>(size) * size, 0.0);
  const int grids[3] = {std::max(2, size / 16), std::max(2, size / 8), std::max(2, size / 4)};
  const double amps[3] = {0.5, 0.3, 0.2};
  for (int o = 0; o < 3; ++o) {
    Tensor g(Shape{1, 1, grids[o], grids[o]});
    for (Real& v : g.mutable_data()) v = static_cast<Real>(rng.uniform(-1.0, 1.0));
    Tensor up = ops::resize_bilinear(g, size, size);
    for (std::size_t i = 0; i < field.size(); ++i) field[i] += amps[o] * up.data()[i];
  }
  return field;
}

std::vector<std::uint8_t> star_blob(int size, Rng& rng) {
  const double cx = rng.uniform(0.3, 0.7) * size, cy = rng.uniform(0.3, 0.7) * size;
  const double a = rng.uniform(0.12, 0.32) * size, b = rng.uniform(0.12, 0.32) * size;
  const double rot = rng.uniform(0.0, std::numbers::pi);
  const double a3 = rng.uniform(0.0, 0.2), p3 = rng.uniform(0.0, 2 * std::numbers::pi);
  const double a5 = rng.uniform(0.0, 0.1), p5 = rng.uniform(0.0, 2 * std::numbers::pi);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (std::cos(rot) * dx + std::sin(rot) * dy) / a;
      const double v = (-std::sin(rot) * dx + std::cos(rot) * dy) / b;
      const double t = std::atan2(v, u);
      const double r = 1.0 + a3 * std::cos(3 * t + p3) + a5 * std::cos(5 * t + p5);
      mask[static_cast<std::size_t>(y) * size + x] = std::sqrt(u * u + v * v) <= r;
    }
  }
  return mask;
}

}  // namespace

SynthStats synth_stats(const Sample& s) {
  SynthStats st;
  const std::size_t plane = s.gt.shape().plane();
  double fg = 0;
  for (std::size_t i = 0; i < plane; ++i) fg += s.gt.data()[i];
  st.fg_fraction = fg / static_cast<double>(plane);
  if (fg == 0 || fg == static_cast<double>(plane)) return st;
  auto contrast = [&](const Tensor& t, int c) {
    double sf = 0, sb = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      (s.gt.data()[i] > 0 ? sf : sb) += t.data()[c * plane + i];
    }
    return std::fabs(sf / fg - sb / (static_cast<double>(plane) - fg));
  };
  for (int c = 0; c < 3; ++c) st.rgb_contrast = std::max(st.rgb_contrast, contrast(s.rgb, c));
  st.depth_contrast = contrast(s.depth, 0);
  return st;
}

Sample synth_sample(int size, Rng& rng, const std::string& id) {
  if (size <= 0 || size % 32 != 0) {
    throw std::invalid_argument("synthetic size must be a positive multiple of 32");
  }
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  constexpr int kMaxTries = 1000;
  for (int attempt = 0; attempt < kMaxTries; ++attempt) {
    const auto mask = star_blob(size, rng);
    double fg = 0;
    for (auto m : mask) fg += m;
    const double frac = fg / static_cast<double>(plane);
    if (frac < kSynthMinFg || frac > kSynthMaxFg) continue;

    Sample s;
    s.id = id;
    s.rgb = Tensor(Shape{1, 3, size, size});
    s.depth = Tensor(Shape{1, 1, size, size});
    s.gt = Tensor(Shape{1, 1, size, size});
    for (int c = 0; c < 3; ++c) {
      const double tint = rng.uniform(0.3, 0.7);
      const double amp = rng.uniform(0.25, 0.45);
      // same generator, independent draws: matching statistics, different pattern
      const auto bg = band_limited_noise(size, rng);
      const auto obj = band_limited_noise(size, rng);
      for (std::size_t i = 0; i < plane; ++i) {
        s.rgb.mutable_data()[c * plane + i] = quantize(tint + amp * (mask[i] ? obj[i] : bg[i]));
      }
    }
    const double base = rng.uniform(0.1, 0.3);
    const double gx = rng.uniform(-0.1, 0.1), gy = rng.uniform(-0.1, 0.1);
    const double offset = rng.uniform(0.35, 0.5);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        double d = base + gx * ((x + 0.5) / size - 0.5) + gy * ((y + 0.5) / size - 0.5) +
                   rng.uniform(-0.02, 0.02);
        if (mask[i]) d += offset;
        s.depth.mutable_data()[i] = quantize(d);
        s.gt.mutable_data()[i] = mask[i] ? Real(1) : Real(0);
      }
    }
    const SynthStats st = synth_stats(s);
    if (st.rgb_contrast <= kSynthMaxRgbContrast && st.depth_contrast >= kSynthMinDepthContrast) {
      return s;
    }
  }
  throw std::runtime_error("synthetic generator could not satisfy its contrast contract");
}

DatasetManifest synth_generate(const std::string& dir, int count, int size, std::uint64_t seed) {
  DatasetManifest m;
  m.root = dir;
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i), 0x5157));
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05d", i);
    const Sample s = synth_sample(size, rng, name);
    save_sample(dir, s);
    m.entries.push_back(ManifestEntry{"Imgs/" + s.id + ".png", "Depths/" + s.id + ".png",
                                      "GT/" + s.id + ".png", s.id});
  }
  write_manifest(m);
  return m;
}

Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  const Shape s = samples[0].rgb.shape();
  const int n = static_cast<int>(samples.size());
  Batch b{Tensor(Shape{n, 3, s.h, s.w}), Tensor(Shape{n, 1, s.h, s.w}),
          Tensor(Shape{n, 1, s.h, s.w})};
  const std::size_t plane = s.plane();
  for (int i = 0; i < n; ++i) {
    const Sample& x = samples[i];
    if (!(x.rgb.shape() == s)) throw ShapeError("batch samples differ in size");
    std::copy(x.rgb.data().begin(), x.rgb.data().end(), b.rgb.mutable_data().begin() + i * 3 * plane);
    std::copy(x.depth.data().begin(), x.depth.data().end(), b.depth.mutable_data().begin() + i * plane);
    std::copy(x.gt.data().begin(), x.gt.data().end(), b.gt.mutable_data().begin() + i * plane);
  }
  return b;
}

}  // namespace mhenet
