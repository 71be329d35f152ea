#include "mhenet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <stdexcept>

#include "mhenet/image_io.hpp"
#include "mhenet/ops.hpp"

namespace mhenet {

namespace {

void check_pair(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.size() == 0) {
    throw std::invalid_argument("metric inputs differ in size: " + std::to_string(pred.height) +
                                "x" + std::to_string(pred.width) + " vs " +
                                std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  for (double g : gt.v) {
    if (g != 0.0 && g != 1.0) throw std::invalid_argument("ground truth must be binary");
  }
}

class NeumaierSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::fabs(sum_) >= std::fabs(x)) comp_ += (sum_ - t) + x;
    else comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0, comp_ = 0;
};

double mean_of(const std::vector<double>& v) {
  NeumaierSum s;
  for (double x : v) s.add(x);
  return v.empty() ? 0.0 : s.value() / static_cast<double>(v.size());
}

}  // namespace

double mae(const Mask& pred, const Mask& gt) {
  check_pair(pred, gt);
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::fabs(pred.v[i] - gt.v[i]);
  return acc / static_cast<double>(pred.size());
}

void distance_transform(const Mask& site, std::vector<double>& dist2, std::vector<long>& nearest) {
  const int h = site.height, w = site.width;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> col_d2(site.size(), inf);
  std::vector<int> col_row(site.size(), -1);

  // per column: nearest site row, upper one on ties
  for (int x = 0; x < w; ++x) {
    int last = -1;
    for (int y = 0; y < h; ++y) {
      if (site.at(y, x) != 0) last = y;
      if (last >= 0) {
        col_row[y * w + x] = last;
        col_d2[y * w + x] = static_cast<double>(y - last) * (y - last);
      }
    }
    int next = -1;
    for (int y = h - 1; y >= 0; --y) {
      if (site.at(y, x) != 0) next = y;
      if (next >= 0) {
        const double d2 = static_cast<double>(next - y) * (next - y);
        if (d2 < col_d2[y * w + x]) {
          col_d2[y * w + x] = d2;
          col_row[y * w + x] = next;
        }
      }
    }
  }

  dist2.assign(site.size(), inf);
  nearest.assign(site.size(), -1);
  std::vector<int> v(w);
  std::vector<double> z(w + 1);
  for (int y = 0; y < h; ++y) {
    const double* f = col_d2.data() + static_cast<std::size_t>(y) * w;
    int k = -1;
    for (int q = 0; q < w; ++q) {
      if (!std::isfinite(f[q])) continue;
      double s = -inf;
      while (k >= 0) {
        const int p = v[k];
        s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
        if (s <= z[k]) {
          --k;
        } else {
          break;
        }
      }
      ++k;
      v[k] = q;
      z[k] = k == 0 ? -inf : s;
      z[k + 1] = inf;
    }
    if (k < 0) continue;
    int j = 0;
    for (int x = 0; x < w; ++x) {
      while (z[j + 1] < x) ++j;
      const int q = v[j];
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      dist2[idx] = double(x - q) * (x - q) + f[q];
      nearest[idx] = static_cast<long>(col_row[static_cast<std::size_t>(y) * w + q]) * w + q;
    }
  }
}

WeightedF weighted_fmeasure(const Mask& pred, const Mask& gt) {
  check_pair(pred, gt);
  const int h = gt.height, w = gt.width;
  const std::size_t n = gt.size();
  std::size_t fg = 0;
  for (double g : gt.v) fg += g != 0;
  if (fg == 0) return WeightedF{0.0, true};

  std::vector<double> err(n);
  for (std::size_t i = 0; i < n; ++i) err[i] = std::fabs(pred.v[i] - gt.v[i]);

  std::vector<double> dist2;
  std::vector<long> nearest;
  distance_transform(gt, dist2, nearest);

  // background pixels inherit the error of their nearest foreground pixel
  std::vector<double> et(err);
  for (std::size_t i = 0; i < n; ++i) {
    if (gt.v[i] == 0) et[i] = err[nearest[i]];
  }

  constexpr int kRadius = 3;
  constexpr double kSigma = 5.0;
  double kernel[2 * kRadius + 1][2 * kRadius + 1];
  double ksum = 0;
  for (int dy = -kRadius; dy <= kRadius; ++dy) {
    for (int dx = -kRadius; dx <= kRadius; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      kernel[dy + kRadius][dx + kRadius] = v;
      ksum += v;
    }
  }
  for (auto& row : kernel) {
    for (double& v : row) v /= ksum;
  }

  std::vector<double> ea(n, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int dy = -kRadius; dy <= kRadius; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -kRadius; dx <= kRadius; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          acc += kernel[dy + kRadius][dx + kRadius] * et[static_cast<std::size_t>(yy) * w + xx];
        }
      }
      ea[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }

  double sum_fg = 0, sum_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt.v[i] != 0) {
      sum_fg += ea[i] < err[i] ? ea[i] : err[i];
    } else {
      const double importance = 2.0 - std::exp(std::log(0.5) / 5.0 * std::sqrt(dist2[i]));
      sum_bg += err[i] * importance;
    }
  }
  const double tp = static_cast<double>(fg) - sum_fg;
  const double fp = sum_bg;
  const double recall = 1.0 - sum_fg / static_cast<double>(fg);
  const double precision = tp / (tp + fp + kMetricEps);
  const double f = 2.0 * precision * recall / (precision + recall + kMetricEps);
  return WeightedF{f, false};
}

double emeasure_binary(const Mask& binary, const Mask& gt) {
  check_pair(binary, gt);
  const double n = static_cast<double>(gt.size());
  // only four (gt, pred) combinations exist, so count them
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt.v[i] != 0, m = binary.v[i] != 0;
    if (g && m) ++n11;
    else if (g) ++n10;
    else if (m) ++n01;
    else ++n00;
  }
  const double fg = n11 + n10;
  if (fg == 0) return (n00 + n10) / n;
  if (fg == n) return (n11 + n01) / n;
  const double mu_g = fg / n;
  const double mu_m = (n11 + n01) / n;
  auto phi = [&](double g, double m) {
    const double a = g - mu_g, b = m - mu_m;
    const double xi = 2.0 * a * b / (a * a + b * b + kMetricEps);
    return (1.0 + xi) * (1.0 + xi) / 4.0;
  };
  return (n11 * phi(1, 1) + n10 * phi(1, 0) + n01 * phi(0, 1) + n00 * phi(0, 0)) / n;
}

double mean_emeasure(const Mask& pred, const Mask& gt) {
  check_pair(pred, gt);
  Mask bin(gt.height, gt.width);
  double acc = 0;
  for (int k = 0; k < 256; ++k) {
    const double t = (k + 0.5) / 256.0;
    for (std::size_t i = 0; i < pred.size(); ++i) bin.v[i] = pred.v[i] >= t ? 1.0 : 0.0;
    acc += emeasure_binary(bin, gt);
  }
  return acc / 256.0;
}

namespace {

double object_score(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double sigma = 0;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - mean) * (v - mean);
    sigma = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return 2.0 * mean / (mean * mean + 1.0 + sigma + kMetricEps);
}

double region_ssim(const Mask& pred, const Mask& gt, int y0, int y1, int x0, int x1) {
  const double n = static_cast<double>((y1 - y0) * (x1 - x0));
  double mx = 0, my = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      mx += pred.at(y, x);
      my += gt.at(y, x);
    }
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double a = pred.at(y, x) - mx, b = gt.at(y, x) - my;
      sxx += a * a;
      syy += b * b;
      sxy += a * b;
    }
  }
  sxx /= n - 1 + kMetricEps;
  syy /= n - 1 + kMetricEps;
  sxy /= n - 1 + kMetricEps;
  const double alpha = 4.0 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sxx + syy);
  if (alpha != 0) return alpha / (beta + kMetricEps);
  if (beta == 0) return 1.0;
  return 0.0;
}

}  // namespace

double smeasure(const Mask& pred, const Mask& gt, double alpha) {
  check_pair(pred, gt);
  const int h = gt.height, w = gt.width;
  const double n = static_cast<double>(gt.size());
  double fg = 0, pred_sum = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    fg += gt.v[i];
    pred_sum += pred.v[i];
  }
  const double mu = fg / n;
  if (fg == 0) return 1.0 - pred_sum / n;
  if (fg == n) return pred_sum / n;

  std::vector<double> inside, outside;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.v[i] != 0) inside.push_back(pred.v[i]);
    else outside.push_back(1.0 - pred.v[i]);
  }
  const double s_object = mu * object_score(inside) + (1.0 - mu) * object_score(outside);

  // 1-based centroid rounded half away from zero; splits are [0,X) and [X,w)
  double sx = 0, sy = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (gt.at(y, x) != 0) {
        sx += x + 1;
        sy += y + 1;
      }
    }
  }
  const int cx = static_cast<int>(std::round(sx / fg));
  const int cy = static_cast<int>(std::round(sy / fg));
  const int xs[3] = {0, cx, w};
  const int ys[3] = {0, cy, h};
  double s_region = 0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const int area = (ys[a + 1] - ys[a]) * (xs[b + 1] - xs[b]);
      if (area == 0) continue;
      s_region += area / n * region_ssim(pred, gt, ys[a], ys[a + 1], xs[b], xs[b + 1]);
    }
  }
  const double s = alpha * s_object + (1.0 - alpha) * s_region;
  return std::clamp(s, 0.0, 1.0);
}

ImageMetrics evaluate_pair(const Mask& pred, const Mask& gt) {
  ImageMetrics m;
  m.mae = mae(pred, gt);
  const WeightedF wf = weighted_fmeasure(pred, gt);
  m.wfm = wf.value;
  m.empty_gt = wf.empty_gt;
  m.em = mean_emeasure(pred, gt);
  m.sm = smeasure(pred, gt);
  return m;
}

MetricReport aggregate(std::vector<ImageMetrics> rows) {
  std::sort(rows.begin(), rows.end(),
            [](const ImageMetrics& a, const ImageMetrics& b) { return a.name < b.name; });
  MetricReport r;
  std::vector<double> mae_v, wfm_v, em_v, sm_v;
  for (const auto& row : rows) {
    mae_v.push_back(row.mae);
    wfm_v.push_back(row.wfm);
    em_v.push_back(row.em);
    sm_v.push_back(row.sm);
  }
  r.mae = mean_of(mae_v);
  r.wfm = mean_of(wfm_v);
  r.em = mean_of(em_v);
  r.sm = mean_of(sm_v);
  r.rows = std::move(rows);
  return r;
}

std::string MetricReport::to_tsv() const {
  std::string out = "name\tmae\twfm\tem\tsm\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%.6f%s\n", row.name.c_str(), row.mae,
                  row.wfm, row.em, row.sm, row.empty_gt ? "\tempty_gt" : "");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "MEAN\t%.6f\t%.6f\t%.6f\t%.6f\n", mae, wfm, em, sm);
  out += buf;
  return out;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& row : rows) {
    images.push_back({{"name", row.name},
                      {"mae", row.mae},
                      {"wfm", row.wfm},
                      {"em", row.em},
                      {"sm", row.sm},
                      {"empty_gt", row.empty_gt}});
  }
  return {{"images", images},
          {"count", rows.size()},
          {"mean", {{"mae", mae}, {"wfm", wfm}, {"em", em}, {"sm", sm}}},
          {"missing", missing}};
}

Mask mask_from_file(const std::string& path) {
  const Image img = read_image(path);
  Mask m(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0;
      for (int c = 0; c < img.channels; ++c) acc += img.at(y, x, c);
      m.at(y, x) = acc / (255.0 * img.channels);
    }
  }
  return m;
}

Mask binarize_gt(const Mask& m) {
  Mask out(m.height, m.width);
  for (std::size_t i = 0; i < m.size(); ++i) out.v[i] = m.v[i] > 0.5 ? 1.0 : 0.0;
  return out;
}

namespace {

std::map<std::string, std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir);
  std::map<std::string, std::string> out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && has_image_extension(e.path().string())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) out.emplace(p.stem().string(), p.string());
  return out;
}

Mask resize_mask(const Mask& m, int h, int w) {
  NoGradGuard guard;
  Tensor t(Shape{1, 1, m.height, m.width});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < m.size(); ++i) d[i] = static_cast<Real>(m.v[i]);
  Tensor r = ops::resize_bilinear(t, h, w);
  Mask out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = std::clamp<double>(r.data()[i], 0.0, 1.0);
  return out;
}

}  // namespace

MetricReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir) {
  const auto preds = list_images(pred_dir);
  const auto gts = list_images(gt_dir);
  std::vector<ImageMetrics> rows;
  std::vector<std::string> missing;
  for (const auto& [stem, gt_path] : gts) {
    auto it = preds.find(stem);
    if (it == preds.end()) {
      missing.push_back(gt_path);
      continue;
    }
    const Mask gt = binarize_gt(mask_from_file(gt_path));
    Mask pred = mask_from_file(it->second);
    if (pred.height != gt.height || pred.width != gt.width) {
      pred = resize_mask(pred, gt.height, gt.width);
    }
    ImageMetrics m = evaluate_pair(pred, gt);
    m.name = stem;
    rows.push_back(m);
  }
  for (const auto& [stem, pred_path] : preds) {
    if (!gts.count(stem)) missing.push_back(pred_path);
  }
  MetricReport report = aggregate(std::move(rows));
  report.missing = std::move(missing);
  return report;
}

}  // namespace mhenet
