#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace mhenet {

/// Row-major single-channel map. Predictions live in [0,1]; ground truth is {0,1}.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<double> v;

  Mask() = default;
  Mask(int h, int w, double fill = 0) : height(h), width(w), v(static_cast<std::size_t>(h) * w, fill) {}
  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return v.size(); }
};

inline constexpr double kMetricEps = 1e-12;

double mae(const Mask& pred, const Mask& gt);

struct WeightedF {
  double value = 0;
  bool empty_gt = false;  // recall undefined; value reported as 0
};
WeightedF weighted_fmeasure(const Mask& pred, const Mask& gt);

/// Mean over 256 binarizations at the bin centres (k + 0.5) / 256.
double mean_emeasure(const Mask& pred, const Mask& gt);
/// Enhanced alignment score of one binary map.
double emeasure_binary(const Mask& binary, const Mask& gt);

double smeasure(const Mask& pred, const Mask& gt, double alpha = 0.5);

/// Squared Euclidean distance to, and index of, the nearest pixel with
/// site != 0. Among equidistant sites the one with the smallest column, then
/// row, wins. Without sites, distances are infinite and indices -1.
void distance_transform(const Mask& site, std::vector<double>& dist2, std::vector<long>& nearest);

struct ImageMetrics {
  std::string name;
  double mae = 0, wfm = 0, em = 0, sm = 0;
  bool empty_gt = false;
};

ImageMetrics evaluate_pair(const Mask& pred, const Mask& gt);

struct MetricReport {
  std::vector<ImageMetrics> rows;  // sorted by name
  double mae = 0, wfm = 0, em = 0, sm = 0;
  std::vector<std::string> missing;  // files without a counterpart

  std::string to_tsv() const;
  nlohmann::json to_json() const;
};

/// Aggregates per-image rows in name order with compensated summation.
MetricReport aggregate(std::vector<ImageMetrics> rows);

/// Pairs files by basename (extension ignored). Predictions are resized to
/// the ground-truth size when they differ; ground truth is thresholded at 0.5.
MetricReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir);

Mask mask_from_file(const std::string& path);
Mask binarize_gt(const Mask& m);

}  // namespace mhenet
