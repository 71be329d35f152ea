#include "oracles.hpp"

#include <cmath>
#include <limits>

namespace oracle {

namespace {

constexpr double kEps = 1e-12;

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// sample standard deviation, as MATLAB's std
double stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

double mae(const Grid& pred, const Grid& gt) {
  double s = 0;
  for (std::size_t i = 0; i < gt.v.size(); ++i) s += std::fabs(pred.v[i] - gt.v[i]);
  return s / static_cast<double>(gt.v.size());
}

double weighted_f(const Grid& pred, const Grid& gt) {
  const int h = gt.h, w = gt.w;
  bool any = false;
  for (double g : gt.v) any = any || g > 0.5;
  if (!any) return 0;

  Grid e(h, w), et(h, w), dist(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) e(r, c) = std::fabs(gt(r, c) - pred(r, c));
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (gt(r, c) > 0.5) {
        et(r, c) = e(r, c);
        dist(r, c) = 0;
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      int br = -1, bc = -1;
      // columns outer, rows inner: the first strict minimum is the
      // smallest-column, then smallest-row candidate
      for (int cc = 0; cc < w; ++cc) {
        for (int rr = 0; rr < h; ++rr) {
          if (gt(rr, cc) < 0.5) continue;
          const double d2 = double(rr - r) * (rr - r) + double(cc - c) * (cc - c);
          if (d2 < best) {
            best = d2;
            br = rr;
            bc = cc;
          }
        }
      }
      et(r, c) = e(br, bc);
      dist(r, c) = std::sqrt(best);
    }
  }

  // 7x7 Gaussian, sigma 5, normalized; zero outside the image
  double g[7][7], gs = 0;
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 7; ++j) {
      g[i][j] = std::exp(-((i - 3) * (i - 3) + (j - 3) * (j - 3)) / 50.0);
      gs += g[i][j];
    }
  }
  Grid ea(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int i = 0; i < 7; ++i) {
        for (int j = 0; j < 7; ++j) {
          const int rr = r + i - 3, cc = c + j - 3;
          if (rr >= 0 && rr < h && cc >= 0 && cc < w) s += g[i][j] / gs * et(rr, cc);
        }
      }
      ea(r, c) = s;
    }
  }

  double ew_fg = 0, ew_bg = 0, n_fg = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (gt(r, c) > 0.5) {
        ew_fg += std::min(e(r, c), ea(r, c));
        n_fg += 1;
      } else {
        const double b = 2 - std::exp(std::log(0.5) / 5 * dist(r, c));
        ew_bg += e(r, c) * b;
      }
    }
  }
  const double tpw = n_fg - ew_fg;
  const double fpw = ew_bg;
  const double rec = 1 - ew_fg / n_fg;
  const double prec = tpw / (kEps + tpw + fpw);
  return 2 * rec * prec / (kEps + rec + prec);
}

double mean_e(const Grid& pred, const Grid& gt) {
  const std::size_t n = gt.v.size();
  const double mu_g = mean(gt.v);
  double total = 0;
  for (int k = 0; k < 256; ++k) {
    const double t = (k + 0.5) / 256;
    std::vector<double> fm(n);
    for (std::size_t i = 0; i < n; ++i) fm[i] = pred.v[i] >= t ? 1 : 0;
    double score = 0;
    if (mu_g == 0) {
      for (std::size_t i = 0; i < n; ++i) score += 1 - fm[i];
    } else if (mu_g == 1) {
      for (std::size_t i = 0; i < n; ++i) score += fm[i];
    } else {
      const double mu_f = mean(fm);
      for (std::size_t i = 0; i < n; ++i) {
        const double a = gt.v[i] - mu_g, b = fm[i] - mu_f;
        const double align = 2 * a * b / (a * a + b * b + kEps);
        score += (align + 1) * (align + 1) / 4;
      }
    }
    total += score / static_cast<double>(n);
  }
  return total / 256;
}

namespace {

double object(const std::vector<double>& values) {
  const double x = mean(values);
  return 2 * x / (x * x + 1 + stdev(values) + kEps);
}

double ssim(const std::vector<double>& p, const std::vector<double>& g) {
  const double n = static_cast<double>(p.size());
  const double x = mean(p), y = mean(g);
  double sx = 0, sy = 0, sxy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sx += (p[i] - x) * (p[i] - x);
    sy += (g[i] - y) * (g[i] - y);
    sxy += (p[i] - x) * (g[i] - y);
  }
  sx /= n - 1 + kEps;
  sy /= n - 1 + kEps;
  sxy /= n - 1 + kEps;
  const double alpha = 4 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx + sy);
  if (alpha != 0) return alpha / (beta + kEps);
  return beta == 0 ? 1 : 0;
}

}  // namespace

double s_measure(const Grid& pred, const Grid& gt) {
  const int h = gt.h, w = gt.w;
  const double y = mean(gt.v);
  double q;
  if (y == 0) {
    q = 1 - mean(pred.v);
  } else if (y == 1) {
    q = mean(pred.v);
  } else {
    std::vector<double> fg, bg;
    for (std::size_t i = 0; i < gt.v.size(); ++i) {
      if (gt.v[i] > 0.5) fg.push_back(pred.v[i]);
      else bg.push_back(1 - pred.v[i]);
    }
    const double s_obj = y * object(fg) + (1 - y) * object(bg);

    double total = 0, sx = 0, sy = 0;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        total += gt(r, c);
        sx += gt(r, c) * (c + 1);
        sy += gt(r, c) * (r + 1);
      }
    }
    const int cx = static_cast<int>(std::lround(sx / total));
    const int cy = static_cast<int>(std::lround(sy / total));
    const int rows[2][2] = {{0, cy}, {cy, h}};
    const int cols[2][2] = {{0, cx}, {cx, w}};
    double s_reg = 0;
    for (auto& rr : rows) {
      for (auto& cc : cols) {
        std::vector<double> p, g;
        for (int r = rr[0]; r < rr[1]; ++r) {
          for (int c = cc[0]; c < cc[1]; ++c) {
            p.push_back(pred(r, c));
            g.push_back(gt(r, c));
          }
        }
        if (p.empty()) continue;
        s_reg += static_cast<double>(p.size()) / (h * w) * ssim(p, g);
      }
    }
    q = 0.5 * s_obj + 0.5 * s_reg;
  }
  return q < 0 ? 0 : (q > 1 ? 1 : q);
}

double sobel_magnitude(const Grid& img, int r, int c) {
  const double gx = (img(r - 1, c + 1) + 2 * img(r, c + 1) + img(r + 1, c + 1)) -
                    (img(r - 1, c - 1) + 2 * img(r, c - 1) + img(r + 1, c - 1));
  const double gy = (img(r + 1, c - 1) + 2 * img(r + 1, c) + img(r + 1, c + 1)) -
                    (img(r - 1, c - 1) + 2 * img(r - 1, c) + img(r - 1, c + 1));
  return std::hypot(gx, gy);
}

std::vector<double> conv2d(const std::vector<double>& x, int n, int c, int h, int w,
                           const std::vector<double>& k, int o, int kh, int kw, int stride,
                           int pad) {
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(n) * o * oh * ow, 0.0);
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double s = 0;
          for (int ic = 0; ic < c; ++ic)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                const int yy = i * stride + u - pad, xx = j * stride + v - pad;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                s += x[((static_cast<std::size_t>(b) * c + ic) * h + yy) * w + xx] *
                     k[((static_cast<std::size_t>(oc) * c + ic) * kh + u) * kw + v];
              }
          y[((static_cast<std::size_t>(b) * o + oc) * oh + i) * ow + j] = s;
        }
  return y;
}

}  // namespace oracle
