#include "mhenet/ops.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>

namespace mhenet::ops {

namespace {

std::atomic<bool> g_fault{false};

using ImplPtr = std::shared_ptr<TensorImpl>;

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, bool track) {
  Tensor out(shape);
  out.set_requires_grad(track);
  return out;
}

void record(const Tensor& out, Tape::Adjoint fn) {
  Tape::current().record(out.impl(), std::move(fn));
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> stride_a{};
  std::array<std::size_t, 4> stride_b{};
};

std::array<std::size_t, 4> dense_strides(const Shape& s) {
  return {static_cast<std::size_t>(s.c) * s.h * s.w,
          static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::array<int, 4> da{a.n, a.c, a.h, a.w};
  const std::array<int, 4> db{b.n, b.c, b.h, b.w};
  std::array<int, 4> dout{};
  for (int i = 0; i < 4; ++i) {
    if (da[i] == db[i] || db[i] == 1) {
      dout[i] = da[i];
    } else if (da[i] == 1) {
      dout[i] = db[i];
    } else {
      throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " + b.str() +
                       " are not broadcast-compatible");
    }
  }
  Broadcast bc;
  bc.out = Shape{dout[0], dout[1], dout[2], dout[3]};
  const auto sa = dense_strides(a);
  const auto sb = dense_strides(b);
  for (int i = 0; i < 4; ++i) {
    bc.stride_a[i] = da[i] == 1 && dout[i] != 1 ? 0 : sa[i];
    bc.stride_b[i] = db[i] == 1 && dout[i] != 1 ? 0 : sb[i];
  }
  return bc;
}

template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const Shape& o = bc.out;
  std::size_t oi = 0;
  for (int n = 0; n < o.n; ++n) {
    for (int c = 0; c < o.c; ++c) {
      for (int h = 0; h < o.h; ++h) {
        std::size_t ia = n * bc.stride_a[0] + c * bc.stride_a[1] + h * bc.stride_a[2];
        std::size_t ib = n * bc.stride_b[0] + c * bc.stride_b[1] + h * bc.stride_b[2];
        for (int w = 0; w < o.w; ++w, ++oi) {
          fn(oi, ia + w * bc.stride_a[3], ib + w * bc.stride_b[3]);
        }
      }
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const bool track = needs_grad({&a, &b});
  if (a.shape() == b.shape()) {
    Tensor out = make_output(a.shape(), track);
    auto o = out.mutable_data();
    auto x = a.data();
    auto y = b.data();
    const std::size_t count = o.size();
    switch (kind) {
      case BinaryKind::Add:
        for (std::size_t i = 0; i < count; ++i) o[i] = x[i] + y[i];
        break;
      case BinaryKind::Sub:
        for (std::size_t i = 0; i < count; ++i) o[i] = x[i] - y[i];
        break;
      case BinaryKind::Mul:
        for (std::size_t i = 0; i < count; ++i) o[i] = x[i] * y[i];
        break;
    }
    if (track) {
      ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
      record(out, [pa, pb, po, kind] {
        const auto& g = po->grad;
        const std::size_t count = g.size();
        if (pa->requires_grad) {
          auto ga = pa->grad_buffer();
          if (kind == BinaryKind::Mul) {
            for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * pb->data[i];
          } else {
            for (std::size_t i = 0; i < count; ++i) ga[i] += g[i];
          }
        }
        if (pb->requires_grad) {
          auto gb = pb->grad_buffer();
          if (kind == BinaryKind::Mul) {
            for (std::size_t i = 0; i < count; ++i) gb[i] += g[i] * pa->data[i];
          } else if (kind == BinaryKind::Sub) {
            for (std::size_t i = 0; i < count; ++i) gb[i] -= g[i];
          } else {
            for (std::size_t i = 0; i < count; ++i) gb[i] += g[i];
          }
        }
      });
    }
    return out;
  }

  const Broadcast bc = broadcast(a.shape(), b.shape(), name);
  Tensor out = make_output(bc.out, track);
  {
    auto o = out.mutable_data();
    auto x = a.data();
    auto y = b.data();
    for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::Add: o[oi] = x[ia] + y[ib]; break;
        case BinaryKind::Sub: o[oi] = x[ia] - y[ib]; break;
        case BinaryKind::Mul: o[oi] = x[ia] * y[ib]; break;
      }
    });
  }
  if (track) {
    ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
    record(out, [pa, pb, po, kind, bc] {
      const auto& g = po->grad;
      std::span<Real> ga, gb;
      if (pa->requires_grad) ga = pa->grad_buffer();
      if (pb->requires_grad) gb = pb->grad_buffer();
      for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) {
        if (!ga.empty()) ga[ia] += kind == BinaryKind::Mul ? g[oi] * pb->data[ib] : g[oi];
        if (!gb.empty()) {
          switch (kind) {
            case BinaryKind::Add: gb[ib] += g[oi]; break;
            case BinaryKind::Sub: gb[ib] -= g[oi]; break;
            case BinaryKind::Mul: gb[ib] += g[oi] * pa->data[ia]; break;
          }
        }
      });
    });
  }
  return out;
}

// Pointwise map with a derivative expressed through input and output values.
template <typename F, typename D>
Tensor unary(const Tensor& x, F forward, D derivative) {
  const bool track = needs_grad({&x});
  Tensor out = make_output(x.shape(), track);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = forward(in[i]);
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, derivative] {
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * derivative(px->data[i], po->data[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- GEMM

constexpr int kColumnBlock = 256;

// c[M,N] += a[M,K] * b[K,N], all row-major.
void gemm_acc(int M, int N, int K, const Real* a, const Real* b, Real* c) {
  for (int j0 = 0; j0 < N; j0 += kColumnBlock) {
    const int j1 = std::min(N, j0 + kColumnBlock);
    for (int i = 0; i < M; ++i) {
      Real* crow = c + static_cast<std::size_t>(i) * N;
      const Real* arow = a + static_cast<std::size_t>(i) * K;
      for (int p = 0; p < K; ++p) {
        const Real av = arow[p];
        const Real* brow = b + static_cast<std::size_t>(p) * N;
        for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

struct ConvGeometry {
  int cin, h, w, k, stride, pad, oh, ow;
  int rows() const { return cin * k * k; }
  int cols() const { return oh * ow; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// col[(c*k*k + ki*k + kj), oh*OW + ow]
void im2col(const Real* x, const ConvGeometry& g, Real* col) {
  const int cols = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    const Real* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        Real* dst = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * cols;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          Real* drow = dst + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(drow, drow + g.ow, Real(0));
            continue;
          }
          const Real* srow = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : Real(0);
          }
        }
      }
    }
  }
}

void col2im_acc(const Real* col, const ConvGeometry& g, Real* dx) {
  const int cols = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    Real* plane = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const Real* src = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * cols;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          Real* drow = plane + static_cast<std::size_t>(iy) * g.w;
          const Real* srow = src + static_cast<std::size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

void transpose(const Real* src, int rows, int cols, Real* dst) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
    }
  }
}

// ---------------------------------------------------------------- resize

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<Real> wlo, whi;
};

AxisTaps bilinear_taps(int in, int out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.wlo.resize(out);
  t.whi.resize(out);
  const Real scale = static_cast<Real>(in) / static_cast<Real>(out);
  for (int d = 0; d < out; ++d) {
    Real src = scale * (static_cast<Real>(d) + Real(0.5)) - Real(0.5);
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int step = i0 < in - 1 ? 1 : 0;
    const Real lambda = src - static_cast<Real>(i0);
    t.lo[d] = i0;
    t.hi[d] = i0 + step;
    t.whi[d] = lambda;
    t.wlo[d] = Real(1) - lambda;
  }
  return t;
}

}  // namespace

void inject_backward_fault(bool on) { g_fault.store(on); }

namespace {

struct BranchProbe {
  bool armed = false;
  std::uint64_t hash = 0;
  void mix(std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ULL + (hash << 6) + (hash >> 2);
  }
};

thread_local BranchProbe t_probe;

}  // namespace

void arm_branch_probe() { t_probe = BranchProbe{true, 0}; }

std::uint64_t disarm_branch_probe() {
  t_probe.armed = false;
  return t_probe.hash;
}

bool branch_probe_armed() { return t_probe.armed; }

void note_branches(const std::vector<bool>& taken) {
  if (!t_probe.armed) return;
  const std::size_t count = taken.size();
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < count; ++i) {
    word = (word << 1) | (taken[i] ? 1u : 0u);
    if (i % 64 == 63) {
      t_probe.mix(word);
      word = 0;
    }
  }
  t_probe.mix(word);
  t_probe.mix(count);
}

void note_branch_index(std::size_t index) {
  if (t_probe.armed) t_probe.mix(index);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& x, Real factor) {
  return unary(
      x, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& x, Real value) {
  return unary(
      x, [value](Real v) { return v + value; }, [](Real, Real) { return Real(1); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](Real v) {
        if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
        const Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor relu(const Tensor& x) {
  const Real fault = g_fault.load() ? Real(1.5) : Real(1);
  if (branch_probe_armed()) {
    const auto xd = x.data();
    std::vector<bool> taken(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) taken[i] = xd[i] > 0;
    note_branches(taken);
  }
  return unary(
      x, [](Real v) { return v > 0 ? v : Real(0); },
      [fault](Real v, Real) { return v > 0 ? fault : Real(0); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; });
}

Tensor sqrt_eps(const Tensor& x, Real eps) {
  return unary(
      x, [eps](Real v) { return std::sqrt(v + eps); },
      [](Real, Real y) { return Real(0.5) / y; });
}

// ---------------------------------------------------------------- conv

Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
              int stride, int padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (ks.c != xs.c || ks.h != ks.w || ks.h % 2 == 0) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with kernel " + ks.str());
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (bias && !(bias->shape() == Shape{1, ks.n, 1, 1})) {
    throw ShapeError("conv2d: bias " + bias->shape().str() + " does not match kernel " +
                     ks.str());
  }
  ConvGeometry g{xs.c, xs.h, xs.w, ks.h, stride, padding, 0, 0};
  if (xs.h + 2 * padding < g.k || xs.w + 2 * padding < g.k) {
    throw ShapeError("conv2d: input " + xs.str() + " smaller than kernel " + ks.str());
  }
  g.oh = (xs.h + 2 * padding - g.k) / stride + 1;
  g.ow = (xs.w + 2 * padding - g.k) / stride + 1;
  const int cout = ks.n;
  const int rows = g.rows();
  const int cols = g.cols();
  const std::size_t in_plane = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  const std::size_t out_plane = static_cast<std::size_t>(cout) * cols;

  const bool track = needs_grad({&x, &kernel}) || (bias && needs_grad({&*bias}));
  Tensor out = make_output(Shape{xs.n, cout, g.oh, g.ow}, track);
  {
    const Real* xd = x.data().data();
    const Real* kd = kernel.data().data();
    Real* od = out.mutable_data().data();
    const Real* bd = bias ? bias->data().data() : nullptr;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < xs.n; ++n) {
      std::vector<Real> col;
      const Real* src = xd + n * in_plane;
      if (!g.pointwise()) {
        col.resize(static_cast<std::size_t>(rows) * cols);
        im2col(src, g, col.data());
        src = col.data();
      }
      Real* dst = od + n * out_plane;
      if (bd) {
        for (int o = 0; o < cout; ++o) std::fill(dst + o * cols, dst + (o + 1) * cols, bd[o]);
      }
      gemm_acc(cout, cols, rows, kd, src, dst);
    }
  }

  if (track) {
    ImplPtr px = x.impl(), pk = kernel.impl(), po = out.impl();
    ImplPtr pb = bias ? bias->impl() : nullptr;
    record(out, [px, pk, pb, po, g, cout, rows, cols, in_plane, out_plane] {
      const int batch = px->shape.n;
      const Real* gd = po->grad.data();
      const bool want_x = px->requires_grad;
      const bool want_k = pk->requires_grad;
      std::vector<Real> kt;
      if (want_x) {
        kt.resize(static_cast<std::size_t>(rows) * cout);
        transpose(pk->data.data(), cout, rows, kt.data());
      }
      Real* gx = want_x ? px->grad_buffer().data() : nullptr;
      const std::size_t kernel_size = static_cast<std::size_t>(cout) * rows;
      std::vector<Real> partial(want_k ? kernel_size * batch : 0, Real(0));
#pragma omp parallel for schedule(static)
      for (int n = 0; n < batch; ++n) {
        const Real* go = gd + n * out_plane;
        std::vector<Real> col, colt;
        const Real* src = px->data.data() + n * in_plane;
        if (!g.pointwise()) {
          col.resize(static_cast<std::size_t>(rows) * cols);
          if (want_k) {
            im2col(src, g, col.data());
            src = col.data();
          }
        }
        if (want_k) {
          colt.resize(static_cast<std::size_t>(rows) * cols);
          transpose(src, rows, cols, colt.data());
          gemm_acc(cout, rows, cols, go, colt.data(), partial.data() + n * kernel_size);
        }
        if (want_x) {
          if (g.pointwise()) {
            gemm_acc(rows, cols, cout, kt.data(), go, gx + n * in_plane);
          } else {
            std::fill(col.begin(), col.end(), Real(0));
            gemm_acc(rows, cols, cout, kt.data(), go, col.data());
            col2im_acc(col.data(), g, gx + n * in_plane);
          }
        }
      }
      if (want_k) {
        auto gk = pk->grad_buffer();
        for (int n = 0; n < batch; ++n) {
          const Real* p = partial.data() + n * kernel_size;
          for (std::size_t i = 0; i < kernel_size; ++i) gk[i] += p[i];
        }
      }
      if (pb && pb->requires_grad) {
        auto gb = pb->grad_buffer();
        for (int n = 0; n < batch; ++n) {
          for (int o = 0; o < cout; ++o) {
            const Real* go = gd + n * out_plane + static_cast<std::size_t>(o) * cols;
            Real s = 0;
            for (int j = 0; j < cols; ++j) s += go[j];
            gb[o] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, int padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (ks.n != xs.c || ks.c != 1 || ks.h != ks.w || ks.h % 2 == 0) {
    throw ShapeError("depthwise_conv2d: input " + xs.str() + " incompatible with kernel " +
                     ks.str());
  }
  const int k = ks.h;
  const int oh = xs.h + 2 * padding - k + 1;
  const int ow = xs.w + 2 * padding - k + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("depthwise_conv2d: input smaller than kernel");
  const bool track = needs_grad({&x, &kernel});
  Tensor out = make_output(Shape{xs.n, xs.c, oh, ow}, track);
  const int planes = xs.n * xs.c;
  {
    const Real* xd = x.data().data();
    const Real* kd = kernel.data().data();
    Real* od = out.mutable_data().data();
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
      const int c = p % xs.c;
      const Real* src = xd + static_cast<std::size_t>(p) * xs.h * xs.w;
      const Real* kc = kd + static_cast<std::size_t>(c) * k * k;
      Real* dst = od + static_cast<std::size_t>(p) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int xo = 0; xo < ow; ++xo) {
          Real s = 0;
          for (int ki = 0; ki < k; ++ki) {
            const int iy = y - padding + ki;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int ix = xo - padding + kj;
              if (ix < 0 || ix >= xs.w) continue;
              s += kc[ki * k + kj] * src[iy * xs.w + ix];
            }
          }
          dst[y * ow + xo] = s;
        }
      }
    }
  }
  if (track) {
    ImplPtr px = x.impl(), pk = kernel.impl(), po = out.impl();
    record(out, [px, pk, po, k, oh, ow, padding, planes] {
      const Shape xs = px->shape;
      const Real* gd = po->grad.data();
      Real* gx = px->requires_grad ? px->grad_buffer().data() : nullptr;
      Real* gk = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
      for (int p = 0; p < planes; ++p) {
        const int c = p % xs.c;
        const Real* src = px->data.data() + static_cast<std::size_t>(p) * xs.h * xs.w;
        const Real* kc = pk->data.data() + static_cast<std::size_t>(c) * k * k;
        const Real* go = gd + static_cast<std::size_t>(p) * oh * ow;
        Real* gxp = gx ? gx + static_cast<std::size_t>(p) * xs.h * xs.w : nullptr;
        Real* gkc = gk ? gk + static_cast<std::size_t>(c) * k * k : nullptr;
        for (int y = 0; y < oh; ++y) {
          for (int xo = 0; xo < ow; ++xo) {
            const Real gv = go[y * ow + xo];
            for (int ki = 0; ki < k; ++ki) {
              const int iy = y - padding + ki;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int ix = xo - padding + kj;
                if (ix < 0 || ix >= xs.w) continue;
                if (gxp) gxp[iy * xs.w + ix] += gv * kc[ki * k + kj];
                if (gkc) gkc[ki * k + kj] += gv * src[iy * xs.w + ix];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- batch norm

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Mode mode, Real momentum,
                  Real eps) {
  const Shape& s = x.shape();
  const Shape per_channel{1, s.c, 1, 1};
  if (!(gamma.shape() == per_channel) || !(beta.shape() == per_channel) ||
      !(running_mean.shape() == per_channel) || !(running_var.shape() == per_channel)) {
    throw ShapeError("batch_norm: parameters must be " + per_channel.str() + " for input " +
                     s.str());
  }
  if (mode == Mode::Train && s.n < 2) {
    throw ShapeError("batch_norm: train mode needs batch >= 2, got " + s.str());
  }
  const std::size_t plane = s.plane();
  const std::size_t count = plane * s.n;
  std::vector<Real> mean_c(s.c), inv_std(s.c);
  const Real* xd = x.data().data();
  if (mode == Mode::Train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (int c = 0; c < s.c; ++c) {
      Real acc = 0;
      for (int n = 0; n < s.n; ++n) {
        const Real* p = xd + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const Real mu = acc / static_cast<Real>(count);
      Real var = 0;
      for (int n = 0; n < s.n; ++n) {
        const Real* p = xd + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const Real biased = var / static_cast<Real>(count);
      const Real unbiased = var / static_cast<Real>(count - 1);
      mean_c[c] = mu;
      inv_std[c] = Real(1) / std::sqrt(biased + eps);
      rm[c] = (Real(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (Real(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (int c = 0; c < s.c; ++c) {
      mean_c[c] = rm[c];
      inv_std[c] = Real(1) / std::sqrt(rv[c] + eps);
    }
  }

  const bool track = needs_grad({&x, &gamma, &beta});
  Tensor out = make_output(s, track);
  std::vector<Real> xhat(track ? x.numel() : 0);
  {
    Real* od = out.mutable_data().data();
    auto gm = gamma.data();
    auto bt = beta.data();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const Real xh = (xd[base + i] - mean_c[c]) * inv_std[c];
          if (track) xhat[base + i] = xh;
          od[base + i] = gm[c] * xh + bt[c];
        }
      }
    }
  }
  if (track) {
    ImplPtr px = x.impl(), pg = gamma.impl(), pb = beta.impl(), po = out.impl();
    record(out, [px, pg, pb, po, mode, xhat = std::move(xhat), inv_std = std::move(inv_std),
                  plane, count] {
      const Shape s = px->shape;
      const auto& g = po->grad;
      std::vector<Real> sum_g(s.c, 0), sum_gx(s.c, 0);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g[c] += g[base + i];
            sum_gx[c] += g[base + i] * xhat[base + i];
          }
        }
      }
      if (pg->requires_grad) {
        auto gg = pg->grad_buffer();
        for (int c = 0; c < s.c; ++c) gg[c] += sum_gx[c];
      }
      if (pb->requires_grad) {
        auto gb = pb->grad_buffer();
        for (int c = 0; c < s.c; ++c) gb[c] += sum_g[c];
      }
      if (!px->requires_grad) return;
      auto gx = px->grad_buffer();
      const Real m = static_cast<Real>(count);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const Real scale_c = pg->data[c] * inv_std[c];
          const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
          if (mode == Mode::Train) {
            const Real mg = sum_g[c] / m;
            const Real mgx = sum_gx[c] / m;
            for (std::size_t i = 0; i < plane; ++i) {
              gx[base + i] += scale_c * (g[base + i] - mg - xhat[base + i] * mgx);
            }
          } else {
            for (std::size_t i = 0; i < plane; ++i) gx[base + i] += scale_c * g[base + i];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- resize

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: empty target size");
  const AxisTaps ty = bilinear_taps(s.h, out_h);
  const AxisTaps tx = bilinear_taps(s.w, out_w);
  const bool track = needs_grad({&x});
  Tensor out = make_output(Shape{s.n, s.c, out_h, out_w}, track);
  const int planes = s.n * s.c;
  {
    const Real* xd = x.data().data();
    Real* od = out.mutable_data().data();
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
      const Real* src = xd + static_cast<std::size_t>(p) * s.h * s.w;
      Real* dst = od + static_cast<std::size_t>(p) * out_h * out_w;
      for (int y = 0; y < out_h; ++y) {
        const Real* r0 = src + static_cast<std::size_t>(ty.lo[y]) * s.w;
        const Real* r1 = src + static_cast<std::size_t>(ty.hi[y]) * s.w;
        for (int xo = 0; xo < out_w; ++xo) {
          const int x0 = tx.lo[xo], x1 = tx.hi[xo];
          dst[y * out_w + xo] = ty.wlo[y] * (tx.wlo[xo] * r0[x0] + tx.whi[xo] * r0[x1]) +
                                ty.whi[y] * (tx.wlo[xo] * r1[x0] + tx.whi[xo] * r1[x1]);
        }
      }
    }
  }
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, ty, tx, out_h, out_w, planes] {
      const Shape s = px->shape;
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      for (int p = 0; p < planes; ++p) {
        Real* dst = gx.data() + static_cast<std::size_t>(p) * s.h * s.w;
        const Real* go = g.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
          Real* r0 = dst + static_cast<std::size_t>(ty.lo[y]) * s.w;
          Real* r1 = dst + static_cast<std::size_t>(ty.hi[y]) * s.w;
          for (int xo = 0; xo < out_w; ++xo) {
            const Real gv = go[y * out_w + xo];
            const int x0 = tx.lo[xo], x1 = tx.hi[xo];
            r0[x0] += gv * ty.wlo[y] * tx.wlo[xo];
            r0[x1] += gv * ty.wlo[y] * tx.whi[xo];
            r1[x0] += gv * ty.whi[y] * tx.wlo[xo];
            r1[x1] += gv * ty.whi[y] * tx.whi[xo];
          }
        }
      }
    });
  }
  return out;
}

Tensor upsample(const Tensor& x, int factor) {
  if (factor < 1) throw ShapeError("upsample: factor must be positive");
  return resize_bilinear(x, x.h() * factor, x.w() * factor);
}

Tensor downsample(const Tensor& x, int factor) {
  if (factor < 1 || x.h() % factor != 0 || x.w() % factor != 0) {
    throw ShapeError("downsample: " + x.shape().str() + " is not divisible by factor " +
                     std::to_string(factor));
  }
  return resize_bilinear(x, x.h() / factor, x.w() / factor);
}

Tensor downsample_ceil(const Tensor& x) {
  return resize_bilinear(x, std::max(1, (x.h() + 1) / 2), std::max(1, (x.w() + 1) / 2));
}

// ---------------------------------------------------------------- pooling

Tensor global_avg_pool(const Tensor& x) {
  const Shape& s = x.shape();
  const bool track = needs_grad({&x});
  Tensor out = make_output(Shape{s.n, s.c, 1, 1}, track);
  const std::size_t plane = s.plane();
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t p = 0; p < o.size(); ++p) {
    Real acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += xd[p * plane + i];
    o[p] = acc / static_cast<Real>(plane);
  }
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, plane] {
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      for (std::size_t p = 0; p < g.size(); ++p) {
        const Real v = g[p] / static_cast<Real>(plane);
        for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += v;
      }
    });
  }
  return out;
}

Tensor global_max_pool(const Tensor& x) {
  const Shape& s = x.shape();
  const bool track = needs_grad({&x});
  Tensor out = make_output(Shape{s.n, s.c, 1, 1}, track);
  const std::size_t plane = s.plane();
  auto o = out.mutable_data();
  auto xd = x.data();
  std::vector<std::size_t> argmax(o.size());
  for (std::size_t p = 0; p < o.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < plane; ++i) {
      if (xd[p * plane + i] > xd[p * plane + best]) best = i;
    }
    argmax[p] = p * plane + best;
    o[p] = xd[argmax[p]];
    note_branch_index(best);
  }
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, argmax = std::move(argmax)] {
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      for (std::size_t p = 0; p < g.size(); ++p) gx[argmax[p]] += g[p];
    });
  }
  return out;
}

Tensor avg_pool(const Tensor& x, int kernel, int stride, int padding) {
  const Shape& s = x.shape();
  if (kernel < 1 || stride < 1 || padding < 0 || kernel > s.h + 2 * padding ||
      kernel > s.w + 2 * padding) {
    throw ShapeError("avg_pool: window " + std::to_string(kernel) + " invalid for " + s.str());
  }
  const int oh = (s.h + 2 * padding - kernel) / stride + 1;
  const int ow = (s.w + 2 * padding - kernel) / stride + 1;
  const bool track = needs_grad({&x});
  Tensor out = make_output(Shape{s.n, s.c, oh, ow}, track);
  const int planes = s.n * s.c;
  auto window = [=](int o, int extent) {
    const int start = o * stride - padding;
    return std::pair<int, int>{std::max(0, start), std::min(extent, start + kernel)};
  };
  {
    const Real* xd = x.data().data();
    Real* od = out.mutable_data().data();
    for (int p = 0; p < planes; ++p) {
      const Real* src = xd + static_cast<std::size_t>(p) * s.h * s.w;
      Real* dst = od + static_cast<std::size_t>(p) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const auto [y0, y1] = window(y, s.h);
        for (int xo = 0; xo < ow; ++xo) {
          const auto [x0, x1] = window(xo, s.w);
          Real acc = 0;
          for (int iy = y0; iy < y1; ++iy) {
            for (int ix = x0; ix < x1; ++ix) acc += src[iy * s.w + ix];
          }
          dst[y * ow + xo] = acc / static_cast<Real>((y1 - y0) * (x1 - x0));
        }
      }
    }
  }
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, oh, ow, planes, window] {
      const Shape s = px->shape;
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      for (int p = 0; p < planes; ++p) {
        Real* dst = gx.data() + static_cast<std::size_t>(p) * s.h * s.w;
        const Real* go = g.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const auto [y0, y1] = window(y, s.h);
          for (int xo = 0; xo < ow; ++xo) {
            const auto [x0, x1] = window(xo, s.w);
            const Real v = go[y * ow + xo] / static_cast<Real>((y1 - y0) * (x1 - x0));
            for (int iy = y0; iy < y1; ++iy) {
              for (int ix = x0; ix < x1; ++ix) dst[iy * s.w + ix] += v;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- channels

Tensor softmax_channels(const Tensor& x, int groups) {
  const Shape& s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw ShapeError("softmax_channels: " + std::to_string(s.c) +
                     " channels not divisible into " + std::to_string(groups) + " groups");
  }
  const int per = s.c / groups;
  const std::size_t plane = s.plane();
  const bool track = needs_grad({&x});
  Tensor out = make_output(s, track);
  auto index = [=](int n, int g, int j, std::size_t i) {
    return (static_cast<std::size_t>(n) * s.c + g * per + j) * plane + i;
  };
  {
    auto xd = x.data();
    auto od = out.mutable_data();
    for (int n = 0; n < s.n; ++n) {
      for (int j = 0; j < per; ++j) {
        for (std::size_t i = 0; i < plane; ++i) {
          Real mx = -std::numeric_limits<Real>::infinity();
          for (int g = 0; g < groups; ++g) mx = std::max(mx, xd[index(n, g, j, i)]);
          Real total = 0;
          for (int g = 0; g < groups; ++g) {
            const Real e = std::exp(xd[index(n, g, j, i)] - mx);
            od[index(n, g, j, i)] = e;
            total += e;
          }
          for (int g = 0; g < groups; ++g) od[index(n, g, j, i)] /= total;
        }
      }
    }
  }
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, groups, per, plane, index] {
      const Shape s = px->shape;
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      const auto& y = po->data;
      for (int n = 0; n < s.n; ++n) {
        for (int j = 0; j < per; ++j) {
          for (std::size_t i = 0; i < plane; ++i) {
            Real dot = 0;
            for (int k = 0; k < groups; ++k) dot += y[index(n, k, j, i)] * g[index(n, k, j, i)];
            for (int k = 0; k < groups; ++k) {
              const std::size_t id = index(n, k, j, i);
              gx[id] += y[id] * (g[id] - dot);
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  const bool track = needs_grad({&a, &b});
  Tensor out = make_output(Shape{sa.n, sa.c + sb.c, sa.h, sa.w}, track);
  const std::size_t la = static_cast<std::size_t>(sa.c) * sa.h * sa.w;
  const std::size_t lb = static_cast<std::size_t>(sb.c) * sb.h * sb.w;
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (int n = 0; n < sa.n; ++n) {
      std::copy_n(ad.begin() + n * la, la, o.begin() + n * (la + lb));
      std::copy_n(bd.begin() + n * lb, lb, o.begin() + n * (la + lb) + la);
    }
  }
  if (track) {
    ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
    record(out, [pa, pb, po, la, lb] {
      const auto& g = po->grad;
      const int batch = pa->shape.n;
      if (pa->requires_grad) {
        auto ga = pa->grad_buffer();
        for (int n = 0; n < batch; ++n) {
          for (std::size_t i = 0; i < la; ++i) ga[n * la + i] += g[n * (la + lb) + i];
        }
      }
      if (pb->requires_grad) {
        auto gb = pb->grad_buffer();
        for (int n = 0; n < batch; ++n) {
          for (std::size_t i = 0; i < lb; ++i) gb[n * lb + i] += g[n * (la + lb) + la + i];
        }
      }
    });
  }
  return out;
}

Tensor slice_channels(const Tensor& x, int start, int count) {
  const Shape& s = x.shape();
  if (start < 0 || count < 1 || start + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " + s.str());
  }
  const bool track = needs_grad({&x});
  Tensor out = make_output(Shape{s.n, count, s.h, s.w}, track);
  const std::size_t plane = s.plane();
  {
    auto o = out.mutable_data();
    auto xd = x.data();
    for (int n = 0; n < s.n; ++n) {
      std::copy_n(xd.begin() + (static_cast<std::size_t>(n) * s.c + start) * plane,
                  count * plane, o.begin() + static_cast<std::size_t>(n) * count * plane);
    }
  }
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po, start, count, plane] {
      const Shape s = px->shape;
      auto gx = px->grad_buffer();
      const auto& g = po->grad;
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < count * plane; ++i) {
          gx[(static_cast<std::size_t>(n) * s.c + start) * plane + i] +=
              g[static_cast<std::size_t>(n) * count * plane + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  const bool track = needs_grad({&x});
  Tensor out = make_output(Shape{1, 1, 1, 1}, track);
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  out.mutable_data()[0] = acc;
  if (track) {
    ImplPtr px = x.impl(), po = out.impl();
    record(out, [px, po] {
      auto gx = px->grad_buffer();
      const Real g = po->grad[0];
      for (Real& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), Real(1) / static_cast<Real>(x.numel())); }

}  // namespace mhenet::ops
