#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mhenet/gradcheck.hpp"
#include "mhenet/ops.hpp"
#include "mhenet/params.hpp"
#include "oracles.hpp"

using namespace mhenet;
using namespace mhenet::ops;

namespace {

Tensor random(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  Tensor t(s);
  for (Real& v : t.mutable_data()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

std::vector<double> as_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("broadcast add and mismatched shapes") {
  Tensor a(Shape{2, 3, 2, 2}, 1.0);
  Tensor b(Shape{1, 3, 1, 1}, std::vector<Real>{1, 2, 3});
  const Tensor y = add(a, b);
  CHECK(y.at(1, 2, 1, 1) == 4);
  CHECK(y.at(0, 0, 0, 0) == 2);
  CHECK_THROWS_AS(add(a, Tensor(Shape{2, 2, 2, 2})), ShapeError);
}

TEST_CASE("fan-out accumulates gradients") {
  // y = x*x + x, dy/dx = 2x + 1
  Tensor x(Shape{1, 1, 1, 3}, std::vector<Real>{-1, 0.5, 2}, true);
  backward(sum(add(mul(x, x), x)));
  CHECK(x.grad()[0] == doctest::Approx(-1));
  CHECK(x.grad()[1] == doctest::Approx(2));
  CHECK(x.grad()[2] == doctest::Approx(5));
}

TEST_CASE("tape replays in reverse order and no-grad records nothing") {
  Tape::current().clear();
  Tensor x(Shape{1, 1, 2, 2}, 1.0, true);
  {
    NoGradGuard guard;
    sigmoid(x);
    CHECK(Tape::current().size() == 0);
  }
  Tensor y = relu(scale(x, 2));
  CHECK(Tape::current().size() == 2);
  std::vector<std::size_t> order;
  Tape::current().set_replay_observer([&](std::size_t i) { order.push_back(i); });
  backward(sum(y));
  Tape::current().set_replay_observer(nullptr);
  CHECK(order == std::vector<std::size_t>{2, 1, 0});
}

TEST_CASE("conv2d matches a direct six-loop oracle") {
  for (int stride : {1, 2}) {
    for (int k : {1, 3, 5}) {
      const int pad = (k - 1) / 2;
      const Tensor x = random(Shape{2, 3, 7, 6}, 10 + k);
      const Tensor w = random(Shape{4, 3, k, k}, 20 + k);
      const Tensor y = conv2d(x, w, std::nullopt, stride, pad);
      const auto ref = oracle::conv2d(as_vec(x), 2, 3, 7, 6, as_vec(w), 4, k, k, stride, pad);
      REQUIRE(y.numel() == ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d bias and shape errors") {
  const Tensor x = random(Shape{1, 2, 4, 4}, 1);
  const Tensor w = random(Shape{3, 2, 3, 3}, 2);
  const Tensor b(Shape{1, 3, 1, 1}, std::vector<Real>{1, -1, 0.5});
  const Tensor plain = conv2d(x, w, std::nullopt, 1, 1);
  const Tensor biased = conv2d(x, w, b, 1, 1);
  CHECK(biased.at(0, 1, 2, 3) == doctest::Approx(plain.at(0, 1, 2, 3) - 1));
  CHECK_THROWS_AS(conv2d(x, random(Shape{3, 5, 3, 3}, 3), std::nullopt, 1, 1), ShapeError);
}

TEST_CASE("depthwise conv equals per-channel conv") {
  const Tensor x = random(Shape{2, 3, 5, 5}, 4);
  const Tensor k = random(Shape{3, 1, 3, 3}, 5);
  const Tensor y = depthwise_conv2d(x, k, 1);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> xc, kc;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 25; ++i) xc.push_back(x.data()[(n * 3 + c) * 25 + i]);
    for (int i = 0; i < 9; ++i) kc.push_back(k.data()[c * 9 + i]);
    const auto ref = oracle::conv2d(xc, 2, 1, 5, 5, kc, 1, 3, 3, 1, 1);
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 25; ++i)
        CHECK(y.data()[(n * 3 + c) * 25 + i] == doctest::Approx(ref[n * 25 + i]).epsilon(1e-12));
  }
}

TEST_CASE("bilinear upsample golden") {
  const Tensor x(Shape{1, 1, 2, 2}, std::vector<Real>{0, 1, 2, 3});
  const Tensor y = upsample(x, 2);
  const std::vector<double> golden = {0,   .25,  .75,  1,    .5, .75,  1.25, 1.5,
                                      1.5, 1.75, 2.25, 2.5,  2,  2.25, 2.75, 3};
  REQUIRE(y.numel() == 16);
  for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx(golden[i]).epsilon(1e-15));
}

TEST_CASE("downsample by two averages 2x2 blocks") {
  const Tensor x = random(Shape{1, 2, 4, 6}, 6);
  const Tensor y = downsample(x, 2);
  REQUIRE(y.shape() == Shape{1, 2, 2, 3});
  const double expect = (x.at(0, 1, 2, 2) + x.at(0, 1, 2, 3) + x.at(0, 1, 3, 2) + x.at(0, 1, 3, 3)) / 4;
  CHECK(y.at(0, 1, 1, 1) == doctest::Approx(expect).epsilon(1e-14));
  CHECK_THROWS_AS(downsample(random(Shape{1, 1, 5, 4}, 1), 2), ShapeError);
}

TEST_CASE("linear ramp survives up/down round trip on the interior") {
  Tensor x(Shape{1, 1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) x.at(0, 0, i, j) = 0.3 * i - 0.7 * j;
  const Tensor back = downsample(upsample(x, 2), 2);
  for (int i = 1; i < 7; ++i)
    for (int j = 1; j < 7; ++j) CHECK(back.at(0, 0, i, j) == doctest::Approx(x.at(0, 0, i, j)).epsilon(1e-12));
}

TEST_CASE("ceil halving") {
  CHECK(downsample_ceil(random(Shape{1, 1, 5, 4}, 1)).shape() == Shape{1, 1, 3, 2});
  CHECK(downsample_ceil(random(Shape{1, 1, 1, 1}, 1)).shape() == Shape{1, 1, 1, 1});
}

TEST_CASE("pooling") {
  const Tensor x(Shape{1, 1, 2, 3}, std::vector<Real>{1, 5, 2, 4, 0, 6});
  CHECK(global_avg_pool(x).item() == doctest::Approx(3));
  CHECK(global_max_pool(x).item() == 6);
  // corner window sees four in-bounds elements only
  const Tensor a = avg_pool(x, 3, 1, 1);
  CHECK(a.at(0, 0, 0, 0) == doctest::Approx((1 + 5 + 4 + 0) / 4.0));
  CHECK(a.at(0, 0, 1, 1) == doctest::Approx(18 / 6.0));
  // max-pool gradient goes to the first maximum only
  Tensor y(Shape{1, 1, 1, 4}, std::vector<Real>{3, 7, 7, 1}, true);
  backward(global_max_pool(y));
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("channel softmax sums to one per group position") {
  const Tensor x = random(Shape{2, 6, 3, 3}, 8, -5, 5);
  const Tensor s = softmax_channels(x, 2);
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 3; ++j)
      for (int p = 0; p < 9; ++p) {
        const double a = s.data()[(n * 6 + j) * 9 + p], b = s.data()[(n * 6 + 3 + j) * 9 + p];
        CHECK(a + b == doctest::Approx(1).epsilon(1e-15));
        CHECK(a > 0);
      }
  CHECK_THROWS_AS(softmax_channels(x, 4), ShapeError);
}

TEST_CASE("concat and slice round trip") {
  const Tensor a = random(Shape{2, 2, 3, 3}, 1), b = random(Shape{2, 3, 3, 3}, 2);
  const Tensor c = concat_channels(a, b);
  CHECK(c.shape() == Shape{2, 5, 3, 3});
  CHECK(as_vec(slice_channels(c, 2, 3)) == as_vec(b));
  CHECK(as_vec(slice_channels(c, 0, 2)) == as_vec(a));
}

TEST_CASE("batch norm moments and running statistics") {
  const Tensor x = random(Shape{4, 2, 3, 3}, 9, -2, 3);
  Tensor gamma(Shape{1, 2, 1, 1}, 1.0), beta(Shape{1, 2, 1, 1}, 0.0);
  Tensor rm(Shape{1, 2, 1, 1}, 0.0), rv(Shape{1, 2, 1, 1}, 1.0);
  const Tensor y = batch_norm(x, gamma, beta, rm, rv, Mode::Train);
  for (int c = 0; c < 2; ++c) {
    double m = 0, m2 = 0, xm = 0;
    std::vector<double> xs;
    for (int n = 0; n < 4; ++n)
      for (int p = 0; p < 9; ++p) {
        const double v = y.data()[(n * 2 + c) * 9 + p];
        m += v;
        m2 += v * v;
        xs.push_back(x.data()[(n * 2 + c) * 9 + p]);
        xm += xs.back();
      }
    m /= 36;
    m2 /= 36;
    xm /= 36;
    double ss = 0;
    for (double v : xs) ss += (v - xm) * (v - xm);
    CHECK(std::fabs(m) < 1e-12);
    CHECK(m2 == doctest::Approx((ss / 36) / (ss / 36 + 1e-5)).epsilon(1e-12));
    CHECK(rm.data()[c] == doctest::Approx(0.1 * xm));
    CHECK(rv.data()[c] == doctest::Approx(0.9 + 0.1 * ss / 35));
  }
  // eval mode is the affine map of the running statistics
  const Tensor e = batch_norm(x, gamma, beta, rm, rv, Mode::Eval);
  CHECK(e.at(1, 1, 2, 0) ==
        doctest::Approx((x.at(1, 1, 2, 0) - rm.data()[1]) / std::sqrt(rv.data()[1] + 1e-5)));
  Tensor rm1 = rm.clone(), rv1 = rv.clone();
  CHECK_THROWS(batch_norm(random(Shape{1, 2, 3, 3}, 1), gamma, beta, rm1, rv1, Mode::Train));
}

TEST_CASE("sqrt_eps at zero") {
  CHECK(sqrt_eps(Tensor::scalar(0), Real(1e-6)).item() == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("grad_check flags a corrupted backward rule") {
  const Tensor x = random(Shape{1, 2, 3, 3}, 12);
  auto f = random_projection([&] { return std::vector<Tensor>{relu(scale(x, 3))}; }, 5);
  CHECK(grad_check(f, {x}).max_rel_error < 1e-6);
  inject_backward_fault(true);
  const double faulty = grad_check(f, {x}).max_rel_error;
  inject_backward_fault(false);
  CHECK(faulty > 0.1);
}

TEST_CASE("kink-aware step refinement") {
  // relu(x - 1e-5): a 1e-4 step straddles the kink, a smaller one does not
  Tensor x(Shape{1, 1, 1, 1}, 0.0);
  auto f = [&] { return sum(relu(add_scalar(x, Real(-1e-5)))); };
  x.mutable_data()[0] = Real(3e-5);
  const GradCheckReport r = grad_check(f, {x});
  CHECK(r.refined == 1);
  CHECK(r.max_rel_error < 1e-9);
}
