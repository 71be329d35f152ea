#include <cmath>

#include "doctest.h"
#include "mhenet/loss.hpp"
#include "mhenet/optim.hpp"
#include "mhenet/train.hpp"

using namespace mhenet;

namespace {

Tensor probs(std::vector<Real> v, bool grad = false) {
  const int n = static_cast<int>(v.size());
  return Tensor(Shape{1, 1, 1, n}, std::move(v), grad);
}

}  // namespace

TEST_CASE("bce against hand values") {
  const Tensor m = probs({0.9, 0.2, 0.5, 0.0});
  const Tensor g = probs({1, 0, 1, 0});
  const double expect =
      -(std::log(0.9) + std::log(0.8) + std::log(0.5) + std::log(1 - 1e-7)) / 4;
  CHECK(bce_loss(m, g).item() == doctest::Approx(expect).epsilon(1e-14));
  // the clamp keeps a confident miss finite
  CHECK(bce_loss(probs({0}), probs({1})).item() == doctest::Approx(-std::log(1e-7)));
  CHECK_THROWS_AS(bce_loss(m, probs({1, 0})), ShapeError);
}

TEST_CASE("bce gradient at the clamp passes straight through") {
  Tensor m = probs({0.0, 0.5}, true);
  backward(bce_loss(m, probs({1, 1})));
  CHECK(m.grad()[0] == doctest::Approx(-1 / 1e-7 / 2));
  CHECK(m.grad()[1] == doctest::Approx(-1 / 0.5 / 2));
}

TEST_CASE("iou against hand values") {
  // two samples of two pixels each
  const Tensor m(Shape{2, 1, 1, 2}, std::vector<Real>{0.5, 0.25, 1, 0});
  const Tensor g(Shape{2, 1, 1, 2}, std::vector<Real>{1, 0, 0, 0});
  // sample 0: I = 0.5, U = 1 + 0.25; sample 1: I = 0, U = 1
  const double expect = ((1 - 0.5 / 1.25) + 1.0) / 2;
  CHECK(iou_loss(m, g).item() == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("iou with empty union is zero and has no gradient") {
  Tensor m = probs({0, 0, 0}, true);
  const Tensor loss = iou_loss(m, probs({0, 0, 0}));
  CHECK(loss.item() == 0);
  backward(loss);
  for (Real v : m.grad()) CHECK(v == 0);
}

TEST_CASE("total loss sums the heads") {
  const Tensor g = probs({1, 0, 1});
  const std::array<Tensor, 3> heads{probs({0.7, 0.1, 0.6}), probs({0.2, 0.3, 0.9}),
                                    probs({0.5, 0.5, 0.5})};
  const LossBreakdown b = total_loss(heads, g);
  double sum = 0;
  for (int k = 0; k < 3; ++k) {
    CHECK(b.bce[k] == doctest::Approx(bce_loss(heads[k], g).item()));
    CHECK(b.iou[k] == doctest::Approx(iou_loss(heads[k], g).item()));
    sum += b.bce[k] + b.iou[k];
  }
  CHECK(b.total_value == doctest::Approx(sum).epsilon(1e-14));
}

TEST_CASE("adam matches hand-computed steps") {
  Tensor p(Shape{1, 1, 1, 2}, std::vector<Real>{1, -2}, true);
  Adam opt({p}, AdamOptions{0.1, 0.9, 0.999, 1e-8});
  // loss = 3 p0 + p1^2, grads 3 and 2 p1
  const Tensor lin(Shape{1, 1, 1, 2}, std::vector<Real>{3, 0});
  const Tensor quad(Shape{1, 1, 1, 2}, std::vector<Real>{0, 1});
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1, -2};
  for (int t = 1; t <= 3; ++t) {
    opt.zero_grad();
    backward(ops::sum(ops::add(ops::mul(lin, p), ops::mul(ops::mul(p, p), quad))));
    opt.step();
    const double g[2] = {3, 2 * x[1]};
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p.data()[i] == doctest::Approx(x[i]).epsilon(1e-13));
    }
  }
  CHECK(opt.steps() == 3);
}

TEST_CASE("adam leaves gradient-free params alone") {
  Tensor a(Shape{1, 1, 1, 1}, 1.0, true), b(Shape{1, 1, 1, 1}, 1.0, true);
  Adam opt({a, b}, AdamOptions{0.1});
  backward(ops::scale(a, 2));
  opt.step();
  CHECK(a.data()[0] < 1);
  CHECK(b.data()[0] == 1);
}

TEST_CASE("step decay schedule") {
  CHECK(lr_at_epoch(5e-5, 1, 40, 0.1) == doctest::Approx(5e-5));
  CHECK(lr_at_epoch(5e-5, 40, 40, 0.1) == doctest::Approx(5e-5));
  CHECK(lr_at_epoch(5e-5, 41, 40, 0.1) == doctest::Approx(5e-6));
  CHECK(lr_at_epoch(5e-5, 81, 40, 0.1) == doctest::Approx(5e-7));
}

TEST_CASE("train config defaults and json") {
  TrainConfig c;
  CHECK(c.lr == 5e-5);
  CHECK(c.batch == 8);
  CHECK(c.epochs == 100);
  CHECK(c.decay_every == 40);
  nlohmann::json j = {{"epochs", 3}};
  const TrainConfig partial = TrainConfig::from_json(j);
  CHECK(partial.epochs == 3);
  CHECK(partial.batch == 8);
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  TrainConfig bad = c;
  bad.batch = 1;
  CHECK_THROWS(bad.validate());
}
