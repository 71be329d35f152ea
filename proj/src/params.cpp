#include "mhenet/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mhenet {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  // rejection sampling keeps the draw unbiased
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % n);
}

namespace {
std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

Tensor ParamStore::add(const std::string& name, ParamKind kind, Tensor value) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
  value.set_requires_grad(kind == ParamKind::Learnable);
  index_[name] = entries_.size();
  entries_.push_back(ParamEntry{name, kind, value});
  return value;
}

const ParamEntry* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::vector<Tensor> ParamStore::learnable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.kind == ParamKind::Learnable) out.push_back(e.tensor);
  }
  return out;
}

std::size_t ParamStore::count(ParamKind kind) const {
  std::size_t total = 0;
  for (const auto& e : entries_) {
    if (e.kind == kind) total += e.tensor.numel();
  }
  return total;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) {
    Tensor t = e.tensor;
    t.zero_grad();
  }
}

ParamScope ParamScope::child(const std::string& name) const {
  return ParamScope(*store_, *rng_, qualify(name));
}

std::string ParamScope::qualify(const std::string& name) const {
  return prefix_.empty() ? name : prefix_ + "." + name;
}

Tensor ParamScope::uniform(const std::string& name, Shape shape, double bound) const {
  Tensor t(shape);
  if (bound > 0) {
    for (Real& v : t.mutable_data()) v = static_cast<Real>(rng_->uniform(-bound, bound));
  }
  return store_->add(qualify(name), ParamKind::Learnable, t);
}

Tensor ParamScope::constant(const std::string& name, Shape shape, Real value) const {
  return store_->add(qualify(name), ParamKind::Learnable, Tensor(shape, value));
}

Tensor ParamScope::buffer(const std::string& name, Shape shape, Real value) const {
  return store_->add(qualify(name), ParamKind::Buffer, Tensor(shape, value));
}

Tensor ParamScope::frozen(const std::string& name, Tensor value) const {
  return store_->add(qualify(name), ParamKind::Frozen, value);
}

}  // namespace mhenet
