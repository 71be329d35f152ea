#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mhenet/tensor.hpp"

namespace mhenet {

/// Seeded generator. All randomness in the library flows through this so a
/// run is reproducible from its seed on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  /// Independent stream seed for (seed, a, b), e.g. (run seed, epoch, sample).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

enum class ParamKind : std::uint8_t {
  Learnable,  // updated by the optimizer
  Buffer,     // running statistics
  Frozen,     // fixed constants that still travel with the checkpoint
};

struct ParamEntry {
  std::string name;
  ParamKind kind;
  Tensor tensor;
};

/// Flat, ordered registry of every named tensor in a model. Tensors are
/// handles, so modules keep aliases and the store sees their updates.
class ParamStore {
 public:
  Tensor add(const std::string& name, ParamKind kind, Tensor value);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  const ParamEntry* find(const std::string& name) const;
  std::vector<Tensor> learnable() const;
  std::size_t count(ParamKind kind) const;
  void zero_grad();

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Builder view onto a store: a name prefix plus the init generator.
class ParamScope {
 public:
  ParamScope(ParamStore& store, Rng& rng, std::string prefix = "")
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamScope child(const std::string& name) const;
  const std::string& prefix() const { return prefix_; }
  Rng& rng() const { return *rng_; }

  /// Learnable tensor drawn uniformly from [-bound, bound] (bound 0 gives zeros).
  Tensor uniform(const std::string& name, Shape shape, double bound) const;
  Tensor constant(const std::string& name, Shape shape, Real value) const;
  Tensor buffer(const std::string& name, Shape shape, Real value) const;
  Tensor frozen(const std::string& name, Tensor value) const;

 private:
  std::string qualify(const std::string& name) const;

  ParamStore* store_;
  Rng* rng_;
  std::string prefix_;
};

}  // namespace mhenet
