#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mhenet/tensor.hpp"

namespace mhenet {

struct GradCheckOptions {
  double step = 1e-4;
  /// Coordinates probed per tensor; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1234;
  /// Denominator floor. Exactly-zero derivatives come back from the stencil
  /// as roundoff around 1e-11, which a smaller floor would count as error.
  double floor = 1e-6;
  /// Times the step is cut by 10 when the probes land on a different
  /// relu/argmax pattern than x, or the estimates at h and h/2 disagree.
  int max_refinements = 3;
  /// Relative agreement needed between the h and h/2 estimates, on top of
  /// the stencil's roundoff level.
  double stability = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t coords = 0;
  std::size_t refined = 0;     // coordinates that needed a smaller step
  std::size_t unresolved = 0;  // still straddling a kink at the smallest step
  std::string worst;  // "tensor#index analytic=.. numeric=.."
};

/// Compares the reverse-mode gradient of a scalar function with central
/// differences (points x +- h, x +- 2h), perturbing the given leaf tensors in
/// place.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                           const GradCheckOptions& options = {});

/// Turns a tensor-valued function into the scalar sum_k sum(r_k * out_k) for
/// fixed random r_k drawn on first use.
std::function<Tensor()> random_projection(std::function<std::vector<Tensor>()> outputs,
                                          std::uint64_t seed);

struct SuiteEntry {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coords = 0;
  std::size_t refined = 0;
  std::size_t unresolved = 0;
  std::string worst;
  bool passed() const { return max_rel_error < tolerance && unresolved == 0; }
};

struct SuiteOptions {
  std::uint64_t seed = 1;
  bool include_network = true;
  std::function<void(const SuiteEntry&)> on_entry;
};

inline constexpr double kBlockGradTolerance = 1e-4;
inline constexpr double kNetworkGradTolerance = 1e-3;

/// Every block, the losses and the full network, each exactly once.
std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& options = {});

}  // namespace mhenet
