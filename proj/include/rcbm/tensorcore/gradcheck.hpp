#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rcbm/tensorcore/tape.hpp"

namespace rcbm {

// A randomly composed differentiable graph over the op set. `build` must be
// deterministic: it is re-run for every finite-difference probe.
struct RandomGraph {
  std::string description;
  std::vector<Tensor> params;
  std::function<Tensor(Tape&)> build;

  std::size_t parameter_count() const;
};

RandomGraph make_random_graph(std::uint64_t seed, std::size_t max_params = 5000);

struct FiniteDifferenceResult {
  double max_relative_error = 0.0;  // over entries with |fd| >= small_threshold
  double max_small_abs_error = 0.0;  // over entries with |fd| <  small_threshold
  std::size_t entries = 0;
  std::size_t kink_entries = 0;  // no smooth stencil down to the minimum step
};

/// Compares analytic gradients of `graph` to Ridders-extrapolated central
/// differences starting at `step`. The starting step shrinks by 10x while any
/// evaluation straddles a relu/max/clamp kink; entries still straddling one at
/// the minimum step are counted, not compared.
FiniteDifferenceResult finite_difference_check(const RandomGraph& graph, double step = 1e-1,
                                               double small_threshold = 1e-8);

struct GradcheckOptions {
  std::size_t graphs = 25;
  std::uint64_t seed = 0;
  std::size_t max_params = 5000;
  double step = 1e-1;
  double relative_tolerance = 1e-6;
  double small_threshold = 1e-8;  // |fd| below this is compared absolutely
  double checkpoint_tolerance = 1e-12;
};

struct GradcheckReport {
  std::size_t graphs = 0;
  std::size_t entries = 0;
  std::size_t kink_entries = 0;
  double max_relative_error = 0.0;
  double max_small_abs_error = 0.0;
  double checkpoint_max_diff = 0.0;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
};

/// Finite-difference suite over random graphs.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

/// Checkpoint-equivalence suite: forward values and leaf gradients with and
/// without checkpoint regions (including dropout inside a region) must agree.
/// Fills checkpoint_max_diff and appends any failures to `report`.
void run_checkpoint_equivalence(const GradcheckOptions& options, GradcheckReport& report);

}  // namespace rcbm
