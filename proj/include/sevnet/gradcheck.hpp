// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sevnet/tensor.hpp"

namespace sevnet {

struct FiniteDiffOptions {
  double step = 1e-5;
  /// Error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
  /// Coordinates checked per input tensor; 0 checks all of them.
  std::size_t max_coords = 0;
};

struct FiniteDiffResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  /// Coordinates whose perturbation flipped a relu, where the function is
  /// not differentiable at the step size used.
  std::size_t skipped = 0;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares autodiff against central differences for every input marked
/// requires_grad. Outputs of any shape are reduced with fixed random weights,
/// so gradients that cancel under a plain sum are still exercised.
FiniteDiffResult check_gradients(const TensorFn& f, const std::vector<Tensor>& inputs,
                                 std::mt19937_64& rng, const FiniteDiffOptions& options = {});

enum class GradCheckSize { tiny, standard };

GradCheckSize parse_gradcheck_size(const std::string& text);
const char* to_string(GradCheckSize size);

struct GradCheckResult {
  std::string name;
  bool block = false;
  int cases = 0;
  double max_rel_error = 0;
  std::string worst_case;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

struct GradCheckReport {
  double tolerance = 1e-4;
  std::vector<GradCheckResult> results;

  bool all_passed() const;
  std::vector<std::string> failed() const;
  std::string to_text() const;
};

/// Primitive ops and residual blocks covered by the suite, in report order.
const std::vector<std::string>& gradcheck_primitives();
const std::vector<std::string>& gradcheck_blocks();

/// Runs every primitive and block over `cases` random shapes each.
GradCheckReport run_gradcheck(std::uint64_t seed, GradCheckSize size, int cases = 20,
                              const std::function<void(const GradCheckResult&)>& progress = {});

}  // namespace sevnet
