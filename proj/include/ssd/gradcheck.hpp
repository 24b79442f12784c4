#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ssd/graph.hpp"

namespace ssd::diff {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;   // where the max error (or non-finite value) occurred
  int n_coords = 0;
};

// Builds a scalar from graph leaves created from `leaves` (in order).
using ScalarBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Central finite differences against the analytic backward pass.
// Checks >=100 random coordinates (all of them when there are fewer);
// rel_err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckReport gradient_check(const ScalarBuilder& f,
                               std::vector<Tensor> leaves, double step,
                               double tol, std::uint64_t seed = 0,
                               int min_coords = 100);

struct SuiteEntry {
  std::string name;
  GradCheckReport report;
};

// One gradient check per differentiable op kind plus the composite loss
// paths, each over its valid input domain. Used by the unit tests and by
// the `gradcheck` CLI command.
std::vector<SuiteEntry> run_gradient_suite(double step = 1e-3,
                                           double tol = 1e-4,
                                           std::uint64_t seed = 7);

}  // namespace ssd::diff
