#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "etta/tensor.hpp"

namespace etta::gradcheck {

struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool ok = false;
};

// Compares the analytic gradient of loss_fn w.r.t. `probe` against central
// finite differences at `probes` randomly chosen elements. f64 throughout.
CheckResult check_scalar_fn(const std::string& name,
                            const std::function<TensorD(const TensorD&)>& loss_fn,
                            TensorD probe, int probes, uint64_t seed, double h = 1e-6,
                            double tol = 1e-4);

// Full finite-difference suite covering every differentiable primitive and
// every loss. Prints one line per check to stdout when verbose.
std::vector<CheckResult> run_suite(uint64_t seed, bool verbose);

bool all_ok(const std::vector<CheckResult>& results);

}  // namespace etta::gradcheck
