#pragma once

// Property suites run at 64-bit: finite-difference gradient checks,
// closed-form equivalences, loop oracles for the statistics, the cyclic
// oracle and the momentum bank bound.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stylebend/tensor.hpp"

namespace stylebend {

struct CheckResult {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::string detail;
};

struct SuiteReport {
    std::string suite;
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    bool passed() const;
    double max_error() const;
};

struct GradcheckOptions {
    double step = 1e-6;          // scaled by max(1, |x|)
    double tolerance = 1e-4;     // on the relative error
    double denominator_floor = 1e-4;
    // Coordinates where the central difference disagrees with a half-step
    // difference by more than this are treated as kinks and skipped.
    double kink_threshold = 1e-5;
    double max_skip_fraction = 0.05;
};

// f must return a scalar. Every input is a leaf that f reads directly; the
// checker perturbs their values in place and restores them.
using ScalarFn = std::function<Tensor<double>()>;

CheckResult gradcheck(const std::string& name, const ScalarFn& f, std::vector<Tensor<double>> inputs,
                      const GradcheckOptions& opts = {});

std::vector<std::string> verify_suite_names();

// Throws std::invalid_argument for unknown suite names.
SuiteReport run_verify_suite(const std::string& suite, std::uint64_t seed);

std::string format_report(const SuiteReport& report);

}  // namespace stylebend
