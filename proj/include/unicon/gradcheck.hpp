#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unicon/autodiff.hpp"

namespace unicon {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckResult {
    std::string family;
    double max_rel_error = 0.0;  // worst over every seed and checked input
    std::size_t seeds = 0;

    bool pass() const { return max_rel_error < kGradCheckTolerance; }
};

// Like grad_check, but differentiates a loss with respect to parameters bound
// through Binder::adapter, so composed adapter paths run their real code.
double param_grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params, double h = 1e-5);

std::vector<std::string> grad_check_families();
// Each family on `seeds` random instances derived from master_seed.
GradCheckResult run_grad_check(const std::string& family, std::size_t seeds, std::uint64_t master_seed);
std::vector<GradCheckResult> run_grad_checks(std::size_t seeds, std::uint64_t master_seed);

}  // namespace unicon
