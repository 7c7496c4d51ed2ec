#pragma once

#include <cstddef>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unicon/autodiff.hpp"

namespace unicon {

struct AdamWConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-5;
};

using ParamGrads = std::vector<std::pair<const Parameter*, Tensor>>;

// AdamW with decoupled weight decay: theta *= (1 - lr * wd) is applied before
// the bias-corrected Adam update. Moments exist only for the parameters handed
// to the constructor; a gradient for anything else is an ownership violation.
class AdamW {
public:
    AdamW(std::vector<Parameter*> trainable, AdamWConfig config);

    // Parameters absent from `grads` are updated as if their gradient were zero.
    void step(const ParamGrads& grads);

    std::size_t step_count() const noexcept { return step_; }
    const AdamWConfig& config() const noexcept { return config_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    const Tensor& first_moment(const Parameter& p) const;
    const Tensor& second_moment(const Parameter& p) const;
    std::size_t tracked() const noexcept { return params_.size(); }

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::unordered_map<const Parameter*, std::size_t> slot_;
    AdamWConfig config_;
    std::size_t step_ = 0;
};

}  // namespace unicon
