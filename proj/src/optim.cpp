#include "unicon/optim.hpp"

#include <cmath>

#include "unicon/errors.hpp"

namespace unicon {

AdamW::AdamW(std::vector<Parameter*> trainable, AdamWConfig config)
    : params_(std::move(trainable)), config_(config) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!slot_.emplace(params_[i], i).second) {
            throw ContractError("parameter '" + params_[i]->name + "' registered twice with the optimizer");
        }
        m_.emplace_back(params_[i]->value.shape(), 0.0);
        v_.emplace_back(params_[i]->value.shape(), 0.0);
    }
}

const Tensor& AdamW::first_moment(const Parameter& p) const { return m_.at(slot_.at(&p)); }
const Tensor& AdamW::second_moment(const Parameter& p) const { return v_.at(slot_.at(&p)); }

void AdamW::step(const ParamGrads& grads) {
    std::vector<const Tensor*> by_slot(params_.size(), nullptr);
    for (const auto& [p, g] : grads) {
        auto it = slot_.find(p);
        if (it == slot_.end()) {
            throw OwnershipError("gradient for '" + p->name + "', which the active composition does not own");
        }
        if (g.shape() != p->value.shape()) {
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match parameter '" + p->name + "'");
        }
        by_slot[it->second] = &g;
    }

    ++step_;
    const double lr = config_.learning_rate;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double decay = 1.0 - lr * config_.weight_decay;

    for (std::size_t s = 0; s < params_.size(); ++s) {
        Tensor& theta = params_[s]->value;
        Tensor& m = m_[s];
        Tensor& v = v_[s];
        const Tensor* g = by_slot[s];
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            if (config_.weight_decay != 0.0) theta[i] *= decay;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
        }
    }
}

}  // namespace unicon
