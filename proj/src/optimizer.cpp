#include "impactx/optimizer.hpp"

#include <cmath>

namespace impactx {

OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

Optimizer::Optimizer(OptimizerKind kind, float lr) : kind_(kind), lr_(lr) {
    if (!(lr > 0.0f)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
}

void Optimizer::step(const std::vector<Parameter*>& params) {
    if (kind_ == OptimizerKind::Sgd) {
        for (Parameter* p : params) {
            float* w = p->value.data();
            const float* g = p->grad.data();
            for (std::int64_t i = 0; i < p->value.size(); ++i) w[i] -= lr_ * g[i];
        }
        return;
    }
    constexpr float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    ++step_count_;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(step_count_));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(step_count_));
    for (Parameter* p : params) {
        Moments& mom = state_[p];
        const size_t n = static_cast<size_t>(p->value.size());
        if (mom.m.size() != n) {
            mom.m.assign(n, 0.0f);
            mom.v.assign(n, 0.0f);
        }
        float* w = p->value.data();
        const float* g = p->grad.data();
        for (size_t i = 0; i < n; ++i) {
            mom.m[i] = beta1 * mom.m[i] + (1.0f - beta1) * g[i];
            mom.v[i] = beta2 * mom.v[i] + (1.0f - beta2) * g[i] * g[i];
            const float mhat = mom.m[i] / bc1;
            const float vhat = mom.v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void Optimizer::zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

}  // namespace impactx
