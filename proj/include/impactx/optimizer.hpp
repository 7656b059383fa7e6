#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "impactx/autograd.hpp"

namespace impactx {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind optimizer_kind_from_string(const std::string& s);

// In-place parameter updates from populated gradients. Adam keeps per
// parameter first/second moment state keyed by Parameter address, with
// bias-corrected estimates (beta1=0.9, beta2=0.999, eps=1e-8).
class Optimizer {
public:
    Optimizer(OptimizerKind kind, float lr);

    void step(const std::vector<Parameter*>& params);
    void zero_grad(const std::vector<Parameter*>& params);

    float learning_rate() const { return lr_; }

private:
    struct Moments {
        std::vector<float> m;
        std::vector<float> v;
    };

    OptimizerKind kind_;
    float lr_;
    int step_count_ = 0;
    std::unordered_map<const Parameter*, Moments> state_;
};

}  // namespace impactx
