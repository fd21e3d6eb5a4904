#pragma once

#include <vector>

#include "dbench/tensor.h"

namespace dbench {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

// Adam over a fixed parameter list. Parameters are updated in place.
class Adam {
   public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    void step();
    void zero_grad();
    void set_lr(float lr) { cfg_.lr = lr; }
    const AdamConfig& config() const { return cfg_; }

   private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    AdamConfig cfg_;
    long t_ = 0;
};

}  // namespace dbench
