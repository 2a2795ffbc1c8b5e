#pragma once

#include <cstdint>
#include <vector>

#include "etta/tensor.hpp"

namespace etta {

template <typename T>
struct AdamConfig {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

// Standard Adam with bias correction. step() consumes whatever gradients are
// currently accumulated; zeroing them afterwards is the caller's duty.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamConfig<T> cfg);

    void step();       // throws if any parameter has no accumulated gradient
    void zero_grad();  // convenience: zeros every parameter gradient
    void reset();      // moments and step count back to the initial state

    int64_t step_count() const { return step_count_; }
    T lr() const { return cfg_.lr; }
    void set_lr(T lr) { cfg_.lr = lr; }
    const std::vector<Tensor<T>>& params() const { return params_; }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    int64_t step_count_ = 0;
    AdamConfig<T> cfg_;
};

extern template class Adam<float>;
extern template class Adam<double>;

using AdamF = Adam<float>;

}  // namespace etta
