#include "etta/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace etta {

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamConfig<T> cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.data().size(), T(0));
        v_.emplace_back(p.data().size(), T(0));
    }
}

template <typename T>
void Adam<T>::step() {
    ++step_count_;
    const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(step_count_));
    const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(step_count_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi];
        if (!p.has_grad())
            throw std::runtime_error("adam: parameter " + std::to_string(pi) +
                                     " has no accumulated gradient");
        const auto& g = p.grad();
        auto& m = m_[pi];
        auto& v = v_[pi];
        T* pd = p.data().data();
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (T(1) - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
            T mhat = m[i] / bc1;
            T vhat = v[i] / bc2;
            pd[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Adam<T>::reset() {
    step_count_ = 0;
    for (auto& m : m_) std::fill(m.begin(), m.end(), T(0));
    for (auto& v : v_) std::fill(v.begin(), v.end(), T(0));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace etta
