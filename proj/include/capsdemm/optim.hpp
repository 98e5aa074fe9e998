#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "capsdemm/tensor.hpp"

namespace capsdemm {

struct TrainHistoryRow {
    int epoch = 0;
    double train_loss = 0;
    double val_metric = 0;
};

// Adam with bias correction. One moment pair per parameter element; the step
// counter is shared by all parameters.
template <class T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<Tensor<T>> params, T lr = T(1e-3), T beta1 = T(0.9),
                           T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (lr_ <= T(0)) throw std::invalid_argument("adam learning rate must be positive");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto& p : params_) {
            p.set_requires_grad(true);
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const T c1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T c2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            std::vector<T>& w = params_[pi].values();
            const std::vector<T>& g = params_[pi].grad();
            std::vector<T>& m = m_[pi];
            std::vector<T>& v = v_[pi];
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
                const T mhat = m[i] / c1;
                const T vhat = v[i] / c2;
                w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    long steps_taken() const { return t_; }
    const std::vector<Tensor<T>>& params() const { return params_; }
    T learning_rate() const { return lr_; }
    void set_learning_rate(T lr) {
        if (lr <= T(0)) throw std::invalid_argument("adam learning rate must be positive");
        lr_ = lr;
    }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    T lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace capsdemm
