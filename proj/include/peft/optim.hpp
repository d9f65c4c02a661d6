// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <vector>

#include "peft/errors.hpp"
#include "peft/tensor.hpp"

namespace peft {

namespace detail {

template <std::floating_point T>
void require_trainable(const std::vector<Tensor<T>>& params) {
    for (const auto& p : params)
        if (!p.requires_grad()) throw ContractError("optimizer: refusing to manage a frozen tensor");
}

}  // namespace detail

template <std::floating_point T>
class Sgd {
public:
    Sgd(std::vector<Tensor<T>> params, double lr) : params_(std::move(params)), lr_(lr) {
        detail::require_trainable(params_);
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            const auto g = p.grad();
            auto& w = p.values();
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= static_cast<T>(lr_) * g[i];
        }
    }

private:
    std::vector<Tensor<T>> params_;
    double lr_;
};

/// Adam with bias correction. Moments are kept in double regardless of T.
template <std::floating_point T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        detail::require_trainable(params_);
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            const auto g = p.grad();
            auto& w = p.values();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i];
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = m[i] / c1;
                const double vhat = v[i] / c2;
                w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Tensor<T>> params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace peft
