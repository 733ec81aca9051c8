#pragma once

#include <cmath>

#include "tensor.hpp"

namespace entran {

inline void zero_grads(const std::vector<ad::TensorPtr>& params) {
    for (const auto& p : params) p->zero_grad();
}

// Global L2-norm clipping; returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<ad::TensorPtr>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p->grad) sq += g * g;
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (const auto& p : params)
            for (auto& g : p->grad) g *= s;
    }
    return norm;
}

inline double cosine_lr(double base_lr, int epoch, int total_epochs) {
    if (epoch < 0 || epoch > total_epochs)
        throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) + " outside [0," +
                                    std::to_string(total_epochs) + "]");
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(epoch) / double(total_epochs)));
}

// v = mu*v + (g + wd*w); w -= lr*v
class SgdMomentum {
public:
    SgdMomentum(std::vector<ad::TensorPtr> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p->data.size(), 0.0);
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < p.data.size(); ++j) {
                double g = p.grad[j] + weight_decay_ * p.data[j];
                v[j] = momentum_ * v[j] + g;
                p.data[j] -= lr * v[j];
            }
        }
    }

    std::vector<std::vector<double>>& state() { return velocity_; }
    const std::vector<ad::TensorPtr>& params() const { return params_; }

private:
    std::vector<ad::TensorPtr> params_;
    double momentum_, weight_decay_;
    std::vector<std::vector<double>> velocity_;
};

class Adam {
public:
    Adam(std::vector<ad::TensorPtr> params, double lr, double beta1, double beta2, double weight_decay,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p->data.size(), 0.0);
            v_.emplace_back(p->data.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            for (std::size_t j = 0; j < p.data.size(); ++j) {
                double g = p.grad[j] + weight_decay_ * p.data[j];
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                double mhat = m_[i][j] / bc1;
                double vhat = v_[i][j] / bc2;
                p.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    long& step_count() { return t_; }
    const std::vector<ad::TensorPtr>& params() const { return params_; }

private:
    std::vector<ad::TensorPtr> params_;
    double lr_, beta1_, beta2_, weight_decay_, eps_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace entran
