#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "etag/tensor.hpp"

namespace etag {

/// Adam over a fixed list of parameter tensors. Parameter shapes must not
/// change while the optimizer is alive; build a new one after `expand`.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Tensor*> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (Tensor* p : params_) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }

    void set_lr(double lr) { opt_.lr = lr; }
    double lr() const { return opt_.lr; }

    void zero_grad() {
        for (Tensor* p : params_) p->zero_grad();
    }

    void step() {
        ++steps_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = *params_[k];
            if (p.grad.size() != p.size()) continue;
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = p.grad[i];
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
                p.values[i] -= opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
            }
        }
    }

private:
    std::vector<Tensor*> params_;
    Options opt_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t steps_ = 0;
};

}  // namespace etag
