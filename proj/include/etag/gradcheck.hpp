#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "etag/autodiff.hpp"

namespace etag {

namespace detail {

inline double evaluate_scalar(const Var& out, const char* who) {
    if (out.size() != 1) throw ShapeError(std::string(who) + ": closure must return a scalar");
    const double v = out.item();
    if (!std::isfinite(v)) throw EvaluationError(std::string(who) + ": closure produced a non-finite value");
    return v;
}

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace detail

/// Compare the tape gradient of `f` at `point` with central differences.
/// Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
inline double grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& point, double eps = 1e-5) {
    Tensor x(point.shape, point.values);
    x.requires_grad = true;
    x.zero_grad();
    {
        Tape tape;
        Var out = f(tape, tape.leaf(x));
        detail::evaluate_scalar(out, "grad_check");
        tape.backward(out);
    }
    const std::vector<double> analytic = x.grad;

    auto eval_at = [&](const Tensor& p) {
        Tape tape;
        return detail::evaluate_scalar(f(tape, tape.constant(p)), "grad_check");
    };

    double worst = 0.0;
    Tensor probe(point.shape, point.values);
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double up = eval_at(probe);
        probe[i] = orig - eps;
        const double down = eval_at(probe);
        probe[i] = orig;
        worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    return worst;
}

/// Same check against a set of parameter tensors mutated in place.
/// `f` must build its graph by binding the parameters (so it sees edits).
/// Every coordinate is probed unless `stride > 1`, in which case every
/// stride-th coordinate of each tensor is probed. Parameters are restored.
inline double grad_check_params(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& params,
                                double eps = 1e-5, std::size_t stride = 1) {
    for (Tensor* p : params) {
        p->requires_grad = true;
        p->zero_grad();
    }
    {
        Tape tape;
        Var out = f(tape);
        detail::evaluate_scalar(out, "grad_check_params");
        tape.backward(out);
    }
    auto eval = [&]() {
        Tape tape;
        return detail::evaluate_scalar(f(tape), "grad_check_params");
    };

    double worst = 0.0;
    for (Tensor* p : params) {
        const std::vector<double> analytic = p->grad;
        for (std::size_t i = 0; i < p->size(); i += std::max<std::size_t>(stride, 1)) {
            const double orig = p->values[i];
            p->values[i] = orig + eps;
            const double up = eval();
            p->values[i] = orig - eps;
            const double down = eval();
            p->values[i] = orig;
            worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * eps)));
        }
    }
    return worst;
}

}  // namespace etag
