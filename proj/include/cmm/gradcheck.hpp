#pragma once

// Test oracles: central finite differences against the tape's adjoints, and
// a dense Jacobian built from repeated reverse passes.

#include <functional>
#include <vector>

#include "cmm/tensor.hpp"

namespace cmm {

template <class Real>
struct EvalResult {
    TensorT<Real> value;
    std::vector<std::vector<Real>> grads;  // one per input; zeros when detached
};

// Runs f on a fresh tape and backpropagates sum(value). grads[i] holds
// d sum(value) / d inputs[i]; inputs that do not require grad get zeros.
template <class Real, class F>
EvalResult<Real> eval_and_backward(F&& f, const std::vector<TensorT<Real>>& inputs) {
    TapeT<Real> tape;
    typename TapeT<Real>::Scope scope(tape);
    for (auto& t : inputs) t.zero_grad();
    TensorT<Real> y = f(inputs);
    tape.backward(y);
    EvalResult<Real> r;
    r.value = y;
    for (auto& t : inputs) r.grads.push_back(t.grad_or_zeros());
    return r;
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// Only inputs with requires_grad are perturbed. f must be deterministic.
template <class Real, class F>
double finite_diff_check(F&& f, std::vector<TensorT<Real>> inputs, double h) {
    require(h > 0, "finite_diff_check: h must be positive");
    TensorT<Real> y0;
    {
        TapeT<Real> tape;
        typename TapeT<Real>::Scope scope(tape);
        for (auto& t : inputs) t.zero_grad();
        y0 = f(inputs);
        require(y0.size() == 1, "finite_diff_check: f must be scalar-valued");
        tape.backward(y0);
    }
    double worst = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        auto g = t.grad_or_zeros();
        auto vals = t.val_mut();
        for (int64_t i = 0; i < t.size(); ++i) {
            const Real keep = vals[i];
            double yp, ym;
            {
                NoGrad ng;
                vals[i] = Real(double(keep) + h);
                yp = double(f(inputs).item());
                vals[i] = Real(double(keep) - h);
                ym = double(f(inputs).item());
            }
            vals[i] = keep;
            const double num = (yp - ym) / (2.0 * h);
            const double ana = double(g[i]);
            const double err = std::fabs(ana - num) / std::max(1.0, std::fabs(ana));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Dense Jacobian d f(x) / d x via one reverse pass per output coordinate.
// Returns K rows of n columns (K = f(x).size(), n = x.size()).
template <class Real, class F>
std::vector<std::vector<Real>> dense_jacobian(F&& f, TensorT<Real> x) {
    TapeT<Real> tape;
    typename TapeT<Real>::Scope scope(tape);
    x.set_requires_grad(true);
    x.zero_grad();
    TensorT<Real> y = f(x);
    const int64_t K = y.size();
    std::vector<std::vector<Real>> rows;
    rows.reserve(size_t(K));
    for (int64_t k = 0; k < K; ++k) {
        tape.zero_grads();
        std::vector<Real> seed(size_t(K), Real(0));
        seed[size_t(k)] = Real(1);
        tape.backward(y, &seed);
        rows.push_back(x.grad_or_zeros());
    }
    return rows;
}

}  // namespace cmm
