#pragma once

// StableMax family, the stablemax cross-entropy used as the LM loss, the
// stable BCE for halting, and the two trace-penalty shapes.

#include "cmm/tensor.hpp"

namespace cmm {

// Positive-branch polynomial: the Taylor prefix of e^x, Horner form.
inline double stablemax_poly(double x, int order) {
    switch (order) {
        case 1: return x + 1.0;
        case 3: return ((x / 3 + 1) * x / 2 + 1) * x + 1;
        case 5: return ((((x / 5 + 1) * x / 4 + 1) * x / 3 + 1) * x / 2 + 1) * x + 1;
    }
    throw InputError("stablemax order must be 1, 3 or 5");
}

inline double stablemax_poly_deriv(double x, int order) {
    switch (order) {
        case 1: return 1.0;
        case 3: return (x / 2 + 1) * x + 1;
        case 5: return (((x / 4 + 1) * x / 3 + 1) * x / 2 + 1) * x + 1;
    }
    throw InputError("stablemax order must be 1, 3 or 5");
}

// s(x): polynomial branch for x >= 0, reciprocal branch for x < 0.
// Strictly positive, strictly increasing, s(-x)*s(x) = 1.
inline double stablemax_value(double x, int order) {
    return x >= 0 ? stablemax_poly(x, order) : 1.0 / stablemax_poly(-x, order);
}

inline double stablemax_deriv(double x, int order) {
    if (x >= 0) return stablemax_poly_deriv(x, order);
    const double s = 1.0 / stablemax_poly(-x, order);
    return stablemax_poly_deriv(-x, order) * s * s;
}

template <class Real>
TensorT<Real> stablemax_s(const TensorT<Real>& x, int order) {
    require(order == 1 || order == 3 || order == 5,
            "stablemax order must be 1, 3 or 5");
    return unary_op(
        "stablemax_s", x,
        [order](double v) { return stablemax_value(v, order); },
        [order](double v, double) { return stablemax_deriv(v, order); });
}

// Probability map: s(x_c) / sum_j s(x_j) over the last axis.
template <class Real>
TensorT<Real> stablemax(const TensorT<Real>& logits, int order) {
    require(logits.shape().back() >= 2, "stablemax: need C >= 2");
    return normalize_lastdim(stablemax_s(logits, order));
}

// Mean over (non-pad) positions of -log p[target]. pad_token < 0 disables
// padding; otherwise positions whose target equals pad_token contribute zero.
template <class Real>
TensorT<Real> lm_loss(const TensorT<Real>& logits, const std::vector<int>& targets,
                      int order, int pad_token = -1) {
    const int64_t C = logits.shape().back();
    const int64_t R = logits.size() / C;
    require(int64_t(targets.size()) == R, "lm_loss: target count mismatch");
    for (int t : targets)
        require(t == pad_token || (t >= 0 && t < C),
                "lm_loss: target out of vocab range");
    auto probs = stablemax(logits, order);
    std::vector<int> safe = targets;
    int64_t live = 0;
    std::vector<Real> mask(size_t(R), Real(1));
    for (int64_t r = 0; r < R; ++r) {
        if (targets[r] == pad_token) {
            safe[r] = 0;
            mask[r] = Real(0);
        } else {
            ++live;
        }
    }
    require(live > 0, "lm_loss: every position is padding");
    auto picked = gather_lastdim(probs, safe);
    auto ll = cmm::log(picked);
    if (live != R) {
        Shape ms(logits.shape().begin(), logits.shape().end() - 1);
        ll = mul(ll, TensorT<Real>::from(ms, mask));
    }
    return scale(sum_all(ll), -1.0 / double(live));
}

// Elementwise binary cross-entropy with logits and (possibly soft) targets,
// via the log-sum-exp identity: max(q,0) - q*t + log1p(exp(-|q|)).
template <class Real>
TensorT<Real> bce_logits(const TensorT<Real>& q, const std::vector<double>& targets) {
    require(int64_t(targets.size()) == q.size(), "bce_logits: target count mismatch");
    for (double t : targets)
        require(t >= 0.0 && t <= 1.0, "bce_logits: target outside [0,1]");
    auto out = TensorT<Real>::zeros(q.shape());
    auto qs = q.val();
    auto os = out.val_mut();
    for (int64_t i = 0; i < q.size(); ++i) {
        const double v = double(qs[i]);
        os[i] = Real(std::max(v, 0.0) - v * targets[i] +
                     std::log1p(std::exp(-std::fabs(v))));
    }
    check_finite("bce_logits", out);
    if (auto* tape = detail::tape_if_grad<Real>(q)) {
        out.set_requires_grad(true);
        tape->push("bce_logits", {q.node()}, out.node(),
                   [qn = q.node(), on = out.node(), targets]() {
                       qn->ensure_grad();
                       for (size_t i = 0; i < on->grad.size(); ++i) {
                           const double v = double(qn->val[i]);
                           const double sig = 1.0 / (1.0 + std::exp(-v));
                           qn->grad[i] +=
                               Real((sig - targets[i]) * double(on->grad[i]));
                       }
                   });
    }
    return out;
}

// mean ReLU(mu - 1)^2: punishes expansion (mean Jacobian diagonal above 1).
template <class Real>
TensorT<Real> rh_stable_penalty(const TensorT<Real>& mu) {
    auto r = relu(add_scalar(mu, -1.0));
    return mean_all(mul(r, r));
}

// mean ReLU(1 - mu)^2: punishes contraction (keeps a repeller at x-hat).
template <class Real>
TensorT<Real> rh_unstable_penalty(const TensorT<Real>& mu) {
    auto r = relu(scale(add_scalar(mu, -1.0), -1.0));
    return mean_all(mul(r, r));
}

}  // namespace cmm
