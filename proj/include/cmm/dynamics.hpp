#pragma once

#include <functional>
#include <vector>

#include "cmm/config.hpp"
#include "cmm/net.hpp"
#include "cmm/rng.hpp"
#include "cmm/tensor.hpp"

namespace cmm {

// The stepping and probe routines below take the network as an opaque
// callable so tests can substitute exact linear maps.
template <class Real>
using NetFn = std::function<TensorT<Real>(const TensorT<Real>&)>;

template <class Real>
struct LatentStateT {
    TensorT<Real> high;  // slow state, updated once per cycle
    TensorT<Real> low;   // fast state, updated every inner step
};

using LatentState = LatentStateT<float>;

// One explicit Euler step of dz/dt = f(z) - z. At dt == 1 the update
// degenerates to z' = f(z); return f's output directly so the two forms are
// bit-identical.
template <class Real>
TensorT<Real> euler_step(const TensorT<Real>& z, const TensorT<Real>& f_out,
                         double dt) {
    if (dt == 1.0) return f_out;
    return z + scale(f_out - z, Real(dt));
}

// Stochastic variant: perturb the step output. sigma == 0 (or kind none)
// bypasses the RNG entirely, so those runs are bit-identical to the
// deterministic path. Each batch slot draws from its own stream.
template <class Real>
TensorT<Real> apply_step_noise(const TensorT<Real>& z, const NoiseCfg& noise,
                               std::vector<Rng>& slot_rngs) {
    if (noise.kind == NoiseKind::none || noise.sigma == 0.0) return z;
    const auto& sh = z.shape();
    const int B = sh[0];
    require(int(slot_rngs.size()) == B,
            "apply_step_noise: need one noise stream per batch slot");
    const long per = z.size() / B;
    auto zeta = TensorT<Real>::zeros(sh, false);
    auto zv = zeta.val_mut();
    for (int b = 0; b < B; ++b)
        for (long i = 0; i < per; ++i)
            zv[size_t(b) * per + i] = Real(noise.sigma * slot_rngs[size_t(b)].gaussian());
    if (noise.kind == NoiseKind::additive) return z + zeta;
    return z * add_scalar(zeta, Real(1));
}

// Fast-state update: integrate towards f(high + low + input).
template <class Real>
TensorT<Real> low_step(const NetFn<Real>& f, const LatentStateT<Real>& st,
                       const TensorT<Real>& xhat, double dt,
                       const NoiseCfg& noise, std::vector<Rng>& slot_rngs) {
    auto target = f(st.high + st.low + xhat);
    return apply_step_noise(euler_step(st.low, target, dt), noise, slot_rngs);
}

// Slow-state update: integrate towards f(high + low).
template <class Real>
TensorT<Real> high_step(const NetFn<Real>& f, const LatentStateT<Real>& st,
                        double dt, const NoiseCfg& noise,
                        std::vector<Rng>& slot_rngs) {
    auto target = f(st.high + st.low);
    return apply_step_noise(euler_step(st.high, target, dt), noise, slot_rngs);
}

// One supervision segment of the recurrence: `outer` cycles of `inner` fast
// steps followed by one slow step. Only the final cycle is differentiated;
// earlier cycles run without recording, which keeps the backward cost of a
// segment constant in `outer`.
template <class Real>
LatentStateT<Real> segment_rollout(const NetFn<Real>& f, LatentStateT<Real> st,
                                   const TensorT<Real>& xhat, int outer,
                                   int inner, double dt, const NoiseCfg& noise,
                                   std::vector<Rng>& slot_rngs) {
    require(outer >= 1 && inner >= 1, "segment_rollout: outer/inner must be >= 1");
    {
        NoGrad ng;
        for (int c = 0; c + 1 < outer; ++c) {
            for (int i = 0; i < inner; ++i)
                st.low = low_step(f, st, xhat, dt, noise, slot_rngs);
            st.high = high_step(f, st, dt, noise, slot_rngs);
        }
    }
    for (int i = 0; i < inner; ++i)
        st.low = low_step(f, st, xhat, dt, noise, slot_rngs);
    st.high = high_step(f, st, dt, noise, slot_rngs);
    return st;
}

template <class Real>
struct SegmentOut {
    LatentStateT<Real> carry;             // detached, feeds the next segment
    TensorT<Real> high_live, low_live;    // differentiable end-of-segment states
    TensorT<Real> y_logits;               // [B,S,vocab_out]
    TensorT<Real> q_logits;               // [B,q_dim]
};

template <class Real>
SegmentOut<Real> run_segment(const CmmConfig& cfg, const ModelParamsT<Real>& p,
                             const LatentStateT<Real>& st0,
                             const TensorT<Real>& xhat,
                             std::vector<Rng>& slot_rngs) {
    NetFn<Real> f = [&](const TensorT<Real>& u) { return net_forward(cfg, p, u); };
    auto st = segment_rollout(f, st0, xhat, cfg.outer_steps, cfg.inner_steps,
                              cfg.dt, cfg.noise, slot_rngs);
    SegmentOut<Real> out;
    out.high_live = st.high;
    out.low_live = st.low;
    out.y_logits = output_head(p, st.high);
    out.q_logits = q_head(p, st.high);
    out.carry = {detach(st.high), detach(st.low)};
    return out;
}

// How far the anchor c is from being a fixed point of u -> f(u + low).
// The anchor inside the squared error is detached so the penalty pulls f's
// output towards c rather than dragging c around.
template <class Real>
TensorT<Real> equilibrium_residual(const NetFn<Real>& f, const TensorT<Real>& c,
                                   const TensorT<Real>& low) {
    auto r = detach(c) - f(c + low);
    return mean_all(r * r);
}

// Hutchinson estimate of the mean diagonal entry of the Jacobian of f at u,
// one scalar per batch slot. Central differences with Rademacher probes keep
// the estimate inside the graph, so penalties on it are differentiable
// through f's parameters.
template <class Real>
TensorT<Real> mean_jacobian_diag(const NetFn<Real>& f, const TensorT<Real>& u,
                                 double eps, int probes, Rng& rng) {
    require(eps > 0, "mean_jacobian_diag: eps must be positive");
    require(probes >= 1, "mean_jacobian_diag: probes must be >= 1");
    const auto& sh = u.shape();
    const int B = sh[0];
    const long per = u.size() / B;
    TensorT<Real> acc;
    for (int k = 0; k < probes; ++k) {
        auto v = TensorT<Real>::zeros(sh, false);
        auto vv = v.val_mut();
        for (auto& x : vv) x = Real(rng.rademacher());
        auto plus = f(u + scale(v, Real(eps)));
        auto minus = f(u - scale(v, Real(eps)));
        auto per_sample = sum_per_sample(v * (plus - minus));  // [B]
        acc = k == 0 ? per_sample : acc + per_sample;
    }
    return scale(acc, Real(1.0 / (2.0 * eps * double(per) * double(probes))));
}

struct AnalyzeRow {
    int step = 0;
    double dist_to_final = 0;
    double lag2_delta = 0;
    double equil_residual = 0;
    double mean_jac_diag = 0;
};

// Value-only trajectory probe used by the analysis tool: run `segments`
// segments from `init` and measure, at each segment end, the slow state's
// distance to its final value, the fast state's lag-2 displacement (the
// oscillation indicator), the slow-state equilibrium residual and the mean
// Jacobian diagonal at the stable anchor.
template <class Real>
std::vector<AnalyzeRow> analyze_trajectory(const NetFn<Real>& f,
                                           const TensorT<Real>& xhat,
                                           LatentStateT<Real> init, int segments,
                                           int outer, int inner, double dt,
                                           const NoiseCfg& noise, double jac_eps,
                                           int jac_probes, uint64_t seed) {
    require(segments >= 3, "analyze_trajectory: need at least 3 steps");
    NoGrad ng;
    const int B = xhat.shape()[0];
    std::vector<Rng> slot_rngs;
    for (int b = 0; b < B; ++b)
        slot_rngs.emplace_back(derive_seed(seed, hash_tag("analyze"), uint64_t(b)));

    auto st = std::move(init);
    std::vector<std::vector<Real>> highs, lows;
    std::vector<AnalyzeRow> rows(size_t(segments), AnalyzeRow{});
    for (int t = 0; t < segments; ++t) {
        st = segment_rollout(f, st, xhat, outer, inner, dt, noise, slot_rngs);
        auto hv = st.high.val();
        auto lv = st.low.val();
        highs.emplace_back(hv.begin(), hv.end());
        lows.emplace_back(lv.begin(), lv.end());
        auto& row = rows[size_t(t)];
        row.step = t + 1;
        row.equil_residual = double(equilibrium_residual(f, st.high, st.low).item());
        Rng probe_rng(derive_seed(seed, hash_tag("analyze-probe"), uint64_t(t)));
        auto mu = mean_jacobian_diag(f, st.high + st.low, jac_eps, jac_probes,
                                     probe_rng);
        double mu_mean = 0;
        for (auto m : mu.val()) mu_mean += double(m);
        row.mean_jac_diag = mu_mean / B;
    }
    auto l2 = [](const std::vector<Real>& a, const std::vector<Real>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            double d = double(a[i]) - double(b[i]);
            s += d * d;
        }
        return std::sqrt(s);
    };
    for (int t = 0; t < segments; ++t) {
        rows[size_t(t)].dist_to_final = l2(highs[size_t(t)], highs.back());
        rows[size_t(t)].lag2_delta =
            t >= 2 ? l2(lows[size_t(t)], lows[size_t(t) - 2]) : 0.0;
    }
    return rows;
}

template <class Real>
std::vector<AnalyzeRow> analyze_trajectory(const CmmConfig& cfg,
                                           const ModelParamsT<Real>& p,
                                           const TensorT<Real>& xhat,
                                           LatentStateT<Real> init, int segments,
                                           uint64_t seed) {
    NetFn<Real> f = [&](const TensorT<Real>& u) { return net_forward(cfg, p, u); };
    return analyze_trajectory(f, xhat, std::move(init), segments,
                              cfg.outer_steps, cfg.inner_steps, cfg.dt,
                              cfg.noise, cfg.jac_eps(sizeof(Real) == 8),
                              cfg.jacobian.probes, seed);
}

}  // namespace cmm
