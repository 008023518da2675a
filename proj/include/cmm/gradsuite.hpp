#pragma once

// Double-precision finite-difference verification of every loss term and of
// the combined training objective on a tiny model (D=8, S=4, B=2).
//
// Stop-gradient boundaries need care: the equilibrium anchors and the
// no-grad prefix of the rollout are deliberately outside the analytic
// gradient, so a naive central difference (which perturbs *values*, not the
// graph) would disagree by design. The checks therefore perturb only live
// paths, with frozen-at-base snapshots standing in for the anchored values;
// at the base point both value and analytic gradient coincide with the real
// objective.

#include <string>
#include <vector>

#include "cmm/config.hpp"
#include "cmm/dynamics.hpp"
#include "cmm/gradcheck.hpp"
#include "cmm/losses.hpp"
#include "cmm/net.hpp"
#include "cmm/repulsion.hpp"

namespace cmm {

struct GradCheckEntry {
    std::string term;
    double max_rel_err = 0;
    bool pass = false;
};

namespace detail {

using TensorD = TensorT<double>;

inline TensorD random_d(const Shape& s, Rng& rng, double std_dev, bool rg) {
    int64_t n = 1;
    for (int d : s) n *= d;
    std::vector<double> v(size_t(n), 0.0);
    for (auto& x : v) x = rng.gaussian() * std_dev;
    return TensorD::from(s, std::move(v), rg);
}

inline TensorD const_copy(const TensorD& t) {
    std::vector<double> v(t.val().begin(), t.val().end());
    return TensorD::from(t.shape(), std::move(v), false);
}

}  // namespace detail

inline std::vector<GradCheckEntry> gradient_suite(double tol = 1e-4,
                                                  double h = 1e-6) {
    using detail::TensorD;
    CmmConfig cfg;
    cfg.hidden_dim = 8;
    cfg.seq_len = 4;
    cfg.vocab_in = 5;
    cfg.vocab_out = 5;
    cfg.outer_steps = 2;
    cfg.inner_steps = 2;
    cfg.batch_size = 2;
    cfg.noise = {};
    const int B = 2, S = cfg.seq_len, D = cfg.hidden_dim, C = cfg.vocab_out;
    const double eps = cfg.jac_eps(true);

    auto params = init_params_t<double>(cfg, 7);
    NetFn<double> net = [&](const TensorD& u) { return net_forward(cfg, params, u); };

    std::vector<GradCheckEntry> out;
    auto check = [&](const std::string& name, auto&& fn,
                     std::vector<TensorD> inputs) {
        double err = finite_diff_check<double>(fn, std::move(inputs), h);
        out.push_back({name, err, err < tol});
    };

    Rng rng(derive_seed(11, hash_tag("gradsuite")));

    for (int order : {1, 3, 5}) {
        std::vector<int> targets;
        for (int i = 0; i < B * S; ++i) targets.push_back(rng.uniform_int(C));
        auto logits = detail::random_d({B, S, C}, rng, 1.0, true);
        check("lm_stablemax" + std::to_string(order),
              [&, order, targets](const std::vector<TensorD>& in) {
                  return lm_loss(in[0], targets, order);
              },
              {logits});
    }
    {
        std::vector<double> targets;
        for (int i = 0; i < B * 2; ++i) targets.push_back(rng.uniform());
        auto q = detail::random_d({B, 2}, rng, 1.0, true);
        check("halt_bce",
              [&, targets](const std::vector<TensorD>& in) {
                  return mean_all(bce_logits(in[0], targets));
              },
              {q});
    }
    for (const char* name : {"rep_x", "rep_z"}) {
        auto state = detail::random_d({B, S, D}, rng, 1.0, true);
        check(name,
              [&](const std::vector<TensorD>& in) { return repulsion_loss(in[0]); },
              {state});
    }
    // Equilibrium residuals: the anchor is a stop-gradient, so the check
    // perturbs the live argument (in[1]); the anchored input stays fixed.
    for (const char* name : {"equil_x", "equil_z"}) {
        auto anchor = detail::random_d({B, S, D}, rng, 0.5, false);
        auto low = detail::random_d({B, S, D}, rng, 0.5, true);
        check(name,
              [&](const std::vector<TensorD>& in) {
                  return equilibrium_residual(net, in[0], in[1]);
              },
              {anchor, low});
    }
    {
        auto u = detail::random_d({B, S, D}, rng, 0.5, true);
        check("rh_stable_z",
              [&](const std::vector<TensorD>& in) {
                  Rng probe(derive_seed(11, hash_tag("gradsuite-probe"), 0));
                  return rh_stable_penalty(
                      mean_jacobian_diag(net, in[0], eps, 1, probe));
              },
              {u});
        auto u2 = detail::random_d({B, S, D}, rng, 0.5, true);
        check("rh_unstable_x",
              [&](const std::vector<TensorD>& in) {
                  Rng probe(derive_seed(11, hash_tag("gradsuite-probe"), 1));
                  return rh_unstable_penalty(
                      mean_jacobian_diag(net, in[0], eps, 1, probe));
              },
              {u2});
    }

    // Combined objective w.r.t. every model parameter. The rollout prefix
    // outside the one-step gradient window and the equilibrium anchors are
    // frozen at their base-point values; the live window, the heads, and all
    // eight terms are recomputed under perturbation.
    {
        std::vector<int> tokens, targets;
        for (int i = 0; i < B * S; ++i) {
            tokens.push_back(rng.uniform_int(cfg.vocab_in));
            targets.push_back(rng.uniform_int(C));
        }
        std::vector<Rng> no_noise;
        for (int b = 0; b < B; ++b) no_noise.emplace_back(Rng(uint64_t(b)));

        TensorD pre_high, pre_low, anchor_x, anchor_z;
        std::vector<double> halt_targets(size_t(B), 0.0);
        {
            NoGrad ng;
            auto xh = embed_input(cfg, params, tokens, B);
            LatentStateT<double> st{xh, TensorD::zeros(xh.shape())};
            st = segment_rollout(net, st, xh, cfg.outer_steps - 1, cfg.inner_steps,
                                 cfg.dt, cfg.noise, no_noise);
            pre_high = detail::const_copy(st.high);
            pre_low = detail::const_copy(st.low);
            auto end = segment_rollout(net, st, xh, 1, cfg.inner_steps, cfg.dt,
                                       cfg.noise, no_noise);
            anchor_x = detail::const_copy(xh);
            anchor_z = detail::const_copy(end.high);
            auto y = output_head(params, end.high);
            auto yv = y.val();
            for (int b = 0; b < B; ++b) {
                bool all = true;
                for (int s = 0; s < S; ++s) {
                    const double* row = yv.data() + (size_t(b) * S + s) * C;
                    int best = 0;
                    for (int c = 1; c < C; ++c)
                        if (row[c] > row[best]) best = c;
                    if (best != targets[size_t(b) * S + s]) all = false;
                }
                halt_targets[size_t(b)] = all ? 1.0 : 0.0;
            }
        }

        std::vector<TensorD> inputs;
        for_each_param(params, [&](const std::string&, TensorD& t) {
            inputs.push_back(t);
        });
        const auto& w = cfg.weights;
        auto combined = [&](const std::vector<TensorD>&) {
            auto xh = embed_input(cfg, params, tokens, B);
            LatentStateT<double> st{pre_high, pre_low};
            st = segment_rollout(net, st, xh, 1, cfg.inner_steps, cfg.dt,
                                 cfg.noise, no_noise);
            auto y = output_head(params, st.high);
            auto q = q_head(params, st.high);
            auto sq_residual = [&](const TensorD& anchor, const TensorD& arg) {
                auto d = anchor - net(arg);
                return mean_all(mul(d, d));
            };
            Rng probe(derive_seed(11, hash_tag("gradsuite-probe"), 2));
            auto mu_z = mean_jacobian_diag(net, st.high + st.low, eps, 1, probe);
            auto mu_x = mean_jacobian_diag(net, xh + st.low, eps, 1, probe);
            return scale(lm_loss(y, targets, cfg.stablemax_order), w.lm) +
                   scale(mean_all(bce_logits(q, halt_targets)), w.halt) +
                   scale(repulsion_loss(xh), w.rep_x) +
                   scale(repulsion_loss(st.high), w.rep_z) +
                   scale(sq_residual(anchor_x, xh + st.low), w.equil_x) +
                   scale(sq_residual(anchor_z, st.high + st.low), w.equil_z) +
                   scale(rh_stable_penalty(mu_z), w.rh_stable_z) +
                   scale(rh_unstable_penalty(mu_x), w.rh_unstable_x);
        };
        check("combined", combined, inputs);
    }
    return out;
}

}  // namespace cmm
