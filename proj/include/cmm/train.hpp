#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "cmm/checkpoint.hpp"
#include "cmm/config.hpp"
#include "cmm/dynamics.hpp"
#include "cmm/gradnorm.hpp"
#include "cmm/losses.hpp"
#include "cmm/metrics.hpp"
#include "cmm/net.hpp"
#include "cmm/parallel.hpp"
#include "cmm/repulsion.hpp"
#include "cmm/tasks.hpp"

namespace cmm {

inline double schedule_lr(const CmmConfig& cfg, long epoch) {
    const auto& s = cfg.schedule;
    if (s.kind == ScheduleKind::constant) return cfg.optimizer.lr;
    auto interp = [](double a, double b, double frac) {
        return a * std::pow(b / a, frac);
    };
    if (epoch < s.epochs1) return interp(s.lr0, s.lr1, double(epoch) / s.epochs1);
    if (epoch < s.epochs2)
        return interp(s.lr1, s.lr2,
                      double(epoch - s.epochs1) / double(s.epochs2 - s.epochs1));
    return s.lr2;
}

inline ModelParams clone_params(const ModelParams& src, bool requires_grad) {
    ModelParams dst = src;
    for_each_param(dst, [&](const std::string&, Tensor& t) {
        std::vector<float> vals(t.val().begin(), t.val().end());
        t = Tensor::from(t.shape(), std::move(vals), requires_grad);
    });
    return dst;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// Named views of every trainable tensor plus its EMA shadow, Adam moments and
// the double-precision gradient accumulator.
struct ParamBank {
    std::vector<std::string> names;
    std::vector<Tensor> param, ema, m, v;
    std::vector<std::vector<double>> accum;

    void init(ModelParams& params, ModelParams& ema_params) {
        for_each_param(params, [&](const std::string& n, Tensor& t) {
            names.push_back(n);
            param.push_back(t);
            m.push_back(Tensor::zeros(t.shape()));
            v.push_back(Tensor::zeros(t.shape()));
            accum.emplace_back(size_t(t.size()), 0.0);
        });
        for_each_param(ema_params, [&](const std::string&, Tensor& t) {
            ema.push_back(t);
        });
        require(ema.size() == param.size(), "parameter bank: ema layout mismatch");
    }

    void harvest_grads() {
        for (size_t i = 0; i < param.size(); ++i) {
            if (!param[i].has_grad()) continue;
            auto g = param[i].grad();
            auto& a = accum[i];
            for (size_t j = 0; j < a.size(); ++j) a[j] += double(g[j]);
        }
    }

    void clear_accum() {
        for (auto& a : accum) std::fill(a.begin(), a.end(), 0.0);
    }

    double accum_norm(double scale) const {
        double s = 0;
        for (const auto& a : accum)
            for (double x : a) s += (x * scale) * (x * scale);
        return std::sqrt(s);
    }
};

class Optimizer {
public:
    explicit Optimizer(OptimizerCfg cfg) : cfg_(cfg) {}

    long applied_steps() const { return t_; }
    void set_applied_steps(long t) { t_ = t; }

    // One update on the accumulated gradients (scaled by `scale`). Moment math
    // runs in double; moments and weights are stored as 32-bit floats. If any
    // gradient entry is non-finite the step is skipped and state is untouched.
    bool step(ParamBank& bank, double lr, double scale,
              const std::function<bool(const std::string&)>& frozen) {
        for (const auto& a : bank.accum)
            for (double g : a)
                if (!std::isfinite(g * scale)) return false;
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < bank.param.size(); ++i) {
            if (frozen && frozen(bank.names[i])) continue;
            auto th = bank.param[i].val_mut();
            auto mv = bank.m[i].val_mut();
            auto vv = bank.v[i].val_mut();
            const auto& a = bank.accum[i];
            for (size_t j = 0; j < a.size(); ++j) {
                const double g = a[j] * scale;
                const double m = cfg_.beta1 * double(mv[j]) + (1.0 - cfg_.beta1) * g;
                const double v = cfg_.beta2 * double(vv[j]) + (1.0 - cfg_.beta2) * g * g;
                mv[j] = float(m);
                vv[j] = float(v);
                const double mh = m / bc1;
                const double vh = v / bc2;
                const double dir = cfg_.kind == OptKind::adamw
                                       ? mh / (std::sqrt(vh) + cfg_.eps)
                                       : std::atan2(mh, std::sqrt(vh));
                th[j] = float(double(th[j]) -
                              lr * (dir + cfg_.weight_decay * double(th[j])));
            }
        }
        return true;
    }

    void ema_update(ParamBank& bank, double beta) {
        for (size_t i = 0; i < bank.param.size(); ++i) {
            auto e = bank.ema[i].val_mut();
            auto t = bank.param[i].val();
            for (size_t j = 0; j < e.size(); ++j)
                e[j] = float(beta * double(e[j]) + (1.0 - beta) * double(t[j]));
        }
    }

private:
    OptimizerCfg cfg_;
    long t_ = 0;  // applied steps, drives bias correction
};

// ---------------------------------------------------------------------------
// adaptive halting
// ---------------------------------------------------------------------------

inline bool act_decide(HaltVariant variant, double q_halt, double q_cont, int m,
                       int m_min, int m_max) {
    require(m >= 1, "act_decide: segment count must be >= 1");
    if (m >= m_max) return true;
    if (m < m_min) return false;
    if (variant == HaltVariant::trm_halt) return q_halt > 0;
    return q_halt > q_cont;
}

// Bootstrapped targets for the two halting heads (hrm_q variant). The next
// segment's head outputs arrive as probabilities (sigmoids of the lookahead
// logits).
inline std::pair<double, double> q_targets(double next_halt_prob,
                                           double next_cont_prob, bool correct,
                                           int m, int m_max) {
    const double g_halt = correct ? 1.0 : 0.0;
    const double g_cont = m >= m_max
                              ? next_halt_prob
                              : std::max(next_halt_prob, next_cont_prob);
    return {g_halt, g_cont};
}

// ---------------------------------------------------------------------------
// carry slots
// ---------------------------------------------------------------------------

struct CarrySlots {
    int batch = 0, seq = 0, dim = 0;
    Tensor high, low;  // [B,S,D] values; detached between segments
    std::vector<int> in_tokens, tgt_tokens;  // B*S each
    std::vector<int> m;         // segments run on the slot's current sample
    std::vector<int> min_seg;   // per-sample exploration floor
    std::vector<int32_t> halted;
    std::vector<int32_t> instance;  // dataset row currently bound
    std::vector<Rng> rng;           // per-slot noise streams
    // latest halting-head outputs, refreshed every segment
    std::vector<double> q_halt, q_cont;

    void init(int B, int S, int D) {
        batch = B;
        seq = S;
        dim = D;
        high = Tensor::zeros({B, S, D});
        low = Tensor::zeros({B, S, D});
        in_tokens.assign(size_t(B) * S, 0);
        tgt_tokens.assign(size_t(B) * S, 0);
        m.assign(size_t(B), 0);
        min_seg.assign(size_t(B), 1);
        halted.assign(size_t(B), 1);  // everything starts due for a sample
        instance.assign(size_t(B), -1);
        rng.assign(size_t(B), Rng(0));
        q_halt.assign(size_t(B), 0.0);
        q_cont.assign(size_t(B), 0.0);
    }

    // Bind a fresh sample: tokens copied, slow state seeded from the embedded
    // input, fast state zeroed, a fresh noise stream, and the exploration
    // floor drawn from that stream.
    void refresh(int b, const CmmConfig& cfg, const ModelParams& params,
                 const PuzzleInstance& inst, int32_t dataset_row,
                 uint64_t stream_seed) {
        require(int(inst.input.size()) == seq,
                "carry: instance length does not match configured seq_len");
        std::copy(inst.input.begin(), inst.input.end(),
                  in_tokens.begin() + size_t(b) * seq);
        std::copy(inst.target.begin(), inst.target.end(),
                  tgt_tokens.begin() + size_t(b) * seq);
        NoGrad ng;
        std::vector<int> row(inst.input.begin(), inst.input.end());
        auto emb = embed_input(cfg, params, row, 1);  // [1,S,D]
        auto src = emb.val();
        auto hv = high.val_mut();
        auto lv = low.val_mut();
        const size_t off = size_t(b) * seq * size_t(dim);
        std::copy(src.begin(), src.end(), hv.begin() + off);
        std::fill(lv.begin() + off, lv.begin() + off + src.size(), 0.f);
        m[size_t(b)] = 0;
        halted[size_t(b)] = 0;
        instance[size_t(b)] = dataset_row;
        rng[size_t(b)] = Rng(stream_seed);
        min_seg[size_t(b)] = 1;
        if (cfg.max_segments >= 2 &&
            rng[size_t(b)].uniform() < cfg.halting.explore_prob)
            min_seg[size_t(b)] = 2 + rng[size_t(b)].uniform_int(cfg.max_segments - 1);
    }
};

// ---------------------------------------------------------------------------
// one supervision segment
// ---------------------------------------------------------------------------

struct SegmentReport {
    std::array<double, kNumTerms> loss{};
    double total = 0;
    std::vector<uint8_t> correct;  // exact-match flag per slot
    std::array<double, kNumTerms> raw_norms{};
    bool measured = false;
};

namespace detail {

template <class Fn>
auto named_term(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        throw NumericError(std::string("loss term '") + name + "': " + e.what());
    }
}

inline std::vector<uint8_t> exact_flags(const Tensor& logits,
                                        const std::vector<int>& targets,
                                        int pad_token) {
    const auto& sh = logits.shape();
    const int B = sh[0], S = sh[1], C = sh[2];
    auto lv = logits.val();
    std::vector<uint8_t> out(size_t(B), 1);
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s) {
            const int tgt = targets[size_t(b) * S + s];
            if (pad_token >= 0 && tgt == pad_token) continue;
            const float* row = lv.data() + (size_t(b) * S + s) * C;
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (row[c] > row[best]) best = c;
            if (best != tgt) {
                out[size_t(b)] = 0;
                break;
            }
        }
    return out;
}

}  // namespace detail

// Runs one segment on the full batch, forms the weighted total loss, runs
// backward, and leaves gradients on the parameter tensors. The carry in
// `slots` is advanced (detached). When `measure_norms` is set, each active
// term is additionally backpropagated on its own to record the raw gradient
// norm at the balancer's probe weight.
inline SegmentReport supervision_segment(
    const CmmConfig& cfg, ModelParams& params, CarrySlots& slots,
    const std::array<double, kNumTerms>& lambda,
    const std::array<bool, kNumTerms>& active, uint64_t probe_seed,
    bool measure_norms) {
    Tape tape;
    Tape::Scope scope(tape);
    const int B = slots.batch;

    auto xhat = detail::named_term("rollout", [&] {
        return embed_input(cfg, params, slots.in_tokens, B);
    });
    SegmentOut<float> seg = detail::named_term("rollout", [&] {
        return run_segment(cfg, params, {slots.high, slots.low}, xhat, slots.rng);
    });
    slots.high = seg.carry.high;
    slots.low = seg.carry.low;

    SegmentReport rep;
    rep.correct = detail::exact_flags(seg.y_logits, slots.tgt_tokens, cfg.pad_token);
    {
        auto qv = seg.q_logits.val();
        const int qd = cfg.q_dim();
        for (int b = 0; b < B; ++b) {
            slots.q_halt[size_t(b)] = double(qv[size_t(b) * qd]);
            slots.q_cont[size_t(b)] = qd > 1 ? double(qv[size_t(b) * qd + 1]) : 0.0;
        }
    }

    NetFn<float> f = [&](const Tensor& u) { return net_forward(cfg, params, u); };
    std::array<Tensor, kNumTerms> terms;

    if (active[kTermLm])
        terms[kTermLm] = detail::named_term("lm", [&] {
            return lm_loss(seg.y_logits, slots.tgt_tokens, cfg.stablemax_order,
                           cfg.pad_token);
        });
    if (active[kTermHalt])
        terms[kTermHalt] = detail::named_term("halt", [&] {
            if (cfg.halting.variant == HaltVariant::trm_halt) {
                std::vector<double> tgt(size_t(B), 0.0);
                for (int b = 0; b < B; ++b) tgt[size_t(b)] = rep.correct[size_t(b)];
                return mean_all(bce_logits(seg.q_logits, tgt));
            }
            // hrm_q: bootstrap targets from a value-only lookahead segment.
            // The lookahead draws from copies of the slot streams so the
            // training noise sequence is unaffected.
            std::vector<double> g_halt(size_t(B), 0.0), g_cont(size_t(B), 0.0);
            {
                NoGrad ng;
                auto scratch_rng = slots.rng;
                auto next = run_segment(cfg, params, seg.carry, xhat, scratch_rng);
                auto nq = next.q_logits.val();
                auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
                for (int b = 0; b < B; ++b) {
                    auto [gh, gc] = q_targets(
                        sigmoid(double(nq[size_t(b) * 2])),
                        sigmoid(double(nq[size_t(b) * 2 + 1])),
                        rep.correct[size_t(b)] != 0, slots.m[size_t(b)],
                        cfg.max_segments);
                    g_halt[size_t(b)] = gh;
                    g_cont[size_t(b)] = gc;
                }
            }
            std::vector<int> col0(size_t(B), 0), col1(size_t(B), 1);
            auto bce_h = mean_all(bce_logits(gather_lastdim(seg.q_logits, col0), g_halt));
            auto bce_c = mean_all(bce_logits(gather_lastdim(seg.q_logits, col1), g_cont));
            return scale(bce_h + bce_c, 0.5f);
        });
    if (active[kTermRepX])
        terms[kTermRepX] =
            detail::named_term("rep_x", [&] { return repulsion_loss(xhat); });
    if (active[kTermRepZ])
        terms[kTermRepZ] = detail::named_term(
            "rep_z", [&] { return repulsion_loss(seg.high_live); });
    if (active[kTermEquilX])
        terms[kTermEquilX] = detail::named_term("equil_x", [&] {
            return equilibrium_residual(f, xhat, seg.low_live);
        });
    if (active[kTermEquilZ])
        terms[kTermEquilZ] = detail::named_term("equil_z", [&] {
            return equilibrium_residual(f, seg.high_live, seg.low_live);
        });
    if (active[kTermRhStableZ] || active[kTermRhUnstableX]) {
        Rng probe_rng(probe_seed);
        const double eps = cfg.jac_eps(false);
        if (active[kTermRhStableZ])
            terms[kTermRhStableZ] = detail::named_term("rh_stable_z", [&] {
                auto mu = mean_jacobian_diag(f, seg.high_live + seg.low_live, eps,
                                             cfg.jacobian.probes, probe_rng);
                return rh_stable_penalty(mu);
            });
        if (active[kTermRhUnstableX])
            terms[kTermRhUnstableX] = detail::named_term("rh_unstable_x", [&] {
                auto mu = mean_jacobian_diag(f, xhat + seg.low_live, eps,
                                             cfg.jacobian.probes, probe_rng);
                return rh_unstable_penalty(mu);
            });
    }

    Tensor total;
    for (int t = 0; t < kNumTerms; ++t) {
        if (!active[size_t(t)]) continue;
        rep.loss[size_t(t)] = double(terms[size_t(t)].item());
        auto weighted = scale(terms[size_t(t)], float(lambda[size_t(t)]));
        total = total.defined() ? total + weighted : weighted;
    }
    require(total.defined(), "supervision segment: no active loss terms");
    rep.total = double(total.item());

    if (measure_norms) {
        auto& probe = balance_probe(params);
        for (int t = 0; t < kNumTerms; ++t) {
            if (!active[size_t(t)]) continue;
            tape.zero_grads();
            detail::named_term(term_names()[size_t(t)], [&] {
                tape.backward(terms[size_t(t)]);
                return 0;
            });
            double s = 0;
            if (probe.has_grad())
                for (float g : probe.grad()) s += double(g) * double(g);
            rep.raw_norms[size_t(t)] = std::sqrt(s);
        }
        rep.measured = true;
    }
    tape.zero_grads();
    detail::named_term("total", [&] {
        tape.backward(total);
        return 0;
    });
    return rep;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct EvalStats {
    double exact = 0, token = 0, mean_segments = 0;
    long count = 0;
};

// Value-only rollout with adaptive halting (exploration floor off). The
// per-slot noise streams derive from `stream_step` and the sample's dataset
// position, so an evaluation is reproducible from a saved checkpoint without
// touching the training streams.
inline EvalStats evaluate_model(const CmmConfig& cfg, const ModelParams& params,
                                const std::vector<PuzzleInstance>& data,
                                uint64_t stream_step) {
    require(!data.empty(), "evaluate: dataset is empty");
    NoGrad ng;
    EvalStats st;
    st.count = long(data.size());
    const int S = cfg.seq_len;
    long tok_hits = 0, tok_total = 0, seg_total = 0;
    for (size_t at = 0; at < data.size(); at += size_t(cfg.batch_size)) {
        const int B = int(std::min(size_t(cfg.batch_size), data.size() - at));
        std::vector<int> in(size_t(B) * S, 0), tgt(size_t(B) * S, 0);
        for (int b = 0; b < B; ++b) {
            const auto& inst = data[at + size_t(b)];
            require(int(inst.input.size()) == S,
                    "eval: instance length does not match config seq_len");
            for (int t : inst.input)
                require(t >= 0 && t < cfg.vocab_in, "eval: input token out of range");
            std::copy(inst.input.begin(), inst.input.end(),
                      in.begin() + size_t(b) * S);
            std::copy(inst.target.begin(), inst.target.end(),
                      tgt.begin() + size_t(b) * S);
        }
        std::vector<Rng> rngs;
        for (int b = 0; b < B; ++b)
            rngs.emplace_back(derive_seed(cfg.seed, hash_tag("eval"), stream_step,
                                          at + size_t(b)));
        auto xhat = embed_input(cfg, params, in, B);
        LatentState state{xhat, Tensor::zeros(xhat.shape())};
        std::vector<int> pred(size_t(B) * S, -1);
        std::vector<int> used(size_t(B), 0);
        std::vector<uint8_t> halted(size_t(B), 0);
        for (int m = 1; m <= cfg.max_segments; ++m) {
            auto seg = run_segment(cfg, params, state, xhat, rngs);
            state = seg.carry;
            auto lv = seg.y_logits.val();
            auto qv = seg.q_logits.val();
            const int C = cfg.vocab_out, qd = cfg.q_dim();
            bool all_halted = true;
            for (int b = 0; b < B; ++b) {
                if (halted[size_t(b)]) continue;
                const double qh = double(qv[size_t(b) * qd]);
                const double qc = qd > 1 ? double(qv[size_t(b) * qd + 1]) : 0.0;
                if (act_decide(cfg.halting.variant, qh, qc, m, 1,
                               cfg.max_segments)) {
                    for (int s = 0; s < S; ++s) {
                        const float* row = lv.data() + (size_t(b) * S + s) * C;
                        int best = 0;
                        for (int c = 1; c < C; ++c)
                            if (row[c] > row[best]) best = c;
                        pred[size_t(b) * S + s] = best;
                    }
                    used[size_t(b)] = m;
                    halted[size_t(b)] = 1;
                } else {
                    all_halted = false;
                }
            }
            if (all_halted) break;
        }
        for (int b = 0; b < B; ++b) {
            bool all = true;
            for (int s = 0; s < S; ++s) {
                if (pred[size_t(b) * S + s] == tgt[size_t(b) * S + s])
                    ++tok_hits;
                else
                    all = false;
            }
            tok_total += S;
            seg_total += used[size_t(b)];
            if (all) st.exact += 1.0;
        }
    }
    st.exact /= double(st.count);
    st.token = double(tok_hits) / double(tok_total);
    st.mean_segments = double(seg_total) / double(st.count);
    return st;
}

class Trainer {
public:
    Trainer(CmmConfig cfg, std::vector<PuzzleInstance> data, std::string out_dir,
            bool quiet = false)
        : cfg_(std::move(cfg)),
          data_(std::move(data)),
          out_dir_(std::move(out_dir)),
          quiet_(quiet),
          params_(init_params(cfg_, cfg_.seed)),
          ema_params_(clone_params(params_, false)),
          opt_(cfg_.optimizer),
          balancer_(active_count(cfg_), cfg_.gradnorm) {
        validate_data();
        bank_.init(params_, ema_params_);
        for (int t = 0; t < kNumTerms; ++t)
            active_[size_t(t)] = term_weight(cfg_, t) > 0;
        slots_.init(cfg_.batch_size, cfg_.seq_len, cfg_.hidden_dim);
        reshuffle();
        if (!cfg_.eval.data.empty()) eval_data_ = read_jsonl(cfg_.eval.data);
        if (!out_dir_.empty())
            metrics_.open(out_dir_ + "/metrics.jsonl");
        last_step_time_ = Clock::now();
    }

    const CmmConfig& config() const { return cfg_; }
    ModelParams& params() { return params_; }
    ModelParams& ema_params() { return ema_params_; }
    long step() const { return step_; }
    long epoch() const { return epoch_; }
    double best_exact() const { return best_exact_; }
    CarrySlots& slots() { return slots_; }
    const std::vector<MetricsRow>& history() const { return history_; }

    static int active_count(const CmmConfig& cfg) {
        int n = 0;
        for (int t = 0; t < kNumTerms; ++t)
            if (term_weight(cfg, t) > 0) ++n;
        return n;
    }

    static double term_weight(const CmmConfig& cfg, int term) {
        const auto& w = cfg.weights;
        switch (term) {
            case kTermLm: return w.lm;
            case kTermHalt: return w.halt;
            case kTermRepX: return w.rep_x;
            case kTermRepZ: return w.rep_z;
            case kTermEquilX: return w.equil_x;
            case kTermEquilZ: return w.equil_z;
            case kTermRhStableZ: return w.rh_stable_z;
            case kTermRhUnstableX: return w.rh_unstable_x;
        }
        return 0;
    }

    // One supervision segment plus all bookkeeping around it. Returns false
    // once a stop condition has been reached.
    bool segment_once() {
        if (done_) return false;
        if (window_pos_ == 0) {
            refill_halted();
            if (done_) return false;
        }
        ++segment_counter_;
        for (auto& mm : slots_.m) ++mm;

        const bool measure = cfg_.gradnorm.enabled &&
                             accum_count_ + 1 == cfg_.grad_accum &&
                             (step_ + 1) % cfg_.gradnorm.update_every == 0;
        auto lambda = effective_lambda();
        auto rep = supervision_segment(
            cfg_, params_, slots_, lambda, active_,
            derive_seed(cfg_.seed, hash_tag("probe"), uint64_t(segment_counter_)),
            measure);
        bank_.harvest_grads();

        if (cfg_.gradnorm.enabled && !balancer_.initialized())
            balancer_.observe_initial(pack_active(rep.loss));
        for (int t = 0; t < kNumTerms; ++t) pending_loss_[size_t(t)] += rep.loss[size_t(t)];
        pending_total_ += rep.total;
        pending_lambda_ = lambda;
        ++pending_segments_;
        if (rep.measured) {
            pending_norms_ = rep.raw_norms;
            pending_measured_ = true;
            pending_losses_at_measure_ = rep.loss;
        }

        ++accum_count_;
        if (accum_count_ == cfg_.grad_accum) fire_step();

        ++window_pos_;
        if (window_pos_ == cfg_.segments_per_batch) {
            int halted_now = 0;
            for (int b = 0; b < slots_.batch; ++b) {
                if (act_decide(cfg_.halting.variant, slots_.q_halt[size_t(b)],
                               slots_.q_cont[size_t(b)], slots_.m[size_t(b)],
                               slots_.min_seg[size_t(b)], cfg_.max_segments)) {
                    slots_.halted[size_t(b)] = 1;
                    ++halted_now;
                }
            }
            last_halted_frac_ = double(halted_now) / slots_.batch;
            window_pos_ = 0;
        }
        // Saves are deferred to here so a checkpoint always captures a fully
        // finished segment with an empty gradient accumulator; resuming then
        // replays the continuous run bit for bit.
        if (accum_count_ == 0 && (want_best_ || want_latest_)) {
            if (want_best_) save_checkpoint(out_path("best.ckpt"));
            if (want_latest_) save_checkpoint(out_path("latest.ckpt"));
            want_best_ = want_latest_ = false;
        }
        return !done_;
    }

    void run() {
        while (segment_once()) {
        }
        if (accum_count_ > 0) fire_step();  // partial window at shutdown
        if (want_best_) save_checkpoint(out_path("best.ckpt"));
        save_checkpoint(out_path("latest.ckpt"));
        want_best_ = want_latest_ = false;
    }

    // Periodic evaluation runs on the EMA weights.
    EvalStats evaluate(const std::vector<PuzzleInstance>& data,
                       uint64_t stream_step) const {
        return evaluate_model(cfg_, ema_params_, data, stream_step);
    }

    // ----- persistence -----

    void save_checkpoint(const std::string& path) const {
        if (path.empty()) return;
        CheckpointWriter w;
        w.header["config"] = to_json(cfg_);
        w.header["seed"] = cfg_.seed;
        w.header["step"] = step_;
        w.header["epoch"] = epoch_;
        w.header["adam_t"] = opt_.applied_steps();
        w.header["segment_counter"] = segment_counter_;
        w.header["refill_counter"] = refill_counter_;
        w.header["window_pos"] = window_pos_;
        w.header["loader_pos"] = loader_pos_;
        w.header["balancer_updates"] = balancer_.updates();
        w.header["best_exact"] = best_exact_;
        w.header["last_halted_frac"] = last_halted_frac_;
        w.header["data_hash"] = data_hash_;
        w.header["threads"] = num_threads();
        auto add_t = [&](const std::string& name, const Tensor& t) {
            w.add(name, "f32", t.shape(), t.val().data(), t.val().size());
        };
        for (size_t i = 0; i < bank_.param.size(); ++i) {
            add_t("param/" + bank_.names[i], bank_.param[i]);
            add_t("ema/" + bank_.names[i], bank_.ema[i]);
            add_t("m/" + bank_.names[i], bank_.m[i]);
            add_t("v/" + bank_.names[i], bank_.v[i]);
        }
        add_t("carry/high", slots_.high);
        add_t("carry/low", slots_.low);
        const int B = slots_.batch;
        auto add_i = [&](const std::string& name, const std::vector<int32_t>& v) {
            w.add(name, "i32", {int(v.size())}, v.data(), v.size());
        };
        add_i("slot/in_tokens",
              std::vector<int32_t>(slots_.in_tokens.begin(), slots_.in_tokens.end()));
        add_i("slot/tgt_tokens",
              std::vector<int32_t>(slots_.tgt_tokens.begin(), slots_.tgt_tokens.end()));
        add_i("slot/m", std::vector<int32_t>(slots_.m.begin(), slots_.m.end()));
        add_i("slot/min_seg",
              std::vector<int32_t>(slots_.min_seg.begin(), slots_.min_seg.end()));
        add_i("slot/halted", slots_.halted);
        add_i("slot/instance", slots_.instance);
        std::vector<uint64_t> rng_state(size_t(B), 0);
        for (int b = 0; b < B; ++b) rng_state[size_t(b)] = slots_.rng[size_t(b)].state();
        w.add("slot/rng", "u64", {B}, rng_state.data(), rng_state.size());
        w.add("slot/q_halt", "f64", {B}, slots_.q_halt.data(), slots_.q_halt.size());
        w.add("slot/q_cont", "f64", {B}, slots_.q_cont.data(), slots_.q_cont.size());
        if (cfg_.gradnorm.enabled) {
            const auto& lam = balancer_.lambdas();
            w.add("balancer/lambda", "f64", {int(lam.size())}, lam.data(), lam.size());
            const auto& l0 = balancer_.initial_losses();
            if (!l0.empty())
                w.add("balancer/l0", "f64", {int(l0.size())}, l0.data(), l0.size());
        }
        w.save(path);
    }

    void load_checkpoint(const CheckpointReader& r) {
        step_ = r.header.at("step").get<long>();
        epoch_ = r.header.at("epoch").get<long>();
        opt_.set_applied_steps(r.header.at("adam_t").get<long>());
        segment_counter_ = r.header.at("segment_counter").get<long>();
        refill_counter_ = r.header.at("refill_counter").get<uint64_t>();
        window_pos_ = r.header.at("window_pos").get<int>();
        loader_pos_ = r.header.at("loader_pos").get<long>();
        best_exact_ = r.header.at("best_exact").get<double>();
        last_halted_frac_ = r.header.at("last_halted_frac").get<double>();
        const uint64_t want_hash = r.header.at("data_hash").get<uint64_t>();
        require(want_hash == data_hash_,
                "checkpoint was trained on a different dataset file");
        reshuffle();
        auto load_t = [&](const std::string& name, Tensor& t) {
            auto vals = r.read<float>(name, "f32");
            require(int64_t(vals.size()) == t.size(),
                    "checkpoint: size mismatch for " + name);
            std::copy(vals.begin(), vals.end(), t.val_mut().begin());
        };
        for (size_t i = 0; i < bank_.param.size(); ++i) {
            load_t("param/" + bank_.names[i], bank_.param[i]);
            load_t("ema/" + bank_.names[i], bank_.ema[i]);
            load_t("m/" + bank_.names[i], bank_.m[i]);
            load_t("v/" + bank_.names[i], bank_.v[i]);
        }
        load_t("carry/high", slots_.high);
        load_t("carry/low", slots_.low);
        auto load_i = [&](const std::string& name, auto& vec) {
            auto vals = r.read<int32_t>(name, "i32");
            require(vals.size() == vec.size(), "checkpoint: size mismatch for " + name);
            std::copy(vals.begin(), vals.end(), vec.begin());
        };
        load_i("slot/in_tokens", slots_.in_tokens);
        load_i("slot/tgt_tokens", slots_.tgt_tokens);
        load_i("slot/m", slots_.m);
        load_i("slot/min_seg", slots_.min_seg);
        load_i("slot/halted", slots_.halted);
        load_i("slot/instance", slots_.instance);
        auto rng_state = r.read<uint64_t>("slot/rng", "u64");
        for (int b = 0; b < slots_.batch; ++b)
            slots_.rng[size_t(b)].set_state(rng_state[size_t(b)]);
        slots_.q_halt = r.read<double>("slot/q_halt", "f64");
        slots_.q_cont = r.read<double>("slot/q_cont", "f64");
        if (cfg_.gradnorm.enabled) {
            auto lam = r.read<double>("balancer/lambda", "f64");
            std::vector<double> l0;
            if (r.has("balancer/l0")) l0 = r.read<double>("balancer/l0", "f64");
            balancer_.set_state(std::move(lam), std::move(l0),
                                r.header.at("balancer_updates").get<long>());
        }
        last_step_time_ = Clock::now();
    }

    std::string out_path(const std::string& file) const {
        return out_dir_.empty() ? std::string() : out_dir_ + "/" + file;
    }

private:
    using Clock = std::chrono::steady_clock;

    void validate_data() {
        require(!data_.empty(), "training dataset is empty");
        uint64_t h = 0;
        for (const auto& inst : data_) {
            require(int(inst.input.size()) == cfg_.seq_len,
                    "dataset instance length does not match config seq_len");
            for (int t : inst.input)
                require(t >= 0 && t < cfg_.vocab_in,
                        "dataset input token out of configured vocab range");
            for (int t : inst.target)
                require(t >= 0 && t < cfg_.vocab_out,
                        "dataset target token out of configured vocab range");
            h ^= instance_hash(inst);
            h = detail::mix64(h);
        }
        data_hash_ = h;
    }

    void reshuffle() {
        Rng order_rng(derive_seed(cfg_.seed, hash_tag("order"), uint64_t(epoch_)));
        perm_ = order_rng.permutation(int(data_.size()));
    }

    std::array<double, kNumTerms> effective_lambda() const {
        std::array<double, kNumTerms> lam{};
        if (!cfg_.gradnorm.enabled) {
            for (int t = 0; t < kNumTerms; ++t)
                lam[size_t(t)] = active_[size_t(t)] ? term_weight(cfg_, t) : 0.0;
            return lam;
        }
        const auto& l = balancer_.lambdas();
        size_t i = 0;
        for (int t = 0; t < kNumTerms; ++t)
            if (active_[size_t(t)]) lam[size_t(t)] = l[i++];
        return lam;
    }

    std::vector<double> pack_active(const std::array<double, kNumTerms>& a) const {
        std::vector<double> out;
        for (int t = 0; t < kNumTerms; ++t)
            if (active_[size_t(t)]) out.push_back(a[size_t(t)]);
        return out;
    }

    void refill_halted() {
        for (int b = 0; b < slots_.batch && !done_; ++b) {
            if (!slots_.halted[size_t(b)]) continue;
            if (loader_pos_ == long(data_.size())) {
                if (accum_count_ > 0) fire_step();  // flush partial accumulation
                ++epoch_;
                loader_pos_ = 0;
                reshuffle();
                if (cfg_.max_epochs > 0 && epoch_ >= cfg_.max_epochs) {
                    done_ = true;
                    return;
                }
            }
            const int idx = perm_[size_t(loader_pos_++)];
            slots_.refresh(b, cfg_, params_, data_[size_t(idx)], int32_t(idx),
                           derive_seed(cfg_.seed, hash_tag("slot"), refill_counter_));
            ++refill_counter_;
        }
    }

    void fire_step() {
        const int count = accum_count_;
        const double scale = 1.0 / double(count);
        MetricsRow row;
        row.step = step_ + 1;
        row.grad_norm = bank_.accum_norm(scale);
        const bool applied = opt_.step(bank_, schedule_lr(cfg_, epoch_), scale,
                                       [&](const std::string& name) {
                                           return embeddings_frozen() &&
                                                  name == "embed";
                                       });
        if (applied) {
            opt_.ema_update(bank_, cfg_.optimizer.weight_ema);
        } else {
            row.step_skipped = true;
            if (!quiet_)
                std::cerr << "step " << (step_ + 1)
                          << ": non-finite accumulated gradient, step skipped\n";
        }
        bank_.clear_accum();
        accum_count_ = 0;
        ++step_;

        row.active = active_;
        for (int t = 0; t < kNumTerms; ++t)
            row.loss[size_t(t)] = pending_loss_[size_t(t)] / double(pending_segments_);
        row.loss_total = pending_total_ / double(pending_segments_);
        row.lambda = pending_lambda_;
        if (pending_measured_) {
            row.term_grad_norm = pending_norms_;
            row.has_term_grad_norms = true;
            if (cfg_.gradnorm.enabled)
                balancer_.update(pack_active(pending_losses_at_measure_),
                                 pack_active(pending_norms_));
        }
        row.halted_frac = last_halted_frac_;
        pending_loss_.fill(0);
        pending_norms_.fill(0);
        pending_total_ = 0;
        pending_segments_ = 0;
        pending_measured_ = false;

        if (cfg_.eval.every_steps > 0 && !eval_data_.empty() &&
            step_ % cfg_.eval.every_steps == 0) {
            auto st = evaluate(eval_data_, uint64_t(step_));
            row.exact = st.exact;
            row.token = st.token;
            if (st.exact > best_exact_) {
                best_exact_ = st.exact;
                want_best_ = true;
            }
            if (cfg_.eval.stop_at_exact >= 0 && st.exact >= cfg_.eval.stop_at_exact)
                done_ = true;
        }

        auto now = Clock::now();
        row.wall_ms =
            std::chrono::duration<double, std::milli>(now - last_step_time_).count();
        last_step_time_ = now;
        history_.push_back(row);
        metrics_.write(row);

        if (cfg_.ckpt_every > 0 && step_ % cfg_.ckpt_every == 0)
            want_latest_ = true;
        if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) done_ = true;
    }

    bool embeddings_frozen() const {
        return cfg_.freeze_embedding_after_epoch >= 0 &&
               epoch_ >= cfg_.freeze_embedding_after_epoch;
    }

    CmmConfig cfg_;
    std::vector<PuzzleInstance> data_, eval_data_;
    std::string out_dir_;
    bool quiet_ = false;
    ModelParams params_, ema_params_;
    ParamBank bank_;
    Optimizer opt_;
    GradNormBalancer balancer_;
    std::array<bool, kNumTerms> active_{};
    CarrySlots slots_;
    std::vector<int> perm_;

    long step_ = 0, epoch_ = 0, segment_counter_ = 0, loader_pos_ = 0;
    uint64_t refill_counter_ = 0;
    int window_pos_ = 0, accum_count_ = 0;
    double best_exact_ = -1.0, last_halted_frac_ = 0;
    uint64_t data_hash_ = 0;
    bool done_ = false, want_best_ = false, want_latest_ = false;

    std::array<double, kNumTerms> pending_loss_{}, pending_lambda_{},
        pending_norms_{}, pending_losses_at_measure_{};
    double pending_total_ = 0;
    int pending_segments_ = 0;
    bool pending_measured_ = false;

    MetricsWriter metrics_;
    std::vector<MetricsRow> history_;
    Clock::time_point last_step_time_;
};

}  // namespace cmm
