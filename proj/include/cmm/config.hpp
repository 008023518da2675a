#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cmm/common.hpp"

namespace cmm {

using nlohmann::json;

enum class Activation { silu, tanh };
enum class Mixer { mlp, attention };
enum class NoiseKind { none, additive, multiplicative };
enum class OptKind { adamw, adam_atan2 };
enum class HaltVariant { trm_halt, hrm_q };
enum class ScheduleKind { constant, two_phase_exp };

struct LossWeights {
    double lm = 1.0;
    double halt = 0.5;
    double rep_x = 1e3;
    double rep_z = 1e3;
    double equil_x = 1.0;
    double equil_z = 1.0;
    double rh_stable_z = 1e4;
    double rh_unstable_x = 10.0;
};

struct NoiseCfg {
    NoiseKind kind = NoiseKind::none;
    double sigma = 0.0;
};

struct OptimizerCfg {
    OptKind kind = OptKind::adam_atan2;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-12;
    double weight_decay = 1.0;
    double weight_ema = 0.999;  // EMA of weights used at eval time
};

struct ScheduleCfg {
    ScheduleKind kind = ScheduleKind::constant;
    // two_phase_exp: lr0 -> lr1 over [0, epochs1), then lr1 -> lr2 over
    // [epochs1, epochs2), then lr2.
    double lr0 = 1e-4, lr1 = 5e-5, lr2 = 3e-5;
    int epochs1 = 30000, epochs2 = 50000;
};

struct GradNormCfg {
    bool enabled = false;
    double alpha = 1.0;
    double ema_rho = 0.9;
    int reset_period = 500;  // soft reset cadence in optimizer steps; 0 = never
    int update_every = 1;    // controller updates every k optimizer steps
};

struct HaltingCfg {
    HaltVariant variant = HaltVariant::trm_halt;
    double explore_prob = 0.1;
};

struct EvalCfg {
    std::string data;        // held-out JSONL; empty = no periodic eval
    int every_steps = 0;     // 0 = no periodic eval
    double stop_at_exact = -1.0;  // early stop threshold; <0 = never
};

struct JacobianCfg {
    double probe_eps = 0.0;  // 0 = precision default (1e-3 f32, 1e-5 f64)
    int probes = 1;
};

struct CmmConfig {
    int hidden_dim = 512;
    int seq_len = 81;
    int vocab_in = 11;
    int vocab_out = 11;
    int outer_steps = 3;  // cycles per segment
    int inner_steps = 6;  // low-state updates per cycle
    Activation activation = Activation::silu;
    Mixer mixer = Mixer::mlp;
    int attn_heads = 8;
    bool identical_layers = false;
    double channel_expand = 4.5;
    double token_expand = 8.0;
    int max_segments = 16;        // supervision budget per sample
    int segments_per_batch = 1;   // segments between halting checks / refills
    int grad_accum = 1;           // segments per optimizer step
    double dt = 1.0;
    NoiseCfg noise;
    int stablemax_order = 3;
    LossWeights weights;
    OptimizerCfg optimizer;
    ScheduleCfg schedule;
    GradNormCfg gradnorm;
    HaltingCfg halting;
    int batch_size = 32;
    long max_steps = 0;   // optimizer-step cap; 0 = unbounded
    int max_epochs = 0;   // 0 = unbounded
    EvalCfg eval;
    int freeze_embedding_after_epoch = -1;  // -1 = never
    int pad_token = -1;                     // -1 = no padding
    uint64_t seed = 1;
    JacobianCfg jacobian;
    int ckpt_every = 0;  // optimizer steps between checkpoint saves; 0 = final only

    int q_dim() const { return halting.variant == HaltVariant::hrm_q ? 2 : 1; }
    int token_hidden() const { return int(token_expand * seq_len + 0.5); }
    int channel_hidden() const { return int(channel_expand * hidden_dim + 0.5); }
    double jac_eps(bool is_double) const {
        if (jacobian.probe_eps > 0) return jacobian.probe_eps;
        return is_double ? 1e-5 : 1e-3;
    }
};

namespace detail {

inline void check_keys(const json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    require(j.is_object(), "config: " + where + " must be an object");
    for (auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (k == a) ok = true;
        require(ok, "config: unknown key '" + k + "' in " + where);
    }
}

template <class T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

inline void get_enum(const json& j, const char* key, const std::string& where,
                     std::initializer_list<std::pair<const char*, int>> names,
                     int& out) {
    if (!j.contains(key)) return;
    std::string s = j.at(key).get<std::string>();
    for (auto& [n, v] : names)
        if (s == n) {
            out = v;
            return;
        }
    throw InputError("config: bad value '" + s + "' for " + where + "." + key);
}

}  // namespace detail

inline void from_json_strict(const json& j, CmmConfig& c) {
    using detail::check_keys;
    using detail::get_enum;
    using detail::get_to;
    check_keys(j, "config",
               {"hidden_dim", "seq_len", "vocab_in", "vocab_out", "outer_steps",
                "inner_steps", "activation", "mixer", "attn_heads",
                "identical_layers", "channel_expand", "token_expand",
                "max_segments", "segments_per_batch", "grad_accum", "dt",
                "noise", "stablemax_order", "loss_weights", "optimizer",
                "schedule", "gradnorm", "halting", "batch_size", "max_steps",
                "max_epochs", "eval", "freeze_embedding_after_epoch",
                "pad_token", "seed", "jacobian", "ckpt_every"});
    get_to(j, "hidden_dim", c.hidden_dim);
    get_to(j, "seq_len", c.seq_len);
    get_to(j, "vocab_in", c.vocab_in);
    get_to(j, "vocab_out", c.vocab_out);
    get_to(j, "outer_steps", c.outer_steps);
    get_to(j, "inner_steps", c.inner_steps);
    int e = int(c.activation);
    get_enum(j, "activation", "config", {{"silu", 0}, {"tanh", 1}}, e);
    c.activation = Activation(e);
    e = int(c.mixer);
    get_enum(j, "mixer", "config", {{"mlp", 0}, {"attention", 1}}, e);
    c.mixer = Mixer(e);
    get_to(j, "attn_heads", c.attn_heads);
    get_to(j, "identical_layers", c.identical_layers);
    get_to(j, "channel_expand", c.channel_expand);
    get_to(j, "token_expand", c.token_expand);
    get_to(j, "max_segments", c.max_segments);
    get_to(j, "segments_per_batch", c.segments_per_batch);
    get_to(j, "grad_accum", c.grad_accum);
    get_to(j, "dt", c.dt);
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        check_keys(n, "noise", {"kind", "sigma"});
        e = int(c.noise.kind);
        get_enum(n, "kind", "noise",
                 {{"none", 0}, {"additive", 1}, {"multiplicative", 2}}, e);
        c.noise.kind = NoiseKind(e);
        get_to(n, "sigma", c.noise.sigma);
    }
    get_to(j, "stablemax_order", c.stablemax_order);
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        check_keys(w, "loss_weights",
                   {"lm", "halt", "rep_x", "rep_z", "equil_x", "equil_z",
                    "rh_stable_z", "rh_unstable_x"});
        get_to(w, "lm", c.weights.lm);
        get_to(w, "halt", c.weights.halt);
        get_to(w, "rep_x", c.weights.rep_x);
        get_to(w, "rep_z", c.weights.rep_z);
        get_to(w, "equil_x", c.weights.equil_x);
        get_to(w, "equil_z", c.weights.equil_z);
        get_to(w, "rh_stable_z", c.weights.rh_stable_z);
        get_to(w, "rh_unstable_x", c.weights.rh_unstable_x);
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        check_keys(o, "optimizer",
                   {"kind", "lr", "beta1", "beta2", "eps", "weight_decay",
                    "weight_ema"});
        e = int(c.optimizer.kind);
        get_enum(o, "kind", "optimizer", {{"adamw", 0}, {"adam_atan2", 1}}, e);
        c.optimizer.kind = OptKind(e);
        get_to(o, "lr", c.optimizer.lr);
        get_to(o, "beta1", c.optimizer.beta1);
        get_to(o, "beta2", c.optimizer.beta2);
        get_to(o, "eps", c.optimizer.eps);
        get_to(o, "weight_decay", c.optimizer.weight_decay);
        get_to(o, "weight_ema", c.optimizer.weight_ema);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        check_keys(s, "schedule",
                   {"kind", "lr0", "lr1", "lr2", "epochs1", "epochs2"});
        e = int(c.schedule.kind);
        get_enum(s, "kind", "schedule", {{"constant", 0}, {"two_phase_exp", 1}},
                 e);
        c.schedule.kind = ScheduleKind(e);
        get_to(s, "lr0", c.schedule.lr0);
        get_to(s, "lr1", c.schedule.lr1);
        get_to(s, "lr2", c.schedule.lr2);
        get_to(s, "epochs1", c.schedule.epochs1);
        get_to(s, "epochs2", c.schedule.epochs2);
    }
    if (j.contains("gradnorm")) {
        const auto& g = j.at("gradnorm");
        check_keys(g, "gradnorm",
                   {"enabled", "alpha", "ema_rho", "reset_period", "update_every"});
        get_to(g, "enabled", c.gradnorm.enabled);
        get_to(g, "alpha", c.gradnorm.alpha);
        get_to(g, "ema_rho", c.gradnorm.ema_rho);
        get_to(g, "reset_period", c.gradnorm.reset_period);
        get_to(g, "update_every", c.gradnorm.update_every);
    }
    if (j.contains("halting")) {
        const auto& h = j.at("halting");
        check_keys(h, "halting", {"variant", "explore_prob"});
        e = int(c.halting.variant);
        get_enum(h, "variant", "halting", {{"trm_halt", 0}, {"hrm_q", 1}}, e);
        c.halting.variant = HaltVariant(e);
        get_to(h, "explore_prob", c.halting.explore_prob);
    }
    get_to(j, "batch_size", c.batch_size);
    get_to(j, "max_steps", c.max_steps);
    get_to(j, "max_epochs", c.max_epochs);
    if (j.contains("eval")) {
        const auto& ev = j.at("eval");
        check_keys(ev, "eval", {"data", "every_steps", "stop_at_exact"});
        get_to(ev, "data", c.eval.data);
        get_to(ev, "every_steps", c.eval.every_steps);
        get_to(ev, "stop_at_exact", c.eval.stop_at_exact);
    }
    get_to(j, "freeze_embedding_after_epoch", c.freeze_embedding_after_epoch);
    get_to(j, "pad_token", c.pad_token);
    get_to(j, "seed", c.seed);
    if (j.contains("jacobian")) {
        const auto& ja = j.at("jacobian");
        check_keys(ja, "jacobian", {"probe_eps", "probes"});
        get_to(ja, "probe_eps", c.jacobian.probe_eps);
        get_to(ja, "probes", c.jacobian.probes);
    }
    get_to(j, "ckpt_every", c.ckpt_every);
}

inline json to_json(const CmmConfig& c) {
    json j;
    j["hidden_dim"] = c.hidden_dim;
    j["seq_len"] = c.seq_len;
    j["vocab_in"] = c.vocab_in;
    j["vocab_out"] = c.vocab_out;
    j["outer_steps"] = c.outer_steps;
    j["inner_steps"] = c.inner_steps;
    j["activation"] = c.activation == Activation::silu ? "silu" : "tanh";
    j["mixer"] = c.mixer == Mixer::mlp ? "mlp" : "attention";
    j["attn_heads"] = c.attn_heads;
    j["identical_layers"] = c.identical_layers;
    j["channel_expand"] = c.channel_expand;
    j["token_expand"] = c.token_expand;
    j["max_segments"] = c.max_segments;
    j["segments_per_batch"] = c.segments_per_batch;
    j["grad_accum"] = c.grad_accum;
    j["dt"] = c.dt;
    j["noise"]["kind"] = c.noise.kind == NoiseKind::none ? "none"
                         : c.noise.kind == NoiseKind::additive
                             ? "additive"
                             : "multiplicative";
    j["noise"]["sigma"] = c.noise.sigma;
    j["stablemax_order"] = c.stablemax_order;
    j["loss_weights"] = {{"lm", c.weights.lm},
                         {"halt", c.weights.halt},
                         {"rep_x", c.weights.rep_x},
                         {"rep_z", c.weights.rep_z},
                         {"equil_x", c.weights.equil_x},
                         {"equil_z", c.weights.equil_z},
                         {"rh_stable_z", c.weights.rh_stable_z},
                         {"rh_unstable_x", c.weights.rh_unstable_x}};
    j["optimizer"] = {
        {"kind", c.optimizer.kind == OptKind::adamw ? "adamw" : "adam_atan2"},
        {"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"weight_ema", c.optimizer.weight_ema}};
    j["schedule"] = {{"kind", c.schedule.kind == ScheduleKind::constant
                                  ? "constant"
                                  : "two_phase_exp"},
                     {"lr0", c.schedule.lr0},
                     {"lr1", c.schedule.lr1},
                     {"lr2", c.schedule.lr2},
                     {"epochs1", c.schedule.epochs1},
                     {"epochs2", c.schedule.epochs2}};
    j["gradnorm"] = {{"enabled", c.gradnorm.enabled},
                     {"alpha", c.gradnorm.alpha},
                     {"ema_rho", c.gradnorm.ema_rho},
                     {"reset_period", c.gradnorm.reset_period},
                     {"update_every", c.gradnorm.update_every}};
    j["halting"] = {{"variant", c.halting.variant == HaltVariant::trm_halt
                                    ? "trm_halt"
                                    : "hrm_q"},
                    {"explore_prob", c.halting.explore_prob}};
    j["batch_size"] = c.batch_size;
    j["max_steps"] = c.max_steps;
    j["max_epochs"] = c.max_epochs;
    j["eval"] = {{"data", c.eval.data},
                 {"every_steps", c.eval.every_steps},
                 {"stop_at_exact", c.eval.stop_at_exact}};
    j["freeze_embedding_after_epoch"] = c.freeze_embedding_after_epoch;
    j["pad_token"] = c.pad_token;
    j["seed"] = c.seed;
    j["jacobian"] = {{"probe_eps", c.jacobian.probe_eps},
                     {"probes", c.jacobian.probes}};
    j["ckpt_every"] = c.ckpt_every;
    return j;
}

inline void validate(const CmmConfig& c) {
    require(c.hidden_dim >= 1 && c.seq_len >= 1, "config: hidden_dim and seq_len must be >= 1");
    require(c.vocab_in >= 1 && c.vocab_out >= 2, "config: vocab_in >= 1, vocab_out >= 2");
    require(c.outer_steps >= 1 && c.inner_steps >= 1,
            "config: outer_steps and inner_steps must be >= 1");
    require(c.max_segments >= 1, "config: max_segments must be >= 1");
    require(c.segments_per_batch >= 1 && c.segments_per_batch <= c.max_segments,
            "config: need 1 <= segments_per_batch <= max_segments");
    // Halting decisions only happen on window boundaries, so the segment cap
    // must land exactly on one.
    require(c.max_segments % c.segments_per_batch == 0,
            "config: segments_per_batch must divide max_segments");
    require(c.grad_accum >= 1 && c.grad_accum <= c.max_segments,
            "config: need 1 <= grad_accum <= max_segments");
    require(c.dt > 0, "config: dt must be positive");
    require(c.noise.sigma >= 0, "config: noise.sigma must be >= 0");
    require(c.stablemax_order == 1 || c.stablemax_order == 3 ||
                c.stablemax_order == 5,
            "config: stablemax_order must be 1, 3 or 5");
    require(c.weights.lm > 0, "config: loss_weights.lm must be positive");
    require(c.weights.halt >= 0 && c.weights.rep_x >= 0 && c.weights.rep_z >= 0 &&
                c.weights.equil_x >= 0 && c.weights.equil_z >= 0 &&
                c.weights.rh_stable_z >= 0 && c.weights.rh_unstable_x >= 0,
            "config: loss weights must be >= 0");
    require(c.optimizer.lr > 0 && c.optimizer.eps > 0,
            "config: optimizer lr and eps must be positive");
    require(c.optimizer.beta1 >= 0 && c.optimizer.beta1 < 1 &&
                c.optimizer.beta2 >= 0 && c.optimizer.beta2 < 1,
            "config: optimizer betas must lie in [0,1)");
    if (c.schedule.kind == ScheduleKind::two_phase_exp) {
        require(c.schedule.lr0 > 0 && c.schedule.lr1 > 0 && c.schedule.lr2 > 0,
                "config: schedule rates must be positive");
        require(c.schedule.epochs1 >= 1 && c.schedule.epochs2 > c.schedule.epochs1,
                "config: schedule needs 1 <= epochs1 < epochs2");
    }
    require(c.optimizer.weight_ema >= 0 && c.optimizer.weight_ema < 1,
            "config: optimizer.weight_ema must lie in [0,1)");
    require(c.gradnorm.ema_rho >= 0 && c.gradnorm.ema_rho < 1,
            "config: gradnorm.ema_rho must lie in [0,1)");
    require(c.gradnorm.alpha >= 0, "config: gradnorm.alpha must be >= 0");
    require(c.gradnorm.update_every >= 1, "config: gradnorm.update_every >= 1");
    require(c.halting.explore_prob >= 0 && c.halting.explore_prob <= 1,
            "config: halting.explore_prob must lie in [0,1]");
    require(c.batch_size >= 1, "config: batch_size must be >= 1");
    if (c.weights.rep_x > 0 || c.weights.rep_z > 0)
        require(c.batch_size >= 2, "config: repulsion terms need batch_size >= 2");
    if (c.mixer == Mixer::attention)
        require(c.attn_heads >= 1 && c.hidden_dim % c.attn_heads == 0,
                "config: attn_heads must divide hidden_dim");
    require(c.jacobian.probes >= 1, "config: jacobian.probes must be >= 1");
    require(c.jacobian.probe_eps >= 0, "config: jacobian.probe_eps must be >= 0");
    require(c.pad_token < c.vocab_out, "config: pad_token must be < vocab_out");
}

inline CmmConfig parse_config(const json& j) {
    CmmConfig c;
    from_json_strict(j, c);
    validate(c);
    return c;
}

inline CmmConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(bool(in), "cannot open config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw InputError("config '" + path + "': " + e.what());
    }
    return parse_config(j);
}

}  // namespace cmm
