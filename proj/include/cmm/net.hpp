#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmm/config.hpp"
#include "cmm/rng.hpp"
#include "cmm/tensor.hpp"

namespace cmm {

// One mixer block: token mixing (over positions, on the transposed view)
// followed by channel mixing, both pre-normalized with residual connections.
// The attention variant swaps the token MLP for multi-head self-attention.
template <class Real>
struct BlockParamsT {
    // token mix (mlp mixer)
    TensorT<Real> tok_gain, tok_w1, tok_b1, tok_w2, tok_b2;
    // attention alternative
    TensorT<Real> attn_gain, wq, bq, wk, bk, wv, bv, wo, bo;
    // channel mix
    TensorT<Real> chan_gain, chan_w1, chan_b1, chan_w2, chan_b2;
};

template <class Real>
struct ModelParamsT {
    TensorT<Real> embed;  // [vocab_in, D], looked up with sqrt(D) scaling
    std::vector<BlockParamsT<Real>> blocks;  // size 1 if identical_layers
    TensorT<Real> out_w, out_b;  // per-position readout [D, vocab_out]
    TensorT<Real> q_w, q_b;      // pooled halting head [D, q_dim]
};

using ModelParams = ModelParamsT<float>;

template <class Real, class Fn>
void for_each_param(ModelParamsT<Real>& p, Fn&& fn) {
    fn("embed", p.embed);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        std::string pre = "block" + std::to_string(i) + ".";
        auto visit = [&](const char* name, TensorT<Real>& t) {
            if (t.defined()) fn(pre + name, t);
        };
        visit("tok_gain", b.tok_gain);
        visit("tok_w1", b.tok_w1);
        visit("tok_b1", b.tok_b1);
        visit("tok_w2", b.tok_w2);
        visit("tok_b2", b.tok_b2);
        visit("attn_gain", b.attn_gain);
        visit("wq", b.wq);
        visit("bq", b.bq);
        visit("wk", b.wk);
        visit("bk", b.bk);
        visit("wv", b.wv);
        visit("bv", b.bv);
        visit("wo", b.wo);
        visit("bo", b.bo);
        visit("chan_gain", b.chan_gain);
        visit("chan_w1", b.chan_w1);
        visit("chan_b1", b.chan_b1);
        visit("chan_w2", b.chan_w2);
        visit("chan_b2", b.chan_b2);
    }
    fn("out_w", p.out_w);
    fn("out_b", p.out_b);
    fn("q_w", p.q_w);
    fn("q_b", p.q_b);
}

template <class Real, class Fn>
void for_each_param(const ModelParamsT<Real>& p, Fn&& fn) {
    for_each_param(const_cast<ModelParamsT<Real>&>(p),
                   [&](const std::string& n, TensorT<Real>& t) {
                       fn(n, static_cast<const TensorT<Real>&>(t));
                   });
}

template <class Real>
long param_count(const ModelParamsT<Real>& p) {
    long n = 0;
    for_each_param(p, [&](const std::string&, const TensorT<Real>& t) {
        n += t.size();
    });
    return n;
}

namespace detail {

template <class Real>
TensorT<Real> filled_trunc_normal(Shape shape, Rng& rng, double stddev) {
    auto t = TensorT<Real>::zeros(std::move(shape), true);
    auto v = t.val_mut();
    for (auto& x : v) x = Real(rng.trunc_normal(stddev));
    return t;
}

template <class Real>
TensorT<Real> filled_const(Shape shape, double c) {
    return TensorT<Real>::constant(std::move(shape), Real(c)).set_requires_grad(true);
}

template <class Real>
BlockParamsT<Real> init_block(const CmmConfig& cfg, Rng& rng) {
    const int D = cfg.hidden_dim, S = cfg.seq_len;
    const double std = 0.02;
    BlockParamsT<Real> b;
    if (cfg.mixer == Mixer::mlp) {
        const int Ht = cfg.token_hidden();
        b.tok_gain = filled_const<Real>({D}, 1.0);
        b.tok_w1 = filled_trunc_normal<Real>({S, Ht}, rng, std);
        b.tok_b1 = filled_const<Real>({Ht}, 0.0);
        b.tok_w2 = filled_trunc_normal<Real>({Ht, S}, rng, std);
        b.tok_b2 = filled_const<Real>({S}, 0.0);
    } else {
        b.attn_gain = filled_const<Real>({D}, 1.0);
        b.wq = filled_trunc_normal<Real>({D, D}, rng, std);
        b.bq = filled_const<Real>({D}, 0.0);
        b.wk = filled_trunc_normal<Real>({D, D}, rng, std);
        b.bk = filled_const<Real>({D}, 0.0);
        b.wv = filled_trunc_normal<Real>({D, D}, rng, std);
        b.bv = filled_const<Real>({D}, 0.0);
        b.wo = filled_trunc_normal<Real>({D, D}, rng, std);
        b.bo = filled_const<Real>({D}, 0.0);
    }
    const int Hc = cfg.channel_hidden();
    b.chan_gain = filled_const<Real>({D}, 1.0);
    b.chan_w1 = filled_trunc_normal<Real>({D, Hc}, rng, std);
    b.chan_b1 = filled_const<Real>({Hc}, 0.0);
    b.chan_w2 = filled_trunc_normal<Real>({Hc, D}, rng, std);
    b.chan_b2 = filled_const<Real>({D}, 0.0);
    return b;
}

}  // namespace detail

// Weights and embeddings start as truncated normals; biases and both output
// heads start at zero so the initial token distribution is uniform and the
// initial halting logit sits at the decision boundary.
template <class Real>
ModelParamsT<Real> init_params_t(const CmmConfig& cfg, uint64_t seed) {
    Rng rng(derive_seed(seed, hash_tag("param-init")));
    const int D = cfg.hidden_dim;
    ModelParamsT<Real> p;
    p.embed = detail::filled_trunc_normal<Real>({cfg.vocab_in, D}, rng, 0.02);
    const int nblocks = cfg.identical_layers ? 1 : 2;
    for (int i = 0; i < nblocks; ++i)
        p.blocks.push_back(detail::init_block<Real>(cfg, rng));
    p.out_w = detail::filled_const<Real>({D, cfg.vocab_out}, 0.0);
    p.out_b = detail::filled_const<Real>({cfg.vocab_out}, 0.0);
    p.q_w = detail::filled_const<Real>({D, cfg.q_dim()}, 0.0);
    p.q_b = detail::filled_const<Real>({cfg.q_dim()}, 0.0);
    return p;
}

inline ModelParams init_params(const CmmConfig& cfg, uint64_t seed) {
    return init_params_t<float>(cfg, seed);
}

template <class Real>
TensorT<Real> apply_activation(const CmmConfig& cfg, const TensorT<Real>& x) {
    return cfg.activation == Activation::silu ? silu(x) : tanh(x);
}

template <class Real>
TensorT<Real> token_mix(const CmmConfig& cfg, const BlockParamsT<Real>& b,
                        const TensorT<Real>& x) {
    if (cfg.mixer == Mixer::mlp) {
        auto h = transpose_12(rmsnorm(x, b.tok_gain));  // [B,D,S]
        h = apply_activation(cfg, add_bias(matmul(h, b.tok_w1), b.tok_b1));
        h = add_bias(matmul(h, b.tok_w2), b.tok_b2);
        return x + transpose_12(h);
    }
    const int B = x.shape()[0], S = x.shape()[1], D = x.shape()[2];
    const int H = cfg.attn_heads, dh = D / H;
    auto n = rmsnorm(x, b.attn_gain);
    auto split = [&](const TensorT<Real>& t) {
        // [B,S,D] -> [B*H, S, dh] with heads as the batch-major axis
        return reshape(permute_0213(reshape(t, {B, S, H, dh})), {B * H, S, dh});
    };
    auto q = split(add_bias(matmul(n, b.wq), b.bq));
    auto k = split(add_bias(matmul(n, b.wk), b.bk));
    auto v = split(add_bias(matmul(n, b.wv), b.bv));
    auto scores = scale(bmm(q, k, /*trans_b=*/true), Real(1.0 / std::sqrt(double(dh))));
    auto ctx = bmm(softmax_lastdim(scores), v);  // [B*H, S, dh]
    ctx = reshape(permute_0213(reshape(ctx, {B, H, S, dh})), {B, S, D});
    return x + add_bias(matmul(ctx, b.wo), b.bo);
}

template <class Real>
TensorT<Real> channel_mix(const CmmConfig& cfg, const BlockParamsT<Real>& b,
                          const TensorT<Real>& x) {
    auto h = rmsnorm(x, b.chan_gain);
    h = apply_activation(cfg, add_bias(matmul(h, b.chan_w1), b.chan_b1));
    h = add_bias(matmul(h, b.chan_w2), b.chan_b2);
    return x + h;
}

// The shared network F: two mixer layers applied in sequence (the same layer
// twice when identical_layers is set).
template <class Real>
TensorT<Real> net_forward(const CmmConfig& cfg, const ModelParamsT<Real>& p,
                          const TensorT<Real>& u) {
    auto z = u;
    for (int i = 0; i < 2; ++i) {
        const auto& b = cfg.identical_layers ? p.blocks[0]
                                             : p.blocks[size_t(i)];
        z = token_mix(cfg, b, z);
        z = channel_mix(cfg, b, z);
    }
    return z;
}

template <class Real>
TensorT<Real> embed_input(const CmmConfig& cfg, const ModelParamsT<Real>& p,
                          const std::vector<int>& tokens, int batch) {
    return embedding(p.embed, tokens, batch, cfg.seq_len,
                     Real(std::sqrt(double(cfg.hidden_dim))));
}

template <class Real>
TensorT<Real> output_head(const ModelParamsT<Real>& p, const TensorT<Real>& z) {
    return add_bias(matmul(z, p.out_w), p.out_b);  // [B,S,vocab_out]
}

template <class Real>
TensorT<Real> q_head(const ModelParamsT<Real>& p, const TensorT<Real>& z) {
    return add_bias(matmul(mean_axis1(z), p.q_w), p.q_b);  // [B,q_dim]
}

// Weight tensor whose gradient magnitude the loss balancer measures.
template <class Real>
TensorT<Real>& balance_probe(ModelParamsT<Real>& p) {
    return p.blocks.back().chan_w2;
}

}  // namespace cmm
