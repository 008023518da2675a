#pragma once

// Reverse-mode autodiff on dense row-major tensors.
//
// Storage is the template parameter Real (float in production, double for
// gradient checking); every reduction accumulates in double regardless.
// Ops execute eagerly, validate shapes, verify finiteness of what they
// publish, and record a backward closure on the active tape.

#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "cmm/common.hpp"
#include "cmm/parallel.hpp"

namespace cmm {

template <class Real>
struct NodeT {
    Shape shape;
    std::vector<Real> val;
    std::vector<Real> grad;  // empty until touched by backward
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), Real(0));
    }
};

inline int& nograd_depth() {
    thread_local int d = 0;
    return d;
}
inline bool grad_enabled() { return nograd_depth() == 0; }

// RAII: ops inside the scope are not recorded and produce detached outputs.
struct NoGrad {
    NoGrad() { ++nograd_depth(); }
    ~NoGrad() { --nograd_depth(); }
    NoGrad(const NoGrad&) = delete;
};

template <class Real>
class TensorT {
public:
    using Node = NodeT<Real>;

    TensorT() = default;

    static TensorT zeros(const Shape& s, bool requires_grad = false) {
        return alloc(s, Real(0), requires_grad);
    }
    static TensorT constant(const Shape& s, Real v) { return alloc(s, v, false); }
    static TensorT scalar(Real v) { return alloc({1}, v, false); }
    static TensorT from(const Shape& s, std::vector<Real> data,
                        bool requires_grad = false) {
        require(int64_t(data.size()) == numel(s),
                "tensor data size " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(s));
        auto t = alloc(s, Real(0), requires_grad);
        t.n_->val = std::move(data);
        return t;
    }

    bool defined() const { return bool(n_); }
    const Shape& shape() const { return n_->shape; }
    int dim() const { return int(n_->shape.size()); }
    int64_t size() const { return int64_t(n_->val.size()); }

    std::span<const Real> val() const { return {n_->val.data(), n_->val.size()}; }
    // Raw mutable access; for leaves (init, optimizer updates, perturbations).
    std::span<Real> val_mut() { return {n_->val.data(), n_->val.size()}; }

    Real item() const {
        require(size() == 1, "item() on tensor of size " + std::to_string(size()));
        return n_->val[0];
    }

    bool requires_grad() const { return n_ && n_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return n_ && !n_->grad.empty(); }
    std::span<const Real> grad() const {
        require(has_grad(), "grad() on tensor without gradient");
        return {n_->grad.data(), n_->grad.size()};
    }
    std::vector<Real> grad_or_zeros() const {
        if (has_grad()) return n_->grad;
        return std::vector<Real>(n_ ? n_->val.size() : 0, Real(0));
    }
    void zero_grad() const {
        if (n_) n_->grad.clear();
    }

    std::shared_ptr<Node> node() const { return n_; }
    static TensorT wrap(std::shared_ptr<Node> n) {
        TensorT t;
        t.n_ = std::move(n);
        return t;
    }

private:
    static TensorT alloc(const Shape& s, Real v, bool rg) {
        for (int d : s) require(d >= 1, "non-positive dim in shape " + shape_str(s));
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->val.assign(size_t(numel(s)), v);
        n->requires_grad = rg;
        TensorT t;
        t.n_ = std::move(n);
        return t;
    }

    std::shared_ptr<Node> n_;
};

template <class Real>
void check_finite(const char* op, const std::vector<Real>& v, const char* what) {
    double s = 0.0;
    for (Real x : v) s += std::fabs(double(x));
    if (!std::isfinite(s))
        throw NumericError(std::string(op) + ": non-finite value in " + what);
}

template <class Real>
void check_finite(const char* op, const TensorT<Real>& t) {
    check_finite(op, t.node()->val, "output");
}

template <class Real>
class TapeT {
public:
    using Node = NodeT<Real>;
    using NodePtr = std::shared_ptr<Node>;

    struct Rec {
        const char* name;
        std::vector<NodePtr> ins;
        NodePtr out;
        std::function<void()> back;
    };

    TapeT() = default;
    TapeT(const TapeT&) = delete;

    static TapeT*& raw_active() {
        thread_local TapeT* t = nullptr;
        return t;
    }

    // Activates this tape for the current thread while alive.
    class Scope {
    public:
        explicit Scope(TapeT& t) : prev_(raw_active()) { raw_active() = &t; }
        ~Scope() { raw_active() = prev_; }
        Scope(const Scope&) = delete;

    private:
        TapeT* prev_;
    };

    void push(const char* name, std::vector<NodePtr> ins, NodePtr out,
              std::function<void()> back) {
        recs_.push_back(Rec{name, std::move(ins), std::move(out), std::move(back)});
    }

    size_t num_ops() const { return recs_.size(); }

    // Reverse sweep from `root`; seed defaults to ones. Gradients accumulate
    // into every recorded tensor that requires grad; ops whose output was
    // never reached are skipped, so dead branches cost nothing.
    void backward(const TensorT<Real>& root,
                  const std::vector<Real>* seed = nullptr) {
        require(root.defined() && root.requires_grad(),
                "backward: root is not a recorded differentiable tensor");
        auto rn = root.node();
        rn->ensure_grad();
        if (seed) {
            require(seed->size() == rn->val.size(), "backward: seed size mismatch");
            for (size_t i = 0; i < seed->size(); ++i) rn->grad[i] += (*seed)[i];
        } else {
            for (auto& g : rn->grad) g += Real(1);
        }
        std::unordered_set<Node*> produced;
        produced.reserve(recs_.size());
        for (auto& r : recs_) produced.insert(r.out.get());
        for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) {
            if (it->out->grad.empty()) continue;
            check_finite(it->name, it->out->grad, "output gradient");
            it->back();
        }
        std::unordered_set<Node*> seen;
        for (auto& r : recs_)
            for (auto& in : r.ins)
                if (!produced.count(in.get()) && !in->grad.empty() &&
                    seen.insert(in.get()).second)
                    check_finite(r.name, in->grad, "leaf gradient");
    }

    // Clears gradients of every tensor this tape has touched.
    void zero_grads() {
        for (auto& r : recs_) {
            r.out->grad.clear();
            for (auto& in : r.ins) in->grad.clear();
        }
    }

private:
    std::vector<Rec> recs_;
};

namespace detail {

template <class Real, class... T>
TapeT<Real>* tape_if_grad(const T&... ins) {
    if (!grad_enabled()) return nullptr;
    auto* t = TapeT<Real>::raw_active();
    if (!t) return nullptr;
    bool any = (... || ins.requires_grad());
    return any ? t : nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class Real, class Fwd, class Dfn>
TensorT<Real> unary_op(const char* name, const TensorT<Real>& x, Fwd fwd,
                       Dfn dfn) {
    auto out = TensorT<Real>::zeros(x.shape());
    auto xs = x.val();
    auto os = out.val_mut();
    parallel_for(x.size(), [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) os[i] = Real(fwd(double(xs[i])));
    });
    check_finite(name, out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push(name, {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), dfn]() {
                       xn->ensure_grad();
                       auto& g = on->grad;
                       for (size_t i = 0; i < g.size(); ++i)
                           xn->grad[i] += Real(dfn(double(xn->val[i]),
                                                   double(on->val[i])) *
                                               double(g[i]));
                   });
    }
    return out;
}

template <class Real>
TensorT<Real> relu(const TensorT<Real>& x) {
    return unary_op(
        "relu", x, [](double v) { return v > 0 ? v : 0.0; },
        [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

template <class Real>
TensorT<Real> silu(const TensorT<Real>& x) {
    return unary_op(
        "silu", x,
        [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

template <class Real>
TensorT<Real> tanh(const TensorT<Real>& x) {
    return unary_op(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

template <class Real>
TensorT<Real> log(const TensorT<Real>& x) {
    return unary_op(
        "log", x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& x, double c) {
    return unary_op(
        "scale", x, [c](double v) { return c * v; },
        [c](double, double) { return c; });
}

template <class Real>
TensorT<Real> add_scalar(const TensorT<Real>& x, double c) {
    return unary_op(
        "add_scalar", x, [c](double v) { return v + c; },
        [](double, double) { return 1.0; });
}

template <class Real, class Fwd, class DA, class DB>
TensorT<Real> binary_op(const char* name, const TensorT<Real>& a,
                        const TensorT<Real>& b, Fwd fwd, DA da, DB db) {
    require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    auto out = TensorT<Real>::zeros(a.shape());
    auto as = a.val();
    auto bs = b.val();
    auto os = out.val_mut();
    parallel_for(a.size(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
            os[i] = Real(fwd(double(as[i]), double(bs[i])));
    });
    check_finite(name, out);
    if (auto* tape = detail::tape_if_grad<Real>(a, b)) {
        out.set_requires_grad(true);
        tape->push(name, {a.node(), b.node()}, out.node(),
                   [an = a.node(), bn = b.node(), on = out.node(), da, db]() {
                       auto& g = on->grad;
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (size_t i = 0; i < g.size(); ++i)
                               an->grad[i] += Real(da(double(an->val[i]),
                                                      double(bn->val[i])) *
                                                   double(g[i]));
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (size_t i = 0; i < g.size(); ++i)
                               bn->grad[i] += Real(db(double(an->val[i]),
                                                      double(bn->val[i])) *
                                                   double(g[i]));
                       }
                   });
    }
    return out;
}

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

template <class Real>
TensorT<Real> operator+(const TensorT<Real>& a, const TensorT<Real>& b) {
    return add(a, b);
}
template <class Real>
TensorT<Real> operator-(const TensorT<Real>& a, const TensorT<Real>& b) {
    return sub(a, b);
}
template <class Real>
TensorT<Real> operator*(const TensorT<Real>& a, const TensorT<Real>& b) {
    return mul(a, b);
}

template <class Real>
TensorT<Real> detach(const TensorT<Real>& x) {
    auto n = std::make_shared<NodeT<Real>>();
    n->shape = x.shape();
    n->val = std::vector<Real>(x.val().begin(), x.val().end());
    n->requires_grad = false;
    return TensorT<Real>::wrap(std::move(n));
}

// ------------------------------------------------------------------- matmul

// A [..., K] x W [K, N] -> [..., N]; leading dims of A are treated as rows.
template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& w) {
    require(a.dim() >= 1 && w.dim() == 2, "matmul: need [...,K] x [K,N]");
    const int64_t K = a.shape().back();
    const int64_t N = w.shape()[1];
    require(int64_t(w.shape()[0]) == K,
            "matmul: inner dims " + shape_str(a.shape()) + " x " +
                shape_str(w.shape()));
    const int64_t R = a.size() / K;
    Shape os(a.shape().begin(), a.shape().end() - 1);
    os.push_back(int(N));
    auto out = TensorT<Real>::zeros(os);
    const Real* av = a.val().data();
    const Real* wv = w.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(
        R,
        [&](int64_t rb, int64_t re) {
            std::vector<double> acc(size_t(N), 0.0);
            for (int64_t r = rb; r < re; ++r) {
                std::fill(acc.begin(), acc.end(), 0.0);
                const Real* ar = av + r * K;
                for (int64_t k = 0; k < K; ++k) {
                    const double x = double(ar[k]);
                    const Real* wr = wv + k * N;
                    for (int64_t j = 0; j < N; ++j) acc[j] += x * double(wr[j]);
                }
                Real* orow = ov + r * N;
                for (int64_t j = 0; j < N; ++j) orow[j] = Real(acc[j]);
            }
        },
        2048 / (N + 1) + 1);
    check_finite("matmul", out);
    if (auto* tape = detail::tape_if_grad<Real>(a, w)) {
        out.set_requires_grad(true);
        tape->push("matmul", {a.node(), w.node()}, out.node(),
                   [an = a.node(), wn = w.node(), on = out.node(), R, K, N]() {
                       const Real* g = on->grad.data();
                       if (an->requires_grad) {
                           an->ensure_grad();
                           const Real* wv = wn->val.data();
                           Real* da = an->grad.data();
                           parallel_for(
                               R,
                               [&](int64_t rb, int64_t re) {
                                   for (int64_t r = rb; r < re; ++r)
                                       for (int64_t k = 0; k < K; ++k) {
                                           double s = 0.0;
                                           const Real* gr = g + r * N;
                                           const Real* wr = wv + k * N;
                                           for (int64_t j = 0; j < N; ++j)
                                               s += double(gr[j]) * double(wr[j]);
                                           da[r * K + k] += Real(s);
                                       }
                               },
                               2048 / (N + 1) + 1);
                       }
                       if (wn->requires_grad) {
                           wn->ensure_grad();
                           const Real* av = an->val.data();
                           std::vector<double> buf(size_t(K * N), 0.0);
                           for (int64_t r = 0; r < R; ++r) {
                               const Real* gr = g + r * N;
                               for (int64_t k = 0; k < K; ++k) {
                                   const double x = double(av[r * K + k]);
                                   if (x == 0.0) continue;
                                   double* br = buf.data() + k * N;
                                   for (int64_t j = 0; j < N; ++j)
                                       br[j] += x * double(gr[j]);
                               }
                           }
                           for (int64_t i = 0; i < K * N; ++i)
                               wn->grad[i] += Real(buf[i]);
                       }
                   });
    }
    return out;
}

// A [R,K] x B [R2,K]^T -> [R,R2] (rows dotted with rows).
template <class Real>
TensorT<Real> matmul_nt(const TensorT<Real>& a, const TensorT<Real>& b) {
    require(a.dim() == 2 && b.dim() == 2 && a.shape()[1] == b.shape()[1],
            "matmul_nt: need [R,K] x [R2,K]");
    const int64_t R = a.shape()[0], K = a.shape()[1], R2 = b.shape()[0];
    auto out = TensorT<Real>::zeros({int(R), int(R2)});
    const Real* av = a.val().data();
    const Real* bv = b.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(
        R,
        [&](int64_t rb, int64_t re) {
            for (int64_t r = rb; r < re; ++r)
                for (int64_t q = 0; q < R2; ++q) {
                    double s = 0.0;
                    const Real* ar = av + r * K;
                    const Real* br = bv + q * K;
                    for (int64_t k = 0; k < K; ++k)
                        s += double(ar[k]) * double(br[k]);
                    ov[r * R2 + q] = Real(s);
                }
        },
        2048 / (R2 + 1) + 1);
    check_finite("matmul_nt", out);
    if (auto* tape = detail::tape_if_grad<Real>(a, b)) {
        out.set_requires_grad(true);
        tape->push(
            "matmul_nt", {a.node(), b.node()}, out.node(),
            [an = a.node(), bn = b.node(), on = out.node(), R, K, R2]() {
                const Real* g = on->grad.data();
                if (an->requires_grad) {
                    an->ensure_grad();
                    const Real* bv = bn->val.data();
                    for (int64_t r = 0; r < R; ++r)
                        for (int64_t k = 0; k < K; ++k) {
                            double s = 0.0;
                            for (int64_t q = 0; q < R2; ++q)
                                s += double(g[r * R2 + q]) * double(bv[q * K + k]);
                            an->grad[r * K + k] += Real(s);
                        }
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    const Real* av = an->val.data();
                    for (int64_t q = 0; q < R2; ++q)
                        for (int64_t k = 0; k < K; ++k) {
                            double s = 0.0;
                            for (int64_t r = 0; r < R; ++r)
                                s += double(g[r * R2 + q]) * double(av[r * K + k]);
                            bn->grad[q * K + k] += Real(s);
                        }
                }
            });
    }
    return out;
}

// Batched matmul. A [G,M,K] x B [G,K,N] -> [G,M,N]; trans_b reads B as [G,N,K].
template <class Real>
TensorT<Real> bmm(const TensorT<Real>& a, const TensorT<Real>& b, bool trans_b = false) {
    require(a.dim() == 3 && b.dim() == 3 && a.shape()[0] == b.shape()[0],
            "bmm: need [G,M,K] x [G,*,*]");
    const int64_t G = a.shape()[0], M = a.shape()[1], K = a.shape()[2];
    const int64_t N = trans_b ? b.shape()[1] : b.shape()[2];
    require(trans_b ? (int64_t(b.shape()[2]) == K) : (int64_t(b.shape()[1]) == K),
            "bmm: inner dims " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    auto out = TensorT<Real>::zeros({int(G), int(M), int(N)});
    const Real* av = a.val().data();
    const Real* bv = b.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(
        G * M,
        [&](int64_t lo, int64_t hi) {
            std::vector<double> acc(size_t(N), 0.0);
            for (int64_t rm = lo; rm < hi; ++rm) {
                const int64_t gi = rm / M, m = rm % M;
                const Real* ar = av + (gi * M + m) * K;
                const Real* bg = bv + gi * K * N;
                if (trans_b) {
                    for (int64_t n = 0; n < N; ++n) {
                        double s = 0.0;
                        const Real* br = bg + n * K;
                        for (int64_t k = 0; k < K; ++k)
                            s += double(ar[k]) * double(br[k]);
                        ov[rm * N + n] = Real(s);
                    }
                } else {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int64_t k = 0; k < K; ++k) {
                        const double x = double(ar[k]);
                        const Real* br = bg + k * N;
                        for (int64_t n = 0; n < N; ++n) acc[n] += x * double(br[n]);
                    }
                    for (int64_t n = 0; n < N; ++n) ov[rm * N + n] = Real(acc[n]);
                }
            }
        },
        2048 / (N + 1) + 1);
    check_finite("bmm", out);
    if (auto* tape = detail::tape_if_grad<Real>(a, b)) {
        out.set_requires_grad(true);
        tape->push(
            "bmm", {a.node(), b.node()}, out.node(),
            [an = a.node(), bn = b.node(), on = out.node(), G, M, K, N,
             trans_b]() {
                const Real* g = on->grad.data();
                const Real* av = an->val.data();
                const Real* bv = bn->val.data();
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (int64_t gi = 0; gi < G; ++gi)
                        for (int64_t m = 0; m < M; ++m)
                            for (int64_t k = 0; k < K; ++k) {
                                double s = 0.0;
                                for (int64_t n = 0; n < N; ++n) {
                                    const double bval =
                                        trans_b ? double(bv[(gi * N + n) * K + k])
                                                : double(bv[(gi * K + k) * N + n]);
                                    s += double(g[(gi * M + m) * N + n]) * bval;
                                }
                                an->grad[(gi * M + m) * K + k] += Real(s);
                            }
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int64_t gi = 0; gi < G; ++gi)
                        for (int64_t n = 0; n < N; ++n)
                            for (int64_t k = 0; k < K; ++k) {
                                double s = 0.0;
                                for (int64_t m = 0; m < M; ++m)
                                    s += double(g[(gi * M + m) * N + n]) *
                                         double(av[(gi * M + m) * K + k]);
                                const int64_t idx = trans_b
                                                        ? (gi * N + n) * K + k
                                                        : (gi * K + k) * N + n;
                                bn->grad[idx] += Real(s);
                            }
                }
            });
    }
    return out;
}

// x [..., N] + b [N] broadcast over rows.
template <class Real>
TensorT<Real> add_bias(const TensorT<Real>& x, const TensorT<Real>& b) {
    require(b.dim() == 1 && x.dim() >= 1 && x.shape().back() == b.shape()[0],
            "add_bias: need [...,N] + [N]");
    const int64_t N = b.size(), R = x.size() / N;
    auto out = TensorT<Real>::zeros(x.shape());
    const Real* xv = x.val().data();
    const Real* bv = b.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(x.size(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
            ov[i] = xv[i] + bv[i % N];
    });
    check_finite("add_bias", out);
    if (auto* tape = detail::tape_if_grad<Real>(x, b)) {
        out.set_requires_grad(true);
        tape->push("add_bias", {x.node(), b.node()}, out.node(),
                   [xn = x.node(), bn = b.node(), on = out.node(), R, N]() {
                       const Real* g = on->grad.data();
                       if (xn->requires_grad) {
                           xn->ensure_grad();
                           for (int64_t i = 0; i < R * N; ++i)
                               xn->grad[i] += g[i];
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           std::vector<double> buf(size_t(N), 0.0);
                           for (int64_t r = 0; r < R; ++r)
                               for (int64_t j = 0; j < N; ++j)
                                   buf[j] += double(g[r * N + j]);
                           for (int64_t j = 0; j < N; ++j)
                               bn->grad[j] += Real(buf[j]);
                       }
                   });
    }
    return out;
}

// --------------------------------------------------------------- reductions

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& x) {
    double s = 0.0;
    for (Real v : x.val()) s += double(v);
    auto out = TensorT<Real>::scalar(Real(s));
    check_finite("sum_all", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("sum_all", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node()]() {
                       xn->ensure_grad();
                       const Real g = on->grad[0];
                       for (auto& d : xn->grad) d += g;
                   });
    }
    return out;
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& x) {
    const int64_t n = x.size();
    double s = 0.0;
    for (Real v : x.val()) s += double(v);
    auto out = TensorT<Real>::scalar(Real(s / double(n)));
    check_finite("mean_all", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("mean_all", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), n]() {
                       xn->ensure_grad();
                       const double g = double(on->grad[0]) / double(n);
                       for (auto& d : xn->grad) d += Real(g);
                   });
    }
    return out;
}

namespace detail {
// Shared kernel: out[r] = sum_c x[r*C+c], double accumulation.
template <class Real>
TensorT<Real> row_sum_op(const char* name, const TensorT<Real>& x,
                         const Shape& out_shape, int64_t R, int64_t C) {
    auto out = TensorT<Real>::zeros(out_shape);
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(
        R,
        [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                double s = 0.0;
                const Real* xr = xv + r * C;
                for (int64_t c = 0; c < C; ++c) s += double(xr[c]);
                ov[r] = Real(s);
            }
        },
        2048 / (C + 1) + 1);
    check_finite(name, out);
    if (auto* tape = tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push(name, {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), R, C]() {
                       xn->ensure_grad();
                       for (int64_t r = 0; r < R; ++r) {
                           const Real g = on->grad[r];
                           Real* xr = xn->grad.data() + r * C;
                           for (int64_t c = 0; c < C; ++c) xr[c] += g;
                       }
                   });
    }
    return out;
}
}  // namespace detail

// [..., C] -> [...] summing the last axis.
template <class Real>
TensorT<Real> sum_lastdim(const TensorT<Real>& x) {
    require(x.dim() >= 2, "sum_lastdim: need rank >= 2");
    const int64_t C = x.shape().back();
    Shape os(x.shape().begin(), x.shape().end() - 1);
    return detail::row_sum_op("sum_lastdim", x, os, x.size() / C, C);
}

// [B, ...] -> [B] summing everything but the first axis.
template <class Real>
TensorT<Real> sum_per_sample(const TensorT<Real>& x) {
    require(x.dim() >= 2, "sum_per_sample: need rank >= 2");
    const int64_t B = x.shape()[0];
    return detail::row_sum_op("sum_per_sample", x, {int(B)}, B, x.size() / B);
}

// [B,S,D] -> [B,D], mean over the middle axis.
template <class Real>
TensorT<Real> mean_axis1(const TensorT<Real>& x) {
    require(x.dim() == 3, "mean_axis1: need [B,S,D]");
    const int64_t B = x.shape()[0], S = x.shape()[1], D = x.shape()[2];
    auto out = TensorT<Real>::zeros({int(B), int(D)});
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    for (int64_t b = 0; b < B; ++b) {
        std::vector<double> acc(size_t(D), 0.0);
        for (int64_t s = 0; s < S; ++s) {
            const Real* xr = xv + (b * S + s) * D;
            for (int64_t d = 0; d < D; ++d) acc[d] += double(xr[d]);
        }
        for (int64_t d = 0; d < D; ++d) ov[b * D + d] = Real(acc[d] / double(S));
    }
    check_finite("mean_axis1", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("mean_axis1", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), B, S, D]() {
                       xn->ensure_grad();
                       for (int64_t b = 0; b < B; ++b)
                           for (int64_t s = 0; s < S; ++s)
                               for (int64_t d = 0; d < D; ++d)
                                   xn->grad[(b * S + s) * D + d] +=
                                       Real(double(on->grad[b * D + d]) /
                                            double(S));
                   });
    }
    return out;
}

// ------------------------------------------------------------ shape plumbing

template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, const Shape& ns) {
    require(numel(ns) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " +
                                       shape_str(ns) + " changes element count");
    auto out = TensorT<Real>::zeros(ns);
    std::copy(x.val().begin(), x.val().end(), out.val_mut().begin());
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("reshape", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node()]() {
                       xn->ensure_grad();
                       for (size_t i = 0; i < on->grad.size(); ++i)
                           xn->grad[i] += on->grad[i];
                   });
    }
    return out;
}

// [B,M,N] -> [B,N,M].
template <class Real>
TensorT<Real> transpose_12(const TensorT<Real>& x) {
    require(x.dim() == 3, "transpose_12: need rank 3");
    const int64_t B = x.shape()[0], M = x.shape()[1], N = x.shape()[2];
    auto out = TensorT<Real>::zeros({int(B), int(N), int(M)});
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(B * M, [&](int64_t lo, int64_t hi) {
        for (int64_t bm = lo; bm < hi; ++bm) {
            const int64_t b = bm / M, m = bm % M;
            const Real* xr = xv + (b * M + m) * N;
            for (int64_t n = 0; n < N; ++n) ov[(b * N + n) * M + m] = xr[n];
        }
    });
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("transpose_12", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), B, M, N]() {
                       xn->ensure_grad();
                       for (int64_t b = 0; b < B; ++b)
                           for (int64_t m = 0; m < M; ++m)
                               for (int64_t n = 0; n < N; ++n)
                                   xn->grad[(b * M + m) * N + n] +=
                                       on->grad[(b * N + n) * M + m];
                   });
    }
    return out;
}

// [B,P,Q,R] -> [B,Q,P,R].
template <class Real>
TensorT<Real> permute_0213(const TensorT<Real>& x) {
    require(x.dim() == 4, "permute_0213: need rank 4");
    const int64_t B = x.shape()[0], P = x.shape()[1], Q = x.shape()[2],
                  R = x.shape()[3];
    auto out = TensorT<Real>::zeros({int(B), int(Q), int(P), int(R)});
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < P; ++p)
            for (int64_t q = 0; q < Q; ++q)
                std::memcpy(ov + (((b * Q + q) * P + p) * R),
                            xv + (((b * P + p) * Q + q) * R), sizeof(Real) * R);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("permute_0213", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), B, P, Q, R]() {
                       xn->ensure_grad();
                       for (int64_t b = 0; b < B; ++b)
                           for (int64_t p = 0; p < P; ++p)
                               for (int64_t q = 0; q < Q; ++q)
                                   for (int64_t r = 0; r < R; ++r)
                                       xn->grad[((b * P + p) * Q + q) * R + r] +=
                                           on->grad[((b * Q + q) * P + p) * R + r];
                   });
    }
    return out;
}

template <class Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    require(axis >= 0 && axis < int(s0.size()), "concat: bad axis");
    int total = 0;
    for (auto& p : parts) {
        require(p.dim() == int(s0.size()), "concat: rank mismatch");
        for (int d = 0; d < p.dim(); ++d)
            require(d == axis || p.shape()[d] == s0[d],
                    "concat: shape mismatch off-axis");
        total += p.shape()[axis];
    }
    Shape os = s0;
    os[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (int d = axis + 1; d < int(s0.size()); ++d) inner *= s0[d];
    auto out = TensorT<Real>::zeros(os);
    Real* ov = out.val_mut().data();
    const int64_t ostride = int64_t(total) * inner;
    int64_t off = 0;
    for (auto& p : parts) {
        const int64_t pa = int64_t(p.shape()[axis]) * inner;
        const Real* pv = p.val().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(ov + o * ostride + off, pv + o * pa, sizeof(Real) * pa);
        off += pa;
    }
    bool any_rg = false;
    for (auto& p : parts) any_rg = any_rg || p.requires_grad();
    if (grad_enabled() && TapeT<Real>::raw_active() && any_rg) {
        auto* tape = TapeT<Real>::raw_active();
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<NodeT<Real>>> ins;
        for (auto& p : parts) ins.push_back(p.node());
        tape->push("concat", ins, out.node(),
                   [ins, on = out.node(), outer, inner, ostride]() {
                       int64_t off = 0;
                       for (auto& in : ins) {
                           const int64_t pa =
                               int64_t(in->val.size()) / (outer ? outer : 1);
                           if (in->requires_grad) {
                               in->ensure_grad();
                               for (int64_t o = 0; o < outer; ++o)
                                   for (int64_t i = 0; i < pa; ++i)
                                       in->grad[o * pa + i] +=
                                           on->grad[o * ostride + off + i];
                           }
                           off += pa;
                       }
                   });
    }
    return out;
}

// ------------------------------------------------------- gather / embedding

// x [..., C], idx flattened over leading dims -> [...].
template <class Real>
TensorT<Real> gather_lastdim(const TensorT<Real>& x, const std::vector<int>& idx) {
    require(x.dim() >= 2, "gather_lastdim: need rank >= 2");
    const int64_t C = x.shape().back();
    const int64_t R = x.size() / C;
    require(int64_t(idx.size()) == R, "gather_lastdim: index count mismatch");
    Shape os(x.shape().begin(), x.shape().end() - 1);
    auto out = TensorT<Real>::zeros(os);
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    for (int64_t r = 0; r < R; ++r) {
        require(idx[r] >= 0 && idx[r] < C, "gather_lastdim: index out of range");
        ov[r] = xv[r * C + idx[r]];
    }
    check_finite("gather_lastdim", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("gather_lastdim", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), idx, C, R]() {
                       xn->ensure_grad();
                       for (int64_t r = 0; r < R; ++r)
                           xn->grad[r * C + idx[r]] += on->grad[r];
                   });
    }
    return out;
}

// table [V,D] indexed by tokens -> [B,S,D], scaled (sqrt(D) at the call site).
template <class Real>
TensorT<Real> embedding(const TensorT<Real>& table, const std::vector<int>& tokens,
                        int B, int S, double scale_factor) {
    require(table.dim() == 2, "embedding: table must be [V,D]");
    const int64_t V = table.shape()[0], D = table.shape()[1];
    require(int64_t(tokens.size()) == int64_t(B) * S,
            "embedding: token count mismatch");
    auto out = TensorT<Real>::zeros({B, S, int(D)});
    const Real* tv = table.val().data();
    Real* ov = out.val_mut().data();
    for (int64_t t = 0; t < int64_t(B) * S; ++t) {
        require(tokens[t] >= 0 && tokens[t] < V,
                "embedding: token id out of range");
        const Real* row = tv + int64_t(tokens[t]) * D;
        for (int64_t d = 0; d < D; ++d)
            ov[t * D + d] = Real(double(row[d]) * scale_factor);
    }
    check_finite("embedding", out);
    if (auto* tape = detail::tape_if_grad<Real>(table)) {
        out.set_requires_grad(true);
        tape->push("embedding", {table.node()}, out.node(),
                   [tn = table.node(), on = out.node(), tokens, B, S, D,
                    scale_factor]() {
                       tn->ensure_grad();
                       std::vector<double> buf(tn->val.size(), 0.0);
                       for (int64_t t = 0; t < int64_t(B) * S; ++t) {
                           double* br = buf.data() + int64_t(tokens[t]) * D;
                           for (int64_t d = 0; d < D; ++d)
                               br[d] += double(on->grad[t * D + d]) * scale_factor;
                       }
                       for (size_t i = 0; i < buf.size(); ++i)
                           tn->grad[i] += Real(buf[i]);
                   });
    }
    return out;
}

// ------------------------------------------------------------ normalization

inline constexpr double kRmsEps = 1e-6;

// RMS norm over the last axis with learned gain.
template <class Real>
TensorT<Real> rmsnorm(const TensorT<Real>& x, const TensorT<Real>& gain) {
    require(gain.dim() == 1 && x.shape().back() == gain.shape()[0],
            "rmsnorm: gain must match last axis");
    const int64_t D = gain.size(), R = x.size() / D;
    auto out = TensorT<Real>::zeros(x.shape());
    const Real* xv = x.val().data();
    const Real* gv = gain.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(
        R,
        [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const Real* xr = xv + r * D;
                double ms = 0.0;
                for (int64_t d = 0; d < D; ++d)
                    ms += double(xr[d]) * double(xr[d]);
                const double inv = 1.0 / std::sqrt(ms / double(D) + kRmsEps);
                for (int64_t d = 0; d < D; ++d)
                    ov[r * D + d] = Real(double(xr[d]) * inv * double(gv[d]));
            }
        },
        2048 / (D + 1) + 1);
    check_finite("rmsnorm", out);
    if (auto* tape = detail::tape_if_grad<Real>(x, gain)) {
        out.set_requires_grad(true);
        tape->push(
            "rmsnorm", {x.node(), gain.node()}, out.node(),
            [xn = x.node(), gn = gain.node(), on = out.node(), R, D]() {
                const Real* g = on->grad.data();
                const Real* xv = xn->val.data();
                const Real* gv = gn->val.data();
                std::vector<double> dgain(size_t(D), 0.0);
                for (int64_t r = 0; r < R; ++r) {
                    const Real* xr = xv + r * D;
                    double ms = 0.0;
                    for (int64_t d = 0; d < D; ++d)
                        ms += double(xr[d]) * double(xr[d]);
                    const double inv = 1.0 / std::sqrt(ms / double(D) + kRmsEps);
                    if (gn->requires_grad)
                        for (int64_t d = 0; d < D; ++d)
                            dgain[d] += double(g[r * D + d]) * double(xr[d]) * inv;
                    if (xn->requires_grad) {
                        double dot = 0.0;
                        for (int64_t d = 0; d < D; ++d)
                            dot += double(g[r * D + d]) * double(gv[d]) *
                                   double(xr[d]) * inv;
                        xn->ensure_grad();
                        for (int64_t d = 0; d < D; ++d) {
                            const double gh = double(g[r * D + d]) * double(gv[d]);
                            const double u = double(xr[d]) * inv;
                            xn->grad[r * D + d] +=
                                Real(inv * (gh - u * dot / double(D)));
                        }
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int64_t d = 0; d < D; ++d) gn->grad[d] += Real(dgain[d]);
                }
            });
    }
    return out;
}

// Row-wise x / sqrt(sum x^2 + eps); rows with norm below the threshold are a
// caller bug, not a numeric accident, hence InputError.
template <class Real>
TensorT<Real> l2_normalize_rows(const TensorT<Real>& x) {
    require(x.dim() == 2, "l2_normalize_rows: need [B,M]");
    constexpr double eps = 1e-12;
    const int64_t B = x.shape()[0], M = x.shape()[1];
    auto out = TensorT<Real>::zeros(x.shape());
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    for (int64_t r = 0; r < B; ++r) {
        const Real* xr = xv + r * M;
        double q = 0.0;
        for (int64_t m = 0; m < M; ++m) q += double(xr[m]) * double(xr[m]);
        if (std::sqrt(q) < 1e-12)
            throw InputError("l2_normalize_rows: degenerate (near-zero) row " +
                             std::to_string(r));
        const double inv = 1.0 / std::sqrt(q + eps);
        for (int64_t m = 0; m < M; ++m) ov[r * M + m] = Real(double(xr[m]) * inv);
    }
    check_finite("l2_normalize_rows", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("l2_normalize_rows", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), B, M]() {
                       xn->ensure_grad();
                       const Real* g = on->grad.data();
                       const Real* xv = xn->val.data();
                       for (int64_t r = 0; r < B; ++r) {
                           double q = 0.0;
                           for (int64_t m = 0; m < M; ++m)
                               q += double(xv[r * M + m]) * double(xv[r * M + m]);
                           const double inv = 1.0 / std::sqrt(q + eps);
                           double dot = 0.0;
                           for (int64_t m = 0; m < M; ++m)
                               dot += double(g[r * M + m]) *
                                      double(xv[r * M + m]) * inv;
                           for (int64_t m = 0; m < M; ++m) {
                               const double y = double(xv[r * M + m]) * inv;
                               xn->grad[r * M + m] +=
                                   Real(inv * (double(g[r * M + m]) - y * dot));
                           }
                       }
                   });
    }
    return out;
}

// Softmax over the last axis (row-shifted, double accumulation).
template <class Real>
TensorT<Real> softmax_lastdim(const TensorT<Real>& x) {
    require(x.dim() >= 2, "softmax_lastdim: need rank >= 2");
    const int64_t C = x.shape().back(), R = x.size() / C;
    auto out = TensorT<Real>::zeros(x.shape());
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    parallel_for(
        R,
        [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const Real* xr = xv + r * C;
                double mx = double(xr[0]);
                for (int64_t c = 1; c < C; ++c) mx = std::max(mx, double(xr[c]));
                double den = 0.0;
                for (int64_t c = 0; c < C; ++c) den += std::exp(double(xr[c]) - mx);
                for (int64_t c = 0; c < C; ++c)
                    ov[r * C + c] = Real(std::exp(double(xr[c]) - mx) / den);
            }
        },
        2048 / (C + 1) + 1);
    check_finite("softmax_lastdim", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("softmax_lastdim", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), R, C]() {
                       xn->ensure_grad();
                       const Real* g = on->grad.data();
                       const Real* y = on->val.data();
                       for (int64_t r = 0; r < R; ++r) {
                           double dot = 0.0;
                           for (int64_t c = 0; c < C; ++c)
                               dot += double(g[r * C + c]) * double(y[r * C + c]);
                           for (int64_t c = 0; c < C; ++c)
                               xn->grad[r * C + c] +=
                                   Real(double(y[r * C + c]) *
                                        (double(g[r * C + c]) - dot));
                       }
                   });
    }
    return out;
}

// y_c = x_c / sum_j x_j over the last axis (inputs must be positive; used to
// normalize stablemax scores into probabilities).
template <class Real>
TensorT<Real> normalize_lastdim(const TensorT<Real>& x) {
    require(x.dim() >= 2, "normalize_lastdim: need rank >= 2");
    const int64_t C = x.shape().back(), R = x.size() / C;
    auto out = TensorT<Real>::zeros(x.shape());
    const Real* xv = x.val().data();
    Real* ov = out.val_mut().data();
    for (int64_t r = 0; r < R; ++r) {
        double den = 0.0;
        for (int64_t c = 0; c < C; ++c) den += double(xv[r * C + c]);
        for (int64_t c = 0; c < C; ++c)
            ov[r * C + c] = Real(double(xv[r * C + c]) / den);
    }
    check_finite("normalize_lastdim", out);
    if (auto* tape = detail::tape_if_grad<Real>(x)) {
        out.set_requires_grad(true);
        tape->push("normalize_lastdim", {x.node()}, out.node(),
                   [xn = x.node(), on = out.node(), R, C]() {
                       xn->ensure_grad();
                       const Real* g = on->grad.data();
                       const Real* y = on->val.data();
                       const Real* xv = xn->val.data();
                       for (int64_t r = 0; r < R; ++r) {
                           double den = 0.0, dot = 0.0;
                           for (int64_t c = 0; c < C; ++c)
                               den += double(xv[r * C + c]);
                           for (int64_t c = 0; c < C; ++c)
                               dot += double(g[r * C + c]) * double(y[r * C + c]);
                           for (int64_t c = 0; c < C; ++c)
                               xn->grad[r * C + c] +=
                                   Real((double(g[r * C + c]) - dot) / den);
                       }
                   });
    }
    return out;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace cmm
