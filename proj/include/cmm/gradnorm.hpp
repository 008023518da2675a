#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cmm/config.hpp"

namespace cmm {

// Adaptive loss balancer. Works purely on scalars: per-term loss values and
// the raw (unweighted) gradient norms of each term at a shared probe weight.
// Terms whose normalized loss still sits above the average get their
// effective gradient pushed above the mean, and vice versa. All arithmetic is
// double; the weights are renormalized to sum to N after every update so the
// overall loss scale stays fixed.
class GradNormBalancer {
public:
    GradNormBalancer(int n_terms, GradNormCfg cfg)
        : cfg_(cfg), lambda_(size_t(n_terms), 1.0) {
        require(n_terms >= 1, "loss balancer: need at least one term");
    }

    int size() const { return int(lambda_.size()); }
    const std::vector<double>& lambdas() const { return lambda_; }
    const std::vector<double>& initial_losses() const { return l0_; }
    long updates() const { return updates_; }

    bool initialized() const { return !l0_.empty(); }

    // First observed losses anchor the progress ratios.
    void observe_initial(const std::vector<double>& losses) {
        check_vec(losses, "losses");
        if (!l0_.empty()) return;
        l0_.resize(losses.size());
        for (size_t i = 0; i < losses.size(); ++i)
            l0_[i] = std::max(losses[i], 1e-8);
    }

    void update(const std::vector<double>& losses,
                const std::vector<double>& raw_norms) {
        check_vec(losses, "losses");
        check_vec(raw_norms, "grad norms");
        observe_initial(losses);
        const size_t n = lambda_.size();

        double g_mean = 0, ratio_mean = 0;
        std::vector<double> g(n), ratio(n);
        for (size_t i = 0; i < n; ++i) {
            if (!(l0_[i] > 0))
                throw InputError("loss balancer: initial loss must be positive");
            g[i] = lambda_[i] * raw_norms[i];
            ratio[i] = losses[i] / l0_[i];
            g_mean += g[i];
            ratio_mean += ratio[i];
        }
        g_mean /= double(n);
        ratio_mean /= double(n);

        std::vector<double> cand(n);
        double sum = 0;
        for (size_t i = 0; i < n; ++i) {
            double rel = ratio_mean > 0 ? ratio[i] / ratio_mean : 1.0;
            double target = g_mean * std::pow(rel, cfg_.alpha);
            double factor = std::clamp(target / (g[i] + 1e-12), 0.1, 10.0);
            cand[i] = lambda_[i] * factor;
            sum += cand[i];
        }
        for (auto& c : cand) c *= double(n) / sum;

        double total = 0;
        for (size_t i = 0; i < n; ++i) {
            lambda_[i] = cfg_.ema_rho * lambda_[i] + (1.0 - cfg_.ema_rho) * cand[i];
            total += lambda_[i];
        }
        for (auto& l : lambda_) l *= double(n) / total;

        ++updates_;
        if (cfg_.reset_period > 0 && updates_ % cfg_.reset_period == 0)
            for (size_t i = 0; i < n; ++i)
                l0_[i] = 0.5 * l0_[i] + 0.5 * std::max(losses[i], 1e-8);
    }

    void set_state(std::vector<double> lambdas, std::vector<double> l0,
                   long updates) {
        require(lambdas.size() == lambda_.size(),
                "loss balancer: state has wrong term count");
        require(l0.empty() || l0.size() == lambda_.size(),
                "loss balancer: initial-loss state has wrong term count");
        for (double v : l0)
            require(v > 0, "loss balancer: initial loss must be positive");
        lambda_ = std::move(lambdas);
        l0_ = std::move(l0);
        updates_ = updates;
    }

private:
    void check_vec(const std::vector<double>& v, const char* what) const {
        require(v.size() == lambda_.size(),
                std::string("loss balancer: ") + what + " count mismatch");
        for (double x : v)
            if (!std::isfinite(x))
                throw NumericError(std::string("loss balancer: non-finite ") + what);
    }

    GradNormCfg cfg_;
    std::vector<double> lambda_;
    std::vector<double> l0_;
    long updates_ = 0;
};

}  // namespace cmm
