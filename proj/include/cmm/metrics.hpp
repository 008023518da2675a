#pragma once

#include <array>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "cmm/common.hpp"

namespace cmm {

// Loss terms in canonical order. Indexes are shared by the trainer, the loss
// balancer and the metrics stream.
enum TermId {
    kTermLm = 0,
    kTermHalt,
    kTermRepX,
    kTermRepZ,
    kTermEquilX,
    kTermEquilZ,
    kTermRhStableZ,
    kTermRhUnstableX,
    kNumTerms
};

inline const std::array<const char*, kNumTerms>& term_names() {
    static const std::array<const char*, kNumTerms> names = {
        "lm",      "halt",    "rep_x",       "rep_z",
        "equil_x", "equil_z", "rh_stable_z", "rh_unstable_x"};
    return names;
}

struct MetricsRow {
    long step = 0;
    double loss_total = 0;
    std::array<double, kNumTerms> loss{};       // raw per-term values
    std::array<double, kNumTerms> lambda{};     // effective weights
    std::array<bool, kNumTerms> active{};
    double grad_norm = 0;                       // accumulated-gradient L2
    std::array<double, kNumTerms> term_grad_norm{};  // raw probe norms
    bool has_term_grad_norms = false;
    std::optional<double> exact, token;         // present when evaluated
    double halted_frac = 0;
    bool step_skipped = false;
    double wall_ms = 0;
};

inline nlohmann::json to_json(const MetricsRow& r) {
    nlohmann::json j;
    j["step"] = r.step;
    j["loss_total"] = r.loss_total;
    for (int t = 0; t < kNumTerms; ++t) {
        if (!r.active[size_t(t)]) continue;
        j["loss"][term_names()[size_t(t)]] = r.loss[size_t(t)];
        j["lambda"][term_names()[size_t(t)]] = r.lambda[size_t(t)];
        if (r.has_term_grad_norms)
            j["term_grad_norm"][term_names()[size_t(t)]] =
                r.term_grad_norm[size_t(t)];
    }
    j["grad_norm"] = r.grad_norm;
    if (r.exact) j["exact"] = *r.exact;
    if (r.token) j["token"] = *r.token;
    j["halted_frac"] = r.halted_frac;
    if (r.step_skipped) j["step_skipped"] = true;
    j["wall_ms"] = r.wall_ms;
    return j;
}

class MetricsWriter {
public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::string& path) { open(path); }

    void open(const std::string& path) {
        out_.open(path, std::ios::binary);
        require(bool(out_), "cannot open metrics file '" + path + "'");
    }

    void write(const MetricsRow& row) {
        if (!out_.is_open()) return;
        out_ << to_json(row).dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace cmm
