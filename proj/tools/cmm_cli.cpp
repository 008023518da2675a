// Command-line front end: data generation, training, evaluation, gradient
// verification and trajectory analysis.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmm/gradsuite.hpp"
#include "cmm/train.hpp"

namespace {

using namespace cmm;

std::pair<int, int> parse_clue_range(const std::string& s) {
    auto colon = s.find(':');
    require(colon != std::string::npos, "--clues expects lo:hi");
    try {
        int lo = std::stoi(s.substr(0, colon));
        int hi = std::stoi(s.substr(colon + 1));
        return {lo, hi};
    } catch (const std::exception&) {
        throw InputError("--clues expects lo:hi with integer bounds");
    }
}

int cmd_gen_data(const std::string& task, int count, uint64_t seed,
                 const std::string& out, const std::string& clues, int maze_n,
                 const std::string& exclude) {
    GenOptions opts;
    std::tie(opts.clue_lo, opts.clue_hi) = parse_clue_range(clues);
    opts.maze_n = maze_n;

    std::set<std::vector<int>> banned;
    if (!exclude.empty())
        for (const auto& inst : read_jsonl(exclude)) banned.insert(inst.input);

    std::vector<PuzzleInstance> data;
    for (uint64_t i = 0; int(data.size()) < count; ++i) {
        auto inst = gen_instance(task, derive_seed(seed, hash_tag(task), i), opts);
        if (banned.count(inst.input)) continue;
        data.push_back(std::move(inst));
    }
    write_jsonl(out, data);
    std::cout << data.size() << " instances -> " << out << "\n";
    return 0;
}

ModelParams params_from_checkpoint(const CheckpointReader& r,
                                   const CmmConfig& cfg, const char* prefix) {
    auto p = init_params(cfg, 0);
    for_each_param(p, [&](const std::string& name, Tensor& t) {
        auto vals = r.read<float>(prefix + name, "f32");
        require(int64_t(vals.size()) == t.size(),
                "checkpoint: size mismatch for " + name);
        std::copy(vals.begin(), vals.end(), t.val_mut().begin());
    });
    return p;
}

CmmConfig config_from_checkpoint(const CheckpointReader& r) {
    return parse_config(r.header.at("config"));
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_dir, const std::string& ckpt,
              long seed_override, long steps_override) {
    CmmConfig cfg;
    if (!ckpt.empty()) {
        // Resuming: the checkpoint's stored config is authoritative so the
        // continuation replays the original run exactly.
        CheckpointReader r(ckpt);
        cfg = config_from_checkpoint(r);
    } else {
        require(!config_path.empty(), "train: --config is required");
        cfg = load_config(config_path);
    }
    if (seed_override >= 0) cfg.seed = uint64_t(seed_override);
    if (steps_override >= 0) cfg.max_steps = steps_override;
    validate(cfg);

    std::filesystem::create_directories(out_dir);
    Trainer trainer(cfg, read_jsonl(data_path), out_dir);
    if (!ckpt.empty()) {
        CheckpointReader r(ckpt);
        trainer.load_checkpoint(r);
    }
    trainer.run();
    std::cout << "trained " << trainer.step() << " steps, " << trainer.epoch()
              << " epochs";
    if (trainer.best_exact() >= 0)
        std::cout << ", best exact " << trainer.best_exact();
    std::cout << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path) {
    CheckpointReader r(ckpt);
    auto cfg = config_from_checkpoint(r);
    auto ema = params_from_checkpoint(r, cfg, "ema/");
    auto data = read_jsonl(data_path);
    auto st = evaluate_model(cfg, ema, data, r.header.at("step").get<uint64_t>());
    std::printf("exact %.6f  token %.6f  mean_segments %.3f  (n=%ld)\n", st.exact,
                st.token, st.mean_segments, st.count);
    return 0;
}

int cmd_gradcheck() {
    auto rows = gradient_suite();
    bool all = true;
    for (const auto& r : rows) {
        std::printf("%-16s max_rel_err %.3e  %s\n", r.term.c_str(), r.max_rel_err,
                    r.pass ? "PASS" : "FAIL");
        all = all && r.pass;
    }
    return all ? 0 : 2;
}

int cmd_analyze(const std::string& ckpt, const std::string& data_path,
                int sample, int steps, const std::string& out) {
    CheckpointReader r(ckpt);
    auto cfg = config_from_checkpoint(r);
    auto ema = params_from_checkpoint(r, cfg, "ema/");
    auto data = read_jsonl(data_path);
    require(sample >= 0 && size_t(sample) < data.size(),
            "analyze: sample index out of range");
    const auto& inst = data[size_t(sample)];
    require(int(inst.input.size()) == cfg.seq_len,
            "analyze: instance length does not match config seq_len");

    NoGrad ng;
    auto xhat = embed_input(cfg, ema, inst.input, 1);
    LatentState init{xhat, Tensor::zeros(xhat.shape())};
    auto rows = analyze_trajectory(cfg, ema, xhat, init, steps, cfg.seed);

    std::ofstream csv(out);
    require(bool(csv), "cannot open '" + out + "' for writing");
    csv << "step,dist_to_final,lag2_delta,equil_residual,mean_jac_diag\n";
    char line[256];
    for (const auto& row : rows) {
        std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", row.step,
                      row.dist_to_final, row.lag2_delta, row.equil_residual,
                      row.mean_jac_diag);
        csv << line;
    }
    require(bool(csv), "write failed for '" + out + "'");
    std::cout << rows.size() << " rows -> " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contraction-mapping recursive reasoning toolkit"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a puzzle dataset");
    std::string task = "shidoku", gen_out, clues = "4:16", exclude;
    int count = 1000, maze_n = 9;
    long seed = 1;
    gen->add_option("--task", task, "shidoku or maze")->capture_default_str();
    gen->add_option("--count", count, "instances to generate")->required();
    gen->add_option("--seed", seed, "generator seed")->capture_default_str();
    gen->add_option("--out", gen_out, "output JSONL path")->required();
    gen->add_option("--clues", clues, "shidoku clue range lo:hi")
        ->capture_default_str();
    gen->add_option("--n", maze_n, "maze side length (odd)")->capture_default_str();
    gen->add_option("--exclude", exclude,
                    "JSONL file whose inputs must not reappear");

    auto* train = app.add_subcommand("train", "train a model");
    std::string config_path, train_data, out_dir = ".", resume_ckpt;
    long seed_override = -1, steps_override = -1;
    train->add_option("--config", config_path, "config JSON path");
    train->add_option("--data", train_data, "training JSONL path")->required();
    train->add_option("--out", out_dir, "output directory")->capture_default_str();
    train->add_option("--ckpt", resume_ckpt, "checkpoint to resume from");
    train->add_option("--seed", seed_override, "override config seed");
    train->add_option("--steps", steps_override, "override config max_steps");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "evaluation JSONL path")->required();

    app.add_subcommand("gradcheck", "finite-difference gradient verification");

    auto* analyze = app.add_subcommand("analyze", "dump a latent trajectory CSV");
    std::string an_ckpt, an_data, an_out;
    int an_sample = 0, an_steps = 16;
    analyze->add_option("--ckpt", an_ckpt, "checkpoint path")->required();
    analyze->add_option("--data", an_data, "dataset JSONL path")->required();
    analyze->add_option("--sample", an_sample, "dataset row to analyze")
        ->capture_default_str();
    analyze->add_option("--steps", an_steps, "segments to integrate")
        ->capture_default_str();
    analyze->add_option("--out", an_out, "output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(task, count, uint64_t(seed), gen_out, clues,
                                maze_n, exclude);
        if (train->parsed())
            return cmd_train(config_path, train_data, out_dir, resume_ckpt,
                             seed_override, steps_override);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data);
        if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
        if (analyze->parsed())
            return cmd_analyze(an_ckpt, an_data, an_sample, an_steps, an_out);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
