#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <queue>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmm/common.hpp"
#include "cmm/rng.hpp"

namespace cmm {

struct PuzzleInstance {
    std::string task;  // "shidoku" | "maze"
    uint64_t seed = 0;
    std::vector<int> input;
    std::vector<int> target;
    nlohmann::json meta;
};

// ---------------------------------------------------------------------------
// shidoku: 4x4 latin square with 2x2 boxes, vocab {0=blank, 1..4}, S=16
// ---------------------------------------------------------------------------

namespace shidoku {

constexpr int kSide = 4;
constexpr int kCells = 16;
constexpr int kBlank = 0;
constexpr int kVocabIn = 5;
constexpr int kVocabOut = 5;

inline bool placement_ok(const std::vector<int>& g, int cell, int v) {
    const int r = cell / kSide, c = cell % kSide;
    for (int i = 0; i < kSide; ++i) {
        if (g[size_t(r * kSide + i)] == v && r * kSide + i != cell) return false;
        if (g[size_t(i * kSide + c)] == v && i * kSide + c != cell) return false;
    }
    const int br = (r / 2) * 2, bc = (c / 2) * 2;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            int k = (br + i) * kSide + bc + j;
            if (g[size_t(k)] == v && k != cell) return false;
        }
    return true;
}

inline bool clues_consistent(const std::vector<int>& g) {
    for (int cell = 0; cell < kCells; ++cell) {
        int v = g[size_t(cell)];
        if (v == kBlank) continue;
        if (!placement_ok(g, cell, v)) return false;
    }
    return true;
}

namespace detail {

inline int count_solutions(std::vector<int>& g, int cap,
                           std::vector<int>* first) {
    int cell = 0;
    while (cell < kCells && g[size_t(cell)] != kBlank) ++cell;
    if (cell == kCells) {
        if (first && first->empty()) *first = g;
        return 1;
    }
    int found = 0;
    for (int v = 1; v <= kSide; ++v) {
        if (!placement_ok(g, cell, v)) continue;
        g[size_t(cell)] = v;
        found += count_solutions(g, cap - found, first);
        g[size_t(cell)] = kBlank;
        if (found >= cap) break;
    }
    return found;
}

}  // namespace detail

// Exhaustive backtracking oracle. Counts completions up to `cap`; clue
// conflicts yield zero solutions rather than an error.
inline int solve(const std::vector<int>& grid, int cap = 2,
                 std::vector<int>* first_solution = nullptr) {
    require(grid.size() == kCells, "shidoku: grid must have 16 cells");
    for (int v : grid)
        require(v >= 0 && v <= kSide, "shidoku: cell values must lie in 0..4");
    if (first_solution) first_solution->clear();
    if (!clues_consistent(grid)) return 0;
    auto work = grid;
    return detail::count_solutions(work, cap, first_solution);
}

namespace detail {

inline bool fill_grid(std::vector<int>& g, int cell, Rng& rng) {
    if (cell == kCells) return true;
    auto order = rng.permutation(kSide);
    for (int i : order) {
        int v = i + 1;
        if (!placement_ok(g, cell, v)) continue;
        g[size_t(cell)] = v;
        if (fill_grid(g, cell + 1, rng)) return true;
        g[size_t(cell)] = kBlank;
    }
    return false;
}

}  // namespace detail

// Random puzzle with an oracle-verified unique solution: fill a complete
// grid, then blank cells in random order as long as uniqueness survives,
// aiming for a clue count drawn from [lo, hi].
inline PuzzleInstance generate(uint64_t seed, int clue_lo, int clue_hi) {
    require(4 <= clue_lo && clue_lo <= clue_hi && clue_hi <= kCells,
            "shidoku: clue range must satisfy 4 <= lo <= hi <= 16");
    Rng rng(seed);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<int> full(kCells, kBlank);
        if (!detail::fill_grid(full, 0, rng)) continue;
        const int want = clue_lo + int(rng.uniform_int(uint64_t(clue_hi - clue_lo + 1)));
        auto puzzle = full;
        int clues = kCells;
        for (int cell : rng.permutation(kCells)) {
            if (clues <= want) break;
            int saved = puzzle[size_t(cell)];
            puzzle[size_t(cell)] = kBlank;
            if (solve(puzzle, 2) == 1)
                --clues;
            else
                puzzle[size_t(cell)] = saved;
        }
        if (clues > clue_hi) continue;  // removal got stuck above the range
        PuzzleInstance inst;
        inst.task = "shidoku";
        inst.seed = seed;
        inst.input = std::move(puzzle);
        inst.target = std::move(full);
        inst.meta = {{"clues", clues}};
        return inst;
    }
    throw InputError("shidoku: could not reach requested clue range");
}

}  // namespace shidoku

// ---------------------------------------------------------------------------
// maze: odd n in [5,15], perfect maze, vocab {0=wall,1=open,2=start,3=goal},
// target marks interior shortest-path cells with 4. S = n*n.
// ---------------------------------------------------------------------------

namespace maze {

constexpr int kWall = 0;
constexpr int kOpen = 1;
constexpr int kStart = 2;
constexpr int kGoal = 3;
constexpr int kPath = 4;
constexpr int kVocabIn = 4;
constexpr int kVocabOut = 5;

// BFS oracle over the open cells of an n*n grid. Returns the shortest path
// (cell indices, start..goal inclusive); empty if unreachable.
inline std::vector<int> bfs_path(const std::vector<int>& grid, int n, int start,
                                 int goal) {
    require(int(grid.size()) == n * n, "maze: grid size must be n*n");
    std::vector<int> parent(grid.size(), -2);
    std::queue<int> q;
    parent[size_t(start)] = -1;
    q.push(start);
    while (!q.empty() && parent[size_t(goal)] == -2) {
        int cur = q.front();
        q.pop();
        const int r = cur / n, c = cur % n;
        const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
            int rr = r + dr[d], cc = c + dc[d];
            if (rr < 0 || rr >= n || cc < 0 || cc >= n) continue;
            int nxt = rr * n + cc;
            if (grid[size_t(nxt)] == kWall || parent[size_t(nxt)] != -2) continue;
            parent[size_t(nxt)] = cur;
            q.push(nxt);
        }
    }
    if (parent[size_t(goal)] == -2) return {};
    std::vector<int> path;
    for (int cur = goal; cur != -1; cur = parent[size_t(cur)])
        path.push_back(cur);
    std::reverse(path.begin(), path.end());
    return path;
}

inline PuzzleInstance generate(uint64_t seed, int n) {
    require(n % 2 == 1 && n >= 5 && n <= 15, "maze: n must be odd and in [5,15]");
    Rng rng(seed);
    const int m = (n - 1) / 2;  // cells per side of the room lattice
    std::vector<int> grid(size_t(n) * n, kWall);
    auto room = [&](int i, int j) { return (2 * i + 1) * n + (2 * j + 1); };

    // randomized DFS over the room lattice; knocking each wall adds exactly
    // one edge, so the result is a spanning tree (a perfect maze)
    std::vector<char> seen(size_t(m) * m, 0);
    std::vector<int> stack;
    int first = int(rng.uniform_int(uint64_t(m) * m));
    seen[size_t(first)] = 1;
    grid[size_t(room(first / m, first % m))] = kOpen;
    stack.push_back(first);
    while (!stack.empty()) {
        int cur = stack.back();
        const int i = cur / m, j = cur % m;
        int options[4], n_opt = 0;
        const int di[] = {-1, 1, 0, 0}, dj[] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
            int ii = i + di[d], jj = j + dj[d];
            if (ii < 0 || ii >= m || jj < 0 || jj >= m) continue;
            if (!seen[size_t(ii * m + jj)]) options[n_opt++] = d;
        }
        if (n_opt == 0) {
            stack.pop_back();
            continue;
        }
        int d = options[rng.uniform_int(uint64_t(n_opt))];
        int ii = i + di[d], jj = j + dj[d];
        seen[size_t(ii * m + jj)] = 1;
        grid[size_t(room(ii, jj))] = kOpen;
        grid[size_t((room(i, j) + room(ii, jj)) / 2)] = kOpen;  // the wall between
        stack.push_back(ii * m + jj);
    }

    int start_room = int(rng.uniform_int(uint64_t(m) * m));
    int goal_room = int(rng.uniform_int(uint64_t(m) * m));
    while (goal_room == start_room)
        goal_room = int(rng.uniform_int(uint64_t(m) * m));
    const int start = room(start_room / m, start_room % m);
    const int goal = room(goal_room / m, goal_room % m);

    auto path = bfs_path(grid, n, start, goal);
    require(!path.empty(), "maze: start and goal must be connected");

    auto input = grid;
    input[size_t(start)] = kStart;
    input[size_t(goal)] = kGoal;
    auto target = input;
    for (size_t i = 1; i + 1 < path.size(); ++i)
        target[size_t(path[i])] = kPath;

    PuzzleInstance inst;
    inst.task = "maze";
    inst.seed = seed;
    inst.input = std::move(input);
    inst.target = std::move(target);
    inst.meta = {{"n", n}, {"path_len", int(path.size())}};
    return inst;
}

}  // namespace maze

// ---------------------------------------------------------------------------
// dataset plumbing
// ---------------------------------------------------------------------------

struct GenOptions {
    int clue_lo = 4, clue_hi = 16;  // shidoku
    int maze_n = 9;                 // maze
};

inline PuzzleInstance gen_instance(const std::string& task, uint64_t seed,
                                   const GenOptions& opt) {
    if (task == "shidoku") return shidoku::generate(seed, opt.clue_lo, opt.clue_hi);
    if (task == "maze") return maze::generate(seed, opt.maze_n);
    throw InputError("unknown task '" + task + "' (expected shidoku or maze)");
}

// Instances i = 0..count-1 get independent streams derived from (seed, task, i),
// so datasets are reproducible and disjoint base seeds give disjoint streams.
inline std::vector<PuzzleInstance> gen_dataset(const std::string& task,
                                               int count, uint64_t seed,
                                               const GenOptions& opt = {}) {
    require(count >= 1, "gen_dataset: count must be >= 1");
    std::vector<PuzzleInstance> out;
    out.reserve(size_t(count));
    for (int i = 0; i < count; ++i)
        out.push_back(
            gen_instance(task, derive_seed(seed, hash_tag(task), uint64_t(i)), opt));
    return out;
}

inline uint64_t instance_hash(const PuzzleInstance& inst) {
    uint64_t h = hash_tag(inst.task);
    for (int t : inst.input) h = detail::mix64(h ^ uint64_t(uint32_t(t)));
    return h;
}

inline void write_jsonl(const std::string& path,
                        const std::vector<PuzzleInstance>& insts) {
    std::ofstream out(path, std::ios::binary);
    require(bool(out), "cannot open '" + path + "' for writing");
    for (const auto& inst : insts) {
        nlohmann::json j;
        j["task"] = inst.task;
        j["seed"] = inst.seed;
        j["input"] = inst.input;
        j["target"] = inst.target;
        j["meta"] = inst.meta;
        out << j.dump() << '\n';
    }
    require(bool(out), "write failed for '" + path + "'");
}

inline std::vector<PuzzleInstance> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), "cannot open dataset '" + path + "'");
    std::vector<PuzzleInstance> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw InputError(path + ":" + std::to_string(lineno) +
                             ": bad JSON: " + e.what());
        }
        PuzzleInstance inst;
        try {
            inst.task = j.at("task").get<std::string>();
            inst.seed = j.at("seed").get<uint64_t>();
            inst.input = j.at("input").get<std::vector<int>>();
            inst.target = j.at("target").get<std::vector<int>>();
            inst.meta = j.value("meta", nlohmann::json::object());
        } catch (const std::exception& e) {
            throw InputError(path + ":" + std::to_string(lineno) +
                             ": missing or malformed field: " + e.what());
        }
        require(inst.input.size() == inst.target.size(),
                path + ":" + std::to_string(lineno) +
                    ": input/target length mismatch");
        out.push_back(std::move(inst));
    }
    require(!out.empty(), "dataset '" + path + "' is empty");
    return out;
}

struct Accuracy {
    double exact = 0;
    double token = 0;
};

inline Accuracy exact_accuracy(const std::vector<int>& pred,
                               const std::vector<int>& target, int batch) {
    require(pred.size() == target.size(),
            "exact_accuracy: prediction/target length mismatch");
    require(batch >= 1 && pred.size() % size_t(batch) == 0,
            "exact_accuracy: length must be a multiple of batch");
    const size_t s = pred.size() / size_t(batch);
    Accuracy acc;
    long tok = 0;
    for (int b = 0; b < batch; ++b) {
        bool all = true;
        for (size_t i = 0; i < s; ++i) {
            if (pred[size_t(b) * s + i] == target[size_t(b) * s + i])
                ++tok;
            else
                all = false;
        }
        if (all) acc.exact += 1.0;
    }
    acc.exact /= double(batch);
    acc.token = double(tok) / double(pred.size());
    return acc;
}

}  // namespace cmm
