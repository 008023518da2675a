#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <set>

#include "cmm/tasks.hpp"

namespace {

// Independent enumerator of all complete 4x4 grids using its own constraint
// checks (row, column, 2x2 box).
std::set<std::vector<int>> enumerate_full_grids() {
    std::set<std::vector<int>> all;
    std::vector<int> g(16, 0);
    std::function<void(int)> rec = [&](int cell) {
        if (cell == 16) {
            all.insert(g);
            return;
        }
        const int r = cell / 4, c = cell % 4;
        for (int v = 1; v <= 4; ++v) {
            bool ok = true;
            for (int j = 0; j < 4 && ok; ++j) {
                if (g[size_t(r * 4 + j)] == v) ok = false;
                if (g[size_t(j * 4 + c)] == v) ok = false;
            }
            const int br = (r / 2) * 2, bc = (c / 2) * 2;
            for (int i = br; i < br + 2 && ok; ++i)
                for (int j = bc; j < bc + 2 && ok; ++j)
                    if (g[size_t(i * 4 + j)] == v) ok = false;
            if (!ok) continue;
            g[size_t(cell)] = v;
            rec(cell + 1);
            g[size_t(cell)] = 0;
        }
    };
    rec(0);
    return all;
}

// Plain BFS distances over non-wall cells, written against the token values
// rather than any library helper.
std::vector<int> bfs_dist(const std::vector<int>& grid, int n, int src) {
    std::vector<int> dist(grid.size(), -1);
    std::deque<int> q;
    dist[size_t(src)] = 0;
    q.push_back(src);
    while (!q.empty()) {
        int cur = q.front();
        q.pop_front();
        const int r = cur / n, c = cur % n;
        const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
            int rr = r + dr[d], cc = c + dc[d];
            if (rr < 0 || rr >= n || cc < 0 || cc >= n) continue;
            int nxt = rr * n + cc;
            if (grid[size_t(nxt)] == cmm::maze::kWall || dist[size_t(nxt)] >= 0) continue;
            dist[size_t(nxt)] = dist[size_t(cur)] + 1;
            q.push_back(nxt);
        }
    }
    return dist;
}

int find_token(const std::vector<int>& grid, int token) {
    for (size_t i = 0; i < grid.size(); ++i)
        if (grid[i] == token) return int(i);
    return -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("solver counts: empty, solved, contradictory grids") {
    std::vector<int> empty(16, 0);
    REQUIRE(cmm::shidoku::solve(empty, 1000) == 288);

    std::vector<int> full = {1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1};
    std::vector<int> sol;
    REQUIRE(cmm::shidoku::solve(full, 1000, &sol) == 1);
    REQUIRE(sol == full);

    auto clash = empty;
    clash[0] = 1;
    clash[3] = 1;  // twice in the first row
    REQUIRE(cmm::shidoku::solve(clash, 1000) == 0);

    REQUIRE_THROWS_AS(cmm::shidoku::solve(std::vector<int>(15, 0)), cmm::InputError);
    auto bad = empty;
    bad[5] = 5;
    REQUIRE_THROWS_AS(cmm::shidoku::solve(bad), cmm::InputError);
}

TEST_CASE("solver agrees with an independent grid enumeration") {
    auto all = enumerate_full_grids();
    REQUIRE(all.size() == 288);
    for (const auto& g : all) REQUIRE(cmm::shidoku::solve(g, 2) == 1);

    // every generated solution is one of the 288 legal grids
    for (uint64_t seed = 1; seed <= 300; ++seed) {
        auto inst = cmm::shidoku::generate(seed, 4, 16);
        REQUIRE(all.count(inst.target) == 1);
    }
}

TEST_CASE("puzzle generation: clue accounting and degenerate range") {
    auto inst = cmm::shidoku::generate(11, 6, 10);
    int clues = 0;
    for (int v : inst.input) clues += v != cmm::shidoku::kBlank;
    REQUIRE(clues == inst.meta.at("clues").get<int>());
    REQUIRE(clues >= 6);
    REQUIRE(clues <= 10);

    // full-information range: the puzzle is its own solution
    auto full = cmm::shidoku::generate(13, 16, 16);
    REQUIRE(full.input == full.target);

    REQUIRE_THROWS_AS(cmm::shidoku::generate(1, 3, 10), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::shidoku::generate(1, 4, 17), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::shidoku::generate(1, 10, 6), cmm::InputError);
}

TEST_CASE("puzzle generation: every instance has exactly one solution") {
    for (uint64_t seed = 0; seed < 10000; ++seed) {
        auto inst = cmm::shidoku::generate(seed, 4, 16);
        std::vector<int> sol;
        REQUIRE(cmm::shidoku::solve(inst.input, 2, &sol) == 1);
        REQUIRE(sol == inst.target);
    }
}

TEST_CASE("maze generation: structure of a fixed small maze") {
    auto inst = cmm::maze::generate(5, 5);
    const int n = inst.meta.at("n").get<int>();
    REQUIRE(n == 5);
    REQUIRE(inst.input.size() == 25);

    const int start = find_token(inst.input, cmm::maze::kStart);
    const int goal = find_token(inst.input, cmm::maze::kGoal);
    REQUIRE(start >= 0);
    REQUIRE(goal >= 0);
    REQUIRE(start != goal);

    // connectivity and shortest length against an independent BFS
    auto dist = bfs_dist(inst.input, n, start);
    REQUIRE(dist[size_t(goal)] >= 1);
    REQUIRE(dist[size_t(goal)] + 1 == inst.meta.at("path_len").get<int>());

    // start/goal survive into the target; walls are identical
    REQUIRE(inst.target[size_t(start)] == cmm::maze::kStart);
    REQUIRE(inst.target[size_t(goal)] == cmm::maze::kGoal);
    for (size_t i = 0; i < inst.input.size(); ++i)
        REQUIRE((inst.input[i] == cmm::maze::kWall) ==
                (inst.target[i] == cmm::maze::kWall));

    REQUIRE_THROWS_AS(cmm::maze::generate(1, 4), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::maze::generate(1, 17), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::maze::generate(1, 3), cmm::InputError);
}

TEST_CASE("maze generation: perfect mazes with true shortest paths") {
    for (uint64_t seed = 0; seed < 10000; ++seed) {
        const int n = 9;
        auto inst = cmm::maze::generate(seed, n);
        const int m = (n - 1) / 2;

        int open = 0;
        long edges = 0;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) {
                if (inst.input[size_t(r * n + c)] == cmm::maze::kWall) continue;
                ++open;
                if (c + 1 < n && inst.input[size_t(r * n + c + 1)] != cmm::maze::kWall)
                    ++edges;
                if (r + 1 < n && inst.input[size_t((r + 1) * n + c)] != cmm::maze::kWall)
                    ++edges;
            }
        // spanning tree over the room lattice: 2m^2 - 1 cells, one less edge
        REQUIRE(open == 2 * m * m - 1);
        REQUIRE(edges == open - 1);

        const int start = find_token(inst.input, cmm::maze::kStart);
        const int goal = find_token(inst.input, cmm::maze::kGoal);
        auto dist = bfs_dist(inst.input, n, start);
        const int path_len = inst.meta.at("path_len").get<int>();
        REQUIRE(dist[size_t(goal)] + 1 == path_len);

        // path tokens sit on interior open cells only, and there are
        // exactly path_len - 2 of them
        int marked = 0;
        for (size_t i = 0; i < inst.target.size(); ++i) {
            if (inst.target[i] != cmm::maze::kPath) continue;
            ++marked;
            REQUIRE(inst.input[i] == cmm::maze::kOpen);
        }
        REQUIRE(marked == path_len - 2);
    }
}

TEST_CASE("generators are deterministic in their seed") {
    auto a = cmm::shidoku::generate(1234, 6, 10);
    auto b = cmm::shidoku::generate(1234, 6, 10);
    REQUIRE(a.input == b.input);
    REQUIRE(a.target == b.target);
    REQUIRE(a.meta == b.meta);

    auto ma = cmm::maze::generate(99, 7);
    auto mb = cmm::maze::generate(99, 7);
    REQUIRE(ma.input == mb.input);
    REQUIRE(ma.target == mb.target);

    auto d1 = cmm::gen_dataset("shidoku", 20, 7);
    auto d2 = cmm::gen_dataset("shidoku", 20, 7);
    for (size_t i = 0; i < d1.size(); ++i) {
        REQUIRE(d1[i].input == d2[i].input);
        REQUIRE(d1[i].target == d2[i].target);
        REQUIRE(d1[i].seed == d2[i].seed);
    }
    REQUIRE_THROWS_AS(cmm::gen_dataset("sokoban", 5, 1), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::gen_dataset("shidoku", 0, 1), cmm::InputError);
}

TEST_CASE("instance hashing separates distinct inputs") {
    auto a = cmm::shidoku::generate(1, 6, 10);
    auto b = cmm::shidoku::generate(2, 6, 10);
    REQUIRE(a.input != b.input);
    REQUIRE(cmm::instance_hash(a) == cmm::instance_hash(a));
    REQUIRE(cmm::instance_hash(a) != cmm::instance_hash(b));

    // same cells under a different task name hash differently
    auto c = a;
    c.task = "maze";
    REQUIRE(cmm::instance_hash(a) != cmm::instance_hash(c));

    // split hygiene: banning one stream's hashes removes every literal
    // duplicate from another stream
    auto train = cmm::gen_dataset("shidoku", 300, 1);
    auto test = cmm::gen_dataset("shidoku", 300, 2);
    std::set<uint64_t> banned;
    for (const auto& inst : train) banned.insert(cmm::instance_hash(inst));
    std::set<std::vector<int>> train_inputs;
    for (const auto& inst : train) train_inputs.insert(inst.input);
    int kept = 0;
    for (const auto& inst : test) {
        if (banned.count(cmm::instance_hash(inst))) continue;
        ++kept;
        REQUIRE(train_inputs.count(inst.input) == 0);
    }
    REQUIRE(kept > 250);  // the two streams overlap at most lightly
}

TEST_CASE("dataset files round trip byte for byte") {
    const std::string p1 = "tasks_rt_a.jsonl", p2 = "tasks_rt_b.jsonl";
    auto data = cmm::gen_dataset("maze", 10, 5, {.maze_n = 5});
    cmm::write_jsonl(p1, data);
    auto back = cmm::read_jsonl(p1);
    REQUIRE(back.size() == data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        REQUIRE(back[i].task == data[i].task);
        REQUIRE(back[i].seed == data[i].seed);
        REQUIRE(back[i].input == data[i].input);
        REQUIRE(back[i].target == data[i].target);
        REQUIRE(back[i].meta == data[i].meta);
    }
    cmm::write_jsonl(p2, back);
    REQUIRE(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("dataset reader rejects malformed files") {
    REQUIRE_THROWS_WITH(cmm::read_jsonl("no_such_file.jsonl"),
                        Catch::Matchers::ContainsSubstring("cannot open"));

    const std::string path = "tasks_bad.jsonl";
    {
        std::ofstream out(path);
        out << R"({"task":"shidoku","seed":1,"input":[1],"target":[1]})" << "\n";
        out << "{not json\n";
    }
    REQUIRE_THROWS_WITH(cmm::read_jsonl(path),
                        Catch::Matchers::ContainsSubstring(":2: bad JSON"));
    {
        std::ofstream out(path);
        out << R"({"task":"shidoku","seed":1,"input":[1,2],"target":[1]})" << "\n";
    }
    REQUIRE_THROWS_WITH(cmm::read_jsonl(path),
                        Catch::Matchers::ContainsSubstring("length mismatch"));
    {
        std::ofstream out(path);
        out << R"({"task":"shidoku","seed":1,"target":[1]})" << "\n";
    }
    REQUIRE_THROWS_WITH(cmm::read_jsonl(path),
                        Catch::Matchers::ContainsSubstring("missing or malformed"));
    {
        std::ofstream out(path);
        out << "\n\n";
    }
    REQUIRE_THROWS_WITH(cmm::read_jsonl(path),
                        Catch::Matchers::ContainsSubstring("empty"));
    std::remove(path.c_str());
}

TEST_CASE("accuracy: exact and per-token scores") {
    std::vector<int> target = {1, 2, 3, 4, 4, 3, 2, 1};
    auto perfect = cmm::exact_accuracy(target, target, 2);
    REQUIRE(perfect.exact == 1.0);
    REQUIRE(perfect.token == 1.0);

    auto pred = target;
    pred[6] = 9;  // one bad cell in the second sample
    auto one_off = cmm::exact_accuracy(pred, target, 2);
    REQUIRE(one_off.exact == 0.5);
    REQUIRE(one_off.token == Catch::Approx(7.0 / 8.0));

    REQUIRE_THROWS_AS(cmm::exact_accuracy({1, 2}, {1, 2, 3}, 1), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::exact_accuracy({1, 2, 3}, {1, 2, 3}, 2), cmm::InputError);
    REQUIRE_THROWS_AS(cmm::exact_accuracy({1, 2}, {1, 2}, 0), cmm::InputError);
}

TEST_CASE("accuracy: random predictions on a five-token vocabulary") {
    cmm::Rng rng(97);
    const int batch = 6250, s = 16;  // 1e5 positions
    std::vector<int> pred(size_t(batch) * s), target(size_t(batch) * s);
    for (auto& v : pred) v = rng.uniform_int(5);
    for (auto& v : target) v = rng.uniform_int(5);
    auto acc = cmm::exact_accuracy(pred, target, batch);
    REQUIRE(acc.token == Catch::Approx(0.2).margin(0.01));
    REQUIRE(acc.exact < 0.001);
}
