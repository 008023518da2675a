#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmm {

// Bad user input: malformed config, shape mismatch, unsolvable request.
// The CLI maps this to exit code 1.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite value detected in forward or backward, named after the op that
// produced it. CLI exit code 2.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InputError(msg);
}

}  // namespace cmm
