#ifndef S2RD_COMMON_HPP
#define S2RD_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2rd {

// Error categories used across the project. The CLI maps these to exit codes:
// UsageError -> 2, everything else -> 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error("training error: " + msg) {}
};
struct LoadError : std::runtime_error {
    explicit LoadError(const std::string& msg) : std::runtime_error("load error: " + msg) {}
};
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// NaN/Inf guards on op boundaries. Off by default to keep inference throughput;
// training entry points switch it on.
bool debug_validation_enabled();
void set_debug_validation(bool on);

}  // namespace s2rd

#endif
