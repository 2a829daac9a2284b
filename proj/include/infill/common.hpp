// Shared error types and small helpers used across the library.

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace infill {

// Precondition violations: bad shapes, bad arguments, bad configs.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string &msg) : std::invalid_argument(msg) {}
};

// Construction-time policy violations (e.g. a bias on a non-QKV projection).
struct PolicyError : std::invalid_argument {
    explicit PolicyError(const std::string &msg) : std::invalid_argument(msg) {}
};

// Runtime data/state problems: malformed files, exhausted capacity, non-finite values.
struct DataError : std::runtime_error {
    explicit DataError(const std::string &msg) : std::runtime_error(msg) {}
};

template <typename... Args>
std::string format_msg(Args &&...args) {
    std::ostringstream oss;
    (oss << ... << args);
    return oss.str();
}

#define INFILL_CHECK_ARG(cond, ...)                                          \
    do {                                                                     \
        if (!(cond)) throw ::infill::ShapeError(::infill::format_msg(__VA_ARGS__)); \
    } while (0)

#define INFILL_CHECK_DATA(cond, ...)                                         \
    do {                                                                     \
        if (!(cond)) throw ::infill::DataError(::infill::format_msg(__VA_ARGS__)); \
    } while (0)

inline uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 1469598103934665603ull;
    for (const char c : bytes) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace infill
