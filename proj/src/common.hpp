#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vce {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Shape/geometry violations: wrong dims, mismatched grids, bad labels.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, diverging losses, solver aborts.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk format problems (bad magic, truncation, unknown dtype).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG used everywhere. Gaussian draws are generated with a
// stateless pairwise Box-Muller so the generator state is fully captured by
// the mt19937_64 engine (which serializes to a portable text string).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t n) {  // [0, n)
        return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    bool coin() { return (eng_() & 1u) != 0; }

    template <class T>
    void fill_normal(T* dst, std::int64_t n, double mean = 0.0, double stddev = 1.0) {
        std::int64_t i = 0;
        while (i < n) {
            double u1 = uniform();
            double u2 = uniform();
            while (u1 <= 0.0) u1 = uniform();
            const double r = std::sqrt(-2.0 * std::log(u1));
            const double a = 6.283185307179586476925286766559 * u2;
            dst[i++] = static_cast<T>(mean + stddev * r * std::cos(a));
            if (i < n) dst[i++] = static_cast<T>(mean + stddev * r * std::sin(a));
        }
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        double v;
        fill_normal(&v, 1, mean, stddev);
        return v;
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (is.fail()) throw FormatError("rng state string failed to parse");
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace vce
