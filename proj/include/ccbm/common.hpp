#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccbm {

/// Raised when a linear solve or decomposition cannot proceed
/// (singular operator, non-finite inputs). CLI maps this to exit code 2.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

namespace log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

/// Log level from CCBM_LOG (error|info|debug); default error.
inline Level level() {
    static Level lvl = [] {
        const char* env = std::getenv("CCBM_LOG");
        if (!env) return Level::Error;
        const std::string s(env);
        if (s == "debug") return Level::Debug;
        if (s == "info") return Level::Info;
        return Level::Error;
    }();
    return lvl;
}

inline void info(const std::string& msg) {
    if (level() >= Level::Info) std::cerr << "[info] " << msg << "\n";
}

inline void debug(const std::string& msg) {
    if (level() >= Level::Debug) std::cerr << "[debug] " << msg << "\n";
}

inline void warn(const std::string& msg) { std::cerr << "[warn] " << msg << "\n"; }

}  // namespace log

/// Deterministic random source. All randomness in the library flows through
/// this class so that results depend only on the 64-bit seed: the generator
/// is mt19937_64 (bit-exact sequence by the standard) and the double
/// transforms are written out here instead of using std:: distributions,
/// whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (second value cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n); rejection sampling, unbiased.
    std::size_t index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::index: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<std::size_t>(v % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    /// m distinct indices drawn from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m) {
        if (m > n) throw std::invalid_argument("sample_without_replacement: m > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out;
        out.reserve(m);
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t j = i + index(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Monotonic wall-clock timer reporting milliseconds.
class Stopwatch {
public:
    Stopwatch() : start_(clock_t::now()) {}
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(clock_t::now() - start_).count();
    }
    void reset() { start_ = clock_t::now(); }

private:
    using clock_t = std::chrono::steady_clock;
    clock_t::time_point start_;
};

}  // namespace ccbm
