#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace snbi {

/// Deterministic random source. Wraps std::mt19937_64 (whose output sequence
/// is fixed by the standard) and derives all distributions by hand so results
/// are identical across platforms and standard libraries.
class Rng {
public:
    Rng() : engine_(0) {}
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_u64(uint64_t n) {
        // rejection sampling to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    size_t index(size_t n) { return static_cast<size_t>(uniform_u64(n)); }

    /// Uniform real in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            const size_t j = index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    /// Serializes the full engine state plus the Box-Muller spare.
    std::string save_state() const {
        std::ostringstream os;
        os << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int spare_flag = 0;
        is >> engine_ >> spare_flag >> spare_;
        has_spare_ = spare_flag != 0;
    }

    /// Derives an independent child seed; used to give sub-tasks their own stream.
    static uint64_t mix(uint64_t seed, uint64_t salt) {
        uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace snbi
