#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tinymm/tensor.hpp"

namespace tinymm {

// mt19937_64 with hand-rolled distributions. std::*_distribution algorithms
// are implementation-defined, which would tie checkpoints and corpora to one
// libstdc++ version; these are pinned.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // 53-bit uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Box-Muller without the cached spare, so the generator carries no state
    // beyond the engine itself.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, n) via rejection sampling (no modulo bias).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return v % n;
    }

    int range(int lo, int hi_exclusive) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_exclusive - lo)));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    template <class T>
    const T& pick(const std::vector<T>& v) {
        return v[static_cast<size_t>(below(v.size()))];
    }

    // Deterministic child stream, for seed-partitioned generation.
    static Rng fork(std::uint64_t seed, std::uint64_t stream) {
        return Rng(fnv1a(std::to_string(seed) + ":" + std::to_string(stream)));
    }

    std::string state() const {
        std::ostringstream os;
        os.imbue(std::locale::classic());
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is.imbue(std::locale::classic());
        is.exceptions(std::istringstream::failbit);
        is >> eng_;
    }

private:
    std::mt19937_64 eng_;
};

inline void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
}

} // namespace tinymm
