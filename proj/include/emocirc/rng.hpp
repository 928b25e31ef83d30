#pragma once

#include <cmath>
#include <cstdint>

#include "emocirc/tensor.hpp"

namespace emc {

// Deterministic 64-bit generator. The mixing function is SplitMix64
// (Steele/Lea/Flood finalizer); it is fixed forever because model weights
// and datasets are reproducible from the seed alone. Gaussian draws use
// Box-Muller on the raw uniform stream, so streams are identical across
// platforms for the same seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // 1-u keeps the log argument in (0, 1].
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_gaussian(Tensor2& t, double scale) {
        for (double& x : t.data) x = gaussian() * scale;
    }

    // Derive an independent stream; used to give each pipeline stage its own
    // generator regardless of how much entropy other stages consumed.
    Rng fork(std::uint64_t stream_tag) {
        Rng r(next_u64() ^ (0x9E3779B97F4A7C15ULL * (stream_tag + 1)));
        return r;
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace emc
