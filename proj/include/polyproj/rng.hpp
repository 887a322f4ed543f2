/**
 * @file rng.hpp
 * @brief Counter-based pseudo-random streams for reproducible simulation.
 *
 * The generator is SplitMix64 used in counter mode: output k of a stream with
 * seed s is mix64(s + (k+1)*0x9E3779B97F4A7C15) with the canonical two-multiply
 * xor-shift finalizer. Streams are pure functions of (seed, counter), so any
 * implementation of the same algorithm reproduces them exactly. Uniform draws
 * take the top 53 bits; normal draws use Box-Muller on consecutive uniforms.
 */
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>

namespace polyproj {

/// Stateless SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/**
 * @brief Deterministic counter-based random stream.
 *
 * Replication r of an experiment with master seed m uses stream seed m ^ r
 * with replication indices starting at 1; index 0 is reserved for setup draws
 * (design points, jitter) so replications never share a stream with setup.
 */
class CounterRng {
  public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    /// Stream for replication `rep` (1-based) under `master`; rep 0 is the setup stream.
    static CounterRng replication_stream(std::uint64_t master, std::uint64_t rep) {
        return CounterRng(master ^ rep);
    }

    std::uint64_t next_u64() {
        return mix64(seed_ + (++counter_) * 0x9E3779B97F4A7C15ull);
    }

    /// Uniform on the open interval (0,1): top 53 bits, offset by half an ulp.
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller; draws two uniforms per pair, caches the second value.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Eigen::VectorXd normal_vector(int n) {
        Eigen::VectorXd z(n);
        for (int i = 0; i < n; ++i) z(i) = normal();
        return z;
    }

    Eigen::VectorXd uniform_vector(int n, double lo = 0.0, double hi = 1.0) {
        Eigen::VectorXd u(n);
        for (int i = 0; i < n; ++i) u(i) = uniform(lo, hi);
        return u;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace polyproj
