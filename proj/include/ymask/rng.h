#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "ymask/tensor.h"

namespace ymask {

// Platform-stable random source: std::mt19937 output is fully specified, the
// standard distributions are not, so sampling is done by hand.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    std::uint32_t next_u32() { return static_cast<std::uint32_t>(engine_()); }

    // Uniform in [0, 1).
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>((static_cast<std::uint64_t>(next_u32()) * span) >> 32);
    }

    double normal() {
        // Box-Muller; u1 strictly positive
        const double u1 = (next_u32() + 1.0) * (1.0 / 4294967297.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Normal truncated to [-2 std, 2 std] by resampling.
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * stddev;
        }
    }

    template <typename T>
    Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
        return t;
    }

    template <typename T>
    Tensor<T> normal_tensor(Shape shape, double stddev) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(normal() * stddev);
        return t;
    }

private:
    std::mt19937 engine_;
};

}  // namespace ymask
