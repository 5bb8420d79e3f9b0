#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ymask/rng.h"
#include "ymask/tape.h"
#include "ymask/tensor.h"

namespace ymask {

// Weight: trained and decayed. NoDecay: trained, no weight decay (norm affine,
// biases, position tables). Buffer: saved in checkpoints, never trained.
enum class ParamKind { Weight, NoDecay, Buffer };

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* tensor;
    ParamKind kind;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

// Per-forward state. In train mode batch norms use batch statistics and update
// their running estimates.
template <typename T>
struct Context {
    Tape<T>& tape;
    bool train = false;

    Var<T> param(const Tensor<T>& t) const { return tape.watch(t); }
};

// U(-sqrt(1/fan_in), +sqrt(1/fan_in))
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    return rng.uniform_tensor<T>(std::move(shape), -bound, bound);
}

}  // namespace ymask
