#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ymask/rng.h"
#include "ymask/tape.h"
#include "ymask/tensor.h"

namespace ymask {

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;  // number of finite-difference probes
    bool passed = false;
    std::size_t worst_input = 0;  // index into the checked tensors
};

// Builds a scalar loss on `tape`. It must reach the checked tensors through
// tape.watch() so their gradients are tracked by address.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

struct GradcheckOptions {
    double step = 1e-3;
    double tolerance = 1e-4;
    std::size_t max_probes = 0;  // per tensor; 0 probes every element
    std::uint64_t seed = 0;      // picks probed elements when max_probes > 0
};

// Compares reverse-mode gradients with central finite differences. The error
// per tensor is max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-12)
// over probed elements; the result keeps the worst tensor.
GradcheckResult gradcheck(const std::string& name, const std::vector<Tensor<double>*>& inputs,
                          const LossBuilder& loss, const GradcheckOptions& opt = {});

// sum(x ⊙ R) for a fixed random R; avoids the degenerate gradients of a plain
// sum through normalizations and softmax.
Var<double> random_projection(const Var<double>& x, std::uint64_t seed);

// Values drawn from a shuffled grid spaced `gap` apart, so kinks (max, relu)
// stay further than a finite-difference step from any input.
Tensor<double> separated_tensor(Shape shape, Rng& rng, double gap = 0.05);

// Every differentiable op and composite module at toy sizes. Each trial draws
// new random inputs; results are merged per op (worst error, all must pass).
std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opt = {}, std::size_t trials = 5);

}  // namespace ymask
