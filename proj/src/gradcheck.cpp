#include "ymask/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ymask/ops.h"

namespace ymask {

namespace {

double evaluate(const LossBuilder& loss) {
    Tape<double> tape(false);
    return loss(tape).value().item();
}

}  // namespace

GradcheckResult gradcheck(const std::string& name, const std::vector<Tensor<double>*>& inputs, const LossBuilder& loss,
                          const GradcheckOptions& opt) {
    GradcheckResult result{name, 0.0, 0, true, 0};
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        for (auto* t : inputs) tape.watch(*t);
        auto l = loss(tape);
        tape.backward(l);
        for (auto* t : inputs) analytic.push_back(tape.grad_of(*t));
    }
    Rng rng(opt.seed);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& t = *inputs[k];
        std::vector<std::size_t> probes(t.numel());
        std::iota(probes.begin(), probes.end(), std::size_t{0});
        if (opt.max_probes && probes.size() > opt.max_probes) {
            // the largest analytic entry always goes first, so the error is
            // normalized by the tensor's real gradient scale
            const auto a = analytic[k].data();
            const auto top = static_cast<std::size_t>(std::max_element(a.begin(), a.end(), [](double x, double y) {
                                                          return std::abs(x) < std::abs(y);
                                                      }) - a.begin());
            std::swap(probes[0], probes[top]);
            for (std::size_t i = 1; i < opt.max_probes; ++i) {
                const auto j = i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(probes.size() - i - 1)));
                std::swap(probes[i], probes[j]);
            }
            probes.resize(opt.max_probes);
        }
        double max_diff = 0.0, max_num = 0.0, max_ana = 0.0;
        for (auto i : probes) {
            const double saved = t[i];
            t[i] = saved + opt.step;
            const double up = evaluate(loss);
            t[i] = saved - opt.step;
            const double down = evaluate(loss);
            t[i] = saved;
            const double numeric = (up - down) / (2.0 * opt.step);
            const double a = analytic[k][i];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                max_diff = std::numeric_limits<double>::infinity();
                continue;
            }
            max_diff = std::max(max_diff, std::abs(a - numeric));
            max_num = std::max(max_num, std::abs(numeric));
            max_ana = std::max(max_ana, std::abs(a));
        }
        result.checked += probes.size();
        const double err = max_diff / std::max({max_num, max_ana, 1e-12});
        if (err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_input = k;
        }
    }
    result.passed = result.max_rel_error <= opt.tolerance;
    return result;
}

Var<double> random_projection(const Var<double>& x, std::uint64_t seed) {
    Rng rng(seed);
    auto r = rng.uniform_tensor<double>(x.shape(), -1.0, 1.0);
    return sum(mul(x, x.tape().constant(std::move(r))));
}

Tensor<double> separated_tensor(Shape shape, Rng& rng, double gap) {
    Tensor<double> t(std::move(shape));
    const std::size_t n = t.numel();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)))]);
    // centred on zero; a half-gap offset keeps every value away from 0
    for (std::size_t i = 0; i < n; ++i)
        t[i] = (static_cast<double>(order[i]) - static_cast<double>(n) / 2.0 + 0.5) * gap + 0.25 * gap;
    return t;
}

}  // namespace ymask
