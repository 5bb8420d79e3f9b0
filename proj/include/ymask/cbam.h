#pragma once

#include <cstddef>

#include "ymask/module.h"
#include "ymask/ops.h"

namespace ymask {

// sigmoid(MLP(avgpool F) + MLP(maxpool F)) with a shared bias-free MLP
// C → C/r → C (ReLU between the layers). Output [C,1,1] or [B,C,1,1].
template <typename T>
class ChannelAttention {
public:
    ChannelAttention(std::size_t channels, std::size_t reduction, Rng& rng);
    Var<T> forward(const Context<T>& ctx, const Var<T>& f) const;
    void collect(ParamList<T>& out, const std::string& prefix);

    Tensor<T> w0, w1;  // [C, C/r], [C/r, C]

private:
    std::size_t channels_;
};

// sigmoid(conv7(channel-avg F) + conv7'(channel-max F)); the two 7×7 kernels
// are independent. Output [1,H,W] or [B,1,H,W].
template <typename T>
class SpatialAttention {
public:
    explicit SpatialAttention(Rng& rng);
    Var<T> forward(const Context<T>& ctx, const Var<T>& f) const;
    void collect(ParamList<T>& out, const std::string& prefix);

    Tensor<T> k_avg, k_max;  // [1,1,7,7]
};

// Channel gate then spatial gate, both applied multiplicatively.
template <typename T>
class ICbam {
public:
    ICbam(std::size_t channels, std::size_t reduction, Rng& rng);
    Var<T> forward(const Context<T>& ctx, const Var<T>& f) const;
    void collect(ParamList<T>& out, const std::string& prefix);

    ChannelAttention<T> cam;
    SpatialAttention<T> sam;
};

}  // namespace ymask
