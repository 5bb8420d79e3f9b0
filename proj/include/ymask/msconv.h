#pragma once

#include <cstddef>

#include "ymask/attention.h"

namespace ymask {

struct MsConvConfig {
    std::size_t in_channels = 3;
    std::size_t out_channels = 64;
    std::size_t kernel = 6;
    std::size_t stride = 2;
    std::size_t padding = 2;
    std::size_t heads = 4;
};

// Convolution whose N×C×K×K kernels are computed from the input itself:
// non-overlapping K×K patches are grouped into N column groups, max- and
// avg-pooled per group, summed, run through a transformer encoder with the
// K·K·C rows as tokens, and reshaped into kernels.
template <typename T>
class MsConv {
public:
    MsConv(const MsConvConfig& cfg, Rng& rng);

    // x: C×H×W → N×C×K×K
    Var<T> generate_kernels(const Context<T>& ctx, const Var<T>& x) const;
    // x: C×H×W or B×C×H×W; each image is convolved with its own kernels
    Var<T> forward(const Context<T>& ctx, const Var<T>& x) const;

    void collect(ParamList<T>& out, const std::string& prefix);

    const MsConvConfig& config() const { return cfg_; }

    EncoderBlock<T> encoder;

private:
    MsConvConfig cfg_;
    Tensor<T> pe_;
};

}  // namespace ymask
