#pragma once

#include <cstddef>

#include "ymask/module.h"
#include "ymask/ops.h"

namespace ymask {

// softmax(q·kᵀ/√d + bias + mask)·v over the last two axes; q, k, v are
// [..., L, d]. See ops.h `attention` for the bias and mask layouts.
template <typename T>
Var<T> scaled_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>* bias = nullptr,
                        const Tensor<T>* mask = nullptr);

// Sinusoidal table: pe[i, 2j] = sin(i / 10000^(2j/d)), pe[i, 2j+1] = cos(same).
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d);

// Projections are stored as [d_in, d_out] so y = x·W. Heads split the model
// width into contiguous slices of d_model / n_heads.
template <typename T>
class MultiHeadAttention {
public:
    MultiHeadAttention(std::size_t d_model, std::size_t n_heads, Rng& rng);

    // x is [L, d] or [B, L, d]. bias is [heads, L, L]; mask is [M, L, L] with
    // sequence b using mask b mod M.
    Var<T> forward(const Context<T>& ctx, const Var<T>& x, const Var<T>* bias = nullptr,
                   const Tensor<T>* mask = nullptr) const;

    void collect(ParamList<T>& out, const std::string& prefix);

    std::size_t d_model() const { return d_model_; }
    std::size_t n_heads() const { return n_heads_; }

    Tensor<T> wq, wk, wv, wo;

private:
    std::size_t d_model_, n_heads_;
};

// y = LN(x + MHA(x)); out = LN(y + FFN(y)), FFN = Linear(d, 4d) → SiLU → Linear(4d, d).
template <typename T>
class EncoderBlock {
public:
    EncoderBlock(std::size_t d_model, std::size_t n_heads, Rng& rng);

    Var<T> forward(const Context<T>& ctx, const Var<T>& x) const;
    void collect(ParamList<T>& out, const std::string& prefix);

    MultiHeadAttention<T> mha;
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor<T> ff1_w, ff1_b, ff2_w, ff2_b;

    static constexpr double kLayerNormEps = 1e-5;
};

}  // namespace ymask
