#pragma once

#include <cstddef>
#include <vector>

#include "ymask/attention.h"

namespace ymask {

// [H, W, d] → [nW, M², d] (or [B, H, W, d] → [B·nW, M², d]); windows row-major.
template <typename T>
Var<T> window_partition(const Var<T>& x, std::size_t window);
// Inverse of window_partition for a map of height×width.
template <typename T>
Var<T> window_merge(const Var<T>& windows, std::size_t height, std::size_t width, std::size_t window);

// out[i, j] = x[(i+s) mod H, (j+s) mod W]; reverse undoes it exactly.
template <typename T>
Var<T> cyclic_shift(const Var<T>& x, std::size_t shift);
template <typename T>
Var<T> reverse_cyclic_shift(const Var<T>& x, std::size_t shift);

// Additive attention mask [nW, M², M²] for the shifted layout: 0 between tokens
// of the same region, -100 otherwise. An axis covered by a single window has
// one region.
template <typename T>
Tensor<T> build_shift_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift);

// Index into a (2M-1)×(2M-1) table for every token pair of an M×M window.
std::vector<std::size_t> relative_position_index(std::size_t window);

// One attention half of the block: x + WMSA(LN(x)), then x + MLP(LN(x)).
template <typename T>
class SwinHalf {
public:
    SwinHalf(std::size_t dim, std::size_t heads, std::size_t window, std::size_t shift, Rng& rng);

    // x: [B, H, W, d]
    Var<T> forward(const Context<T>& ctx, const Var<T>& x) const;
    // Bias [heads, M², M²] gathered from the relative-position table.
    Var<T> position_bias(const Context<T>& ctx) const;
    void collect(ParamList<T>& out, const std::string& prefix);

    std::size_t shift() const { return shift_; }

    MultiHeadAttention<T> attn;
    Tensor<T> bias_table;  // [heads, (2M-1)²]
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

private:
    std::size_t window_, shift_;
    std::vector<std::size_t> rel_index_;
};

// Regular-window half followed by the shifted-window half (shift ⌊M/2⌋).
template <typename T>
class SwinBlock {
public:
    SwinBlock(std::size_t dim, std::size_t heads, std::size_t window, Rng& rng);

    // x: [H, W, d] or [B, H, W, d]
    Var<T> forward(const Context<T>& ctx, const Var<T>& x) const;
    // x: [B, C, H, W] feature map; tokens are pixels with d = C
    Var<T> forward_nchw(const Context<T>& ctx, const Var<T>& x) const;
    void collect(ParamList<T>& out, const std::string& prefix);

    SwinHalf<T> regular, shifted;
};

}  // namespace ymask
