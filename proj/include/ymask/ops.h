#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ymask/tape.h"
#include "ymask/tensor.h"

// Differentiable primitives. Every op records one node on the input's tape;
// inputs are never mutated. Image-shaped ops accept C×H×W or B×C×H×W.
namespace ymask {

enum class PoolMode { Avg, Max };
enum class PoolAxis { Spatial, Channel };
enum class Activation { Sigmoid, Silu, Relu };

// Broadcasting elementwise arithmetic (numpy rules, right-aligned).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& axes);
// Swaps the last two axes.
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
// Flat-index gather; output takes `out_shape` (numel must equal index count).
template <typename T> Var<T> gather(const Var<T>& a, std::vector<std::size_t> index, Shape out_shape);

// Zero padding on the last two axes.
template <typename T> Var<T> pad2d(const Var<T>& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right);
template <typename T> Var<T> upsample_nearest(const Var<T>& x, std::size_t factor);
// Stride/pad max pooling; padded cells never win.
template <typename T> Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding);
// Toroidal roll of an H×W×d (or B×H×W×d) map: out[i,j] = x[(i+dy) mod H, (j+dx) mod W].
template <typename T> Var<T> roll2d(const Var<T>& x, long dy, long dx);

// a[..., m, k] × b[..., k, n]; b may be rank 2 and is then shared across a's batch.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

// Fused softmax(q·kᵀ·scale + bias + mask)·v for q, k, v of shape [..., L, d].
// With q viewed as [N, heads, L, d] (heads = extent before L, 1 for rank 2),
// bias is [heads, L, L] (or [L, L]) and entry n uses mask[n mod M] of a
// constant [M, L, L] (or [L, L]) mask. Either may be null.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, T scale, const Var<T>* bias, const Tensor<T>* mask);

template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t padding);

// Sliding-window patches of a C×H×W map as a (K·K·C)×P matrix. Rows are
// channel-major (c, ky, kx); columns enumerate windows row-major.
template <typename T> Var<T> unfold(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding);

template <typename T> Var<T> pool_global(const Var<T>& x, PoolMode mode, PoolAxis axis);

// Reduces the columns of a D×P matrix in `groups` contiguous groups; the first
// P mod groups groups take one extra column.
template <typename T> Var<T> group_pool(const Var<T>& x, std::size_t groups, PoolMode mode);
std::vector<std::size_t> group_sizes(std::size_t columns, std::size_t groups);

template <typename T> Var<T> softmax(const Var<T>& x, std::size_t axis);

template <typename T> Var<T> pointwise(const Var<T>& x, Activation fn);
template <typename T> Var<T> sigmoid(const Var<T>& x) { return pointwise(x, Activation::Sigmoid); }
template <typename T> Var<T> silu(const Var<T>& x) { return pointwise(x, Activation::Silu); }
template <typename T> Var<T> relu(const Var<T>& x) { return pointwise(x, Activation::Relu); }

template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

template <typename T>
struct BatchStats {
    Tensor<T> mean;      // per channel
    Tensor<T> variance;  // biased, per channel
    std::size_t count = 0;
};

// Train-mode batch norm over (B, H, W) per channel. Batch statistics are
// returned through `stats` so the caller can update its running estimates.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps, BatchStats<T>* stats);
template <typename T>
Var<T> batch_norm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& running_mean,
                        const Tensor<T>& running_var, T eps);

// Binary cross-entropy on probabilities, clamped to [eps, 1-eps].
template <typename T> Var<T> bce(const Tensor<T>& target, const Var<T>& prob, T eps = T(1e-7));
// Same quantity evaluated from logits without clamping (stable log-sum-exp form).
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target);

// Plain kernels shared with tests and the convolution op.
namespace kernels {
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width, std::size_t kernel,
            std::size_t stride, std::size_t padding, std::size_t out_h, std::size_t out_w, T* cols);
}  // namespace kernels

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace ymask
