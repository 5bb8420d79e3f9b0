#include "ymask/swin.h"

#include <string>

namespace ymask {

namespace {

void check_windows(std::size_t height, std::size_t width, std::size_t window) {
    if (window == 0 || height % window != 0 || width % window != 0) {
        throw ConfigError("window size " + std::to_string(window) + " must divide the feature map " +
                          std::to_string(height) + "×" + std::to_string(width));
    }
}

}  // namespace

template <typename T>
Var<T> window_partition(const Var<T>& x, std::size_t window) {
    if (x.rank() != 3 && x.rank() != 4) throw DimensionError("window_partition: expected H×W×d, got " + shape_str(x.shape()));
    const std::size_t r = x.rank();
    const std::size_t b = r == 4 ? x.dim(0) : 1;
    const std::size_t h = x.dim(r - 3), w = x.dim(r - 2), d = x.dim(r - 1);
    check_windows(h, w, window);
    auto v = reshape(x, {b, h / window, window, w / window, window, d});
    v = permute(v, {0, 1, 3, 2, 4, 5});
    return reshape(v, {b * (h / window) * (w / window), window * window, d});
}

template <typename T>
Var<T> window_merge(const Var<T>& windows, std::size_t height, std::size_t width, std::size_t window) {
    check_windows(height, width, window);
    const std::size_t per_image = (height / window) * (width / window);
    if (windows.rank() != 3 || windows.dim(1) != window * window || windows.dim(0) % per_image != 0) {
        throw DimensionError("window_merge: " + shape_str(windows.shape()) + " does not tile " + std::to_string(height) +
                             "×" + std::to_string(width));
    }
    const std::size_t b = windows.dim(0) / per_image, d = windows.dim(2);
    auto v = reshape(windows, {b, height / window, width / window, window, window, d});
    v = permute(v, {0, 1, 3, 2, 4, 5});
    return b == 1 ? reshape(v, {height, width, d}) : reshape(v, {b, height, width, d});
}

template <typename T>
Var<T> cyclic_shift(const Var<T>& x, std::size_t shift) {
    return roll2d(x, static_cast<long>(shift), static_cast<long>(shift));
}

template <typename T>
Var<T> reverse_cyclic_shift(const Var<T>& x, std::size_t shift) {
    return roll2d(x, -static_cast<long>(shift), -static_cast<long>(shift));
}

template <typename T>
Tensor<T> build_shift_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift) {
    check_windows(height, width, window);
    if (shift == 0 || shift >= window) {
        throw ConfigError("shift mask needs 0 < shift < window, got shift " + std::to_string(shift));
    }
    // bands [0, n-M), [n-M, n-s), [n-s, n) along each axis of the shifted map
    auto band = [&](std::size_t i, std::size_t n) -> std::size_t {
        if (n == window) return 0;
        if (i < n - window) return 0;
        return i < n - shift ? 1 : 2;
    };
    const std::size_t nh = height / window, nw = width / window, len = window * window;
    Tensor<T> mask(Shape{nh * nw, len, len});
    std::vector<std::size_t> region(len);
    for (std::size_t wy = 0; wy < nh; ++wy) {
        for (std::size_t wx = 0; wx < nw; ++wx) {
            for (std::size_t p = 0; p < len; ++p) {
                const std::size_t i = wy * window + p / window, j = wx * window + p % window;
                region[p] = band(i, height) * 3 + band(j, width);
            }
            const std::size_t wi = wy * nw + wx;
            for (std::size_t p = 0; p < len; ++p)
                for (std::size_t q = 0; q < len; ++q) mask.at(wi, p, q) = region[p] == region[q] ? T(0) : T(-100);
        }
    }
    return mask;
}

std::vector<std::size_t> relative_position_index(std::size_t window) {
    const std::size_t len = window * window, span = 2 * window - 1;
    std::vector<std::size_t> index(len * len);
    for (std::size_t p = 0; p < len; ++p) {
        for (std::size_t q = 0; q < len; ++q) {
            const std::size_t dy = p / window + window - 1 - q / window;
            const std::size_t dx = p % window + window - 1 - q % window;
            index[p * len + q] = dy * span + dx;
        }
    }
    return index;
}

template <typename T>
SwinHalf<T>::SwinHalf(std::size_t dim, std::size_t heads, std::size_t window, std::size_t shift, Rng& rng)
    : attn(dim, heads, rng),
      ln1_g(Shape{dim}, T(1)),
      ln1_b(Shape{dim}),
      ln2_g(Shape{dim}, T(1)),
      ln2_b(Shape{dim}),
      window_(window),
      shift_(shift),
      rel_index_(relative_position_index(window)) {
    if (shift >= window) throw ConfigError("swin shift must be smaller than the window");
    const std::size_t span = 2 * window - 1;
    bias_table = Tensor<T>(Shape{heads, span * span});
    for (auto& v : bias_table.data()) v = static_cast<T>(rng.truncated_normal(0.02));
    fc1_w = fan_in_uniform<T>({dim, 4 * dim}, dim, rng);
    fc1_b = fan_in_uniform<T>({4 * dim}, dim, rng);
    fc2_w = fan_in_uniform<T>({4 * dim, dim}, 4 * dim, rng);
    fc2_b = fan_in_uniform<T>({dim}, 4 * dim, rng);
}

template <typename T>
Var<T> SwinHalf<T>::position_bias(const Context<T>& ctx) const {
    const std::size_t heads = attn.n_heads(), len = window_ * window_, entries = bias_table.dim(1);
    std::vector<std::size_t> index(heads * len * len);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t p = 0; p < len * len; ++p) index[h * len * len + p] = h * entries + rel_index_[p];
    return gather(ctx.param(bias_table), std::move(index), {heads, len, len});
}

template <typename T>
Var<T> SwinHalf<T>::forward(const Context<T>& ctx, const Var<T>& x) const {
    if (x.rank() != 4) throw DimensionError("swin: expected B×H×W×d, got " + shape_str(x.shape()));
    const std::size_t h = x.dim(1), w = x.dim(2);
    check_windows(h, w, window_);
    const T eps = static_cast<T>(EncoderBlock<T>::kLayerNormEps);

    auto xn = layer_norm(x, ctx.param(ln1_g), ctx.param(ln1_b), eps);
    if (shift_) xn = cyclic_shift(xn, shift_);
    auto windows = window_partition(xn, window_);
    const auto bias = position_bias(ctx);
    Var<T> out;
    if (shift_) {
        const auto mask = build_shift_mask<T>(h, w, window_, shift_);
        out = attn.forward(ctx, windows, &bias, &mask);
    } else {
        out = attn.forward(ctx, windows, &bias);
    }
    out = reshape(window_merge(out, h, w, window_), x.shape());
    if (shift_) out = reverse_cyclic_shift(out, shift_);
    auto y = add(x, out);

    auto yn = layer_norm(y, ctx.param(ln2_g), ctx.param(ln2_b), eps);
    auto hidden = silu(add(matmul(yn, ctx.param(fc1_w)), ctx.param(fc1_b)));
    return add(y, add(matmul(hidden, ctx.param(fc2_w)), ctx.param(fc2_b)));
}

template <typename T>
void SwinHalf<T>::collect(ParamList<T>& out, const std::string& prefix) {
    attn.collect(out, join_name(prefix, "attn"));
    out.push_back({join_name(prefix, "bias_table"), &bias_table, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln1_g"), &ln1_g, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln1_b"), &ln1_b, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln2_g"), &ln2_g, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln2_b"), &ln2_b, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "fc1_w"), &fc1_w, ParamKind::Weight});
    out.push_back({join_name(prefix, "fc1_b"), &fc1_b, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "fc2_w"), &fc2_w, ParamKind::Weight});
    out.push_back({join_name(prefix, "fc2_b"), &fc2_b, ParamKind::NoDecay});
}

template <typename T>
SwinBlock<T>::SwinBlock(std::size_t dim, std::size_t heads, std::size_t window, Rng& rng)
    : regular(dim, heads, window, 0, rng), shifted(dim, heads, window, window / 2, rng) {}

template <typename T>
Var<T> SwinBlock<T>::forward(const Context<T>& ctx, const Var<T>& x) const {
    if (x.rank() == 3) {
        auto y = forward(ctx, reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}));
        return reshape(y, x.shape());
    }
    return shifted.forward(ctx, regular.forward(ctx, x));
}

template <typename T>
Var<T> SwinBlock<T>::forward_nchw(const Context<T>& ctx, const Var<T>& x) const {
    if (x.rank() != 4) throw DimensionError("swin: expected B×C×H×W, got " + shape_str(x.shape()));
    return permute(forward(ctx, permute(x, {0, 2, 3, 1})), {0, 3, 1, 2});
}

template <typename T>
void SwinBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
    regular.collect(out, join_name(prefix, "wmsa"));
    shifted.collect(out, join_name(prefix, "swmsa"));
}

#define YMASK_INSTANTIATE_SWIN(T)                                                                  \
    template Var<T> window_partition(const Var<T>&, std::size_t);                                  \
    template Var<T> window_merge(const Var<T>&, std::size_t, std::size_t, std::size_t);            \
    template Var<T> cyclic_shift(const Var<T>&, std::size_t);                                      \
    template Var<T> reverse_cyclic_shift(const Var<T>&, std::size_t);                              \
    template Tensor<T> build_shift_mask(std::size_t, std::size_t, std::size_t, std::size_t);       \
    template class SwinHalf<T>;                                                                    \
    template class SwinBlock<T>;

YMASK_INSTANTIATE_SWIN(float)
YMASK_INSTANTIATE_SWIN(double)

}  // namespace ymask
