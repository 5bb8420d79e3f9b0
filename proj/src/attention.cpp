#include "ymask/attention.h"

#include <cmath>
#include <string>

namespace ymask {

template <typename T>
Var<T> scaled_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>* bias, const Tensor<T>* mask) {
    const T inv = T(1) / std::sqrt(static_cast<T>(q.shape().back()));
    return attention(q, k, v, inv, bias, mask);
}

template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d) {
    if (d % 2 != 0) throw ConfigError("positional encoding width must be even, got " + std::to_string(d));
    Tensor<T> pe(Shape{length, d});
    for (std::size_t i = 0; i < length; ++i) {
        for (std::size_t j = 0; j < d / 2; ++j) {
            const double angle = static_cast<double>(i) / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(d));
            pe.at(i, 2 * j) = static_cast<T>(std::sin(angle));
            pe.at(i, 2 * j + 1) = static_cast<T>(std::cos(angle));
        }
    }
    return pe;
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t d_model, std::size_t n_heads, Rng& rng)
    : d_model_(d_model), n_heads_(n_heads) {
    if (n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("attention heads (" + std::to_string(n_heads) + ") must divide model width " +
                          std::to_string(d_model));
    }
    wq = fan_in_uniform<T>({d_model, d_model}, d_model, rng);
    wk = fan_in_uniform<T>({d_model, d_model}, d_model, rng);
    wv = fan_in_uniform<T>({d_model, d_model}, d_model, rng);
    wo = fan_in_uniform<T>({d_model, d_model}, d_model, rng);
}

template <typename T>
Var<T> MultiHeadAttention<T>::forward(const Context<T>& ctx, const Var<T>& x, const Var<T>* bias,
                                      const Tensor<T>* mask) const {
    const bool unbatched = x.rank() == 2;
    if ((x.rank() != 2 && x.rank() != 3) || x.shape().back() != d_model_) {
        throw DimensionError("attention: input " + shape_str(x.shape()) + " for model width " + std::to_string(d_model_));
    }
    const std::size_t b = unbatched ? 1 : x.dim(0);
    const std::size_t len = x.dim(x.rank() - 2);
    const std::size_t dk = d_model_ / n_heads_;
    auto heads = [&](const Tensor<T>& w) {
        auto p = matmul(x, ctx.param(w));
        return permute(reshape(p, {b, len, n_heads_, dk}), {0, 2, 1, 3});
    };
    auto out = scaled_attention(heads(wq), heads(wk), heads(wv), bias, mask);
    out = reshape(permute(out, {0, 2, 1, 3}), {b, len, d_model_});
    out = matmul(out, ctx.param(wo));
    return unbatched ? reshape(out, {len, d_model_}) : out;
}

template <typename T>
void MultiHeadAttention<T>::collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "wq"), &wq, ParamKind::Weight});
    out.push_back({join_name(prefix, "wk"), &wk, ParamKind::Weight});
    out.push_back({join_name(prefix, "wv"), &wv, ParamKind::Weight});
    out.push_back({join_name(prefix, "wo"), &wo, ParamKind::Weight});
}

template <typename T>
EncoderBlock<T>::EncoderBlock(std::size_t d_model, std::size_t n_heads, Rng& rng)
    : mha(d_model, n_heads, rng),
      ln1_g(Shape{d_model}, T(1)),
      ln1_b(Shape{d_model}),
      ln2_g(Shape{d_model}, T(1)),
      ln2_b(Shape{d_model}) {
    const std::size_t hidden = 4 * d_model;
    ff1_w = fan_in_uniform<T>({d_model, hidden}, d_model, rng);
    ff1_b = fan_in_uniform<T>({hidden}, d_model, rng);
    ff2_w = fan_in_uniform<T>({hidden, d_model}, hidden, rng);
    ff2_b = fan_in_uniform<T>({d_model}, hidden, rng);
}

template <typename T>
Var<T> EncoderBlock<T>::forward(const Context<T>& ctx, const Var<T>& x) const {
    const T eps = static_cast<T>(kLayerNormEps);
    auto y = layer_norm(add(x, mha.forward(ctx, x)), ctx.param(ln1_g), ctx.param(ln1_b), eps);
    auto h = silu(add(matmul(y, ctx.param(ff1_w)), ctx.param(ff1_b)));
    auto f = add(matmul(h, ctx.param(ff2_w)), ctx.param(ff2_b));
    return layer_norm(add(y, f), ctx.param(ln2_g), ctx.param(ln2_b), eps);
}

template <typename T>
void EncoderBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
    mha.collect(out, join_name(prefix, "mha"));
    out.push_back({join_name(prefix, "ln1_g"), &ln1_g, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln1_b"), &ln1_b, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln2_g"), &ln2_g, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ln2_b"), &ln2_b, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ff1_w"), &ff1_w, ParamKind::Weight});
    out.push_back({join_name(prefix, "ff1_b"), &ff1_b, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "ff2_w"), &ff2_w, ParamKind::Weight});
    out.push_back({join_name(prefix, "ff2_b"), &ff2_b, ParamKind::NoDecay});
}

#define YMASK_INSTANTIATE_ATTENTION(T)                                                                    \
    template Var<T> scaled_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>*,          \
                                     const Tensor<T>*);                                                   \
    template Tensor<T> positional_encoding(std::size_t, std::size_t);                                     \
    template class MultiHeadAttention<T>;                                                                 \
    template class EncoderBlock<T>;

YMASK_INSTANTIATE_ATTENTION(float)
YMASK_INSTANTIATE_ATTENTION(double)

}  // namespace ymask
