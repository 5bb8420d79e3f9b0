#include "ymask/cbam.h"

#include <string>

namespace ymask {

template <typename T>
ChannelAttention<T>::ChannelAttention(std::size_t channels, std::size_t reduction, Rng& rng) : channels_(channels) {
    if (reduction == 0 || channels % reduction != 0) {
        throw ConfigError("channel attention reduction " + std::to_string(reduction) + " must divide " +
                          std::to_string(channels) + " channels");
    }
    const std::size_t hidden = channels / reduction;
    w0 = fan_in_uniform<T>({channels, hidden}, channels, rng);
    w1 = fan_in_uniform<T>({hidden, channels}, hidden, rng);
}

template <typename T>
Var<T> ChannelAttention<T>::forward(const Context<T>& ctx, const Var<T>& f) const {
    const bool batched = f.rank() == 4;
    if ((f.rank() != 3 && !batched) || f.dim(batched ? 1 : 0) != channels_) {
        throw DimensionError("channel attention: input " + shape_str(f.shape()) + " for " + std::to_string(channels_) +
                             " channels");
    }
    const std::size_t b = batched ? f.dim(0) : 1;
    const auto w0v = ctx.param(w0);
    const auto w1v = ctx.param(w1);
    auto mlp = [&](const Var<T>& pooled) {
        return matmul(relu(matmul(reshape(pooled, {b, channels_}), w0v)), w1v);
    };
    auto logits = add(mlp(pool_global(f, PoolMode::Avg, PoolAxis::Spatial)),
                      mlp(pool_global(f, PoolMode::Max, PoolAxis::Spatial)));
    return batched ? reshape(sigmoid(logits), {b, channels_, 1, 1}) : reshape(sigmoid(logits), {channels_, 1, 1});
}

template <typename T>
void ChannelAttention<T>::collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "w0"), &w0, ParamKind::Weight});
    out.push_back({join_name(prefix, "w1"), &w1, ParamKind::Weight});
}

template <typename T>
SpatialAttention<T>::SpatialAttention(Rng& rng)
    : k_avg(fan_in_uniform<T>({1, 1, 7, 7}, 49, rng)), k_max(fan_in_uniform<T>({1, 1, 7, 7}, 49, rng)) {}

template <typename T>
Var<T> SpatialAttention<T>::forward(const Context<T>& ctx, const Var<T>& f) const {
    auto avg = pool_global(f, PoolMode::Avg, PoolAxis::Channel);
    auto mx = pool_global(f, PoolMode::Max, PoolAxis::Channel);
    return sigmoid(add(conv2d(avg, ctx.param(k_avg), 1, 3), conv2d(mx, ctx.param(k_max), 1, 3)));
}

template <typename T>
void SpatialAttention<T>::collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "k_avg"), &k_avg, ParamKind::Weight});
    out.push_back({join_name(prefix, "k_max"), &k_max, ParamKind::Weight});
}

template <typename T>
ICbam<T>::ICbam(std::size_t channels, std::size_t reduction, Rng& rng) : cam(channels, reduction, rng), sam(rng) {}

template <typename T>
Var<T> ICbam<T>::forward(const Context<T>& ctx, const Var<T>& f) const {
    auto gated = mul(f, cam.forward(ctx, f));
    return mul(gated, sam.forward(ctx, gated));
}

template <typename T>
void ICbam<T>::collect(ParamList<T>& out, const std::string& prefix) {
    cam.collect(out, join_name(prefix, "cam"));
    sam.collect(out, join_name(prefix, "sam"));
}

template class ChannelAttention<float>;
template class ChannelAttention<double>;
template class SpatialAttention<float>;
template class SpatialAttention<double>;
template class ICbam<float>;
template class ICbam<double>;

}  // namespace ymask
