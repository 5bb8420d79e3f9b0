#include "ymask/msconv.h"

#include <string>
#include <vector>

namespace ymask {

template <typename T>
MsConv<T>::MsConv(const MsConvConfig& cfg, Rng& rng)
    : encoder(cfg.out_channels, cfg.heads, rng),
      cfg_(cfg),
      pe_(positional_encoding<T>(cfg.kernel * cfg.kernel * cfg.in_channels, cfg.out_channels)) {
    if (cfg.kernel == 0 || cfg.stride == 0) throw ConfigError("msconv: kernel and stride must be >= 1");
}

template <typename T>
Var<T> MsConv<T>::generate_kernels(const Context<T>& ctx, const Var<T>& x) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[0] != cfg_.in_channels) {
        throw DimensionError("msconv: expected " + std::to_string(cfg_.in_channels) + "×H×W input, got " + shape_str(s));
    }
    const std::size_t k = cfg_.kernel, n = cfg_.out_channels;
    const std::size_t pad_h = (k - s[1] % k) % k, pad_w = (k - s[2] % k) % k;
    const Var<T> padded = (pad_h || pad_w) ? pad2d(x, 0, pad_h, 0, pad_w) : x;
    auto cols = unfold(padded, k, k, 0);
    auto fused = add(group_pool(cols, n, PoolMode::Max), group_pool(cols, n, PoolMode::Avg));
    auto tokens = add(fused, ctx.tape.constant(pe_));
    auto encoded = encoder.forward(ctx, tokens);
    return reshape(transpose(encoded), {n, cfg_.in_channels, k, k});
}

template <typename T>
Var<T> MsConv<T>::forward(const Context<T>& ctx, const Var<T>& x) const {
    if (x.rank() == 3) return conv2d(x, generate_kernels(ctx, x), cfg_.stride, cfg_.padding);
    if (x.rank() != 4) throw DimensionError("msconv: expected C×H×W or B×C×H×W input, got " + shape_str(x.shape()));
    const Shape& s = x.shape();
    std::vector<Var<T>> outs;
    outs.reserve(s[0]);
    for (std::size_t b = 0; b < s[0]; ++b) {
        auto img = reshape(slice(x, 0, b, b + 1), {s[1], s[2], s[3]});
        auto y = conv2d(img, generate_kernels(ctx, img), cfg_.stride, cfg_.padding);
        outs.push_back(reshape(y, {1, y.dim(0), y.dim(1), y.dim(2)}));
    }
    return s[0] == 1 ? outs[0] : concat<T>(outs, 0);
}

template <typename T>
void MsConv<T>::collect(ParamList<T>& out, const std::string& prefix) {
    encoder.collect(out, join_name(prefix, "encoder"));
}

template class MsConv<float>;
template class MsConv<double>;

}  // namespace ymask
