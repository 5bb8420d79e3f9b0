#include "ymask/model.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ymask {

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Stem: return "Conv6x6";
        case LayerKind::MsConvStem: return "MSConv";
        case LayerKind::Conv: return "Conv";
        case LayerKind::C3: return "C3";
        case LayerKind::Swin: return "SwinBlock";
        case LayerKind::Sppf: return "SPPF";
        case LayerKind::ICbam: return "ICBAM";
        case LayerKind::Identity: return "Identity";
        case LayerKind::Upsample: return "Upsample";
        case LayerKind::Concat: return "Concat";
        case LayerKind::Detect: return "Detect";
    }
    return "?";
}

ModelGraph build_graph(const ModelOptions& o) {
    if (o.n_classes == 0) throw ConfigError("model needs at least one class");
    if (o.input_size % 32 != 0) throw ConfigError("input size must be a multiple of 32, got " + std::to_string(o.input_size));
    const bool toy = o.scale == ModelScale::Toy;
    const std::size_t div = toy ? 8 : 1;
    const std::size_t w0 = 64 / div, w1 = 128 / div, w2 = 256 / div, w3 = 512 / div, w4 = 1024 / div;
    auto depth = [&](std::size_t n) { return toy ? std::size_t{1} : n; };

    ModelGraph g;
    g.options = o;
    auto add = [&](LayerKind kind, std::vector<std::size_t> from, std::size_t out, std::size_t kernel = 1,
                   std::size_t stride = 1) -> LayerSpec& {
        LayerSpec s;
        s.index = g.layers.size();
        s.kind = kind;
        s.kernel = kernel;
        s.stride = stride;
        s.out_channels = out;
        if (from.empty()) {
            s.in_channels = 3;
            s.downsample = stride;
        } else {
            for (auto f : from) s.in_channels += g.layers.at(f).out_channels;
            s.downsample = g.layers.at(from[0]).downsample * stride;
        }
        s.from = std::move(from);
        g.layers.push_back(s);
        return g.layers.back();
    };
    auto prev = [&] { return g.layers.size() - 1; };
    auto c3 = [&](std::vector<std::size_t> from, std::size_t out, std::size_t n, bool shortcut) {
        auto& s = add(LayerKind::C3, std::move(from), out);
        s.depth = n;
        s.shortcut = shortcut;
    };
    auto upsample = [&](std::size_t from) {
        auto& s = add(LayerKind::Upsample, {from}, g.layers.at(from).out_channels);
        s.downsample /= 2;
    };
    auto gate = [&](std::size_t from) {
        add(o.icbam ? LayerKind::ICbam : LayerKind::Identity, {from}, g.layers.at(from).out_channels);
    };
    auto concat = [&](std::vector<std::size_t> from, std::vector<std::size_t> fusion, std::size_t out) {
        auto& s = add(LayerKind::Concat, std::move(from), out);
        s.fusion_from = std::move(fusion);
        if (s.from.size() == 2) s.out_channels = s.in_channels;
    };

    // backbone
    add(o.msconv ? LayerKind::MsConvStem : LayerKind::Stem, {}, w0, 6, 2);        // 0  /2
    add(LayerKind::Conv, {prev()}, w1, 3, 2);                                      // 1  /4
    if (o.swin) {
        add(LayerKind::Swin, {prev()}, w1);                                        // 2
    } else {
        c3({prev()}, w1, depth(3), true);
    }
    add(LayerKind::Conv, {prev()}, w2, 3, 2);                                      // 3  /8
    c3({prev()}, w2, depth(6), true);                                              // 4  P3
    add(LayerKind::Conv, {prev()}, w3, 3, 2);                                      // 5  /16
    c3({prev()}, w3, depth(9), true);                                              // 6  P4
    add(LayerKind::Conv, {prev()}, w4, 3, 2);                                      // 7  /32
    c3({prev()}, w4, depth(3), true);                                              // 8
    add(LayerKind::Sppf, {prev()}, w4, 5);                                         // 9  P5

    // attention bridges and top-down path
    gate(9);                                                                       // 10
    add(LayerKind::Conv, {10}, w3, 1, 1);                                          // 11
    gate(6);                                                                       // 12
    upsample(11);                                                                  // 13 /16
    concat({13, 12}, {13}, 0);                                                     // 14
    c3({prev()}, w3, depth(3), false);                                             // 15
    add(LayerKind::Conv, {prev()}, w2, 1, 1);                                      // 16
    gate(4);                                                                       // 17
    upsample(16);                                                                  // 18 /8
    concat({18, 17}, {18}, 0);                                                     // 19
    c3({prev()}, w2, depth(3), false);                                             // 20 P3 out

    // bottom-up path; the extra same-resolution edges join layers 22 and 25
    add(LayerKind::Conv, {prev()}, w2, 3, 2);                                      // 21 /16
    if (o.fusion) {
        concat({21, 16, 13}, {16, 13}, 2 * w2);                                    // 22
    } else {
        concat({21, 16}, {16}, 0);
    }
    c3({prev()}, w3, depth(3), false);                                             // 23 P4 out
    add(LayerKind::Conv, {prev()}, w3, 3, 2);                                      // 24 /32
    if (o.fusion) {
        concat({24, 11, 10}, {11, 10}, 2 * w3);                                    // 25
    } else {
        concat({24, 11}, {11}, 0);
    }
    c3({prev()}, w4, depth(3), false);                                             // 26 P5 out

    auto& det = add(LayerKind::Detect, {20, 23, 26}, 3 * (5 + o.n_classes));      // 27
    det.downsample = 8;
    return g;
}

std::vector<std::pair<std::size_t, std::size_t>> ModelGraph::fusion_edges() const {
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (const auto& l : layers)
        for (auto f : l.fusion_from) edges.emplace_back(f, l.index);
    std::sort(edges.begin(), edges.end());
    return edges;
}

std::string ModelGraph::dump() const {
    std::ostringstream os;
    const std::size_t s = options.input_size;
    os << "# input 3x" << s << "x" << s << ", classes " << options.n_classes << "\n";
    os << "index\tkind\tfrom\tshape\n";
    for (const auto& l : layers) {
        os << l.index << "\t" << layer_kind_name(l.kind) << "\t";
        if (l.from.empty()) os << "input";
        for (std::size_t i = 0; i < l.from.size(); ++i) os << (i ? "," : "") << l.from[i];
        os << "\t";
        if (l.kind == LayerKind::Detect) {
            for (std::size_t k = 0; k < kStrides.size(); ++k) {
                const std::size_t grid = s / kStrides[k];
                os << (k ? " " : "") << l.out_channels << "x" << grid << "x" << grid;
            }
        } else {
            os << l.out_channels << "x" << s / l.downsample << "x" << s / l.downsample;
        }
        os << "\n";
    }
    for (const auto& [a, b] : fusion_edges()) os << "fusion\t" << a << "->" << b << "\n";
    return os.str();
}

AnchorSet default_anchors(std::size_t input_size) {
    // YOLOv5 defaults for 640-pixel input
    const AnchorSet base{{{{{10, 13}, {16, 30}, {33, 23}}},
                          {{{30, 61}, {62, 45}, {59, 119}}},
                          {{{116, 90}, {156, 198}, {373, 326}}}}};
    const double f = static_cast<double>(input_size) / 640.0;
    AnchorSet out = base;
    for (auto& scale : out)
        for (auto& a : scale) a = {a.first * f, a.second * f};
    return out;
}

// ---- blocks ---------------------------------------------------------------

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels)
    : gamma(Shape{channels}, T(1)), beta(Shape{channels}), running_mean(Shape{channels}), running_var(Shape{channels}, T(1)) {}

template <typename T>
Var<T> BatchNorm<T>::forward(const Context<T>& ctx, const Var<T>& x) {
    const T eps = static_cast<T>(kEps);
    if (!ctx.train) {
        return batch_norm_infer(x, ctx.param(gamma), ctx.param(beta), running_mean, running_var, eps);
    }
    BatchStats<T> stats;
    auto y = batch_norm_train(x, ctx.param(gamma), ctx.param(beta), eps, &stats);
    const T m = static_cast<T>(kMomentum);
    const T unbias = static_cast<T>(stats.count) / static_cast<T>(stats.count - 1);
    for (std::size_t c = 0; c < gamma.numel(); ++c) {
        running_mean[c] = (T(1) - m) * running_mean[c] + m * stats.mean[c];
        running_var[c] = (T(1) - m) * running_var[c] + m * stats.variance[c] * unbias;
    }
    return y;
}

template <typename T>
void BatchNorm<T>::collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "gamma"), &gamma, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "beta"), &beta, ParamKind::NoDecay});
    out.push_back({join_name(prefix, "running_mean"), &running_mean, ParamKind::Buffer});
    out.push_back({join_name(prefix, "running_var"), &running_var, ParamKind::Buffer});
}

template <typename T>
ConvBnAct<T>::ConvBnAct(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, std::size_t padding,
                        Rng& rng)
    : weight(fan_in_uniform<T>({c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng)),
      bn(c_out),
      stride_(stride),
      padding_(padding) {}

template <typename T>
Var<T> ConvBnAct<T>::forward(const Context<T>& ctx, const Var<T>& x) {
    return silu(bn.forward(ctx, conv2d(x, ctx.param(weight), stride_, padding_)));
}

template <typename T>
void ConvBnAct<T>::collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "weight"), &weight, ParamKind::Weight});
    bn.collect(out, join_name(prefix, "bn"));
}

template <typename T>
C3Block<T>::C3Block(std::size_t c_in, std::size_t c_out, std::size_t depth, bool shortcut, Rng& rng) : shortcut_(shortcut) {
    if (c_out % 2 != 0) throw ConfigError("C3 hidden width would be odd (output width " + std::to_string(c_out) + ")");
    const std::size_t hidden = c_out / 2;
    cv1_ = std::make_unique<ConvBnAct<T>>(c_in, hidden, 1, 1, rng);
    cv2_ = std::make_unique<ConvBnAct<T>>(c_in, hidden, 1, 1, rng);
    for (std::size_t i = 0; i < depth; ++i)
        blocks_.push_back({ConvBnAct<T>(hidden, hidden, 1, 1, rng), ConvBnAct<T>(hidden, hidden, 3, 1, rng)});
    cv3_ = std::make_unique<ConvBnAct<T>>(2 * hidden, c_out, 1, 1, rng);
}

template <typename T>
Var<T> C3Block<T>::forward(const Context<T>& ctx, const Var<T>& x) {
    auto a = cv1_->forward(ctx, x);
    for (auto& b : blocks_) {
        auto y = b.cv2.forward(ctx, b.cv1.forward(ctx, a));
        a = shortcut_ ? add(a, y) : y;
    }
    const std::vector<Var<T>> parts{a, cv2_->forward(ctx, x)};
    return cv3_->forward(ctx, concat<T>(parts, x.rank() - 3));
}

template <typename T>
void C3Block<T>::collect(ParamList<T>& out, const std::string& prefix) {
    cv1_->collect(out, join_name(prefix, "cv1"));
    cv2_->collect(out, join_name(prefix, "cv2"));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].cv1.collect(out, join_name(prefix, "m" + std::to_string(i) + ".cv1"));
        blocks_[i].cv2.collect(out, join_name(prefix, "m" + std::to_string(i) + ".cv2"));
    }
    cv3_->collect(out, join_name(prefix, "cv3"));
}

template <typename T>
SppfBlock<T>::SppfBlock(std::size_t c_in, std::size_t c_out, std::size_t pool, Rng& rng)
    : cv1_(c_in, c_in / 2, 1, 1, rng), cv2_(4 * (c_in / 2), c_out, 1, 1, rng), pool_(pool) {
    if (pool % 2 == 0) throw ConfigError("SPPF pool size must be odd");
}

template <typename T>
Var<T> SppfBlock<T>::forward(const Context<T>& ctx, const Var<T>& x) {
    auto a = cv1_.forward(ctx, x);
    auto y1 = max_pool2d(a, pool_, 1, pool_ / 2);
    auto y2 = max_pool2d(y1, pool_, 1, pool_ / 2);
    auto y3 = max_pool2d(y2, pool_, 1, pool_ / 2);
    const std::vector<Var<T>> parts{a, y1, y2, y3};
    return cv2_.forward(ctx, concat<T>(parts, x.rank() - 3));
}

template <typename T>
void SppfBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
    cv1_.collect(out, join_name(prefix, "cv1"));
    cv2_.collect(out, join_name(prefix, "cv2"));
}

// ---- runtime layers -------------------------------------------------------

namespace {

template <typename T>
class ConvLayer : public Layer<T> {
public:
    ConvLayer(const LayerSpec& s, std::size_t padding, Rng& rng)
        : conv_(s.in_channels, s.out_channels, s.kernel, s.stride, padding, rng) {}
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override { return conv_.forward(ctx, in[0]); }
    void collect(ParamList<T>& out, const std::string& prefix) override { conv_.collect(out, prefix); }

private:
    ConvBnAct<T> conv_;
};

// generated-kernel convolution followed by batch norm and SiLU, as the plain stem
template <typename T>
class MsConvStemLayer : public Layer<T> {
public:
    MsConvStemLayer(const LayerSpec& s, std::size_t heads, Rng& rng)
        : conv_(MsConvConfig{s.in_channels, s.out_channels, s.kernel, s.stride, 2, heads}, rng), bn_(s.out_channels) {}
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override {
        return silu(bn_.forward(ctx, conv_.forward(ctx, in[0])));
    }
    void collect(ParamList<T>& out, const std::string& prefix) override {
        conv_.collect(out, join_name(prefix, "msconv"));
        bn_.collect(out, join_name(prefix, "bn"));
    }

private:
    MsConv<T> conv_;
    BatchNorm<T> bn_;
};

template <typename T>
class C3Layer : public Layer<T> {
public:
    C3Layer(const LayerSpec& s, Rng& rng) : block_(s.in_channels, s.out_channels, s.depth, s.shortcut, rng) {}
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override { return block_.forward(ctx, in[0]); }
    void collect(ParamList<T>& out, const std::string& prefix) override { block_.collect(out, prefix); }

private:
    C3Block<T> block_;
};

template <typename T>
class SwinLayer : public Layer<T> {
public:
    SwinLayer(const LayerSpec& s, std::size_t heads, std::size_t window, Rng& rng) : block_(s.out_channels, heads, window, rng) {}
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override {
        return block_.forward_nchw(ctx, in[0]);
    }
    void collect(ParamList<T>& out, const std::string& prefix) override { block_.collect(out, prefix); }

private:
    SwinBlock<T> block_;
};

template <typename T>
class SppfLayer : public Layer<T> {
public:
    SppfLayer(const LayerSpec& s, Rng& rng) : block_(s.in_channels, s.out_channels, s.kernel, rng) {}
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override { return block_.forward(ctx, in[0]); }
    void collect(ParamList<T>& out, const std::string& prefix) override { block_.collect(out, prefix); }

private:
    SppfBlock<T> block_;
};

template <typename T>
class ICbamLayer : public Layer<T> {
public:
    ICbamLayer(const LayerSpec& s, std::size_t reduction, Rng& rng) : block_(s.out_channels, reduction, rng) {}
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override { return block_.forward(ctx, in[0]); }
    void collect(ParamList<T>& out, const std::string& prefix) override { block_.collect(out, prefix); }

private:
    ICbam<T> block_;
};

template <typename T>
class IdentityLayer : public Layer<T> {
public:
    Var<T> forward(const Context<T>&, const std::vector<Var<T>>& in) override { return in[0]; }
};

template <typename T>
class UpsampleLayer : public Layer<T> {
public:
    Var<T> forward(const Context<T>&, const std::vector<Var<T>>& in) override { return upsample_nearest(in[0], 2); }
};

// Channel concat; with more than two inputs a 1×1 conv restores the width.
template <typename T>
class ConcatLayer : public Layer<T> {
public:
    ConcatLayer(const LayerSpec& s, Rng& rng) {
        if (s.from.size() > 2) fuse_ = std::make_unique<ConvBnAct<T>>(s.in_channels, s.out_channels, 1, 1, rng);
    }
    Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& in) override {
        auto y = concat<T>(in, 1);
        return fuse_ ? fuse_->forward(ctx, y) : y;
    }
    void collect(ParamList<T>& out, const std::string& prefix) override {
        if (fuse_) fuse_->collect(out, join_name(prefix, "fuse"));
    }

private:
    std::unique_ptr<ConvBnAct<T>> fuse_;
};

}  // namespace

template <typename T>
Network<T>::Network(const ModelOptions& options, std::uint64_t seed)
    : graph_(build_graph(options)), anchors_(default_anchors(options.input_size)) {
    Rng rng(seed);
    const auto& o = graph_.options;
    for (const auto& s : graph_.layers) {
        switch (s.kind) {
            case LayerKind::Stem: layers_.push_back(std::make_unique<ConvLayer<T>>(s, 2, rng)); break;
            case LayerKind::MsConvStem: layers_.push_back(std::make_unique<MsConvStemLayer<T>>(s, o.msconv_heads, rng)); break;
            case LayerKind::Conv: layers_.push_back(std::make_unique<ConvLayer<T>>(s, s.kernel / 2, rng)); break;
            case LayerKind::C3: layers_.push_back(std::make_unique<C3Layer<T>>(s, rng)); break;
            case LayerKind::Swin:
                layers_.push_back(std::make_unique<SwinLayer<T>>(s, o.swin_heads, o.swin_window, rng));
                break;
            case LayerKind::Sppf: layers_.push_back(std::make_unique<SppfLayer<T>>(s, rng)); break;
            case LayerKind::ICbam: layers_.push_back(std::make_unique<ICbamLayer<T>>(s, o.cbam_reduction, rng)); break;
            case LayerKind::Identity: layers_.push_back(std::make_unique<IdentityLayer<T>>()); break;
            case LayerKind::Upsample: layers_.push_back(std::make_unique<UpsampleLayer<T>>()); break;
            case LayerKind::Concat: layers_.push_back(std::make_unique<ConcatLayer<T>>(s, rng)); break;
            case LayerKind::Detect: {
                const std::size_t no = outputs_per_anchor(), nc = o.n_classes;
                for (std::size_t k = 0; k < 3; ++k) {
                    const std::size_t c_in = graph_.layers[s.from[k]].out_channels;
                    head_w_[k] = fan_in_uniform<T>({3 * no, c_in, 1, 1}, c_in, rng);
                    head_b_[k] = fan_in_uniform<T>({3 * no}, c_in, rng);
                    // prior: ~8 objects per image, near-uniform classes
                    const double cells = std::pow(static_cast<double>(o.input_size) / static_cast<double>(kStrides[k]), 2);
                    for (std::size_t a = 0; a < 3; ++a) {
                        head_b_[k][a * no + 4] += static_cast<T>(std::log(8.0 / cells));
                        for (std::size_t c = 0; c < nc; ++c)
                            head_b_[k][a * no + 5 + c] += static_cast<T>(std::log(0.6 / (static_cast<double>(nc) - 0.99)));
                    }
                }
                break;
            }
        }
    }
}

template <typename T>
std::vector<Var<T>> Network<T>::forward(const Context<T>& ctx, const Var<T>& images) {
    const std::size_t s = graph_.options.input_size;
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
        throw DimensionError("network expects B×3×" + std::to_string(s) + "×" + std::to_string(s) + " images, got " +
                             shape_str(images.shape()));
    }
    std::vector<Var<T>> outs;
    outs.reserve(graph_.layers.size());
    std::vector<Var<T>> heads;
    for (const auto& spec : graph_.layers) {
        if (spec.kind == LayerKind::Detect) {
            for (std::size_t k = 0; k < 3; ++k) {
                auto y = conv2d(outs[spec.from[k]], ctx.param(head_w_[k]), 1, 0);
                auto b = reshape(ctx.param(head_b_[k]), {1, head_b_[k].numel(), 1, 1});
                heads.push_back(add(y, b));
            }
            break;
        }
        std::vector<Var<T>> in;
        if (spec.from.empty()) in.push_back(images);
        for (auto f : spec.from) in.push_back(outs[f]);
        outs.push_back(layers_[spec.index]->forward(ctx, in));
    }
    return heads;
}

template <typename T>
ParamList<T> Network<T>::parameters() {
    ParamList<T> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(out, "model." + std::to_string(i));
    for (std::size_t k = 0; k < 3; ++k) {
        out.push_back({"model.27.m" + std::to_string(k) + ".weight", &head_w_[k], ParamKind::Weight});
        out.push_back({"model.27.m" + std::to_string(k) + ".bias", &head_b_[k], ParamKind::NoDecay});
    }
    return out;
}

// ---- inference ------------------------------------------------------------

namespace {

double sigmoid_d(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

std::vector<Detection> decode(const Tensor<float>& raw, const std::array<std::pair<double, double>, 3>& anchors,
                              std::size_t stride, std::size_t input_size, std::size_t n_classes, double conf_thresh) {
    const std::size_t no = 5 + n_classes;
    if (raw.rank() != 3 || raw.dim(0) != 3 * no || raw.dim(1) != raw.dim(2)) {
        throw DimensionError("decode: expected " + std::to_string(3 * no) + "×G×G head map, got " + shape_str(raw.shape()));
    }
    const std::size_t grid = raw.dim(1);
    const double s = static_cast<double>(stride), norm = static_cast<double>(input_size);
    std::vector<Detection> out;
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t gy = 0; gy < grid; ++gy) {
            for (std::size_t gx = 0; gx < grid; ++gx) {
                auto v = [&](std::size_t j) { return static_cast<double>(raw.at(a * no + j, gy, gx)); };
                const double obj = sigmoid_d(v(4));
                Detection d;
                d.class_scores.resize(n_classes);
                double best = -1;
                for (std::size_t c = 0; c < n_classes; ++c) {
                    d.class_scores[c] = sigmoid_d(v(5 + c));
                    if (d.class_scores[c] > best) {
                        best = d.class_scores[c];
                        d.class_id = static_cast<int>(c);
                    }
                }
                d.confidence = obj * best;
                if (d.confidence < conf_thresh) continue;
                const double px = (2.0 * sigmoid_d(v(0)) - 0.5 + static_cast<double>(gx)) * s;
                const double py = (2.0 * sigmoid_d(v(1)) - 0.5 + static_cast<double>(gy)) * s;
                const double pw = std::pow(2.0 * sigmoid_d(v(2)), 2) * anchors[a].first;
                const double ph = std::pow(2.0 * sigmoid_d(v(3)), 2) * anchors[a].second;
                d.box = {px / norm, py / norm, pw / norm, ph / norm};
                out.push_back(std::move(d));
            }
        }
    }
    return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    std::vector<Detection> kept;
    for (auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(std::move(d));
    }
    return kept;
}

std::vector<std::vector<Detection>> detect(Network<float>& net, const Tensor<float>& images, double conf_thresh,
                                           double iou_thresh) {
    Tape<float> tape(false);
    Context<float> ctx{tape, false};
    auto heads = net.forward(ctx, tape.constant(images));
    const std::size_t batch = images.dim(0), nc = net.options().n_classes;
    std::vector<std::vector<Detection>> out(batch);
    for (std::size_t k = 0; k < 3; ++k) {
        const auto& h = heads[k].value();
        const std::size_t per = h.numel() / batch;
        for (std::size_t b = 0; b < batch; ++b) {
            Tensor<float> one(Shape{h.dim(1), h.dim(2), h.dim(3)},
                              std::vector<float>(h.data().begin() + static_cast<long>(b * per),
                                                 h.data().begin() + static_cast<long>((b + 1) * per)));
            auto d = decode(one, net.anchors()[k], kStrides[k], net.options().input_size, nc, conf_thresh);
            out[b].insert(out[b].end(), std::make_move_iterator(d.begin()), std::make_move_iterator(d.end()));
        }
    }
    for (auto& d : out) d = nms(std::move(d), iou_thresh);
    return out;
}

template class BatchNorm<float>;
template class BatchNorm<double>;
template class ConvBnAct<float>;
template class ConvBnAct<double>;
template class C3Block<float>;
template class C3Block<double>;
template class SppfBlock<float>;
template class SppfBlock<double>;
template class Network<float>;
template class Network<double>;

}  // namespace ymask
