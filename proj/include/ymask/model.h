#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ymask/box.h"
#include "ymask/cbam.h"
#include "ymask/module.h"
#include "ymask/msconv.h"
#include "ymask/swin.h"

namespace ymask {

enum class ModelScale { Large, Toy };

struct ModelOptions {
    std::size_t n_classes = 2;
    ModelScale scale = ModelScale::Toy;
    std::size_t input_size = 160;
    // the four improvements; all off gives the plain YOLOv5l topology
    bool msconv = true;
    bool swin = true;
    bool icbam = true;
    bool fusion = true;
    std::size_t cbam_reduction = 16;
    std::size_t swin_window = 8;
    std::size_t swin_heads = 4;
    std::size_t msconv_heads = 4;

    static ModelOptions toy() { return {}; }
    static ModelOptions large() {
        ModelOptions o;
        o.scale = ModelScale::Large;
        o.input_size = 640;
        return o;
    }
    ModelOptions& baseline() {
        msconv = swin = icbam = fusion = false;
        return *this;
    }
};

enum class LayerKind { Stem, MsConvStem, Conv, C3, Swin, Sppf, ICbam, Identity, Upsample, Concat, Detect };

std::string layer_kind_name(LayerKind kind);

struct LayerSpec {
    std::size_t index = 0;
    LayerKind kind = LayerKind::Identity;
    std::vector<std::size_t> from;         // input layers; the first is the main path
    std::vector<std::size_t> fusion_from;  // cross-scale edges among `from`
    std::size_t in_channels = 0, out_channels = 0;
    std::size_t kernel = 1, stride = 1;
    std::size_t depth = 1;                 // bottlenecks in a C3
    bool shortcut = true;
    std::size_t downsample = 1;            // cumulative stride of the output
};

// Ordered layer list; indices follow the 0-based module numbering of the
// improved YOLOv5l (see docs/layers.md).
struct ModelGraph {
    ModelOptions options;
    std::vector<LayerSpec> layers;

    std::vector<std::pair<std::size_t, std::size_t>> fusion_edges() const;
    // Plain-text table: index, kind, from-edges, output shape (C×H×W for the
    // configured input size), then one "fusion a->b" line per fusion edge.
    std::string dump() const;
};

ModelGraph build_graph(const ModelOptions& options);

// Three anchors per scale, pixels at network resolution, finest scale first.
using AnchorSet = std::array<std::array<std::pair<double, double>, 3>, 3>;
AnchorSet default_anchors(std::size_t input_size);
inline constexpr std::array<std::size_t, 3> kStrides{8, 16, 32};

template <typename T>
class BatchNorm {
public:
    explicit BatchNorm(std::size_t channels);
    Var<T> forward(const Context<T>& ctx, const Var<T>& x);
    void collect(ParamList<T>& out, const std::string& prefix);

    Tensor<T> gamma, beta, running_mean, running_var;

    static constexpr double kEps = 1e-3;
    static constexpr double kMomentum = 0.03;
};

// conv (no bias) → batch norm → SiLU
template <typename T>
class ConvBnAct {
public:
    ConvBnAct(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng);
    ConvBnAct(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, Rng& rng)
        : ConvBnAct(c_in, c_out, kernel, stride, kernel / 2, rng) {}
    Var<T> forward(const Context<T>& ctx, const Var<T>& x);
    void collect(ParamList<T>& out, const std::string& prefix);

    Tensor<T> weight;
    BatchNorm<T> bn;

private:
    std::size_t stride_, padding_;
};

template <typename T>
class C3Block {
public:
    C3Block(std::size_t c_in, std::size_t c_out, std::size_t depth, bool shortcut, Rng& rng);
    Var<T> forward(const Context<T>& ctx, const Var<T>& x);
    void collect(ParamList<T>& out, const std::string& prefix);

private:
    struct Bottleneck {
        ConvBnAct<T> cv1, cv2;
    };
    std::unique_ptr<ConvBnAct<T>> cv1_, cv2_, cv3_;
    std::vector<Bottleneck> blocks_;
    bool shortcut_;
};

template <typename T>
class SppfBlock {
public:
    SppfBlock(std::size_t c_in, std::size_t c_out, std::size_t pool, Rng& rng);
    Var<T> forward(const Context<T>& ctx, const Var<T>& x);
    void collect(ParamList<T>& out, const std::string& prefix);

private:
    ConvBnAct<T> cv1_, cv2_;
    std::size_t pool_;
};

// Runtime layer behind a LayerSpec.
template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual Var<T> forward(const Context<T>& ctx, const std::vector<Var<T>>& inputs) = 0;
    virtual void collect(ParamList<T>& out, const std::string& prefix) { (void)out, (void)prefix; }
};

template <typename T>
class Network {
public:
    Network(const ModelOptions& options, std::uint64_t seed);

    // images [B, 3, S, S] → raw head maps [B, 3·(5+nc), S/s, S/s] for s in kStrides
    std::vector<Var<T>> forward(const Context<T>& ctx, const Var<T>& images);

    const ModelGraph& graph() const { return graph_; }
    const ModelOptions& options() const { return graph_.options; }
    const AnchorSet& anchors() const { return anchors_; }
    std::size_t outputs_per_anchor() const { return 5 + graph_.options.n_classes; }

    // Every trainable tensor and batch-norm buffer with a stable name.
    ParamList<T> parameters();

private:
    ModelGraph graph_;
    AnchorSet anchors_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    std::array<Tensor<T>, 3> head_w_, head_b_;
};

struct Detection {
    Box box;  // normalized
    double confidence = 0;
    std::vector<double> class_scores;
    int class_id = 0;
};

// Decodes one scale's raw map [3·(5+nc), G, G] (a single image). Keeps boxes
// with sigmoid(obj)·max sigmoid(cls) ≥ conf_thresh.
std::vector<Detection> decode(const Tensor<float>& raw, const std::array<std::pair<double, double>, 3>& anchors,
                              std::size_t stride, std::size_t input_size, std::size_t n_classes, double conf_thresh);

// Per class greedy suppression of IoU > iou_thresh; sorted by confidence.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// Inference (eval-mode batch norm) on images [B, 3, S, S] through decode and
// nms; one detection list per image.
std::vector<std::vector<Detection>> detect(Network<float>& net, const Tensor<float>& images, double conf_thresh,
                                           double iou_thresh);

}  // namespace ymask
