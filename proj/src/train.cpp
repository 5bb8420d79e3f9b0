#include "ymask/train.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "ymask/checkpoint.h"

namespace ymask {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

template <typename V>
V parse_value(std::string_view key, std::string_view text) {
    V v{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("bad value '" + std::string(text) + "' for " + std::string(key));
    }
    return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "1" || text == "true" || text == "on") return true;
    if (text == "0" || text == "false" || text == "off") return false;
    throw ConfigError("bad value '" + std::string(text) + "' for " + std::string(key));
}

void check_finite(double v, const char* component, std::size_t iteration) {
    if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite ") + component + " loss at iteration " + std::to_string(iteration));
    }
}

}  // namespace

ModelOptions TrainConfig::model_options() const {
    ModelOptions o = ModelOptions::toy();
    o.input_size = input_size;
    o.msconv = msconv;
    o.swin = swin;
    o.icbam = icbam;
    o.fusion = fusion;
    return o;
}

void TrainConfig::validate() const {
    if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be nonnegative");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be nonnegative");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
    if (input_size == 0 || input_size % 32 != 0) throw ConfigError("input_size must be a positive multiple of 32");
    if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
    if (loss.box < 0 || loss.obj < 0 || loss.cls < 0) throw ConfigError("loss weights must be nonnegative");
}

void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value) {
    if (key == "lr0") cfg.lr0 = parse_value<double>(key, value);
    else if (key == "warmup_epochs") cfg.warmup_epochs = parse_value<std::size_t>(key, value);
    else if (key == "momentum") cfg.momentum = parse_value<double>(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_value<double>(key, value);
    else if (key == "grad_clip") cfg.grad_clip = parse_value<double>(key, value);
    else if (key == "batch") cfg.batch = parse_value<std::size_t>(key, value);
    else if (key == "epochs") cfg.epochs = parse_value<std::size_t>(key, value);
    else if (key == "seed") cfg.seed = parse_value<std::uint64_t>(key, value);
    else if (key == "input_size") cfg.input_size = parse_value<std::size_t>(key, value);
    else if (key == "msconv") cfg.msconv = parse_bool(key, value);
    else if (key == "swin") cfg.swin = parse_bool(key, value);
    else if (key == "icbam") cfg.icbam = parse_bool(key, value);
    else if (key == "fusion") cfg.fusion = parse_bool(key, value);
    else if (key == "eval_interval") cfg.eval_interval = parse_value<std::size_t>(key, value);
    else if (key == "eval_conf") cfg.eval_conf = parse_value<double>(key, value);
    else if (key == "eval_iou") cfg.eval_iou = parse_value<double>(key, value);
    else if (key == "box_weight") cfg.loss.box = parse_value<double>(key, value);
    else if (key == "obj_weight") cfg.loss.obj = parse_value<double>(key, value);
    else if (key == "cls_weight") cfg.loss.cls = parse_value<double>(key, value);
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

TrainConfig parse_train_config(std::string_view text, TrainConfig cfg) {
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (!line.empty()) {
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw ParseError("expected key = value", line_no);
            try {
                set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
            } catch (const ConfigError& e) {
                throw ParseError(e.what(), line_no);
            }
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_train_config(text, std::move(base));
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch >= cfg.epochs) {
        throw ConfigError("epoch " + std::to_string(epoch) + " outside schedule of " + std::to_string(cfg.epochs));
    }
    const auto w = cfg.warmup_epochs;
    if (epoch < w) return cfg.lr0 * static_cast<double>(epoch + 1) / static_cast<double>(w);
    const double lf = final_lr(cfg);
    const std::size_t span = cfg.epochs - 1 - w;
    if (span == 0) return cfg.lr0;
    const double phase = static_cast<double>(epoch - w) / static_cast<double>(span);
    return lf + 0.5 * (cfg.lr0 - lf) * (1.0 + std::cos(std::numbers::pi * phase));
}

template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads)
        for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto& g : grads)
            for (T& v : g.data()) v *= f;
    }
    return norm;
}

template <typename T>
void sgd_step(const ParamList<T>& params, const std::vector<Tensor<T>>& grads, std::vector<Tensor<T>>& velocity,
              double lr, double momentum, double weight_decay) {
    if (grads.size() != params.size()) {
        throw DimensionError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    }
    if (velocity.empty()) {
        for (const auto& p : params) velocity.push_back(Tensor<T>::zeros(p.tensor->shape()));
    }
    if (velocity.size() != params.size()) throw DimensionError("sgd_step: velocity list does not match parameters");
    const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (p.kind == ParamKind::Buffer) continue;
        if (grads[i].shape() != p.tensor->shape() || velocity[i].shape() != p.tensor->shape()) {
            throw DimensionError("sgd_step: shape mismatch for " + p.name);
        }
        const T decay = p.kind == ParamKind::Weight ? wd : T(0);
        auto w = p.tensor->data();
        auto v = velocity[i].data();
        const auto g = grads[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            v[k] = m * v[k] + g[k] + decay * w[k];
            w[k] -= step * v[k];
        }
    }
}

Tensor<float> stack_images(const std::vector<Sample>& data, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DimensionError("stack_images: empty batch");
    const auto& first = data.at(indices[0]).image;
    Shape shape{indices.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    Tensor<float> out(shape);
    const std::size_t n = first.numel();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& img = data.at(indices[b]).image;
        if (img.shape() != first.shape()) throw DimensionError("stack_images: mixed image shapes");
        std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return out;
}

std::vector<std::vector<Detection>> detect_dataset(Network<float>& net, const std::vector<Sample>& data, double conf_thresh,
                                                   double iou_thresh, std::size_t batch) {
    std::vector<std::vector<Detection>> out;
    out.reserve(data.size());
    for (std::size_t start = 0; start < data.size(); start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
        auto dets = detect(net, stack_images(data, idx), conf_thresh, iou_thresh);
        for (auto& d : dets) out.push_back(std::move(d));
    }
    return out;
}

EvalReport evaluate_dataset(Network<float>& net, const std::vector<Sample>& data, double conf_thresh, double iou_thresh) {
    std::vector<std::vector<GroundTruth>> gts;
    gts.reserve(data.size());
    for (const auto& s : data) gts.push_back(s.labels);
    return evaluate(detect_dataset(net, data, conf_thresh, iou_thresh), gts, net.options().n_classes);
}

TrainResult train(Network<float>& net, const std::vector<Sample>& data, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& best_checkpoint, const TrainCallbacks& callbacks) {
    cfg.validate();
    if (data.empty()) throw DatasetError("no images found");
    const auto start = std::chrono::steady_clock::now();
    const LossGeometry geom{net.anchors(), net.options().input_size, net.options().n_classes};
    auto params = net.parameters();
    std::vector<Tensor<float>> velocity;
    Rng shuffle_rng(cfg.seed ^ 0x5eedu);

    TrainResult result;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t iteration = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        // Fisher-Yates with the platform-stable generator
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i - 1)));
            std::swap(order[i - 1], order[j]);
        }
        EpochLog elog;
        elog.epoch = epoch;
        elog.lr = lr;
        std::size_t steps = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b0 + cfg.batch)));
            std::vector<std::vector<GroundTruth>> targets;
            for (auto i : idx) targets.push_back(data[i].labels);

            Tape<float> tape;
            Context<float> ctx{tape, true};
            auto heads = net.forward(ctx, tape.constant(stack_images(data, idx)));
            auto loss = detection_loss(heads, targets, geom, cfg.loss);

            IterationLog log{iteration, epoch, lr, static_cast<double>(loss.total.value().item()), loss.box, loss.obj, loss.cls};
            check_finite(log.box, "box", iteration);
            check_finite(log.obj, "objectness", iteration);
            check_finite(log.cls, "class", iteration);
            check_finite(log.total, "total", iteration);

            tape.backward(loss.total);
            std::vector<Tensor<float>> grads;
            grads.reserve(params.size());
            for (const auto& p : params) grads.push_back(tape.grad_of(*p.tensor));
            clip_grad_norm(grads, cfg.grad_clip);
            sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay);

            result.iterations.push_back(log);
            if (callbacks.on_iteration) callbacks.on_iteration(log);
            elog.total += log.total;
            elog.box += log.box;
            elog.obj += log.obj;
            elog.cls += log.cls;
            ++steps;
            ++iteration;
        }
        const double n = static_cast<double>(steps);
        elog.total /= n;
        elog.box /= n;
        elog.obj /= n;
        elog.cls /= n;

        if ((epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs) {
            elog.map50 = evaluate_dataset(net, data, cfg.eval_conf, cfg.eval_iou).map50;
            if (elog.map50 && (!result.best_map50 || *elog.map50 > *result.best_map50)) {
                result.best_map50 = elog.map50;
                result.best_epoch = epoch;
                if (best_checkpoint) save_checkpoint(*best_checkpoint, params, net.options());
            }
        }
        result.epochs.push_back(elog);
        if (callbacks.on_epoch) callbacks.on_epoch(elog);
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

template double clip_grad_norm(std::vector<Tensor<float>>&, double);
template double clip_grad_norm(std::vector<Tensor<double>>&, double);
template void sgd_step(const ParamList<float>&, const std::vector<Tensor<float>>&, std::vector<Tensor<float>>&, double,
                       double, double);
template void sgd_step(const ParamList<double>&, const std::vector<Tensor<double>>&, std::vector<Tensor<double>>&, double,
                       double, double);

}  // namespace ymask
