#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ymask/dataset.h"
#include "ymask/eval.h"
#include "ymask/loss.h"
#include "ymask/model.h"

namespace ymask {

struct TrainConfig {
    double lr0 = 0.01;
    std::size_t warmup_epochs = 3;
    double momentum = 0.937;
    double weight_decay = 0.0005;
    // global L2 norm limit on the gradient of each step; 0 disables
    double grad_clip = 10.0;
    std::size_t batch = 16;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
    std::size_t input_size = 160;

    // model switches; all true is the improved network
    bool msconv = true, swin = true, icbam = true, fusion = true;

    // training-split evaluation every this many epochs (and after the last)
    std::size_t eval_interval = 10;
    double eval_conf = 0.001;
    double eval_iou = 0.6;

    LossWeights loss;

    ModelOptions model_options() const;
    // Throws ConfigError on values that make no sense.
    void validate() const;
};

// Applies one "key = value" assignment; unknown keys and bad values throw ConfigError.
void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value);

// Flat key=value text; '#' starts a comment. Throws ParseError with the line number.
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});

// Rescales `grads` in place so their joint L2 norm is at most max_norm (0
// leaves them alone). Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm);

// Linear warmup lr0·(t+1)/w for t < w, then cosine from lr0 down to 0.01·lr0
// at the last epoch.
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);
inline double final_lr(const TrainConfig& cfg) { return 0.01 * cfg.lr0; }

// velocity = momentum·velocity + grad + wd·param (decay only on ParamKind::Weight);
// param -= lr·velocity. Buffers are skipped. `velocity` is sized on first use.
template <typename T>
void sgd_step(const ParamList<T>& params, const std::vector<Tensor<T>>& grads, std::vector<Tensor<T>>& velocity,
              double lr, double momentum, double weight_decay);

// [B, 3, S, S] from the samples at `indices`.
Tensor<float> stack_images(const std::vector<Sample>& data, const std::vector<std::size_t>& indices);

struct IterationLog {
    std::size_t iteration = 0, epoch = 0;
    double lr = 0;
    double total = 0, box = 0, obj = 0, cls = 0;
};

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0;
    double total = 0, box = 0, obj = 0, cls = 0;  // means over the epoch's iterations
    std::optional<double> map50;
};

struct TrainResult {
    std::vector<IterationLog> iterations;
    std::vector<EpochLog> epochs;
    std::optional<double> best_map50;
    std::size_t best_epoch = 0;
    double seconds = 0;
};

struct TrainCallbacks {
    std::function<void(const IterationLog&)> on_iteration;
    std::function<void(const EpochLog&)> on_epoch;
};

// Runs cfg.epochs passes over `data` (shuffled per epoch from cfg.seed). When
// `best_checkpoint` is set, the weights with the best training mAP(0.5) so far
// are written there. A non-finite loss component raises NumericError naming it.
TrainResult train(Network<float>& net, const std::vector<Sample>& data, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& best_checkpoint = std::nullopt,
                  const TrainCallbacks& callbacks = {});

// Detections for every sample, batched.
std::vector<std::vector<Detection>> detect_dataset(Network<float>& net, const std::vector<Sample>& data, double conf_thresh,
                                                   double iou_thresh, std::size_t batch = 16);

EvalReport evaluate_dataset(Network<float>& net, const std::vector<Sample>& data, double conf_thresh, double iou_thresh);

}  // namespace ymask
