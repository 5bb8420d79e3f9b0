// Command-line front end: synth, train, eval, infer, gradcheck, graph.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ymask/checkpoint.h"
#include "ymask/dataset.h"
#include "ymask/gradcheck.h"
#include "ymask/train.h"

using namespace ymask;
namespace fs = std::filesystem;

namespace {

Network<float> load_network(const fs::path& ckpt) {
    const auto header = read_checkpoint_header(ckpt);
    Network<float> net(header.options, 0);
    auto params = net.parameters();
    load_checkpoint(ckpt, params);
    return net;
}

int run_synth(std::size_t n, std::uint64_t seed, const fs::path& out, std::size_t size) {
    write_synthetic_dataset(out, n, seed, size);
    std::printf("wrote %zu images to %s\n", n, out.string().c_str());
    return 0;
}

int run_train(TrainConfig cfg, const fs::path& data_dir, const fs::path& out, const fs::path& iteration_log) {
    cfg.validate();
    const auto data = load_dataset(data_dir, cfg.input_size);
    Network<float> net(cfg.model_options(), cfg.seed);
    std::FILE* iter_file = nullptr;
    if (!iteration_log.empty()) {
        iter_file = std::fopen(iteration_log.string().c_str(), "w");
        if (!iter_file) throw std::runtime_error("cannot write " + iteration_log.string());
        std::fprintf(iter_file, "iteration\tepoch\tlr\ttotal\tbox\tobj\tcls\n");
    }
    std::printf("training on %zu images, %zu epochs, batch %zu\n", data.size(), cfg.epochs, cfg.batch);
    std::printf("epoch\tlr\ttotal\tbox\tobj\tcls\tmAP50\n");
    TrainCallbacks cb;
    cb.on_iteration = [&](const IterationLog& l) {
        if (iter_file) {
            std::fprintf(iter_file, "%zu\t%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", l.iteration, l.epoch, l.lr, l.total, l.box, l.obj,
                         l.cls);
        }
    };
    cb.on_epoch = [](const EpochLog& e) {
        std::printf("%zu\t%.6g\t%.6f\t%.6f\t%.6f\t%.6f\t", e.epoch, e.lr, e.total, e.box, e.obj, e.cls);
        if (e.map50) {
            std::printf("%.4f\n", *e.map50);
        } else {
            std::printf("-\n");
        }
        std::fflush(stdout);
    };
    TrainResult r;
    try {
        r = train(net, data, cfg, out, cb);
    } catch (...) {
        if (iter_file) std::fclose(iter_file);
        throw;
    }
    if (iter_file) std::fclose(iter_file);
    std::printf("best mAP50 %.4f at epoch %zu, %.1f s; checkpoint %s\n", r.best_map50.value_or(0.0), r.best_epoch, r.seconds,
                out.string().c_str());
    return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data_dir, double conf, double iou) {
    auto net = load_network(ckpt);
    const auto data = load_dataset(data_dir, net.options().input_size);
    std::cout << evaluate_dataset(net, data, conf, iou).format();
    return 0;
}

int run_infer(const fs::path& ckpt, const fs::path& image, double conf, double iou) {
    auto net = load_network(ckpt);
    const auto t = image_to_tensor(read_ppm(image), net.options().input_size);
    const auto dets = detect(net, t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}), conf, iou);
    const auto names = default_class_names(net.options().n_classes);
    std::printf("class\tconfidence\tcx\tcy\tw\th\n");
    for (const auto& d : dets[0]) {
        std::printf("%s\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\n", names[static_cast<std::size_t>(d.class_id)].c_str(), d.confidence,
                    d.box.cx, d.box.cy, d.box.w, d.box.h);
    }
    return 0;
}

int run_gradcheck(std::size_t probes) {
    GradcheckOptions opt;
    opt.max_probes = probes;
    const auto results = run_gradcheck_suite(opt);
    std::size_t failed = 0;
    std::printf("%-28s %12s %8s  %s\n", "op", "max_rel_err", "probes", "status");
    for (const auto& r : results) {
        std::printf("%-28s %12.3e %8zu  %s\n", r.name.c_str(), r.max_rel_error, r.checked, r.passed ? "ok" : "FAIL");
        if (!r.passed) ++failed;
    }
    if (failed) {
        std::printf("FAILED: %zu of %zu checks\n", failed, results.size());
        return 1;
    }
    std::printf("all passed: %zu checks\n", results.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mask/face detector: data synthesis, training, evaluation"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "Write a synthetic face/mask dataset");
    std::size_t synth_n = 32, synth_size = 160;
    std::uint64_t synth_seed = 7;
    std::string synth_out;
    synth->add_option("--n", synth_n, "Number of images")->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_seed, "Random seed");
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--size", synth_size, "Image side in pixels")->check(CLI::PositiveNumber);

    auto* trn = app.add_subcommand("train", "Train the toy network");
    std::string train_data, train_cfg, train_out = "best.ckpt", train_iter_log;
    std::vector<std::string> overrides;
    bool baseline = false;
    TrainConfig flags;
    std::size_t epochs = 0, batch = 0;
    std::uint64_t seed = 0;
    double lr0 = 0;
    trn->add_option("--data", train_data, "Dataset directory")->required();
    trn->add_option("--cfg", train_cfg, "key=value config file");
    trn->add_option("--out", train_out, "Best checkpoint path");
    trn->add_option("--epochs", epochs, "Override epochs");
    trn->add_option("--batch", batch, "Override batch size");
    trn->add_option("--seed", seed, "Override seed");
    trn->add_option("--lr0", lr0, "Override initial learning rate");
    trn->add_flag("--baseline", baseline, "Disable M-sconv, Swin, I-CBAM and the extra fusion edges");
    trn->add_option("--set", overrides, "Extra key=value override (repeatable)");
    trn->add_option("--iteration-log", train_iter_log, "Write per-iteration losses as TSV");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data;
    double eval_conf = 0.001, eval_iou = 0.6;
    ev->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
    ev->add_option("--data", eval_data, "Dataset directory")->required();
    ev->add_option("--conf", eval_conf, "Confidence threshold");
    ev->add_option("--iou", eval_iou, "NMS IoU threshold");

    auto* inf = app.add_subcommand("infer", "Detect objects in one image");
    std::string infer_ckpt, infer_image;
    double infer_conf = 0.25, infer_iou = 0.45;
    inf->add_option("--ckpt", infer_ckpt, "Checkpoint")->required();
    inf->add_option("--image", infer_image, "PPM image")->required();
    inf->add_option("--conf", infer_conf, "Confidence threshold");
    inf->add_option("--iou", infer_iou, "NMS IoU threshold");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    std::size_t probes = 0;
    gc->add_option("--probes", probes, "Probed elements per tensor (0 = suite default)");

    auto* graph = app.add_subcommand("graph", "Print the layer table");
    bool graph_baseline = false;
    std::size_t graph_size = 160;
    graph->add_flag("--baseline", graph_baseline, "Plain YOLOv5l topology");
    graph->add_option("--size", graph_size, "Input size");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) return run_synth(synth_n, synth_seed, synth_out, synth_size);
        if (*trn) {
            TrainConfig cfg;
            if (!train_cfg.empty()) cfg = load_train_config(train_cfg);
            if (trn->count("--epochs")) cfg.epochs = epochs;
            if (trn->count("--batch")) cfg.batch = batch;
            if (trn->count("--seed")) cfg.seed = seed;
            if (trn->count("--lr0")) cfg.lr0 = lr0;
            if (baseline) cfg.msconv = cfg.swin = cfg.icbam = cfg.fusion = false;
            for (const auto& kv : overrides) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
                set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
            }
            return run_train(cfg, train_data, train_out, train_iter_log);
        }
        if (*ev) return run_eval(eval_ckpt, eval_data, eval_conf, eval_iou);
        if (*inf) return run_infer(infer_ckpt, infer_image, infer_conf, infer_iou);
        if (*gc) return run_gradcheck(probes);
        if (*graph) {
            auto o = ModelOptions::toy();
            o.input_size = graph_size;
            if (graph_baseline) o.baseline();
            std::cout << build_graph(o).dump();
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
