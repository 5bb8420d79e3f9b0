#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ymask/checkpoint.h"
#include "ymask/train.h"

using namespace ymask;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("ymask_test_" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.input_size = 64;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.batch = 2;
    cfg.seed = 4;
    cfg.eval_interval = 3;
    return cfg;
}

}  // namespace

TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    cfg.epochs = 50;
    CHECK(lr_schedule(3, cfg) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(lr_schedule(0, cfg) == doctest::Approx(0.01 / 3));
    CHECK(lr_schedule(2, cfg) == doctest::Approx(0.01));
    CHECK(std::abs(lr_schedule(49, cfg) - 1e-4) <= 1e-9);
    CHECK(final_lr(cfg) == doctest::Approx(1e-4));

    // odd cosine length so the midpoint falls on an epoch: 3 + 46 / 2
    cfg.epochs = 50;
    const double mid = lr_schedule(3 + (50 - 1 - 3) / 2, cfg);
    CHECK(std::abs(mid - 0.00505) <= 1e-9);

    for (std::size_t t = 4; t < 50; ++t) CHECK(lr_schedule(t, cfg) < lr_schedule(t - 1, cfg));
    CHECK_THROWS_AS(lr_schedule(50, cfg), ConfigError);
}

TEST_CASE("sgd steps") {
    Tensor<double> w({2}, std::vector<double>{1.0, -2.0}), b({2}, std::vector<double>{0.5, 0.5}),
        buf({2}, std::vector<double>{3.0, 3.0});
    ParamList<double> params{{"w", &w, ParamKind::Weight}, {"b", &b, ParamKind::NoDecay}, {"buf", &buf, ParamKind::Buffer}};
    std::vector<Tensor<double>> vel;

    // zero gradients: only decayed tensors move
    std::vector<Tensor<double>> zero{Tensor<double>::zeros({2}), Tensor<double>::zeros({2}), Tensor<double>::zeros({2})};
    sgd_step(params, zero, vel, 0.1, 0.9, 0.01);
    CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.01));
    CHECK(b.vec() == std::vector<double>{0.5, 0.5});

    // plain gradient descent
    Tensor<double> p({2}, std::vector<double>{1.0, 2.0});
    ParamList<double> one{{"p", &p, ParamKind::Weight}};
    std::vector<Tensor<double>> v1, g{Tensor<double>({2}, std::vector<double>{0.25, -1.0})};
    sgd_step(one, g, v1, 1.0, 0.0, 0.0);
    CHECK(p.vec() == std::vector<double>{0.75, 3.0});

    // momentum 0.9 on a constant gradient: total update lr·(g + 1.9g)
    Tensor<double> q({1}, 0.0);
    ParamList<double> pq{{"q", &q, ParamKind::Weight}};
    std::vector<Tensor<double>> vq, gq{Tensor<double>({1}, 2.0)};
    sgd_step(pq, gq, vq, 0.1, 0.9, 0.0);
    sgd_step(pq, gq, vq, 0.1, 0.9, 0.0);
    CHECK(q[0] == doctest::Approx(-0.1 * (2.0 + 1.9 * 2.0)).epsilon(1e-12));

    CHECK(buf.vec() == std::vector<double>{3.0, 3.0});
    std::vector<Tensor<double>> bad{Tensor<double>::zeros({3})};
    CHECK_THROWS_AS(sgd_step(one, bad, v1, 0.1, 0.9, 0.0), DimensionError);
}

TEST_CASE("gradient norm clipping") {
    std::vector<Tensor<double>> g{Tensor<double>({2}, std::vector<double>{3.0, 0.0}), Tensor<double>({1}, 4.0)};
    CHECK(clip_grad_norm(g, 10.0) == doctest::Approx(5.0));
    CHECK(g[0][0] == 3.0);
    CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g[0][0] == doctest::Approx(0.6));
    CHECK(g[1][0] == doctest::Approx(0.8));
    clip_grad_norm(g, 0.0);
    CHECK(g[1][0] == doctest::Approx(0.8));
}

TEST_CASE("config parsing") {
    auto cfg = parse_train_config("# toy run\nlr0 = 0.02\nepochs=7  # short\n\nmsconv = false\ngrad_clip = 0\n");
    CHECK(cfg.lr0 == 0.02);
    CHECK(cfg.epochs == 7);
    CHECK_FALSE(cfg.msconv);
    CHECK(cfg.swin);
    CHECK(cfg.grad_clip == 0.0);
    CHECK(cfg.model_options().swin);
    CHECK_FALSE(cfg.model_options().msconv);

    CHECK_THROWS_WITH_AS(parse_train_config("lr0 = 0.01\nbogus = 1\n"), doctest::Contains("line 2"), ParseError);
    CHECK_THROWS_WITH_AS(parse_train_config("lr0 0.01\n"), doctest::Contains("line 1"), ParseError);
    CHECK_THROWS_AS(parse_train_config("epochs = many\n"), ParseError);

    TrainConfig bad;
    bad.warmup_epochs = bad.epochs;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.input_size = 100;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(set_config_value(bad, "nope", "1"), ConfigError);
}

TEST_CASE("synthetic dataset") {
    TempDir a, b;
    write_synthetic_dataset(a.path, 32, 7);
    write_synthetic_dataset(b.path, 32, 7);
    std::size_t images = 0, labels = 0;
    for (const auto& e : fs::directory_iterator(a.path)) {
        const auto name = e.path().filename();
        CHECK(read_file(e.path()) == read_file(b.path / name));
        if (e.path().extension() == ".ppm") ++images;
        if (e.path().extension() == ".txt") {
            ++labels;
            const auto text = read_file(e.path());
            auto gts = parse_labels(text);
            CHECK((gts.size() >= 1 && gts.size() <= 3));
            for (const auto& g : gts) {
                CHECK((g.class_id == 0 || g.class_id == 1));
                CHECK((g.box.w >= 0.15 - 1e-6 && g.box.w <= 0.40 + 1e-6));
                CHECK((g.box.h >= 0.15 - 1e-6 && g.box.h <= 0.40 + 1e-6));
            }
            std::istringstream lines(text);
            for (std::string line; std::getline(lines, line);) {
                std::istringstream fields(line);
                std::vector<std::string> f;
                for (std::string s; fields >> s;) f.push_back(s);
                CHECK(f.size() == 5);
            }
        }
    }
    CHECK(images == 32);
    CHECK(labels == 32);

    TempDir c;
    write_synthetic_dataset(c.path, 2, 8);
    CHECK(read_file(c.path / "img_0000.ppm") != read_file(a.path / "img_0000.ppm"));

    auto data = load_dataset(a.path, 160);
    REQUIRE(data.size() == 32);
    CHECK(data[0].name == "img_0000");
    CHECK(data[0].image.shape() == Shape{3, 160, 160});

    TempDir empty;
    CHECK_THROWS_WITH_AS(load_dataset(empty.path, 160), doctest::Contains("no images found"), DatasetError);
}

TEST_CASE("ppm round trip") {
    TempDir d;
    Image img{3, 2, {}};
    for (int i = 0; i < 18; ++i) img.rgb.push_back(static_cast<std::uint8_t>(i * 14));
    write_ppm(d.path / "x.ppm", img);
    auto back = read_ppm(d.path / "x.ppm");
    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.rgb == img.rgb);
    auto t = image_to_tensor(back, 6);
    CHECK(t.shape() == Shape{3, 6, 6});
    CHECK(t.at(0, 0, 0) == 0.0f);
    std::ofstream(d.path / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
    CHECK_THROWS(read_ppm(d.path / "bad.ppm"));
}

TEST_CASE("checkpoint round trip and errors") {
    TempDir d;
    auto o = ModelOptions::toy();
    o.input_size = 64;
    Network<float> net(o, 1);
    auto params = net.parameters();
    save_checkpoint(d.path / "a.ckpt", params, o);

    auto header = read_checkpoint_header(d.path / "a.ckpt");
    CHECK(header.options.input_size == 64);
    CHECK(header.options.msconv);
    REQUIRE(header.entries.size() == params.size());
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(header.entries[i].name == params[i].name);
        CHECK(header.entries[i].shape == params[i].tensor->shape());
        CHECK(header.entries[i].offset == offset);
        offset += params[i].tensor->numel() * 4;
    }

    Network<float> other(o, 2);
    auto op = other.parameters();
    std::size_t first_weight = 0;
    while (params[first_weight].kind != ParamKind::Weight) ++first_weight;
    CHECK_FALSE(*op[first_weight].tensor == *params[first_weight].tensor);
    load_checkpoint(d.path / "a.ckpt", op);
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(*op[i].tensor == *params[i].tensor);

    // saving the loaded weights reproduces the file byte for byte
    save_checkpoint(d.path / "b.ckpt", op, o);
    CHECK(read_file(d.path / "a.ckpt") == read_file(d.path / "b.ckpt"));

    Network<float> base(ModelOptions(o).baseline(), 1);
    auto bp = base.parameters();
    CHECK_THROWS_AS(load_checkpoint(d.path / "a.ckpt", bp), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(d.path / "missing.ckpt", op), CheckpointError);

    const auto bytes = read_file(d.path / "a.ckpt");
    std::ofstream(d.path / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
    CHECK_THROWS_AS(load_checkpoint(d.path / "short.ckpt", op), CheckpointError);
}

TEST_CASE("training is deterministic and the checkpoint preserves metrics") {
    TempDir d;
    write_synthetic_dataset(d.path / "data", 4, 3, 64);
    auto data = load_dataset(d.path / "data", 64);
    auto cfg = tiny_config();

    Network<float> a(cfg.model_options(), cfg.seed), b(cfg.model_options(), cfg.seed);
    auto ra = train(a, data, cfg, d.path / "best.ckpt");
    auto rb = train(b, data, cfg);
    REQUIRE(ra.iterations.size() == 6);
    REQUIRE(rb.iterations.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(ra.iterations[i].total == rb.iterations[i].total);
        CHECK(ra.iterations[i].box == rb.iterations[i].box);
        CHECK(std::isfinite(ra.iterations[i].total));
    }
    CHECK(ra.iterations[0].total > 0);
    REQUIRE(ra.best_map50.has_value());

    // the only evaluation is the last epoch, so the checkpoint holds the final weights
    auto before = evaluate_dataset(a, data, cfg.eval_conf, cfg.eval_iou);
    Network<float> c(cfg.model_options(), 99);
    auto cp = c.parameters();
    load_checkpoint(d.path / "best.ckpt", cp);
    auto after = evaluate_dataset(c, data, cfg.eval_conf, cfg.eval_iou);
    CHECK(before.format() == after.format());
    CHECK(ra.best_map50 == before.map50);
}
