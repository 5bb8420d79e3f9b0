#include <cmath>
#include <vector>

#include "doctest.h"
#include "ymask/gradcheck.h"
#include "ymask/msconv.h"

using namespace ymask;

namespace {

using TD = Tensor<double>;

MsConvConfig small_config() {
    MsConvConfig c;
    c.in_channels = 2;
    c.out_channels = 4;
    c.kernel = 2;
    c.stride = 1;
    c.padding = 1;
    c.heads = 2;
    return c;
}

}  // namespace

TEST_CASE("stem geometry") {
    Rng rng(1);
    MsConv<float> ms(MsConvConfig{}, rng);
    Tape<float> tape;
    Context<float> ctx{tape};
    auto x = rng.uniform_tensor<float>({3, 162, 162}, 0, 1);
    auto cols = unfold(tape.constant(x), 6, 6, 0);
    CHECK(cols.shape() == Shape{108, 729});
    CHECK(ms.generate_kernels(ctx, tape.constant(x)).shape() == Shape{64, 3, 6, 6});

    auto img = rng.uniform_tensor<float>({3, 160, 160}, 0, 1);
    CHECK(ms.forward(ctx, tape.constant(img)).shape() == Shape{64, 80, 80});
    CHECK(unfold(tape.constant(Tensor<float>::zeros({3, 160, 160})), 8, 8, 0).dim(1) == 400);
}

TEST_CASE("constant input pools to identical max and avg maps") {
    Tape<double> tape;
    auto cols = unfold(tape.constant(TD({2, 6, 6}, 0.7)), 2, 2, 0);
    auto mx = group_pool(cols, 4, PoolMode::Max).value(), av = group_pool(cols, 4, PoolMode::Avg).value();
    REQUIRE(mx.shape() == av.shape());
    for (std::size_t i = 0; i < mx.numel(); ++i) {
        CHECK(mx[i] == 0.7);
        CHECK(av[i] == doctest::Approx(0.7).epsilon(1e-15));
    }
}

TEST_CASE("zero input gives zero output") {
    Rng rng(2);
    MsConv<double> ms(small_config(), rng);
    Tape<double> tape;
    Context<double> ctx{tape};
    auto y = ms.forward(ctx, tape.constant(TD::zeros({2, 8, 8}))).value();
    CHECK(y.shape() == Shape{4, 9, 9});
    for (double v : y.vec()) CHECK(v == 0.0);
}

TEST_CASE("kernels depend on the input") {
    Rng rng(3);
    MsConv<double> ms(small_config(), rng);
    Tape<double> tape;
    Context<double> ctx{tape};
    TD a = rng.uniform_tensor<double>({2, 8, 8}, 0, 1);
    TD b = a;
    b.at(1, 6, 7) += 0.5;  // one patch differs
    auto ka = ms.generate_kernels(ctx, tape.constant(a)).value();
    auto kb = ms.generate_kernels(ctx, tape.constant(b)).value();
    CHECK(ka.shape() == Shape{4, 2, 2, 2});
    CHECK_FALSE(ka == kb);
    CHECK(ms.generate_kernels(ctx, tape.constant(a)).value() == ka);
}

TEST_CASE("batched forward uses per-image kernels") {
    Rng rng(4);
    MsConv<double> ms(small_config(), rng);
    Tape<double> tape;
    Context<double> ctx{tape};
    TD batch = rng.uniform_tensor<double>({2, 2, 8, 8}, 0, 1);
    auto y = ms.forward(ctx, tape.constant(batch)).value();
    REQUIRE(y.shape() == Shape{2, 4, 9, 9});
    for (std::size_t b = 0; b < 2; ++b) {
        TD img({2, 8, 8}, std::vector<double>(batch.vec().begin() + b * 128, batch.vec().begin() + (b + 1) * 128));
        auto single = ms.forward(ctx, tape.constant(img)).value();
        for (std::size_t i = 0; i < single.numel(); ++i) CHECK(y[b * single.numel() + i] == single[i]);
    }
}

TEST_CASE("too few patches for the output channels") {
    Rng rng(5);
    auto cfg = small_config();
    cfg.out_channels = 8;
    cfg.heads = 2;
    MsConv<double> ms(cfg, rng);
    Tape<double> tape;
    Context<double> ctx{tape};
    CHECK_THROWS_WITH_AS(ms.forward(ctx, tape.constant(TD::ones({2, 4, 4}))),
                         doctest::Contains("fewer patches than output channels"), DimensionError);
    CHECK_THROWS_AS(ms.forward(ctx, tape.constant(TD::ones({3, 8, 8}))), DimensionError);
}

TEST_CASE("msconv gradients on a 2x8x8 input") {
    Rng rng(6);
    MsConv<double> ms(small_config(), rng);
    ParamList<double> params;
    ms.collect(params, "ms");
    TD x = separated_tensor({2, 8, 8}, rng, 0.01);
    std::vector<Tensor<double>*> in{&x};
    for (auto& p : params) in.push_back(p.tensor);
    GradcheckOptions opt;
    opt.step = 1e-5;
    auto res = gradcheck("msconv", in, [&](Tape<double>& t) {
        Context<double> ctx{t};
        return random_projection(ms.forward(ctx, t.watch(x)), 4);
    }, opt);
    CHECK(res.max_rel_error <= 1e-4);
}
