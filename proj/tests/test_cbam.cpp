#include <cmath>
#include <vector>

#include "doctest.h"
#include "ymask/cbam.h"
#include "ymask/gradcheck.h"

using namespace ymask;

namespace {

using TD = Tensor<double>;

double sig(double x) { return 1 / (1 + std::exp(-x)); }

TD identity(std::size_t n) {
    TD t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1;
    return t;
}

TD delta7() {
    TD k({1, 1, 7, 7});
    k.at(0, 0, 3, 3) = 1;
    return k;
}

}  // namespace

TEST_CASE("channel attention on a constant map with an identity MLP") {
    Rng rng(1);
    ChannelAttention<double> cam(3, 1, rng);
    cam.w0 = identity(3);
    cam.w1 = identity(3);
    Tape<double> tape;
    Context<double> ctx{tape};
    for (double v : {0.3, 1.2}) {
        auto m = cam.forward(ctx, tape.constant(TD({3, 5, 4}, v))).value();
        CHECK(m.shape() == Shape{3, 1, 1});
        for (double e : m.vec()) CHECK(e == doctest::Approx(sig(2 * v)).epsilon(1e-12));
    }
    CHECK(cam.forward(ctx, tape.constant(TD({2, 3, 7, 7}, 0.5))).shape() == Shape{2, 3, 1, 1});
    CHECK_THROWS_AS(cam.forward(ctx, tape.constant(TD({4, 5, 4}, 1.0))), DimensionError);
    CHECK_THROWS_AS(ChannelAttention<double>(6, 4, rng), ConfigError);
}

TEST_CASE("channel attention ignores spatial order") {
    Rng rng(2);
    ChannelAttention<double> cam(4, 2, rng);
    TD f = rng.uniform_tensor<double>({4, 3, 3}, -2, 2);
    TD g({4, 3, 3});
    const std::vector<std::size_t> perm{4, 8, 0, 3, 7, 1, 6, 2, 5};
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t p = 0; p < 9; ++p) g[c * 9 + p] = f[c * 9 + perm[p]];
    Tape<double> tape;
    Context<double> ctx{tape};
    auto a = cam.forward(ctx, tape.constant(f)).value(), b = cam.forward(ctx, tape.constant(g)).value();
    for (std::size_t c = 0; c < 4; ++c) CHECK(a[c] == doctest::Approx(b[c]).epsilon(1e-14));
}

TEST_CASE("spatial attention with delta kernels") {
    Rng rng(3);
    SpatialAttention<double> sam(rng);
    CHECK(sam.k_avg.shape() == Shape{1, 1, 7, 7});
    sam.k_avg = delta7();
    sam.k_max = delta7();
    Tape<double> tape;
    Context<double> ctx{tape};
    auto m = sam.forward(ctx, tape.constant(TD({3, 6, 5}, 0.4))).value();
    CHECK(m.shape() == Shape{1, 6, 5});
    for (double e : m.vec()) CHECK(e == doctest::Approx(sig(0.8)).epsilon(1e-12));

    TD spot = TD::zeros({2, 5, 5});
    spot.at(1, 2, 3) = 3.0;
    auto s = sam.forward(ctx, tape.constant(spot)).value();
    for (std::size_t i = 0; i < 25; ++i)
        if (i != 2 * 5 + 3) CHECK(s[i] < s.at(0, 2, 3));

    // one channel: avg = max, so the two equal kernels double the convolution
    sam.k_avg = rng.uniform_tensor<double>({1, 1, 7, 7}, -0.3, 0.3);
    sam.k_max = sam.k_avg;
    TD one = rng.uniform_tensor<double>({1, 6, 6}, -1, 1);
    Tape<double> fresh;
    Context<double> fctx{fresh};
    auto out = sam.forward(fctx, fresh.constant(one)).value();
    auto conv = conv2d(fresh.constant(one), fresh.constant(sam.k_avg), 1, 3).value();
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(sig(2 * conv[i])).epsilon(1e-12));
}

TEST_CASE("icbam gating") {
    Rng rng(4);
    ICbam<double> blk(8, 2, rng);
    Tape<double> tape;
    Context<double> ctx{tape};
    for (int trial = 0; trial < 5; ++trial) {
        TD f = rng.uniform_tensor<double>({2, 8, 5, 6}, -3, 3);
        auto y = blk.forward(ctx, tape.constant(f)).value();
        REQUIRE(y.shape() == f.shape());
        for (std::size_t i = 0; i < f.numel(); ++i) {
            CHECK(std::abs(y[i]) <= std::abs(f[i]));
            CHECK(y[i] * f[i] >= 0);
        }
        auto m = blk.sam.forward(ctx, tape.constant(f)).value();
        for (double e : m.vec()) CHECK((e > 0 && e < 1));
    }

    // saturated gates pass the input through
    blk.cam.w0 = identity(8);
    blk.cam.w1 = identity(8);
    blk.sam.k_avg = delta7();
    blk.sam.k_max = delta7();
    TD big({8, 4, 4}, 30.0);
    Tape<double> fresh;
    Context<double> fctx{fresh};
    auto y = blk.forward(fctx, fresh.constant(big)).value();
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(big[i]).epsilon(1e-12));
}

TEST_CASE("icbam gradients") {
    Rng rng(5);
    ICbam<double> blk(4, 1, rng);
    ParamList<double> params;
    blk.collect(params, "icbam");
    CHECK(params.size() == 4);
    TD f = separated_tensor({4, 6, 6}, rng, 0.02);
    std::vector<Tensor<double>*> in{&f};
    for (auto& p : params) in.push_back(p.tensor);
    GradcheckOptions opt;
    opt.step = 1e-5;
    auto res = gradcheck("icbam", in, [&](Tape<double>& t) {
        Context<double> ctx{t};
        return random_projection(blk.forward(ctx, t.watch(f)), 2);
    }, opt);
    CHECK(res.max_rel_error <= 1e-4);
}
