#include <cmath>
#include <vector>

#include "doctest.h"
#include "ymask/swin.h"

using namespace ymask;

namespace {

using TD = Tensor<double>;

// Region id of a pixel in the shifted layout: three bands per axis.
std::size_t band(std::size_t p, std::size_t extent, std::size_t window, std::size_t shift) {
    if (p < extent - window) return 0;
    return p < extent - shift ? 1 : 2;
}

// Mask by comparing region ids of every token pair in every window.
TD mask_oracle(std::size_t h, std::size_t w, std::size_t m, std::size_t s) {
    const std::size_t nwx = w / m, nw = (h / m) * nwx, l = m * m;
    TD out({nw, l, l});
    for (std::size_t win = 0; win < nw; ++win) {
        const std::size_t y0 = (win / nwx) * m, x0 = (win % nwx) * m;
        auto id = [&](std::size_t t) {
            return 3 * band(y0 + t / m, h, m, s) + band(x0 + t % m, w, m, s);
        };
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t j = 0; j < l; ++j) out.at(win, i, j) = id(i) == id(j) ? 0.0 : -100.0;
    }
    return out;
}

}  // namespace

TEST_CASE("window partition counts and round trip") {
    Tape<float> tape;
    auto big = window_partition(tape.constant(Tensor<float>::zeros({160, 160, 1})), 8);
    CHECK(big.shape() == Shape{400, 64, 1});

    Rng rng(1);
    TD x = rng.uniform_tensor<double>({8, 12, 3}, -1, 1);
    Tape<double> t2;
    auto parts = window_partition(t2.constant(x), 4);
    CHECK(parts.shape() == Shape{6, 16, 3});
    // window 1 is rows 0..3, columns 4..7
    CHECK(parts.value().at(1, 5, 2) == x.at(1, 5, 2));
    CHECK(window_merge(parts, 8, 12, 4).value() == x);

    TD one = rng.uniform_tensor<double>({4, 4, 2}, -1, 1);
    auto single = window_partition(t2.constant(one), 4);
    CHECK(single.shape() == Shape{1, 16, 2});
    CHECK(single.value().vec() == one.vec());

    TD batch = rng.uniform_tensor<double>({2, 4, 8, 3}, -1, 1);
    auto bp = window_partition(t2.constant(batch), 4);
    CHECK(bp.shape() == Shape{4, 16, 3});
    CHECK(window_merge(bp, 4, 8, 4).value() == batch);

    CHECK_THROWS_AS(window_partition(t2.constant(TD::zeros({6, 8, 1})), 4), ConfigError);
}

TEST_CASE("cyclic shift") {
    Tape<double> tape;
    TD g({2, 2, 1}, std::vector<double>{1, 2, 3, 4});  // a b / c d
    CHECK(cyclic_shift(tape.constant(g), 1).value().vec() == std::vector<double>{4, 3, 2, 1});
    CHECK(cyclic_shift(tape.constant(g), 0).value() == g);

    Rng rng(2);
    TD x = rng.uniform_tensor<double>({6, 8, 3}, -1, 1);
    for (std::size_t s = 0; s < 6; ++s) {
        auto sh = cyclic_shift(tape.constant(x), s);
        CHECK(sh.value().at(0, 0, 1) == x.at(s, s, 1));
        CHECK(reverse_cyclic_shift(sh, s).value() == x);
    }
}

TEST_CASE("shift mask matches the region oracle") {
    CHECK(build_shift_mask<double>(4, 4, 2, 1) == mask_oracle(4, 4, 2, 1));
    CHECK(build_shift_mask<double>(8, 8, 4, 2) == mask_oracle(8, 8, 4, 2));
    CHECK(build_shift_mask<double>(16, 8, 4, 2) == mask_oracle(16, 8, 4, 2));

    auto one = build_shift_mask<double>(4, 4, 4, 2);
    for (double v : one.vec()) CHECK(v == 0.0);

    // the bottom-right window holds four regions, one per token
    auto m = build_shift_mask<double>(4, 4, 2, 1);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(m.at(3, i, j) == (i == j ? 0.0 : -100.0));

    CHECK_THROWS_AS(build_shift_mask<double>(4, 4, 2, 0), ConfigError);
}

TEST_CASE("masked pairs get negligible attention") {
    Rng rng(3);
    auto mask = build_shift_mask<double>(8, 8, 4, 2);
    Tape<double> tape;
    for (std::size_t win = 0; win < 4; ++win) {
        TD q = rng.uniform_tensor<double>({16, 16}, -2, 2), k = rng.uniform_tensor<double>({16, 16}, -2, 2);
        TD eye({16, 16});
        for (std::size_t i = 0; i < 16; ++i) eye.at(i, i) = 1;
        TD mw({16, 16}, std::vector<double>(mask.vec().begin() + win * 256, mask.vec().begin() + (win + 1) * 256));
        auto w = scaled_attention(tape.constant(q), tape.constant(k), tape.constant(eye), static_cast<const Var<double>*>(nullptr), &mw).value();
        for (std::size_t i = 0; i < 16; ++i)
            for (std::size_t j = 0; j < 16; ++j)
                if (mw.at(i, j) != 0) CHECK(w.at(i, j) < 1e-20);
    }
}

TEST_CASE("relative position bias depends only on the offset") {
    const std::size_t m = 4;
    auto idx = relative_position_index(m);
    REQUIRE(idx.size() == m * m * m * m);
    for (auto v : idx) CHECK(v < (2 * m - 1) * (2 * m - 1));

    Rng rng(4);
    SwinHalf<double> half(8, 2, m, 0, rng);
    half.bias_table = rng.uniform_tensor<double>(half.bias_table.shape(), -1, 1);
    Tape<double> tape;
    Context<double> ctx{tape};
    auto b = half.position_bias(ctx).value();
    REQUIRE(b.shape() == Shape{2, 16, 16});
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 16; ++i)
            for (std::size_t j = 0; j < 16; ++j)
                for (std::size_t i2 = 0; i2 < 16; ++i2)
                    for (std::size_t j2 = 0; j2 < 16; ++j2) {
                        const long dy = long(i / m) - long(j / m), dx = long(i % m) - long(j % m);
                        const long dy2 = long(i2 / m) - long(j2 / m), dx2 = long(i2 % m) - long(j2 % m);
                        if (dy == dy2 && dx == dx2) {
                            CHECK(b.at(h, i, j) == b.at(h, i2, j2));
                        } else {
                            CHECK(idx[i * 16 + j] != idx[i2 * 16 + j2]);
                        }
                    }
}

TEST_CASE("regular windows do not see each other") {
    Rng rng(5);
    SwinHalf<double> half(8, 2, 4, 0, rng);
    half.bias_table = rng.uniform_tensor<double>(half.bias_table.shape(), -1, 1);
    TD x = rng.uniform_tensor<double>({1, 8, 8, 8}, -1, 1);
    TD y = x;
    // perturb one pixel in the top-left window; a ramp so layer norm does not cancel it
    for (std::size_t c = 0; c < 8; ++c) y.at(0, 1, 2, c) += 0.1 * double(c + 1);
    Tape<double> tape;
    Context<double> ctx{tape};
    auto a = half.forward(ctx, tape.constant(x)).value();
    auto b = half.forward(ctx, tape.constant(y)).value();
    bool top_left_changed = false;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            for (std::size_t c = 0; c < 8; ++c) {
                if (i < 4 && j < 4) {
                    top_left_changed = top_left_changed || a.at(0, i, j, c) != b.at(0, i, j, c);
                } else {
                    CHECK(a.at(0, i, j, c) == b.at(0, i, j, c));
                }
            }
    CHECK(top_left_changed);

    // the shifted half does mix across the regular window border
    SwinHalf<double> shifted(8, 2, 4, 2, rng);
    auto sa = shifted.forward(ctx, tape.constant(x)).value();
    auto sb = shifted.forward(ctx, tape.constant(y)).value();
    bool crossed = false;
    for (std::size_t c = 0; c < 8; ++c) crossed = crossed || sa.at(0, 1, 4, c) != sb.at(0, 1, 4, c);
    CHECK(crossed);
}

TEST_CASE("swin block shapes and zero branches") {
    Rng rng(6);
    SwinBlock<float> blk(64, 4, 8, rng);
    CHECK(blk.shifted.shift() == 4);
    Tape<float> tape;
    Context<float> ctx{tape};
    auto x = rng.uniform_tensor<float>({40, 40, 64}, -1, 1);
    auto y = blk.forward(ctx, tape.constant(x));
    CHECK(y.shape() == Shape{40, 40, 64});
    for (float v : y.value().vec()) CHECK(std::isfinite(v));

    for (auto* h : {&blk.regular, &blk.shifted}) {
        h->attn.wo.fill(0);
        h->fc2_w.fill(0);
        h->fc2_b.fill(0);
    }
    Tape<float> fresh;
    Context<float> fctx{fresh};
    CHECK(blk.forward(fctx, fresh.constant(x)).value() == x);

    auto nchw = rng.uniform_tensor<float>({2, 64, 16, 16}, -1, 1);
    CHECK(blk.forward_nchw(fctx, fresh.constant(nchw)).value() == nchw);
    CHECK_THROWS_AS(blk.forward(fctx, fresh.constant(Tensor<float>::zeros({12, 12, 64}))), ConfigError);
}
