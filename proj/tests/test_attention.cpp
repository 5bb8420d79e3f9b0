#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "ymask/attention.h"
#include "ymask/gradcheck.h"

using namespace ymask;

namespace {

using TD = Tensor<double>;

double max_abs_diff(const TD& a, const TD& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// softmax(q·kᵀ/√d + bias)·v written out with loops.
TD attention_oracle(const TD& q, const TD& k, const TD& v, const TD* bias = nullptr) {
    const std::size_t l = q.dim(0), d = q.dim(1);
    TD out({l, v.dim(1)});
    for (std::size_t i = 0; i < l; ++i) {
        std::vector<double> s(l);
        for (std::size_t j = 0; j < l; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * k.at(j, c);
            s[j] = dot / std::sqrt(double(d)) + (bias ? bias->at(i, j) : 0.0);
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < l; ++j)
            for (std::size_t c = 0; c < v.dim(1); ++c) out.at(i, c) += s[j] / z * v.at(j, c);
    }
    return out;
}

TD identity(std::size_t n) {
    TD t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1;
    return t;
}

TD layer_norm_rows(const TD& x, double eps) {
    TD out = x;
    const std::size_t d = x.dim(x.rank() - 1), rows = x.numel() / d;
    for (std::size_t r = 0; r < rows; ++r) {
        double m = 0, var = 0;
        for (std::size_t j = 0; j < d; ++j) m += x[r * d + j] / d;
        for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - m) * (x[r * d + j] - m) / d;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (x[r * d + j] - m) / std::sqrt(var + eps);
    }
    return out;
}

}  // namespace

TEST_CASE("single token attention returns V") {
    Rng rng(1);
    TD q = rng.uniform_tensor<double>({1, 4}, -1, 1), k = rng.uniform_tensor<double>({1, 4}, -1, 1),
       v = rng.uniform_tensor<double>({1, 4}, -1, 1);
    Tape<double> tape;
    CHECK(scaled_attention(tape.constant(q), tape.constant(k), tape.constant(v)).value() == v);
}

TEST_CASE("equal keys give the mean of V") {
    Rng rng(2);
    TD q = rng.uniform_tensor<double>({5, 3}, -1, 1), v = rng.uniform_tensor<double>({5, 3}, -1, 1);
    TD k({5, 3});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 3; ++c) k.at(i, c) = 0.3 * double(c) - 0.2;
    Tape<double> tape;
    auto out = scaled_attention(tape.constant(q), tape.constant(k), tape.constant(v)).value();
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0;
        for (std::size_t j = 0; j < 5; ++j) m += v.at(j, c) / 5;
        for (std::size_t i = 0; i < 5; ++i) CHECK(out.at(i, c) == doctest::Approx(m).epsilon(1e-12));
    }
}

TEST_CASE("attention matches the loop oracle, zero bias reduces to the plain form") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        TD q = rng.uniform_tensor<double>({6, 4}, -2, 2), k = rng.uniform_tensor<double>({6, 4}, -2, 2),
           v = rng.uniform_tensor<double>({6, 4}, -2, 2), bias = rng.uniform_tensor<double>({6, 6}, -1, 1);
        Tape<double> tape;
        auto vq = tape.constant(q), vk = tape.constant(k), vv = tape.constant(v);
        auto plain = scaled_attention(vq, vk, vv).value();
        CHECK(max_abs_diff(plain, attention_oracle(q, k, v)) < 1e-12);

        auto zero = tape.constant(TD::zeros({6, 6}));
        CHECK(max_abs_diff(scaled_attention(vq, vk, vv, &zero).value(), plain) <= 1e-6);
        auto vb = tape.constant(bias);
        CHECK(max_abs_diff(scaled_attention(vq, vk, vv, &vb).value(), attention_oracle(q, k, v, &bias)) < 1e-12);
    }
}

TEST_CASE("attention weights are a distribution per row") {
    // with V = I the output is the weight matrix itself
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        TD q = rng.uniform_tensor<double>({7, 7}, -3, 3), k = rng.uniform_tensor<double>({7, 7}, -3, 3);
        Tape<double> tape;
        auto w = scaled_attention(tape.constant(q), tape.constant(k), tape.constant(identity(7))).value();
        for (std::size_t i = 0; i < 7; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 7; ++j) {
                CHECK(w.at(i, j) >= 0);
                s += w.at(i, j);
            }
            CHECK(std::abs(s - 1) <= 1e-6);
        }
    }
}

TEST_CASE("attention is permutation equivariant") {
    Rng rng(5);
    const std::size_t l = 6, d = 4;
    TD x = rng.uniform_tensor<double>({l, d}, -1, 1);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    TD px({l, d});
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t c = 0; c < d; ++c) px.at(i, c) = x.at(perm[i], c);
    Tape<double> tape;
    auto a = scaled_attention(tape.constant(x), tape.constant(x), tape.constant(x)).value();
    auto b = scaled_attention(tape.constant(px), tape.constant(px), tape.constant(px)).value();
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t c = 0; c < d; ++c) CHECK(b.at(i, c) == doctest::Approx(a.at(perm[i], c)).epsilon(1e-13));
}

TEST_CASE("attention shape errors") {
    Tape<double> tape;
    auto a = tape.constant(TD::zeros({3, 4})), b = tape.constant(TD::zeros({2, 4}));
    CHECK_THROWS_AS(scaled_attention(a, b, a), DimensionError);
    auto bad_bias = tape.constant(TD::zeros({2, 2}));
    CHECK_THROWS_AS(scaled_attention(a, a, a, &bad_bias), DimensionError);
}

TEST_CASE("positional encoding values") {
    auto pe = positional_encoding<double>(10, 6);
    CHECK(pe.shape() == Shape{10, 6});
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(pe.at(0, 2 * j) == 0.0);
        CHECK(pe.at(0, 2 * j + 1) == 1.0);
    }
    CHECK(pe.at(1, 0) == doctest::Approx(0.84147).epsilon(1e-5));
    CHECK(pe.at(3, 2) == doctest::Approx(std::sin(3 / std::pow(10000.0, 2.0 / 6))).epsilon(1e-12));
    CHECK(pe.at(4, 5) == doctest::Approx(std::cos(4 / std::pow(10000.0, 4.0 / 6))).epsilon(1e-12));
    for (double v : pe.vec()) CHECK(std::abs(v) <= 1.0);
    CHECK(positional_encoding<double>(10, 6) == pe);
    CHECK_THROWS_AS(positional_encoding<double>(4, 5), ConfigError);
}

TEST_CASE("single head with identity projections is plain self attention") {
    Rng rng(6);
    const std::size_t d = 5;
    MultiHeadAttention<double> mha(d, 1, rng);
    mha.wq = mha.wk = mha.wv = mha.wo = identity(d);
    TD x = rng.uniform_tensor<double>({7, d}, -1, 1);
    Tape<double> tape;
    Context<double> ctx{tape};
    auto out = mha.forward(ctx, tape.constant(x)).value();
    CHECK(max_abs_diff(out, attention_oracle(x, x, x)) <= 1e-6);
}

TEST_CASE("multi head attention shape and configuration") {
    Rng rng(7);
    MultiHeadAttention<double> mha(8, 4, rng);
    Tape<double> tape;
    Context<double> ctx{tape};
    CHECK(mha.forward(ctx, tape.constant(TD::ones({5, 8}))).shape() == Shape{5, 8});
    CHECK(mha.forward(ctx, tape.constant(TD::ones({3, 5, 8}))).shape() == Shape{3, 5, 8});
    CHECK_THROWS_AS(MultiHeadAttention<double>(8, 3, rng), ConfigError);
    CHECK_THROWS_AS(mha.forward(ctx, tape.constant(TD::ones({5, 6}))), DimensionError);
}

TEST_CASE("multi head attention matches per head loops") {
    Rng rng(8);
    const std::size_t d = 6, heads = 3, dh = 2, l = 4;
    MultiHeadAttention<double> mha(d, heads, rng);
    TD x = rng.uniform_tensor<double>({l, d}, -1, 1);
    auto proj = [&](const TD& w) {
        TD out({l, d});
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t o = 0; o < d; ++o)
                for (std::size_t c = 0; c < d; ++c) out.at(i, o) += x.at(i, c) * w.at(c, o);
        return out;
    };
    TD q = proj(mha.wq), k = proj(mha.wk), v = proj(mha.wv), cat({l, d});
    for (std::size_t h = 0; h < heads; ++h) {
        TD qh({l, dh}), kh({l, dh}), vh({l, dh});
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t c = 0; c < dh; ++c) {
                qh.at(i, c) = q.at(i, h * dh + c);
                kh.at(i, c) = k.at(i, h * dh + c);
                vh.at(i, c) = v.at(i, h * dh + c);
            }
        TD oh = attention_oracle(qh, kh, vh);
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t c = 0; c < dh; ++c) cat.at(i, h * dh + c) = oh.at(i, c);
    }
    TD want({l, d});
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t o = 0; o < d; ++o)
            for (std::size_t c = 0; c < d; ++c) want.at(i, o) += cat.at(i, c) * mha.wo.at(c, o);
    Tape<double> tape;
    Context<double> ctx{tape};
    CHECK(max_abs_diff(mha.forward(ctx, tape.constant(x)).value(), want) < 1e-12);
}

TEST_CASE("encoder block") {
    Rng rng(9);
    EncoderBlock<double> enc(8, 2, rng);
    TD x = rng.uniform_tensor<double>({6, 8}, -1, 1);
    Tape<double> tape;
    Context<double> ctx{tape};
    CHECK(enc.forward(ctx, tape.constant(x)).shape() == Shape{6, 8});
    CHECK(enc.ff1_w.shape() == Shape{8, 32});

    // zero output projections leave only the residual path
    enc.mha.wo.fill(0);
    enc.ff2_w.fill(0);
    enc.ff2_b.fill(0);
    // a fresh tape: the first one still holds the old parameter values
    Tape<double> fresh;
    Context<double> fctx{fresh};
    auto out = enc.forward(fctx, fresh.constant(x)).value();
    const double eps = EncoderBlock<double>::kLayerNormEps;
    CHECK(max_abs_diff(out, layer_norm_rows(layer_norm_rows(x, eps), eps)) < 1e-12);
}

TEST_CASE("encoder block gradients") {
    Rng rng(10);
    EncoderBlock<double> enc(4, 2, rng);
    ParamList<double> params;
    enc.collect(params, "enc");
    TD x = rng.uniform_tensor<double>({5, 4}, -1, 1);
    std::vector<Tensor<double>*> in{&x};
    for (auto& p : params) in.push_back(p.tensor);
    auto res = gradcheck("encoder", in, [&](Tape<double>& t) {
        Context<double> ctx{t};
        return random_projection(enc.forward(ctx, t.watch(x)), 3);
    });
    CHECK(res.max_rel_error <= 1e-4);
}
