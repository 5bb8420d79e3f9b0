#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ymask/attention.h"
#include "ymask/cbam.h"
#include "ymask/gradcheck.h"
#include "ymask/loss.h"
#include "ymask/model.h"
#include "ymask/msconv.h"
#include "ymask/swin.h"

namespace ymask {

namespace {

using D = double;

// Trainable tensors of a module (buffers are not differentiated).
std::vector<Tensor<D>*> trainable(const ParamList<D>& params) {
    std::vector<Tensor<D>*> out;
    for (const auto& p : params)
        if (p.kind != ParamKind::Buffer) out.push_back(p.tensor);
    return out;
}

struct Suite {
    GradcheckOptions base;
    std::vector<GradcheckResult> results;
    std::uint64_t seed = 1;
    std::size_t trial = 0;

    // Each trial draws fresh inputs and parameters.
    std::uint64_t rng_seed(std::uint64_t base) const { return base + 7919 * trial; }

    void run(const std::string& name, std::vector<Tensor<D>*> inputs, const LossBuilder& loss, std::size_t probes = 0,
             double step = 0) {
        auto opt = base;
        if (probes && (!opt.max_probes || probes < opt.max_probes)) opt.max_probes = probes;
        if (step > 0) opt.step = step;
        opt.seed = seed;
        results.push_back(gradcheck(name, inputs, loss, opt));
    }

    std::uint64_t next() { return ++seed; }
};

Var<D> proj(const Var<D>& x, std::uint64_t seed) { return random_projection(x, seed); }

void elementwise_ops(Suite& s) {
    Rng rng(s.rng_seed(11));
    auto a = rng.normal_tensor<D>({3, 4}, 1.0), b = rng.normal_tensor<D>({3, 4}, 1.0), row = rng.normal_tensor<D>({4}, 1.0);
    auto c = rng.normal_tensor<D>({3, 1}, 1.0);
    const auto k = s.next();
    s.run("add", {&a, &b, &row}, [&](Tape<D>& t) { return proj(add(add(t.watch(a), t.watch(b)), t.watch(row)), k); });
    s.run("sub", {&a, &c}, [&](Tape<D>& t) { return proj(sub(t.watch(a), t.watch(c)), k); });
    s.run("mul", {&a, &b, &c}, [&](Tape<D>& t) { return proj(mul(mul(t.watch(a), t.watch(b)), t.watch(c)), k); });
    s.run("scale", {&a}, [&](Tape<D>& t) { return proj(scale(t.watch(a), 1.7), k); });
    s.run("add_scalar", {&a}, [&](Tape<D>& t) { return proj(mul(add_scalar(t.watch(a), 0.3), t.watch(a)), k); });
    s.run("sum", {&a}, [&](Tape<D>& t) { return mul(sum(t.watch(a)), sum(t.watch(a))); });
    s.run("mean", {&a}, [&](Tape<D>& t) { return mul(mean(t.watch(a)), sum(t.watch(b))); });
}

void shape_ops(Suite& s) {
    Rng rng(s.rng_seed(12));
    auto x = rng.normal_tensor<D>({2, 3, 4}, 1.0), y = rng.normal_tensor<D>({2, 2, 4}, 1.0);
    auto img = rng.normal_tensor<D>({2, 3, 5, 5}, 1.0), hw = rng.normal_tensor<D>({2, 4, 6, 3}, 1.0);
    const auto k = s.next();
    s.run("reshape", {&x}, [&](Tape<D>& t) { return proj(reshape(t.watch(x), {4, 6}), k); });
    s.run("permute", {&x}, [&](Tape<D>& t) { return proj(permute(t.watch(x), {2, 0, 1}), k); });
    s.run("transpose", {&x}, [&](Tape<D>& t) { return proj(transpose(t.watch(x)), k); });
    s.run("concat", {&x, &y}, [&](Tape<D>& t) {
        const std::vector<Var<D>> parts{t.watch(x), t.watch(y)};
        return proj(concat<D>(parts, 1), k);
    });
    s.run("slice", {&x}, [&](Tape<D>& t) { return proj(slice(t.watch(x), 2, 1, 3), k); });
    s.run("gather", {&x}, [&](Tape<D>& t) { return proj(gather(t.watch(x), {0, 5, 5, 23, 11, 0}, {2, 3}), k); });
    s.run("pad2d", {&img}, [&](Tape<D>& t) { return proj(pad2d(t.watch(img), 1, 2, 0, 3), k); });
    s.run("upsample_nearest", {&img}, [&](Tape<D>& t) { return proj(upsample_nearest(t.watch(img), 2), k); });
    s.run("roll2d", {&hw}, [&](Tape<D>& t) { return proj(roll2d(t.watch(hw), 2, -1), k); });
}

void pooling_ops(Suite& s) {
    Rng rng(s.rng_seed(13));
    auto img = separated_tensor({2, 3, 6, 6}, rng);
    auto cols = separated_tensor({4, 7}, rng);
    const auto k = s.next();
    s.run("max_pool2d", {&img}, [&](Tape<D>& t) { return proj(max_pool2d(t.watch(img), 3, 1, 1), k); });
    s.run("pool_global", {&img}, [&](Tape<D>& t) {
        auto x = t.watch(img);
        auto a = proj(pool_global(x, PoolMode::Avg, PoolAxis::Spatial), k);
        auto b = proj(pool_global(x, PoolMode::Max, PoolAxis::Spatial), k + 1);
        auto c = proj(pool_global(x, PoolMode::Avg, PoolAxis::Channel), k + 2);
        auto d = proj(pool_global(x, PoolMode::Max, PoolAxis::Channel), k + 3);
        return add(add(a, b), add(c, d));
    });
    s.run("group_pool", {&cols}, [&](Tape<D>& t) {
        auto x = t.watch(cols);
        return add(proj(group_pool(x, 3, PoolMode::Avg), k), proj(group_pool(x, 3, PoolMode::Max), k + 1));
    });
}

void linear_ops(Suite& s) {
    Rng rng(s.rng_seed(14));
    auto a = rng.normal_tensor<D>({2, 3, 4}, 1.0), b = rng.normal_tensor<D>({2, 4, 5}, 1.0), w = rng.normal_tensor<D>({4, 2}, 1.0);
    auto q = rng.normal_tensor<D>({2, 2, 5, 3}, 1.0), kk = rng.normal_tensor<D>({2, 2, 5, 3}, 1.0),
         v = rng.normal_tensor<D>({2, 2, 5, 3}, 1.0), bias = rng.normal_tensor<D>({2, 5, 5}, 0.5);
    Tensor<D> mask({2, 5, 5});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = (i % 7 == 3) ? -100.0 : 0.0;
    auto img = rng.normal_tensor<D>({2, 3, 7, 7}, 1.0), kern = rng.normal_tensor<D>({4, 3, 3, 3}, 0.5);
    auto one = rng.normal_tensor<D>({3, 6, 6}, 1.0);
    const auto k = s.next();
    s.run("matmul", {&a, &b, &w}, [&](Tape<D>& t) {
        auto ab = matmul(t.watch(a), t.watch(b));
        return add(proj(ab, k), proj(matmul(t.watch(a), t.watch(w)), k + 1));
    });
    s.run("attention", {&q, &kk, &v, &bias}, [&](Tape<D>& t) {
        auto bv = t.watch(bias);
        return proj(attention(t.watch(q), t.watch(kk), t.watch(v), 0.57, &bv, &mask), k);
    });
    s.run("conv2d", {&img, &kern}, [&](Tape<D>& t) { return proj(conv2d(t.watch(img), t.watch(kern), 2, 1), k); });
    s.run("unfold", {&one}, [&](Tape<D>& t) { return proj(unfold(t.watch(one), 2, 2, 1), k); });
}

void activation_ops(Suite& s) {
    Rng rng(s.rng_seed(15));
    auto x = rng.normal_tensor<D>({3, 5}, 2.0);
    auto sep = separated_tensor({3, 5}, rng, 0.2);
    const auto k = s.next();
    s.run("softmax", {&x}, [&](Tape<D>& t) { return add(proj(softmax(t.watch(x), 1), k), proj(softmax(t.watch(x), 0), k + 1)); });
    s.run("sigmoid", {&x}, [&](Tape<D>& t) { return proj(sigmoid(t.watch(x)), k); });
    s.run("silu", {&x}, [&](Tape<D>& t) { return proj(silu(t.watch(x)), k); });
    s.run("relu", {&sep}, [&](Tape<D>& t) { return proj(relu(t.watch(sep)), k); });
}

void norm_and_loss_ops(Suite& s) {
    Rng rng(s.rng_seed(16));
    auto x = rng.normal_tensor<D>({4, 6}, 1.0), g = rng.uniform_tensor<D>({6}, 0.5, 1.5), b = rng.normal_tensor<D>({6}, 0.3);
    auto img = rng.normal_tensor<D>({3, 4, 3, 3}, 1.0), bg = rng.uniform_tensor<D>({4}, 0.5, 1.5),
         bb = rng.normal_tensor<D>({4}, 0.3);
    auto rm = rng.normal_tensor<D>({4}, 0.2), rv = rng.uniform_tensor<D>({4}, 0.5, 2.0);
    auto prob = rng.uniform_tensor<D>({10}, 0.1, 0.9), target = rng.uniform_tensor<D>({10}, 0.0, 1.0);
    auto logits = rng.normal_tensor<D>({10}, 2.0);
    Tensor<D> boxes({5, 4}), gt({5, 4});
    // edges of a pair further than 0.01 apart, so no min/max in the overlap or
    // enclosing box switches within a step
    auto edges_apart = [](const Box& a, const Box& b) {
        for (double u : {a.x1(), a.x2()})
            for (double v : {b.x1(), b.x2()})
                if (std::abs(u - v) < 0.01) return false;
        for (double u : {a.y1(), a.y2()})
            for (double v : {b.y1(), b.y2()})
                if (std::abs(u - v) < 0.01) return false;
        return true;
    };
    for (std::size_t i = 0; i < 5; ++i) {
        D row_gt[4], row_p[4];
        do {
            const D cx = rng.uniform(0.3, 0.7), cy = rng.uniform(0.3, 0.7), w = rng.uniform(0.1, 0.4),
                    h = rng.uniform(0.1, 0.4);
            const D g[4] = {cx, cy, w, h};
            const D p[4] = {cx + rng.uniform(-0.1, 0.1), cy + rng.uniform(-0.1, 0.1), w * rng.uniform(0.6, 1.4),
                            h * rng.uniform(0.6, 1.4)};
            std::copy(g, g + 4, row_gt);
            std::copy(p, p + 4, row_p);
        } while (!edges_apart(Box{row_gt[0], row_gt[1], row_gt[2], row_gt[3]}, Box{row_p[0], row_p[1], row_p[2], row_p[3]}));
        for (std::size_t j = 0; j < 4; ++j) {
            gt.at(i, j) = row_gt[j];
            boxes.at(i, j) = row_p[j];
        }
    }
    const auto k = s.next();
    s.run("layer_norm", {&x, &g, &b}, [&](Tape<D>& t) { return proj(layer_norm(t.watch(x), t.watch(g), t.watch(b), 1e-5), k); });
    s.run("batch_norm_train", {&img, &bg, &bb}, [&](Tape<D>& t) {
        return proj(batch_norm_train<D>(t.watch(img), t.watch(bg), t.watch(bb), 1e-3, nullptr), k);
    });
    s.run("batch_norm_infer", {&img, &bg, &bb}, [&](Tape<D>& t) {
        return proj(batch_norm_infer(t.watch(img), t.watch(bg), t.watch(bb), rm, rv, 1e-3), k);
    });
    s.run("bce", {&prob}, [&](Tape<D>& t) { return bce(target, t.watch(prob)); });
    s.run("bce_with_logits", {&logits}, [&](Tape<D>& t) { return bce_with_logits(t.watch(logits), target); });
    // alpha is a stop-gradient constant, frozen at its value for the unperturbed boxes
    std::vector<double> alpha;
    for (std::size_t i = 0; i < 5; ++i) {
        alpha.push_back(ciou_terms(Box{boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)},
                                   Box{gt.at(i, 0), gt.at(i, 1), gt.at(i, 2), gt.at(i, 3)})
                            .alpha);
    }
    s.run("ciou_loss", {&boxes}, [&](Tape<D>& t) { return proj(ciou_loss_rows(t.watch(boxes), gt, &alpha), k); });
}

void modules(Suite& s) {
    {
        Rng rng(s.rng_seed(21));
        MultiHeadAttention<D> mha(8, 2, rng);
        ParamList<D> p;
        mha.collect(p, "mha");
        auto x = rng.normal_tensor<D>({2, 5, 8}, 1.0);
        auto in = trainable(p);
        in.insert(in.begin(), &x);
        const auto k = s.next();
        s.run("multi_head_attention", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(mha.forward(ctx, t.watch(x)), k);
        }, 12);
    }
    {
        Rng rng(s.rng_seed(22));
        EncoderBlock<D> enc(8, 2, rng);
        ParamList<D> p;
        enc.collect(p, "enc");
        auto x = rng.normal_tensor<D>({6, 8}, 1.0);
        auto in = trainable(p);
        in.insert(in.begin(), &x);
        const auto k = s.next();
        s.run("encoder_block", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(enc.forward(ctx, t.watch(x)), k);
        }, 12);
    }
    {
        Rng rng(s.rng_seed(23));
        MsConvConfig cfg{3, 4, 2, 2, 1, 2};
        MsConv<D> ms(cfg, rng);
        ParamList<D> p;
        ms.collect(p, "ms");
        auto x = separated_tensor({2, 3, 6, 6}, rng, 0.02);
        auto in = trainable(p);
        in.insert(in.begin(), &x);
        const auto k = s.next();
        s.run("msconv_forward", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(ms.forward(ctx, t.watch(x)), k);
        }, 12, 1e-5);
    }
    {
        Rng rng(s.rng_seed(24));
        SwinBlock<D> blk(8, 2, 4, rng);
        ParamList<D> p;
        blk.collect(p, "swin");
        auto x = rng.normal_tensor<D>({1, 8, 8, 8}, 1.0);
        auto in = trainable(p);
        in.insert(in.begin(), &x);
        const auto k = s.next();
        s.run("swin_block", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(blk.forward(ctx, t.watch(x)), k);
        }, 10);
    }
    {
        Rng rng(s.rng_seed(25));
        ICbam<D> cb(8, 4, rng);
        ParamList<D> p;
        cb.collect(p, "icbam");
        auto x = separated_tensor({2, 8, 5, 5}, rng, 0.01);
        auto in = trainable(p);
        in.insert(in.begin(), &x);
        const auto k = s.next();
        s.run("icbam", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(cb.forward(ctx, t.watch(x)), k);
        }, 16, 1e-5);
    }
    {
        Rng rng(s.rng_seed(26));
        ConvBnAct<D> conv(4, 6, 3, 2, rng);
        C3Block<D> c3(6, 6, 1, true, rng);
        SppfBlock<D> sppf(6, 6, 5, rng);
        ParamList<D> p;
        conv.collect(p, "conv");
        c3.collect(p, "c3");
        auto x = rng.normal_tensor<D>({2, 4, 9, 9}, 1.0);
        auto in = trainable(p);
        in.insert(in.begin(), &x);
        const auto k = s.next();
        s.run("conv_bn_act+c3", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(c3.forward(ctx, conv.forward(ctx, t.watch(x))), k);
        }, 12, 1e-5);
        ParamList<D> ps;
        sppf.collect(ps, "sppf");
        auto y = separated_tensor({2, 6, 5, 5}, rng, 0.01);
        auto in2 = trainable(ps);
        in2.insert(in2.begin(), &y);
        s.run("sppf", in2, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            return proj(sppf.forward(ctx, t.watch(y)), k);
        }, 12, 1e-6);
    }
    {
        // one-target scene on a 64-pixel input: grids 8, 4, 2
        Rng rng(s.rng_seed(27));
        const std::size_t no = 7;
        std::vector<Tensor<D>> heads;
        for (std::size_t g : {8, 4, 2}) heads.push_back(rng.normal_tensor<D>({2, 3 * no, g, g}, 1.0));
        const std::vector<std::vector<GroundTruth>> targets{{{1, Box{0.41, 0.57, 0.3, 0.35}}}, {}};
        const LossGeometry geom{default_anchors(64), 64, 2};
        DetachedTerms frozen;
        std::vector<Tensor<D>*> in;
        for (auto& h : heads) in.push_back(&h);
        s.run("detection_loss", in, [&](Tape<D>& t) {
            std::vector<Var<D>> hv;
            for (auto& h : heads) hv.push_back(t.watch(h));
            return detection_loss(hv, targets, geom, LossWeights{}, &frozen).total;
        }, 40);
    }
    {
        // full improved graph at 64 pixels, a few probes per tensor. Batch norm
        // over the 2×2 stride-32 maps and the generated stem kernels are
        // sharply curved, hence the small step.
        auto o = ModelOptions::toy();
        o.input_size = 64;
        Network<D> net(o, s.rng_seed(5));
        auto params = net.parameters();
        Rng rng(s.rng_seed(28));
        auto x = separated_tensor({1, 3, 64, 64}, rng, 1e-4);
        for (auto& v : x.data()) v += 0.5;
        std::vector<Tensor<D>*> in{&x};
        for (const auto& p : params) {
            // the stem encoder's last LN gain only rescales whole kernel output
            // channels, which the following batch norm cancels; its gradient is
            // zero up to BN eps and is covered by msconv_forward instead
            if (p.kind == ParamKind::Buffer || p.name == "model.0.msconv.encoder.ln2_g") continue;
            in.push_back(p.tensor);
        }
        const auto k = s.next();
        s.run("network", in, [&](Tape<D>& t) {
            Context<D> ctx{t, true};
            auto heads = net.forward(ctx, t.watch(x));
            return add(add(proj(heads[0], k), proj(heads[1], k + 1)), proj(heads[2], k + 2));
        }, 2, 1e-7);
    }
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opt, std::size_t trials) {
    std::vector<GradcheckResult> merged;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Suite s;
        s.base = opt;
        s.trial = trial;
        s.seed = 1 + 1000 * trial;
        elementwise_ops(s);
        shape_ops(s);
        pooling_ops(s);
        linear_ops(s);
        activation_ops(s);
        norm_and_loss_ops(s);
        modules(s);
        if (merged.empty()) {
            merged = std::move(s.results);
            continue;
        }
        for (std::size_t i = 0; i < merged.size(); ++i) {
            auto& m = merged[i];
            const auto& r = s.results.at(i);
            if (r.max_rel_error > m.max_rel_error) {
                m.max_rel_error = r.max_rel_error;
                m.worst_input = r.worst_input;
            }
            m.checked += r.checked;
            m.passed = m.passed && r.passed;
        }
    }
    return merged;
}

}  // namespace ymask
