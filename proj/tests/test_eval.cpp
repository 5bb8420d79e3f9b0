#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "ymask/eval.h"
#include "ymask/rng.h"

using namespace ymask;

namespace {

Detection det(int cls, Box b, double conf) {
    Detection d;
    d.class_id = cls;
    d.box = b;
    d.confidence = conf;
    d.class_scores.assign(2, 0.0);
    d.class_scores[static_cast<std::size_t>(cls)] = conf;
    return d;
}

// AP by enumerating every confidence threshold, building the (R, P) point for
// the detections at or above it, then integrating the envelope over recall.
double brute_force_ap(const std::vector<ScoredFlag>& flags, std::size_t n_gt) {
    std::set<double> thresholds;
    for (const auto& f : flags) thresholds.insert(f.confidence);
    std::vector<std::pair<double, double>> points;  // (recall, precision)
    for (double t : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (const auto& f : flags) {
            if (f.confidence >= t) ++(f.true_positive ? tp : fp);
        }
        points.emplace_back(static_cast<double>(tp) / static_cast<double>(n_gt),
                            static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    std::set<double> recalls{0.0};
    for (const auto& p : points) recalls.insert(p.first);
    const std::vector<double> r(recalls.begin(), recalls.end());
    double area = 0;
    for (std::size_t i = 1; i < r.size(); ++i) {
        // envelope is constant on (r[i-1], r[i]]: max precision among points with recall >= r[i]
        double env = 0;
        for (const auto& p : points)
            if (p.first >= r[i]) env = std::max(env, p.second);
        area += (r[i] - r[i - 1]) * env;
    }
    return area;
}

}  // namespace

TEST_CASE("parse_labels reads YOLO lines") {
    const auto g = parse_labels("1 0.5 0.5 0.2 0.3\n");
    REQUIRE(g.size() == 1);
    CHECK(g[0].class_id == 1);
    CHECK(g[0].box.cx == 0.5);
    CHECK(g[0].box.cy == 0.5);
    CHECK(g[0].box.w == 0.2);
    CHECK(g[0].box.h == 0.3);
    CHECK(parse_labels("").empty());
    CHECK(parse_labels("\n  \n").empty());
    CHECK(parse_labels("0 0.1 0.2 0.3 0.4\r\n1 1 1 1 1").size() == 2);
}

TEST_CASE("parse_labels reports the failing line") {
    try {
        parse_labels("1 0.5 0.5 0.2");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()) == "expected 5 fields, got 4 at line 1");
        CHECK(e.line() == 1);
    }
    try {
        parse_labels("0 0.1 0.1 0.1 0.1\n\n1 0.5 x 0.2 0.2\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse_labels("0 0.5 1.5 0.2 0.2"), ParseError);
    CHECK_THROWS_AS(parse_labels("0 0.5 -0.1 0.2 0.2"), ParseError);
    CHECK_THROWS_AS(parse_labels("0.5 0.5 0.5 0.2 0.2"), ParseError);
}

TEST_CASE("format_labels round-trips through parse_labels") {
    const std::vector<GroundTruth> g{{0, Box{0.25, 0.5, 0.125, 0.25}}, {1, Box{0.75, 0.5, 0.5, 0.375}}};
    const auto back = parse_labels(format_labels(g));
    REQUIRE(back.size() == 2);
    CHECK(back[1].class_id == 1);
    CHECK(back[1].box.w == 0.5);
}

TEST_CASE("match counts") {
    const Box b{0.5, 0.5, 0.2, 0.2};
    const std::vector<GroundTruth> one{{0, b}};
    auto m = match({det(0, b, 0.9)}, one, 0.5);
    CHECK(m.counts.tp == 1);
    CHECK(m.counts.fp == 0);
    CHECK(m.counts.fn == 0);

    m = match({det(0, b, 0.9), det(0, Box{0.51, 0.5, 0.2, 0.2}, 0.8)}, one, 0.5);
    CHECK(m.counts.tp == 1);
    CHECK(m.counts.fp == 1);
    CHECK(m.true_positive == std::vector<bool>{true, false});

    m = match({det(1, b, 0.9)}, one, 0.5);
    CHECK(m.counts.tp == 0);
    CHECK(m.counts.fp == 1);
    CHECK(m.counts.fn == 1);

    m = match({}, {}, 0.5);
    CHECK(m.counts.tp + m.counts.fp + m.counts.fn == 0);
}

TEST_CASE("match prefers the higher-confidence detection regardless of input order") {
    const Box b{0.5, 0.5, 0.2, 0.2};
    const auto m = match({det(0, Box{0.52, 0.5, 0.2, 0.2}, 0.3), det(0, b, 0.9)}, {{0, b}}, 0.5);
    CHECK(m.order == std::vector<std::size_t>{1, 0});
    CHECK(m.true_positive == std::vector<bool>{true, false});
}

TEST_CASE("match is invariant to ground-truth order and monotone in the threshold") {
    Rng rng(31);
    for (int scene = 0; scene < 100; ++scene) {
        std::vector<GroundTruth> gts;
        std::vector<Detection> dets;
        const int ng = rng.uniform_int(0, 5), nd = rng.uniform_int(0, 6);
        for (int i = 0; i < ng; ++i)
            gts.push_back({rng.uniform_int(0, 1), Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
                                                      rng.uniform(0.05, 0.3)}});
        for (int i = 0; i < nd; ++i)
            dets.push_back(det(rng.uniform_int(0, 1),
                               Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)},
                               rng.uniform()));
        auto reversed = gts;
        std::reverse(reversed.begin(), reversed.end());
        const auto a = match(dets, gts, 0.3), b = match(dets, reversed, 0.3);
        CHECK(a.counts.tp == b.counts.tp);
        CHECK(a.true_positive == b.true_positive);
        std::size_t prev = a.counts.tp;
        for (double t : {0.4, 0.5, 0.7, 0.9}) {
            const auto m = match(dets, gts, t);
            CHECK(m.counts.tp <= prev);
            CHECK(m.counts.tp + m.counts.fn == gts.size());
            prev = m.counts.tp;
        }
    }
}

TEST_CASE("precision and recall") {
    auto pr = precision_recall({8, 2, 0});
    CHECK(pr.precision == doctest::Approx(0.8));
    pr = precision_recall({8, 0, 2});
    CHECK(pr.recall == doctest::Approx(0.8));
    pr = precision_recall({0, 0, 0});
    CHECK(pr.precision == 1.0);
    CHECK(pr.recall == 1.0);
}

TEST_CASE("average precision hand traces") {
    CHECK(average_precision(pr_curve({{0.9, true}}, 1)) == 1.0);
    CHECK(average_precision(pr_curve({{0.9, true}, {0.8, false}}, 1)) == 1.0);
    CHECK(std::abs(average_precision(pr_curve({{0.9, true}, {0.8, false}, {0.7, true}}, 2)) - 5.0 / 6.0) < 1e-12);
    CHECK(average_precision(pr_curve({}, 3)) == 0.0);
    CHECK(average_precision(pr_curve({{0.5, false}}, 1)) == 0.0);
}

TEST_CASE("tied confidences enter the curve together") {
    // a TP and an FP at the same confidence give one point at precision 1/2
    const auto c1 = pr_curve({{0.5, false}, {0.5, true}}, 1);
    const auto c2 = pr_curve({{0.5, true}, {0.5, false}}, 1);
    REQUIRE(c1.size() == 1);
    CHECK(c1[0].precision == 0.5);
    CHECK(average_precision(c1) == average_precision(c2));
}

TEST_CASE("average precision equals the threshold-enumeration oracle") {
    Rng rng(77);
    for (int scene = 0; scene < 300; ++scene) {
        const std::size_t n_gt = static_cast<std::size_t>(rng.uniform_int(1, 10));
        std::vector<ScoredFlag> flags;
        const int nd = rng.uniform_int(0, 10);
        std::size_t tp = 0;
        for (int i = 0; i < nd; ++i) {
            const bool hit = tp < n_gt && rng.uniform() < 0.6;
            tp += hit;
            // coarse confidences so ties occur
            flags.push_back({std::round(rng.uniform() * 8) / 8, hit});
        }
        const double ap = average_precision(pr_curve(flags, n_gt));
        CHECK(std::abs(ap - brute_force_ap(flags, n_gt)) < 1e-12);
    }
}

TEST_CASE("adding a true positive never lowers AP") {
    Rng rng(78);
    for (int scene = 0; scene < 200; ++scene) {
        const std::size_t n_gt = 6;
        std::vector<ScoredFlag> flags;
        std::size_t tp = 0;
        for (int i = 0; i < 5; ++i) {
            const bool hit = rng.uniform() < 0.5;
            tp += hit;
            flags.push_back({rng.uniform(), hit});
        }
        const double before = average_precision(pr_curve(flags, n_gt));
        flags.push_back({rng.uniform(), true});
        CHECK(average_precision(pr_curve(flags, n_gt)) >= before - 1e-15);
    }
}

TEST_CASE("a low-confidence false positive leaves AP unchanged") {
    Rng rng(79);
    for (int scene = 0; scene < 200; ++scene) {
        std::vector<ScoredFlag> flags;
        for (int i = 0; i < 6; ++i) flags.push_back({rng.uniform(0.1, 1.0), rng.uniform() < 0.5});
        const double before = average_precision(pr_curve(flags, 5));
        flags.push_back({0.05, false});
        CHECK(average_precision(pr_curve(flags, 5)) == doctest::Approx(before).epsilon(1e-15));
    }
}

TEST_CASE("mean AP and thresholds") {
    CHECK(*mean_ap({0.8, 0.6}) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(*mean_ap({0.8, std::nullopt}) == 0.8);
    CHECK(!mean_ap({std::nullopt, std::nullopt}));
    const auto t = coco_iou_thresholds();
    CHECK(t.size() == 10);
    CHECK(t.front() == 0.5);
    CHECK(t.back() == 0.95);
    for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i] - t[i - 1] == doctest::Approx(0.05));
}

TEST_CASE("evaluate with oracle detections scores 1") {
    std::vector<std::vector<GroundTruth>> gts{{{0, Box{0.3, 0.3, 0.2, 0.2}}, {1, Box{0.7, 0.7, 0.3, 0.2}}},
                                              {{1, Box{0.5, 0.5, 0.4, 0.4}}}};
    std::vector<std::vector<Detection>> dets;
    for (const auto& image : gts) {
        std::vector<Detection> d;
        for (const auto& g : image) d.push_back(det(g.class_id, g.box, 1.0));
        dets.push_back(d);
    }
    const auto r = evaluate(dets, gts, 2);
    CHECK(*r.map50 == 1.0);
    CHECK(*r.map50_95 == 1.0);
    CHECK(r.pr.precision == 1.0);
    CHECK(r.pr.recall == 1.0);
}

TEST_CASE("evaluate marks a class without ground truth as absent") {
    std::vector<std::vector<GroundTruth>> gts{{{0, Box{0.3, 0.3, 0.2, 0.2}}}};
    std::vector<std::vector<Detection>> dets{{det(0, Box{0.3, 0.3, 0.2, 0.2}, 0.9)}};
    const auto r = evaluate(dets, gts, 2);
    CHECK(!r.ap50[1]);
    CHECK(*r.map50 == 1.0);
    const auto text = r.format();
    CHECK(text == "P\t1.000000\nR\t1.000000\nAP_face\t1.000000\nAP_mask\tnan\nmAP50\t1.000000\nmAP50_95\t1.000000\n");
}

TEST_CASE("mAP50_95 is the mean over ten thresholds") {
    // a box with IoU exactly between thresholds: 0.72 passes 0.5..0.70, fails 0.75..0.95
    const Box g{0.5, 0.5, 0.5, 0.5};
    const Box d{0.5, 0.5, 0.5 * 0.72, 0.5};
    REQUIRE(iou(d, g) == doctest::Approx(0.72));
    const auto r = evaluate({{det(0, d, 0.9)}}, {{{0, g}}}, 2);
    CHECK(*r.map50 == 1.0);
    CHECK(std::abs(*r.map50_95 - 0.5) < 1e-12);
}
