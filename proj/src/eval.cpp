#include "ymask/eval.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace ymask {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

double parse_number(std::string_view field, std::size_t line) {
    double v = 0;
    const auto* end = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(field.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
        throw ParseError("non-numeric field '" + std::string(field) + "'", line);
    }
    return v;
}

}  // namespace

std::vector<GroundTruth> parse_labels(std::string_view text) {
    std::vector<GroundTruth> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        ++line_no;
        const auto fields = split_fields(line);
        if (!fields.empty()) {
            if (fields.size() != 5) {
                throw ParseError("expected 5 fields, got " + std::to_string(fields.size()), line_no);
            }
            const double cls = parse_number(fields[0], line_no);
            if (cls < 0 || cls != std::floor(cls)) throw ParseError("class id must be a nonnegative integer", line_no);
            double v[4];
            for (int k = 0; k < 4; ++k) {
                v[k] = parse_number(fields[k + 1], line_no);
                if (v[k] < 0 || v[k] > 1) throw ParseError("coordinate outside [0,1]", line_no);
            }
            out.push_back({static_cast<int>(cls), Box{v[0], v[1], v[2], v[3]}});
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return out;
}

std::string format_labels(const std::vector<GroundTruth>& labels) {
    std::string out;
    char buf[128];
    for (const auto& g : labels) {
        std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", g.class_id, g.box.cx, g.box.cy, g.box.w, g.box.h);
        out += buf;
    }
    return out;
}

MatchResult match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_thresh) {
    MatchResult r;
    r.order.resize(dets.size());
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
    std::vector<bool> taken(gts.size(), false);
    r.true_positive.reserve(dets.size());
    for (auto di : r.order) {
        const auto& d = dets[di];
        double best = -1;
        std::size_t best_j = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (taken[j] || gts[j].class_id != d.class_id) continue;
            const double v = iou(d.box, gts[j].box);
            // strict comparison keeps the lowest index on equal IoU
            if (v > best) {
                best = v;
                best_j = j;
            }
        }
        const bool hit = best_j < gts.size() && best >= iou_thresh;
        if (hit) taken[best_j] = true;
        r.true_positive.push_back(hit);
        ++(hit ? r.counts.tp : r.counts.fp);
    }
    r.counts.fn = gts.size() - r.counts.tp;
    return r;
}

PrecisionRecall precision_recall(const ConfusionCounts& c) {
    PrecisionRecall pr;
    if (c.tp + c.fp > 0) pr.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) pr.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return pr;
}

PrCurve pr_curve(std::vector<ScoredFlag> flags, std::size_t n_ground_truth) {
    std::stable_sort(flags.begin(), flags.end(),
                     [](const ScoredFlag& a, const ScoredFlag& b) { return a.confidence > b.confidence; });
    PrCurve curve;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        ++(flags[i].true_positive ? tp : fp);
        if (i + 1 < flags.size() && flags[i + 1].confidence == flags[i].confidence) continue;
        const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double r = n_ground_truth ? static_cast<double>(tp) / static_cast<double>(n_ground_truth) : 0.0;
        curve.push_back({flags[i].confidence, p, r});
    }
    return curve;
}

double average_precision(const PrCurve& curve) {
    double area = 0, envelope = 0;
    // walk from the lowest confidence (highest recall) up
    for (std::size_t i = curve.size(); i-- > 0;) {
        envelope = std::max(envelope, curve[i].precision);
        const double prev_recall = i ? curve[i - 1].recall : 0.0;
        area += (curve[i].recall - prev_recall) * envelope;
    }
    return area;
}

std::optional<double> mean_ap(const std::vector<std::optional<double>>& per_class) {
    double total = 0;
    std::size_t n = 0;
    for (const auto& v : per_class) {
        if (!v) continue;
        total += *v;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

std::array<double, 10> coco_iou_thresholds() {
    std::array<double, 10> t{};
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (50.0 + 5.0 * static_cast<double>(i)) / 100.0;
    return t;
}

std::vector<std::string> default_class_names(std::size_t n_classes) {
    if (n_classes == 2) return {"face", "mask"};
    std::vector<std::string> names;
    for (std::size_t c = 0; c < n_classes; ++c) names.push_back("class" + std::to_string(c));
    return names;
}

std::string EvalReport::format() const {
    std::string out;
    auto line = [&](const std::string& key, std::optional<double> v) {
        char buf[64];
        if (v) {
            std::snprintf(buf, sizeof buf, "%.6f", *v);
        } else {
            std::snprintf(buf, sizeof buf, "nan");
        }
        out += key + "\t" + buf + "\n";
    };
    line("P", pr.precision);
    line("R", pr.recall);
    for (std::size_t c = 0; c < class_names.size(); ++c) line("AP_" + class_names[c], ap50[c]);
    line("mAP50", map50);
    line("mAP50_95", map50_95);
    return out;
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<GroundTruth>>& ground_truth, std::size_t n_classes) {
    if (detections.size() != ground_truth.size()) {
        throw DimensionError("evaluate: " + std::to_string(detections.size()) + " detection lists for " +
                             std::to_string(ground_truth.size()) + " images");
    }
    EvalReport report;
    report.class_names = default_class_names(n_classes);

    std::vector<std::size_t> gt_count(n_classes, 0);
    for (const auto& image : ground_truth) {
        for (const auto& g : image) {
            if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= n_classes) {
                throw DimensionError("evaluate: class id " + std::to_string(g.class_id) + " out of range");
            }
            ++gt_count[static_cast<std::size_t>(g.class_id)];
        }
    }

    const auto thresholds = coco_iou_thresholds();
    std::vector<std::vector<std::optional<double>>> ap(thresholds.size());
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        std::vector<std::vector<ScoredFlag>> flags(n_classes);
        ConfusionCounts total;
        for (std::size_t i = 0; i < detections.size(); ++i) {
            const auto m = match(detections[i], ground_truth[i], thresholds[t]);
            total += m.counts;
            for (std::size_t k = 0; k < m.order.size(); ++k) {
                const auto& d = detections[i][m.order[k]];
                if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= n_classes) continue;
                flags[static_cast<std::size_t>(d.class_id)].push_back({d.confidence, m.true_positive[k]});
            }
        }
        if (t == 0) report.pr = precision_recall(total);
        for (std::size_t c = 0; c < n_classes; ++c) {
            if (gt_count[c] == 0) {
                ap[t].push_back(std::nullopt);
            } else {
                ap[t].push_back(average_precision(pr_curve(std::move(flags[c]), gt_count[c])));
            }
        }
    }

    report.ap50 = ap[0];
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (!ap[0][c]) {
            report.ap50_95.push_back(std::nullopt);
            continue;
        }
        double s = 0;
        for (const auto& per_t : ap) s += *per_t[c];
        report.ap50_95.push_back(s / static_cast<double>(thresholds.size()));
    }
    report.map50 = mean_ap(report.ap50);
    std::vector<std::optional<double>> per_threshold;
    for (const auto& per_t : ap) per_threshold.push_back(mean_ap(per_t));
    report.map50_95 = mean_ap(per_threshold);
    return report;
}

}  // namespace ymask
