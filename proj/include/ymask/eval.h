#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ymask/box.h"
#include "ymask/model.h"

namespace ymask {

// One GroundTruth per nonempty line "class cx cy w h" (YOLO TXT layout).
// Throws ParseError with the 1-based line number.
std::vector<GroundTruth> parse_labels(std::string_view text);
std::string format_labels(const std::vector<GroundTruth>& labels);

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

struct MatchResult {
    ConfusionCounts counts;
    // parallel to the detections in confidence order (ties keep input order)
    std::vector<std::size_t> order;
    std::vector<bool> true_positive;
};

// Greedy matching: in confidence order, each detection takes the unmatched
// same-class ground truth of highest IoU if that IoU reaches iou_thresh.
MatchResult match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_thresh);

struct PrecisionRecall {
    double precision = 1.0, recall = 1.0;
};

// Empty denominators give 1 (nothing predicted, nothing missed).
PrecisionRecall precision_recall(const ConfusionCounts& counts);

struct ScoredFlag {
    double confidence = 0;
    bool true_positive = false;
};

struct PrPoint {
    double confidence = 0, precision = 0, recall = 0;
};
using PrCurve = std::vector<PrPoint>;

// Cumulative precision/recall with one point per distinct confidence
// (tied detections enter together).
PrCurve pr_curve(std::vector<ScoredFlag> flags, std::size_t n_ground_truth);

// Area under the precision envelope max_{r' >= r} P(r'), all points.
double average_precision(const PrCurve& curve);

// Mean over the defined entries; nullopt when none is defined.
std::optional<double> mean_ap(const std::vector<std::optional<double>>& per_class);

// 0.50, 0.55, ..., 0.95
std::array<double, 10> coco_iou_thresholds();

struct EvalReport {
    std::vector<std::string> class_names;
    PrecisionRecall pr;                                // at IoU 0.5 over all classes
    std::vector<std::optional<double>> ap50;           // per class
    std::vector<std::optional<double>> ap50_95;        // per class, averaged over thresholds
    std::optional<double> map50, map50_95;

    // Fixed-key "key<TAB>value" lines: P, R, AP_<class>..., mAP50, mAP50_95.
    // Undefined values print as "nan".
    std::string format() const;
};

std::vector<std::string> default_class_names(std::size_t n_classes);

// Per-image detections against per-image ground truth.
EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<GroundTruth>>& ground_truth, std::size_t n_classes);

}  // namespace ymask
