#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "ymask/box.h"
#include "ymask/model.h"
#include "ymask/ops.h"

namespace ymask {

// Pieces of CIoU = IoU - rho²/c² - alpha·v, with c the diagonal of the
// smallest box enclosing both.
struct CiouTerms {
    double iou = 0, rho2 = 0, c2 = 0, v = 0, alpha = 0, ciou = 0;
};

CiouTerms ciou_terms(const Box& pred, const Box& gt);
inline double ciou(const Box& pred, const Box& gt) { return ciou_terms(pred, gt).ciou; }
inline double ciou_loss(const Box& pred, const Box& gt) { return 1.0 - ciou(pred, gt); }

// 1 - IoU + rho²/c² + alpha·v with alpha supplied by the caller.
double ciou_loss_with_alpha(const Box& pred, const Box& gt, double alpha);

// d(1 - CIoU)/d(cx, cy, w, h) of the predicted box, alpha held constant
// (at `alpha` when given, else at its value for this pair).
std::array<double, 4> ciou_loss_grad(const Box& pred, const Box& gt, const double* alpha = nullptr);

// Row-wise 1 - CIoU for predicted boxes pred [n, 4] (cx, cy, w, h) against
// fixed targets gt [n, 4]; returns [n]. Passing `alpha` (n values) replaces
// the computed trade-off weights, which gradient checks use to hold them fixed.
template <typename T>
Var<T> ciou_loss_rows(const Var<T>& pred, const Tensor<T>& gt, const std::vector<double>* alpha = nullptr);

struct LossWeights {
    double box = 0.05;
    double obj = 1.0;
    double cls = 0.5;
};

// Objectness weight per scale, finest first.
inline constexpr std::array<double, 3> kObjectnessBalance{4.0, 1.0, 0.4};

// An anchor matches a target when no side ratio exceeds this.
inline constexpr double kAnchorRatioLimit = 4.0;

struct LossGeometry {
    AnchorSet anchors;
    std::size_t input_size = 160;
    std::size_t n_classes = 2;
};

// Values the loss treats as constants (CIoU alpha per match, objectness
// targets per scale). The first call with frozen == false records them and
// sets frozen; later calls reuse them.
struct DetachedTerms {
    bool frozen = false;
    std::vector<std::vector<double>> alpha;
    std::vector<std::vector<double>> obj_target;
};

template <typename T>
struct LossBreakdown {
    Var<T> total;  // weighted sum scaled by batch size
    double box = 0, obj = 0, cls = 0;
    std::size_t matches = 0;
};

// heads: raw maps [B, 3·(5+nc), G, G] per stride; targets: one list per image.
template <typename T>
LossBreakdown<T> detection_loss(const std::vector<Var<T>>& heads, const std::vector<std::vector<GroundTruth>>& targets,
                                const LossGeometry& geom, const LossWeights& weights = {},
                                DetachedTerms* detached = nullptr);

}  // namespace ymask
