#pragma once

#include <algorithm>
#include <cmath>

namespace ymask {

// Axis-aligned box by center and extent, normalized image units unless noted.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;

    double x1() const { return cx - w / 2; }
    double y1() const { return cy - h / 2; }
    double x2() const { return cx + w / 2; }
    double y2() const { return cy + h / 2; }
    double area() const { return w * h; }

    static Box from_corners(double x1, double y1, double x2, double y2) {
        return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    }
};

inline double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    return iw > 0 && ih > 0 ? iw * ih : 0.0;
}

// Labeled box: class id plus normalized center/extent.
struct GroundTruth {
    int class_id = 0;
    Box box;
};

// Zero for disjoint or degenerate boxes.
inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    if (inter <= 0) return 0.0;
    return inter / (a.area() + b.area() - inter);
}

}  // namespace ymask
