#pragma once

#include <algorithm>
#include <cmath>

namespace docklab {

// Axis-aligned box, (x, y) is the top-left corner. Coordinates are
// normalized to the image frame in datasets, but the geometry here is
// scale-agnostic.
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double area() const { return w * h; }
    double cx() const { return x + 0.5 * w; }
    double cy() const { return y + 0.5 * h; }

    friend bool operator==(const Box& a, const Box& b) {
        return a.x == b.x && a.y == b.y && a.w == b.w && a.h == b.h;
    }
};

inline double intersection_area(const Box& a, const Box& b) {
    const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
    const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    return ix * iy;
}

inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

// Clip a box to the unit frame, preserving as much extent as possible.
inline Box clip_to_frame(Box b) {
    b.x = std::clamp(b.x, 0.0, 1.0);
    b.y = std::clamp(b.y, 0.0, 1.0);
    b.w = std::clamp(b.w, 0.0, 1.0 - b.x);
    b.h = std::clamp(b.h, 0.0, 1.0 - b.y);
    return b;
}

}  // namespace docklab
