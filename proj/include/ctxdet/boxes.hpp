#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace ctxdet {

/// Axis-aligned box in image pixels, corners (x1,y1) top-left exclusive of
/// (x2,y2). Valid boxes have positive extent.
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    bool valid() const { return x2 > x1 && y2 > y1; }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
};

/// Intersection over union; 0 for disjoint boxes, throws on degenerate input.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

/// Standard delta parametrization (dx, dy, dw, dh) of gt relative to anchor.
std::array<double, 4> encode_box_delta(const Box& anchor, const Box& gt);
Box decode_box_delta(const Box& anchor, const std::array<double, 4>& delta);

/// Greedy non-maximum suppression. Returns indices of kept boxes ordered by
/// descending score; equal scores keep input order.
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_threshold);

}  // namespace ctxdet
