#include "ctxdet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ctxdet {

double iou(const Box& a, const Box& b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: degenerate box");
    const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

Box clip_box(const Box& b, double width, double height) {
    return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
               std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

std::array<double, 4> encode_box_delta(const Box& anchor, const Box& gt) {
    if (!anchor.valid() || !gt.valid()) throw std::invalid_argument("encode_box_delta: degenerate box");
    const double aw = anchor.width(), ah = anchor.height();
    return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah, std::log(gt.width() / aw),
            std::log(gt.height() / ah)};
}

Box decode_box_delta(const Box& anchor, const std::array<double, 4>& delta) {
    if (!anchor.valid()) throw std::invalid_argument("decode_box_delta: degenerate anchor");
    const double aw = anchor.width(), ah = anchor.height();
    const double cx = anchor.cx() + delta[0] * aw;
    const double cy = anchor.cy() + delta[1] * ah;
    const double w = aw * std::exp(delta[2]);
    const double h = ah * std::exp(delta[3]);
    return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_threshold) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("nms: size mismatch");
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> keep;
    std::vector<bool> removed(boxes.size(), false);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (removed[i]) continue;
        keep.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (!removed[j] && iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = true;
        }
    }
    return keep;
}

}  // namespace ctxdet
