#include "costdet/box.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace costdet {

namespace {

// Upper bound on log-scale deltas, exp(4.135) ~ 62.5x growth.
constexpr double kMaxLogScale = 4.135166556742356;

} // namespace

double iou(const Box& a, const Box& b)
{
    if (a.degenerate() || b.degenerate()) {
        return 0.0;
    }
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) {
        return 0.0;
    }
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

Box clip_box(const Box& b, double width, double height)
{
    return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
            std::clamp(b.y2, 0.0, height)};
}

BoxDeltas encode_box(const Box& reference, const Box& target)
{
    const double wa = reference.width();
    const double ha = reference.height();
    return {(target.center_x() - reference.center_x()) / wa, (target.center_y() - reference.center_y()) / ha,
            std::log(target.width() / wa), std::log(target.height() / ha)};
}

Box decode_box(const Box& reference, const BoxDeltas& deltas)
{
    const double wa = reference.width();
    const double ha = reference.height();
    const double cx = reference.center_x() + deltas[0] * wa;
    const double cy = reference.center_y() + deltas[1] * ha;
    const double w = wa * std::exp(std::min(deltas[2], kMaxLogScale));
    const double h = ha * std::exp(std::min(deltas[3], kMaxLogScale));
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold)
{
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] > scores[b];
        }
        const auto& ba = boxes[a];
        const auto& bb = boxes[b];
        return std::tie(ba.x1, ba.y1, ba.x2, ba.y2, a) < std::tie(bb.x1, bb.y1, bb.x2, bb.y2, b);
    });

    std::vector<std::size_t> keep;
    std::vector<bool> suppressed(boxes.size(), false);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto cur = order[i];
        if (suppressed[cur]) {
            continue;
        }
        keep.push_back(cur);
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            const auto other = order[j];
            if (!suppressed[other] && iou(boxes[cur], boxes[other]) > iou_threshold) {
                suppressed[other] = true;
            }
        }
    }
    return keep;
}

} // namespace costdet
