#pragma once

#include <array>
#include <span>
#include <vector>

namespace costdet {

/// Axis-aligned box in continuous pixel coordinates. Pixel (col, row)
/// covers [col, col+1) x [row, row+1), so integer boxes are half-open.
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }
    bool degenerate() const { return !(x2 > x1) || !(y2 > y1); }

    bool operator==(const Box&) const = default;
};

/// Intersection over union. Degenerate boxes have IoU 0 with everything.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

/// Standard box-delta encoding relative to a reference (anchor) box:
/// (dx/wa, dy/ha, log(w/wa), log(h/ha)).
using BoxDeltas = std::array<double, 4>;

BoxDeltas encode_box(const Box& reference, const Box& target);
Box decode_box(const Box& reference, const BoxDeltas& deltas);

/// Greedy non-maximum suppression. Returns indices of kept boxes ordered by
/// descending score. Ties are broken on box coordinates, then index, so the
/// kept set does not depend on input order.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

} // namespace costdet
