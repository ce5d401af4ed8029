#pragma once

#include <vector>

#include "hemotrack/common.hpp"

namespace hemo::flow {

// Dense per-pixel optical flow (u = horizontal, v = vertical, in pixels).
struct FlowField {
    int w = 0, h = 0;
    std::vector<float> u, v;

    FlowField() = default;
    FlowField(int w_, int h_) : w(w_), h(h_), u(size_t(w_) * h_, 0.f), v(size_t(w_) * h_, 0.f) {}

    // Bilinear sample at continuous pixel coords, clamped to the border.
    std::pair<double, double> sample(double x, double y) const;
    double mean_magnitude() const;
};

struct BlockMatchConfig {
    int block = 8;    // block side in px
    int search = 4;   // +- search radius per level
    int levels = 2;   // pyramid depth (1 = single level)
};

// Coarse-to-fine integer block matching with per-axis parabolic sub-pixel
// refinement. Deterministic; ties resolve to the smallest offset in scan
// order.
FlowField block_matching(const std::vector<double>& prev_gray,
                         const std::vector<double>& curr_gray, int w, int h,
                         const BlockMatchConfig& cfg = {});

}  // namespace hemo::flow
