#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hemotrack/tensor.hpp"

namespace hemo::img {

// Interleaved 8-bit RGB image.
struct Image {
    int w = 0, h = 0;
    std::vector<uint8_t> px;  // size 3*w*h, RGB order

    Image() = default;
    Image(int w_, int h_, uint8_t fill = 0) : w(w_), h(h_), px(size_t(3) * w_ * h_, fill) {}

    uint8_t* at(int x, int y) { return px.data() + (size_t(y) * w + x) * 3; }
    const uint8_t* at(int x, int y) const { return px.data() + (size_t(y) * w + x) * 3; }
    bool empty() const { return px.empty(); }
};

Image load_png(const std::string& path);
void save_png(const std::string& path, const Image& im);

Image resize(const Image& im, int w, int h);

// {3,H,W} double planes in [0,1].
nn::Var to_planes(const Image& im);
// Hue is encoded as (cos, sin) so the red wrap-around does not create jumps:
// {4,H,W} planes (h_cos, h_sin, s, v), all in [-1,1] or [0,1].
nn::Var to_hsv_planes(const Image& im);
// Luma in [0,1], row-major h*w.
std::vector<double> to_gray(const Image& im);

Image from_planes(const nn::Var& planes);  // clamps to [0,1]

// Simple annotation helpers for overlay output.
void draw_cross(Image& im, double x, double y, int size, uint8_t r, uint8_t g, uint8_t b);
void draw_text(Image& im, const std::string& text, int x, int y, uint8_t r, uint8_t g, uint8_t b);

}  // namespace hemo::img
