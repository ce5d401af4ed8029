#include "hemotrack/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "hemotrack/common.hpp"

namespace hemo::img {

namespace {

cv::Mat to_mat_bgr(const Image& im) {
    cv::Mat m(im.h, im.w, CV_8UC3);
    for (int y = 0; y < im.h; ++y) {
        uint8_t* row = m.ptr<uint8_t>(y);
        const uint8_t* src = im.px.data() + size_t(y) * im.w * 3;
        for (int x = 0; x < im.w; ++x) {
            row[x * 3 + 0] = src[x * 3 + 2];
            row[x * 3 + 1] = src[x * 3 + 1];
            row[x * 3 + 2] = src[x * 3 + 0];
        }
    }
    return m;
}

Image from_mat_bgr(const cv::Mat& m) {
    Image im(m.cols, m.rows);
    for (int y = 0; y < m.rows; ++y) {
        const uint8_t* row = m.ptr<uint8_t>(y);
        uint8_t* dst = im.px.data() + size_t(y) * m.cols * 3;
        for (int x = 0; x < m.cols; ++x) {
            dst[x * 3 + 0] = row[x * 3 + 2];
            dst[x * 3 + 1] = row[x * 3 + 1];
            dst[x * 3 + 2] = row[x * 3 + 0];
        }
    }
    return im;
}

}  // namespace

Image load_png(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    HEMO_CHECK(!m.empty(), "load_png: cannot read '", path, "'");
    return from_mat_bgr(m);
}

void save_png(const std::string& path, const Image& im) {
    HEMO_CHECK(!im.empty(), "save_png: empty image");
    bool ok = false;
    try {
        ok = cv::imwrite(path, to_mat_bgr(im));
    } catch (const cv::Exception& e) {
        HEMO_CHECK(false, "save_png: write to '", path, "' failed: ", e.what());
    }
    HEMO_CHECK(ok, "save_png: write to '", path, "' failed");
}

Image resize(const Image& im, int w, int h) {
    HEMO_CHECK(w > 0 && h > 0, "resize: bad target size ", w, "x", h);
    cv::Mat m = to_mat_bgr(im), out;
    const int interp = (w < im.w || h < im.h) ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(m, out, cv::Size(w, h), 0, 0, interp);
    return from_mat_bgr(out);
}

nn::Var to_planes(const Image& im) {
    nn::Var v = nn::Var::leaf({3, im.h, im.w}, false);
    const int64_t hw = int64_t(im.h) * im.w;
    for (int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c) v.val()[c * hw + i] = im.px[i * 3 + c] / 255.0;
    return v;
}

nn::Var to_hsv_planes(const Image& im) {
    nn::Var v = nn::Var::leaf({4, im.h, im.w}, false);
    const int64_t hw = int64_t(im.h) * im.w;
    for (int64_t i = 0; i < hw; ++i) {
        const double r = im.px[i * 3] / 255.0, g = im.px[i * 3 + 1] / 255.0,
                     b = im.px[i * 3 + 2] / 255.0;
        const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
        const double d = mx - mn;
        double hue = 0.0;  // in turns [0,1)
        if (d > 1e-12) {
            if (mx == r)
                hue = std::fmod((g - b) / d, 6.0) / 6.0;
            else if (mx == g)
                hue = ((b - r) / d + 2.0) / 6.0;
            else
                hue = ((r - g) / d + 4.0) / 6.0;
            if (hue < 0) hue += 1.0;
        }
        const double s = mx <= 1e-12 ? 0.0 : d / mx;
        const double ang = 6.283185307179586 * hue;
        v.val()[0 * hw + i] = std::cos(ang);
        v.val()[1 * hw + i] = std::sin(ang);
        v.val()[2 * hw + i] = s;
        v.val()[3 * hw + i] = mx;
    }
    return v;
}

std::vector<double> to_gray(const Image& im) {
    std::vector<double> g(size_t(im.w) * im.h);
    for (size_t i = 0; i < g.size(); ++i)
        g[i] = (0.299 * im.px[i * 3] + 0.587 * im.px[i * 3 + 1] + 0.114 * im.px[i * 3 + 2]) / 255.0;
    return g;
}

Image from_planes(const nn::Var& planes) {
    HEMO_CHECK(planes.shape().size() == 3 && planes.dim(0) == 3, "from_planes: expected {3,H,W}");
    const int h = planes.dim(1), w = planes.dim(2);
    Image im(w, h);
    const int64_t hw = int64_t(h) * w;
    for (int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c) {
            double x = planes.val()[c * hw + i];
            x = std::min(std::max(x, 0.0), 1.0);
            im.px[i * 3 + c] = uint8_t(std::lround(x * 255.0));
        }
    return im;
}

void draw_cross(Image& im, double x, double y, int size, uint8_t r, uint8_t g, uint8_t b) {
    const int cx = int(std::lround(x)), cy = int(std::lround(y));
    for (int d = -size; d <= size; ++d) {
        if (cx + d >= 0 && cx + d < im.w && cy >= 0 && cy < im.h) {
            uint8_t* p = im.at(cx + d, cy);
            p[0] = r, p[1] = g, p[2] = b;
        }
        if (cy + d >= 0 && cy + d < im.h && cx >= 0 && cx < im.w) {
            uint8_t* p = im.at(cx, cy + d);
            p[0] = r, p[1] = g, p[2] = b;
        }
    }
}

void draw_text(Image& im, const std::string& text, int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    cv::Mat m = to_mat_bgr(im);
    cv::putText(m, text, cv::Point(x, y), cv::FONT_HERSHEY_SIMPLEX, 0.35,
                cv::Scalar(b, g, r), 1, cv::LINE_8);
    im = from_mat_bgr(m);
}

}  // namespace hemo::img
