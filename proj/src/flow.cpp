#include "hemotrack/flow.hpp"

#include <algorithm>
#include <cmath>

namespace hemo::flow {

namespace {

struct Level {
    int w, h;
    std::vector<double> px;
};

Level downsample2(const Level& in) {
    Level out;
    out.w = std::max(1, in.w / 2);
    out.h = std::max(1, in.h / 2);
    out.px.resize(size_t(out.w) * out.h);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            const int x0 = std::min(2 * x, in.w - 1), x1 = std::min(2 * x + 1, in.w - 1);
            const int y0 = std::min(2 * y, in.h - 1), y1 = std::min(2 * y + 1, in.h - 1);
            out.px[size_t(y) * out.w + x] =
                0.25 * (in.px[size_t(y0) * in.w + x0] + in.px[size_t(y0) * in.w + x1] +
                        in.px[size_t(y1) * in.w + x0] + in.px[size_t(y1) * in.w + x1]);
        }
    }
    return out;
}

double block_sad(const Level& a, const Level& b, int x0, int y0, int bw, int bh, int dx, int dy) {
    double sad = 0.0;
    for (int y = 0; y < bh; ++y) {
        const int ay = y0 + y;
        int by = ay + dy;
        by = std::min(std::max(by, 0), b.h - 1);
        for (int x = 0; x < bw; ++x) {
            const int ax = x0 + x;
            int bx = ax + dx;
            bx = std::min(std::max(bx, 0), b.w - 1);
            sad += std::abs(a.px[size_t(ay) * a.w + ax] - b.px[size_t(by) * b.w + bx]);
        }
    }
    return sad;
}

// Bilinear upsample of a coarse grid whose samples sit at block centers.
void densify(const std::vector<float>& gu, const std::vector<float>& gv, int gw, int gh, int block,
             FlowField& out) {
    for (int y = 0; y < out.h; ++y) {
        double fy = (double(y) - block / 2.0) / block;
        fy = std::min(std::max(fy, 0.0), double(gh - 1));
        const int y0 = int(fy);
        const int y1 = std::min(y0 + 1, gh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out.w; ++x) {
            double fx = (double(x) - block / 2.0) / block;
            fx = std::min(std::max(fx, 0.0), double(gw - 1));
            const int x0 = int(fx);
            const int x1 = std::min(x0 + 1, gw - 1);
            const double wx = fx - x0;
            const size_t i = size_t(y) * out.w + x;
            out.u[i] = float((1 - wy) * ((1 - wx) * gu[size_t(y0) * gw + x0] +
                                         wx * gu[size_t(y0) * gw + x1]) +
                             wy * ((1 - wx) * gu[size_t(y1) * gw + x0] +
                                   wx * gu[size_t(y1) * gw + x1]));
            out.v[i] = float((1 - wy) * ((1 - wx) * gv[size_t(y0) * gw + x0] +
                                         wx * gv[size_t(y0) * gw + x1]) +
                             wy * ((1 - wx) * gv[size_t(y1) * gw + x0] +
                                   wx * gv[size_t(y1) * gw + x1]));
        }
    }
}

}  // namespace

std::pair<double, double> FlowField::sample(double x, double y) const {
    double fx = std::min(std::max(x, 0.0), double(w - 1));
    double fy = std::min(std::max(y, 0.0), double(h - 1));
    const int x0 = int(fx), y0 = int(fy);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double wx = fx - x0, wy = fy - y0;
    auto lerp = [&](const std::vector<float>& f) {
        return (1 - wy) * ((1 - wx) * f[size_t(y0) * w + x0] + wx * f[size_t(y0) * w + x1]) +
               wy * ((1 - wx) * f[size_t(y1) * w + x0] + wx * f[size_t(y1) * w + x1]);
    };
    return {lerp(u), lerp(v)};
}

double FlowField::mean_magnitude() const {
    if (u.empty()) return 0.0;
    double s = 0.0;
    for (size_t i = 0; i < u.size(); ++i) s += std::sqrt(double(u[i]) * u[i] + double(v[i]) * v[i]);
    return s / double(u.size());
}

FlowField block_matching(const std::vector<double>& prev_gray,
                         const std::vector<double>& curr_gray, int w, int h,
                         const BlockMatchConfig& cfg) {
    HEMO_CHECK(w > 0 && h > 0 && prev_gray.size() == size_t(w) * h &&
                   curr_gray.size() == size_t(w) * h,
               "block_matching: bad image dims");
    HEMO_CHECK(cfg.block >= 2 && cfg.search >= 1 && cfg.levels >= 1,
               "block_matching: bad config");

    std::vector<Level> pa{{w, h, prev_gray}}, pb{{w, h, curr_gray}};
    for (int l = 1; l < cfg.levels; ++l) {
        if (pa.back().w < 2 * cfg.block || pa.back().h < 2 * cfg.block) break;
        pa.push_back(downsample2(pa.back()));
        pb.push_back(downsample2(pb.back()));
    }

    FlowField prev_level;
    for (int l = int(pa.size()) - 1; l >= 0; --l) {
        const Level &A = pa[l], &B = pb[l];
        const int gw = std::max(1, (A.w + cfg.block - 1) / cfg.block);
        const int gh = std::max(1, (A.h + cfg.block - 1) / cfg.block);
        std::vector<float> gu(size_t(gw) * gh, 0.f), gv(size_t(gw) * gh, 0.f);

        for (int by = 0; by < gh; ++by) {
            for (int bx = 0; bx < gw; ++bx) {
                const int x0 = std::min(bx * cfg.block, A.w - cfg.block);
                const int y0 = std::min(by * cfg.block, A.h - cfg.block);
                const int bw = cfg.block, bh = cfg.block;

                int ix = 0, iy = 0;
                if (prev_level.w > 0) {
                    auto [pu, pv] = prev_level.sample(x0 + bw / 2.0, y0 + bh / 2.0);
                    ix = int(std::lround(pu));
                    iy = int(std::lround(pv));
                }

                double best = 1e300;
                int bdx = ix, bdy = iy;
                for (int dy = iy - cfg.search; dy <= iy + cfg.search; ++dy) {
                    for (int dx = ix - cfg.search; dx <= ix + cfg.search; ++dx) {
                        const double s = block_sad(A, B, x0, y0, bw, bh, dx, dy);
                        if (s < best) {
                            best = s;
                            bdx = dx;
                            bdy = dy;
                        }
                    }
                }

                // Parabolic refinement per axis. A zero-cost match is already
                // exact; the fitted vertex would only drag it off the true
                // minimum when the flanking costs are asymmetric.
                double fx = bdx, fy = bdy;
                if (best > 0.0) {
                    {
                        const double sm = block_sad(A, B, x0, y0, bw, bh, bdx - 1, bdy);
                        const double sp = block_sad(A, B, x0, y0, bw, bh, bdx + 1, bdy);
                        const double den = sm - 2.0 * best + sp;
                        if (den > 1e-12)
                            fx += std::min(std::max(0.5 * (sm - sp) / den, -0.5), 0.5);
                    }
                    {
                        const double sm = block_sad(A, B, x0, y0, bw, bh, bdx, bdy - 1);
                        const double sp = block_sad(A, B, x0, y0, bw, bh, bdx, bdy + 1);
                        const double den = sm - 2.0 * best + sp;
                        if (den > 1e-12)
                            fy += std::min(std::max(0.5 * (sm - sp) / den, -0.5), 0.5);
                    }
                }
                gu[size_t(by) * gw + bx] = float(fx);
                gv[size_t(by) * gw + bx] = float(fy);
            }
        }

        FlowField dense(A.w, A.h);
        densify(gu, gv, gw, gh, cfg.block, dense);
        if (l > 0) {
            // Seed the next finer level: double the vectors at double resolution.
            FlowField up(pa[l - 1].w, pa[l - 1].h);
            for (int y = 0; y < up.h; ++y)
                for (int x = 0; x < up.w; ++x) {
                    auto [su, sv] = dense.sample(x / 2.0, y / 2.0);
                    const size_t i = size_t(y) * up.w + x;
                    up.u[i] = float(2.0 * su);
                    up.v[i] = float(2.0 * sv);
                }
            prev_level = std::move(up);
        } else {
            return dense;
        }
    }
    return prev_level;  // unreachable for levels >= 1
}

}  // namespace hemo::flow
