#include "hemotrack/source_detect.hpp"

#include <cmath>

#include "hemotrack/flow.hpp"

namespace hemo::detect {

// ---- red prior ------------------------------------------------------------

std::vector<double> red_mask(const img::Image& im) {
    std::vector<double> out(size_t(im.w) * im.h);
    for (int i = 0; i < im.w * im.h; ++i) {
        const double r = im.px[size_t(i) * 3 + 0];
        const double g = im.px[size_t(i) * 3 + 1];
        const double b = im.px[size_t(i) * 3 + 2];
        const double dom = std::max(0.0, (r - std::max(g, b)) / 255.0);
        out[i] = (r / 255.0) * dom;
    }
    return out;
}

nn::Var red_mask_map(const img::Image& im) {
    nn::Var v = nn::Var::leaf({1, im.h, im.w}, false);
    v.val() = red_mask(im);
    return v;
}

double mean_red_score(const img::Image& im) {
    auto m = red_mask(im);
    double s = 0;
    for (double x : m) s += x;
    return m.empty() ? 0.0 : s / double(m.size());
}

// ---- supervision targets ----------------------------------------------------

nn::Var gaussian_target(int w, int h, double x, double y, double sigma) {
    HEMO_CHECK(w > 0 && h > 0, "gaussian_target: empty frame");
    HEMO_CHECK(sigma > 0, "gaussian_target: sigma must be positive, got ", sigma);
    nn::Var v = nn::Var::leaf({1, h, w}, false);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double dx = c - x, dy = r - y;
            v.val()[size_t(r) * w + c] = std::exp(-(dx * dx + dy * dy) * inv);
        }
    return v;
}

double default_sigma(int w, int h, double frac) {
    return frac * std::sqrt(double(w) * w + double(h) * h);
}

// ---- model --------------------------------------------------------------------

DetectModel::DetectModel(const DetectNetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    HEMO_CHECK(cfg.num_scales >= 1 && cfg.num_scales <= 4,
               "detect: num_scales must be in [1,4]");
    Rng rng(seed);
    const int hc = cfg.head_channels, fc = cfg.feat_channels, d = cfg.fuse_dim;
    // heat-map head: two stride-2 3x3 convs, x4 upsample, 1x1 squash
    ps_.create("head.c1.w", {hc, 3, 3, 3}, rng);
    ps_.create_zeros("head.c1.b", {hc});
    ps_.create("head.c2.w", {hc, hc, 3, 3}, rng);
    ps_.create_zeros("head.c2.b", {hc});
    ps_.create("head.out.w", {1, hc, 1, 1}, rng);
    ps_.create_zeros("head.out.b", {1});
    // spatial encoder: stride 8 overall
    ps_.create("enc.c1.w", {16, 3, 3, 3}, rng);
    ps_.create_zeros("enc.c1.b", {16});
    ps_.create("enc.c2.w", {fc, 16, 3, 3}, rng);
    ps_.create_zeros("enc.c2.b", {fc});
    ps_.create("enc.c3.w", {fc, fc, 3, 3}, rng);
    ps_.create_zeros("enc.c3.b", {fc});
    ps_.create("enc.c4.w", {fc, fc, 3, 3}, rng);
    ps_.create_zeros("enc.c4.b", {fc});
    // Per-scale 1x1 projections for Q/K/V and the output squash. Q, K and the
    // output stay biasless so an empty red prior (zero keys) propagates to an
    // exactly zero fused map.
    for (int s = 0; s < cfg.num_scales; ++s) {
        const std::string p = "fuse.s" + std::to_string(s) + ".";
        ps_.create(p + "q.w", {d, 1, 1, 1}, rng);
        ps_.create(p + "k.w", {d, 1, 1, 1}, rng);
        ps_.create(p + "v.w", {d, fc, 1, 1}, rng);
        ps_.create_zeros(p + "v.b", {d});
        ps_.create(p + "o.w", {1, d, 1, 1}, rng);
    }
}

nn::Var DetectModel::heat_map_head(const nn::Var& frame) const {
    HEMO_CHECK(frame.shape().size() == 3 && frame.dim(0) == 3,
               "heat_map_head: expected {3,H,W} planes");
    const int H = frame.dim(1), W = frame.dim(2);
    HEMO_CHECK(H % 4 == 0 && W % 4 == 0, "heat_map_head: H and W must be divisible by 4");
    auto h1 = nn::relu(nn::conv2d(frame, ps_.get("head.c1.w"), ps_.get("head.c1.b"), 2, 1));
    auto h2 = nn::relu(nn::conv2d(h1, ps_.get("head.c2.w"), ps_.get("head.c2.b"), 2, 1));
    auto up = nn::resize_bilinear(h2, H, W);
    return nn::sigmoid(nn::conv2d(up, ps_.get("head.out.w"), ps_.get("head.out.b"), 1, 0));
}

nn::Var DetectModel::encode(const nn::Var& frame) const {
    HEMO_CHECK(frame.shape().size() == 3 && frame.dim(0) == 3,
               "encode: expected {3,H,W} planes");
    const int H = frame.dim(1), W = frame.dim(2);
    HEMO_CHECK(H % 8 == 0 && W % 8 == 0,
               "encode: frame ", W, "x", H, " not divisible by the stride-8 grid");
    auto x = nn::relu(nn::conv2d(frame, ps_.get("enc.c1.w"), ps_.get("enc.c1.b"), 2, 1));
    x = nn::relu(nn::conv2d(x, ps_.get("enc.c2.w"), ps_.get("enc.c2.b"), 2, 1));
    x = nn::relu(nn::conv2d(x, ps_.get("enc.c3.w"), ps_.get("enc.c3.b"), 2, 1));
    x = nn::relu(nn::conv2d(x, ps_.get("enc.c4.w"), ps_.get("enc.c4.b"), 1, 1));
    return x;
}

namespace {

void check_finite(const nn::Var& v, const char* what, int scale) {
    for (double x : v.val())
        HEMO_CHECK(std::isfinite(x), "fuse_multiscale: non-finite ", what,
                   " at scale ", scale);
}

// {C,h,w} -> rows {h*w, C}
nn::Var to_rows(const nn::Var& m) {
    const int C = m.dim(0), h = m.dim(1), w = m.dim(2);
    return nn::reshape(nn::permute102(nn::reshape(m, {C, 1, h * w})), {h * w, C});
}

}  // namespace

nn::Var DetectModel::fuse_multiscale(const nn::Var& heat, const nn::Var& red,
                                     const nn::Var& feat) const {
    HEMO_CHECK(heat.shape().size() == 3 && heat.dim(0) == 1, "fuse: heat must be {1,H,W}");
    HEMO_CHECK(red.shape().size() == 3 && red.dim(0) == 1, "fuse: red prior must be {1,H,W}");
    const int H = heat.dim(1), W = heat.dim(2);
    HEMO_CHECK(red.dim(1) == H && red.dim(2) == W, "fuse: red prior size mismatch");
    HEMO_CHECK(feat.shape().size() == 3, "fuse: features must be {C,h,w}");
    const double dscale = 1.0 / std::sqrt(double(cfg_.fuse_dim));

    nn::Var acc;
    for (int s = 0; s < cfg_.num_scales; ++s) {
        const int hs = std::max(1, H >> s), ws = std::max(1, W >> s);
        const std::string p = "fuse.s" + std::to_string(s) + ".";
        const int d = cfg_.fuse_dim;
        auto zero_d = nn::Var::leaf({d}, false);
        auto zero_1 = nn::Var::leaf({1}, false);
        auto hmap = nn::resize_bilinear(heat, hs, ws);
        auto rmap = nn::resize_bilinear(red, hs, ws);
        auto fmap = nn::resize_bilinear(feat, hs, ws);
        auto q = nn::conv2d(hmap, ps_.get(p + "q.w"), zero_d, 1, 0);
        auto k = nn::conv2d(rmap, ps_.get(p + "k.w"), zero_d, 1, 0);
        auto v = nn::conv2d(fmap, ps_.get(p + "v.w"), ps_.get(p + "v.b"), 1, 0);
        // Bound the key set: above the budget take a regular subgrid so the
        // cost stays linear in the query count.
        int nk = hs * ws;
        if (nk > cfg_.key_budget) {
            const int stride = int(std::ceil(std::sqrt(double(nk) / cfg_.key_budget)));
            k = nn::stride_sample(k, stride, stride);
            v = nn::stride_sample(v, stride, stride);
            nk = int(k.dim(1)) * int(k.dim(2));
        }
        auto qr = to_rows(q);                               // {Nq, d}
        auto kr = to_rows(k);                               // {Nk, d}
        auto vr = to_rows(v);                               // {Nk, d}
        auto logits = nn::scale(nn::matmul_nt(qr, kr), dscale);
        auto attn = nn::softmax_last(logits);
        auto mixed = nn::matmul(attn, vr);                  // {Nq, d}
        check_finite(mixed, "attention output", s);
        // Response gate: mean rectified query/key affinity per position. Zero
        // keys (empty red prior) zero the whole scale; a single matching
        // query/key peak localizes the response there even over constant
        // values.
        nn::Var ones_k = nn::Var::leaf({nk, 1}, false);
        std::fill(ones_k.val().begin(), ones_k.val().end(), 1.0);
        nn::Var ones_d = nn::Var::leaf({1, d}, false);
        std::fill(ones_d.val().begin(), ones_d.val().end(), 1.0);
        auto gate = nn::scale(nn::matmul(nn::relu(logits), ones_k), 1.0 / nk);  // {Nq,1}
        auto gated = nn::mul(mixed, nn::matmul(gate, ones_d));                  // {Nq,d}
        auto grid = nn::reshape(nn::permute102(nn::reshape(gated, {hs * ws, 1, d})),
                                {d, hs, ws});
        auto o = nn::conv2d(grid, ps_.get(p + "o.w"), zero_1, 1, 0);
        auto up = nn::resize_bilinear(o, H, W);
        check_finite(up, "scale output", s);
        acc = acc.defined() ? nn::add(acc, up) : up;
    }
    acc = nn::relu(acc);
    // Normalize to [0,1] by the max when it is positive; an all-zero map
    // (e.g. an empty red prior driving uniform attention into zero features)
    // passes through unchanged.
    const double mx = *std::max_element(acc.val().begin(), acc.val().end());
    if (mx > 0) acc = nn::div_by_scalar(acc, nn::max_all(acc));
    return acc;
}

nn::Var DetectModel::forward(const nn::Var& frame) const {
    auto heat = heat_map_head(frame);
    auto feat = encode(frame);
    // Red prior from the raw planes: (R)*max(0, R-max(G,B)) on [0,1] values.
    const int H = frame.dim(1), W = frame.dim(2);
    nn::Var red = nn::Var::leaf({1, H, W}, false);
    {
        const auto& v = frame.val();
        const size_t n = size_t(H) * W;
        for (size_t i = 0; i < n; ++i) {
            const double r = v[i], g = v[n + i], b = v[2 * n + i];
            red.val()[i] = r * std::max(0.0, r - std::max(g, b));
        }
    }
    return fuse_multiscale(heat, red, feat);
}

nn::Var DetectModel::forward_image(const img::Image& im) const {
    return forward(img::to_planes(im));
}

// ---- decisions ------------------------------------------------------------------

std::array<int, 2> locate_source(const std::vector<double>& map, int w, int h) {
    HEMO_CHECK(w > 0 && h > 0 && map.size() == size_t(w) * h, "locate_source: bad map");
    size_t best = 0;
    for (size_t i = 1; i < map.size(); ++i)
        if (map[i] > map[best]) best = i;   // strict: ties keep the earliest index
    return {int(best % w), int(best / w)};
}

std::array<int, 2> locate_source(const nn::Var& map) {
    HEMO_CHECK(map.shape().size() >= 2, "locate_source: expected a 2-D map");
    const int w = map.dim(int(map.shape().size()) - 1);
    const int h = map.dim(int(map.shape().size()) - 2);
    HEMO_CHECK(int64_t(w) * h == int64_t(map.size()), "locate_source: expected {1,H,W}");
    return locate_source(map.val(), w, h);
}

nn::Var soft_argmax(const nn::Var& map, double temperature) {
    const int w = map.dim(int(map.shape().size()) - 1);
    const int h = map.dim(int(map.shape().size()) - 2);
    HEMO_CHECK(int64_t(w) * h == int64_t(map.size()), "soft_argmax: expected {1,H,W}");
    auto flat = nn::reshape(map, {1, h * w});
    auto probs = nn::softmax_last(nn::scale(flat, 1.0 / temperature));
    nn::Var xs = nn::Var::leaf({h * w, 2}, false);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            xs.val()[(size_t(r) * w + c) * 2 + 0] = c;
            xs.val()[(size_t(r) * w + c) * 2 + 1] = r;
        }
    return nn::reshape(nn::matmul(probs, xs), {2});
}

// ---- training loss -----------------------------------------------------------------

nn::Var spatial_loss(const nn::Var& heat_pred, const nn::Var& heat_gt,
                     const std::vector<nn::Var>& heat_pseudo,
                     const nn::Var& point_pred, const std::array<double, 2>& point_gt,
                     const SpatialLossConfig& cfg) {
    HEMO_CHECK(heat_pred.shape() == heat_gt.shape(), "spatial_loss: heat-map shape mismatch");
    HEMO_CHECK(point_pred.size() == 2, "spatial_loss: point must be (x,y)");
    auto loss = nn::scale(nn::mse(heat_pred, heat_gt), cfg.lambda1);
    if (!heat_pseudo.empty()) {
        nn::Var acc;
        for (const auto& hp : heat_pseudo) {
            HEMO_CHECK(hp.shape() == heat_pred.shape(),
                       "spatial_loss: pseudo heat-map shape mismatch");
            auto term = nn::mse(heat_pred, hp);
            acc = acc.defined() ? nn::add(acc, term) : term;
        }
        loss = nn::add(loss, nn::scale(acc, cfg.lambda2 / double(heat_pseudo.size())));
    }
    nn::Var gt = nn::Var::leaf({2}, false);
    gt.val() = {point_gt[0], point_gt[1]};
    loss = nn::add(loss, nn::scale(nn::huber_sum(point_pred, gt, cfg.delta), cfg.delta));
    return loss;
}

// ---- pseudo seeding -------------------------------------------------------------------

namespace {

double patch_texture(const std::vector<double>& gray, int w, int h, double cx, double cy,
                     int patch) {
    const int r = patch / 2;
    double acc = 0;
    int n = 0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int x = std::clamp(int(std::lround(cx)) + dx, 1, w - 2);
            const int y = std::clamp(int(std::lround(cy)) + dy, 1, h - 2);
            const double gx = gray[size_t(y) * w + x + 1] - gray[size_t(y) * w + x - 1];
            const double gy = gray[size_t(y + 1) * w + x] - gray[size_t(y - 1) * w + x];
            acc += std::abs(gx) + std::abs(gy);
            ++n;
        }
    return n ? acc / n : 0.0;
}

}  // namespace

PropagateResult propagate_pseudo(const video::Clip& clip, int frame,
                                 const video::PointLabel& label,
                                 const PropagateConfig& cfg) {
    PropagateResult res;
    HEMO_CHECK(frame >= 0 && frame < clip.length(), "propagate_pseudo: frame ", frame,
               " outside clip of length ", clip.length());
    if (frame + cfg.steps >= clip.length()) {
        res.reason = "not enough frames ahead";
        return res;
    }
    double x = label.x, y = label.y;
    const int w = clip.width(), h = clip.height();
    for (int s = 0; s < cfg.steps; ++s) {
        auto gray_a = img::to_gray(clip.frames[frame + s]);
        auto gray_b = img::to_gray(clip.frames[frame + s + 1]);
        if (patch_texture(gray_a, w, h, x, y, cfg.patch) < cfg.min_texture) {
            res.reason = "degenerate texture around the tracked point";
            return res;
        }
        auto fl = flow::block_matching(gray_a, gray_b, w, h);
        auto [du, dv] = fl.sample(x, y);
        x = std::clamp(x + du, 0.0, double(w - 1));
        y = std::clamp(y + dv, 0.0, double(h - 1));
    }
    res.ok = true;
    res.point = {frame + cfg.steps, x, y, "pseudo"};
    return res;
}

}  // namespace hemo::detect
