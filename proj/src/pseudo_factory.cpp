#include "hemotrack/pseudo_factory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hemotrack/common.hpp"
#include "hemotrack/rng.hpp"

namespace hemo::pseudo {

using json = nlohmann::ordered_json;

// ---- corners ------------------------------------------------------------------

std::vector<Corner> find_corners(const img::Image& im, double cx, double cy, double radius,
                                 const MatchConfig& cfg) {
    const int w = im.w, h = im.h;
    auto gray = img::to_gray(im);
    // Sobel gradients, then the min eigenvalue of the 3x3-summed structure tensor.
    std::vector<double> resp(size_t(w) * h, 0.0);
    auto g = [&](int x, int y) {
        return gray[size_t(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)];
    };
    std::vector<double> ix(size_t(w) * h), iy(size_t(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            ix[size_t(y) * w + x] = (g(x + 1, y - 1) + 2 * g(x + 1, y) + g(x + 1, y + 1) -
                                     g(x - 1, y - 1) - 2 * g(x - 1, y) - g(x - 1, y + 1));
            iy[size_t(y) * w + x] = (g(x - 1, y + 1) + 2 * g(x, y + 1) + g(x + 1, y + 1) -
                                     g(x - 1, y - 1) - 2 * g(x, y - 1) - g(x + 1, y - 1));
        }
    const int x0 = std::max(1, int(cx - radius)), x1 = std::min(w - 2, int(cx + radius));
    const int y0 = std::max(1, int(cy - radius)), y1 = std::min(h - 2, int(cy + radius));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy > radius * radius) continue;
            double a = 0, b = 0, c = 0;
            for (int vy = -1; vy <= 1; ++vy)
                for (int vx = -1; vx <= 1; ++vx) {
                    const double gx = ix[size_t(y + vy) * w + x + vx];
                    const double gy = iy[size_t(y + vy) * w + x + vx];
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                }
            const double tr = a + c;
            const double det = a * c - b * b;
            const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
            resp[size_t(y) * w + x] = tr / 2.0 - disc;  // min eigenvalue
        }
    // 3x3 non-max suppression, then greedy spacing.
    std::vector<Corner> cand;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double r = resp[size_t(y) * w + x];
            if (r < cfg.min_corner_response) continue;
            bool maxima = true;
            for (int vy = -1; vy <= 1 && maxima; ++vy)
                for (int vx = -1; vx <= 1; ++vx)
                    if ((vy || vx) && resp[size_t(y + vy) * w + x + vx] > r) {
                        maxima = false;
                        break;
                    }
            if (maxima) cand.push_back({double(x), double(y), r});
        }
    std::sort(cand.begin(), cand.end(), [](const Corner& a, const Corner& b) {
        if (a.response != b.response) return a.response > b.response;
        return a.y != b.y ? a.y < b.y : a.x < b.x;
    });
    std::vector<Corner> kept;
    const double d2 = cfg.nms_distance * cfg.nms_distance;
    for (const auto& c : cand) {
        bool ok = true;
        for (const auto& k : kept) {
            const double dx = c.x - k.x, dy = c.y - k.y;
            if (dx * dx + dy * dy < d2) {
                ok = false;
                break;
            }
        }
        if (ok) {
            kept.push_back(c);
            if (int(kept.size()) >= cfg.max_corners) break;
        }
    }
    return kept;
}

// ---- NCC matching ------------------------------------------------------------------

namespace {

std::vector<double> patch_at(const std::vector<double>& gray, int w, int h, double cx, double cy,
                             int patch) {
    const int r = patch / 2;
    std::vector<double> out;
    out.reserve(size_t(patch) * patch);
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int x = std::clamp(int(std::lround(cx)) + dx, 0, w - 1);
            const int y = std::clamp(int(std::lround(cy)) + dy, 0, h - 1);
            out.push_back(gray[size_t(y) * w + x]);
        }
    return out;
}

double ncc(const std::vector<double>& p, const std::vector<double>& q) {
    const size_t n = p.size();
    double mp = 0, mq = 0;
    for (size_t i = 0; i < n; ++i) {
        mp += p[i];
        mq += q[i];
    }
    mp /= double(n);
    mq /= double(n);
    double num = 0, dp = 0, dq = 0;
    for (size_t i = 0; i < n; ++i) {
        const double a = p[i] - mp, b = q[i] - mq;
        num += a * b;
        dp += a * a;
        dq += b * b;
    }
    const double den = std::sqrt(dp * dq);
    return den > 1e-12 ? num / den : 0.0;
}

}  // namespace

std::vector<PseudoPair> match_region(const img::Image& a, const img::Image& b, double ax,
                                     double ay, const MatchConfig& cfg) {
    HEMO_CHECK(a.w == b.w && a.h == b.h, "match_region: frame sizes differ");
    HEMO_CHECK(cfg.patch % 2 == 1, "match_region: patch side must be odd");
    auto ca = find_corners(a, ax, ay, cfg.radius, cfg);
    auto cb = find_corners(b, ax, ay, cfg.radius + cfg.max_displacement, cfg);
    if (ca.empty() || cb.empty()) return {};
    auto ga = img::to_gray(a);
    auto gb = img::to_gray(b);
    std::vector<std::vector<double>> pa, pb;
    pa.reserve(ca.size());
    pb.reserve(cb.size());
    for (const auto& c : ca) pa.push_back(patch_at(ga, a.w, a.h, c.x, c.y, cfg.patch));
    for (const auto& c : cb) pb.push_back(patch_at(gb, b.w, b.h, c.x, c.y, cfg.patch));

    const double maxd2 = cfg.max_displacement * cfg.max_displacement;
    auto best_for = [&](size_t i, bool a_to_b) {
        const auto& src = a_to_b ? ca : cb;
        const auto& dst = a_to_b ? cb : ca;
        const auto& ps = a_to_b ? pa : pb;
        const auto& pd = a_to_b ? pb : pa;
        int best = -1;
        double best_s = -2.0;
        for (size_t j = 0; j < dst.size(); ++j) {
            const double dx = dst[j].x - src[i].x, dy = dst[j].y - src[i].y;
            if (dx * dx + dy * dy > maxd2) continue;
            const double s = ncc(ps[i], pd[j]);
            if (s > best_s) {
                best_s = s;
                best = int(j);
            }
        }
        return std::pair<int, double>(best, best_s);
    };

    std::vector<PseudoPair> out;
    for (size_t i = 0; i < ca.size(); ++i) {
        auto [j, s] = best_for(i, true);
        if (j < 0 || s < cfg.min_confidence) continue;
        auto [back, s2] = best_for(size_t(j), false);
        (void)s2;
        if (back != int(i)) continue;  // mutual consistency
        out.push_back({ca[i].x, ca[i].y, cb[j].x, cb[j].y, std::clamp(s, 0.0, 1.0)});
    }
    return out;
}

// ---- propagation ---------------------------------------------------------------------

TrackerFn make_flow_tracker(const video::Clip& clip) {
    auto cache = std::make_shared<std::map<int, flow::FlowField>>();
    auto grays = std::make_shared<std::map<int, std::vector<double>>>();
    const video::Clip* cp = &clip;
    auto gray_at = [cp, grays](int t) -> const std::vector<double>& {
        auto it = grays->find(t);
        if (it == grays->end()) it = grays->emplace(t, img::to_gray(cp->frames[t])).first;
        return it->second;
    };
    return [cp, cache, gray_at](int start, std::array<double, 2> p0, int n_steps) {
        HEMO_CHECK(start >= 0 && start + n_steps < cp->length(), "flow tracker: span [", start,
                   ",", start + n_steps, "] outside clip of length ", cp->length());
        std::vector<std::array<double, 2>> pts{p0};
        double x = p0[0], y = p0[1];
        for (int s = 0; s < n_steps; ++s) {
            const int t = start + s;
            auto it = cache->find(t);
            if (it == cache->end())
                it = cache->emplace(t, flow::block_matching(gray_at(t), gray_at(t + 1),
                                                            cp->width(), cp->height()))
                         .first;
            auto [du, dv] = it->second.sample(x, y);
            x = std::clamp(x + du, 0.0, double(cp->width() - 1));
            y = std::clamp(y + dv, 0.0, double(cp->height() - 1));
            pts.push_back({x, y});
        }
        return pts;
    };
}

Trajectory propagate_trajectory(int start_frame, std::array<double, 2> p0, int n_steps,
                                const TrackerFn& tracker) {
    HEMO_CHECK(n_steps >= 1, "propagate_trajectory: need at least one step");
    Trajectory tr;
    tr.start_frame = start_frame;
    tr.points = tracker(start_frame, p0, n_steps);
    HEMO_CHECK(int(tr.points.size()) == n_steps + 1,
               "propagate_trajectory: tracker returned ", tr.points.size(), " points, expected ",
               n_steps + 1);
    return tr;
}

// ---- smoothing ---------------------------------------------------------------------------

Trajectory kalman_smooth(const Trajectory& raw, std::array<double, 2> endpoint_anchor,
                         const KalmanConfig& cfg) {
    const int n = raw.steps();
    HEMO_CHECK(n >= 1, "kalman_smooth: need at least two points");
    HEMO_CHECK(cfg.q > 0 && cfg.r > 0 && cfg.r_terminal >= 0, "kalman_smooth: bad noise config");

    using Mat4 = Eigen::Matrix4d;
    using Vec4 = Eigen::Vector4d;
    Mat4 F = Mat4::Identity();
    F(0, 2) = F(1, 3) = 1.0;
    Mat4 Q = Mat4::Zero();
    Q(0, 0) = Q(1, 1) = cfg.q / 3.0;
    Q(0, 2) = Q(2, 0) = Q(1, 3) = Q(3, 1) = cfg.q / 2.0;
    Q(2, 2) = Q(3, 3) = cfg.q;
    Eigen::Matrix<double, 2, 4> H = Eigen::Matrix<double, 2, 4>::Zero();
    H(0, 0) = H(1, 1) = 1.0;
    const Eigen::Matrix2d R = Eigen::Matrix2d::Identity() * cfg.r;

    const int T = n + 1;
    std::vector<Vec4> x_pred(T), x_filt(T);
    std::vector<Mat4> p_pred(T), p_filt(T);

    Vec4 x = Vec4::Zero();
    x(0) = raw.points[0][0];
    x(1) = raw.points[0][1];
    Mat4 P = Mat4::Zero();
    P(0, 0) = P(1, 1) = cfg.r;
    P(2, 2) = P(3, 3) = 25.0;
    x_pred[0] = x;
    p_pred[0] = P;
    for (int t = 0; t < T; ++t) {
        if (t > 0) {
            x = F * x_filt[t - 1];
            P = F * p_filt[t - 1] * F.transpose() + Q;
            x_pred[t] = x;
            p_pred[t] = P;
        }
        Eigen::Vector2d z(raw.points[t][0], raw.points[t][1]);
        const Eigen::Matrix2d S = H * P * H.transpose() + R;
        const Eigen::Matrix<double, 4, 2> K = P * H.transpose() * S.inverse();
        x_filt[t] = x + K * (z - H * x);
        p_filt[t] = (Mat4::Identity() - K * H) * P;
    }

    // RTS backward pass.
    std::vector<Vec4> x_smooth(T);
    x_smooth[T - 1] = x_filt[T - 1];
    Mat4 p_smooth = p_filt[T - 1];
    for (int t = T - 2; t >= 0; --t) {
        const Mat4 C = p_filt[t] * F.transpose() * p_pred[t + 1].inverse();
        x_smooth[t] = x_filt[t] + C * (x_smooth[t + 1] - x_pred[t + 1]);
        p_smooth = p_filt[t] + C * (p_smooth - p_pred[t + 1]) * C.transpose();
    }

    // Endpoint anchor: blend the raw final point towards the anchor with a
    // scalar Kalman gain over the accumulated drift variance, then distribute
    // the correction linearly back along the track.
    const double drift_var = double(n) * cfg.q;
    const double k = drift_var / (drift_var + cfg.r_terminal);
    Trajectory out;
    out.start_frame = raw.start_frame;
    out.points.resize(T);
    std::array<double, 2> final_target{};
    for (int a = 0; a < 2; ++a) {
        const double rawf = raw.points[T - 1][a];
        final_target[a] = rawf + k * (endpoint_anchor[a] - rawf);
    }
    std::array<double, 2> delta{final_target[0] - x_smooth[T - 1](0),
                                final_target[1] - x_smooth[T - 1](1)};
    for (int t = 0; t < T; ++t) {
        const double wgt = double(t) / double(n);
        out.points[t] = {x_smooth[t](0) + wgt * delta[0], x_smooth[t](1) + wgt * delta[1]};
    }
    return out;
}

// ---- factory ---------------------------------------------------------------------------------

std::optional<PseudoPoint> PseudoLabels::source_at(int frame) const {
    auto it = frames.find(frame);
    if (it == frames.end()) return std::nullopt;
    for (const auto& p : it->second)
        if (p.track_id == 0) return p;
    return std::nullopt;
}

PseudoLabels run_factory(const video::Clip& clip, const FactoryConfig& cfg,
                         const TrackerFn& tracker) {
    PseudoLabels out;
    out.clip_id = clip.id;
    std::vector<video::PointLabel> human;
    for (const auto& p : clip.labels.points)
        if (p.source == "human") human.push_back(p);
    std::sort(human.begin(), human.end(),
              [](const auto& a, const auto& b) { return a.frame < b.frame; });
    HEMO_CHECK(human.size() >= 2, "run_factory: clip ", clip.id,
               " needs at least two human labels, found ", human.size());

    auto add_point = [&](int frame, double x, double y, double conf, const char* prov,
                         int track_id) {
        out.frames[frame].push_back({x, y, conf, prov, track_id});
    };

    int next_track_id = 1;
    for (size_t s = 0; s + 1 < human.size(); ++s) {
        const auto& la = human[s];
        const auto& lb = human[s + 1];
        const int span = lb.frame - la.frame;
        if (span < 1) continue;

        // Matched keypoints around the annotated source (plus the source
        // itself as track 0 anchored at the two annotations).
        auto pairs = match_region(clip.frames[la.frame], clip.frames[lb.frame], la.x, la.y,
                                  cfg.match);
        std::sort(pairs.begin(), pairs.end(), [](const PseudoPair& a, const PseudoPair& b) {
            if (a.confidence != b.confidence) return a.confidence > b.confidence;
            return a.y0 != b.y0 ? a.y0 < b.y0 : a.x0 < b.x0;
        });
        if (int(pairs.size()) > cfg.max_tracks_per_span) pairs.resize(cfg.max_tracks_per_span);
        if (pairs.empty())
            out.log.push_back("span " + std::to_string(la.frame) + "->" +
                              std::to_string(lb.frame) +
                              ": matcher found no keypoints, fell back to the anchor point");

        struct Item {
            PseudoPair pair;
            int id;
        };
        std::vector<Item> items;
        items.push_back({{la.x, la.y, lb.x, lb.y, 1.0}, 0});  // source trajectory
        for (const auto& p : pairs) items.push_back({p, next_track_id++});

        for (const auto& item : items) {
            auto raw = propagate_trajectory(la.frame, {item.pair.x0, item.pair.y0}, span,
                                            tracker);
            Trajectory traj = cfg.smooth
                                  ? kalman_smooth(raw, {item.pair.x1, item.pair.y1}, cfg.kalman)
                                  : raw;
            const char* mid_prov = cfg.smooth ? "smoothed" : "tracked";
            for (int t = 0; t <= span; ++t) {
                const bool endpoint = (t == 0 || t == span);
                add_point(la.frame + t, traj.points[t][0], traj.points[t][1],
                          item.pair.confidence, endpoint ? "matched" : mid_prov, item.id);
            }
        }
    }
    return out;
}

void save_pseudo_labels(const std::string& path, const PseudoLabels& pl) {
    json j;
    j["version"] = pl.version;
    j["clip_id"] = pl.clip_id;
    json frames = json::array();
    for (const auto& [frame, pts] : pl.frames) {
        json fj;
        fj["frame"] = frame;
        json arr = json::array();
        for (const auto& p : pts) {
            arr.push_back({{"x", p.x},
                           {"y", p.y},
                           {"confidence", p.confidence},
                           {"provenance", p.provenance},
                           {"track_id", p.track_id}});
        }
        fj["points"] = std::move(arr);
        frames.push_back(std::move(fj));
    }
    j["frames"] = std::move(frames);
    j["log"] = pl.log;
    std::ofstream f(path);
    HEMO_CHECK(f.good(), "save_pseudo_labels: cannot open ", path);
    f << j.dump(2) << "\n";
    HEMO_CHECK(f.good(), "save_pseudo_labels: write failed for ", path);
}

PseudoLabels load_pseudo_labels(const std::string& path) {
    std::ifstream f(path);
    HEMO_CHECK(f.good(), "load_pseudo_labels: cannot open ", path);
    json j = json::parse(f);
    PseudoLabels pl;
    pl.version = j.at("version").get<int>();
    HEMO_CHECK(pl.version == 1, "load_pseudo_labels: unsupported version ", pl.version);
    pl.clip_id = j.at("clip_id").get<std::string>();
    for (const auto& fj : j.at("frames")) {
        const int frame = fj.at("frame").get<int>();
        for (const auto& pj : fj.at("points"))
            pl.frames[frame].push_back({pj.at("x").get<double>(), pj.at("y").get<double>(),
                                        pj.at("confidence").get<double>(),
                                        pj.at("provenance").get<std::string>(),
                                        pj.at("track_id").get<int>()});
    }
    if (j.contains("log")) pl.log = j.at("log").get<std::vector<std::string>>();
    return pl;
}

// ---- training samples ---------------------------------------------------------------------

std::vector<TrainSample> build_samples(const video::ClipLabels& labels, const std::string& mode,
                                       uint64_t seed) {
    std::vector<int> human;
    for (const auto& p : labels.points)
        if (p.source == "human") human.push_back(p.frame);
    std::sort(human.begin(), human.end());
    human.erase(std::unique(human.begin(), human.end()), human.end());
    HEMO_CHECK(human.size() >= 2, "build_samples: need at least two annotated frames");

    std::vector<TrainSample> shorts;
    for (size_t i = 0; i + 1 < human.size(); ++i)
        shorts.push_back({human[i], human[i + 1] - human[i] + 1});
    TrainSample longs{human.front(), human.back() - human.front() + 1};

    std::vector<TrainSample> out;
    if (mode == "short") {
        out = shorts;
    } else if (mode == "long") {
        out = {longs};
    } else if (mode == "hybrid") {
        out = shorts;
        out.push_back(longs);
        Rng rng(seed);
        for (size_t i = out.size(); i > 1; --i)
            std::swap(out[i - 1], out[rng.uniform_int(0, int(i) - 1)]);
    } else {
        fail("build_samples: unknown mode '", mode, "' (expected short|long|hybrid)");
    }
    return out;
}

}  // namespace hemo::pseudo
