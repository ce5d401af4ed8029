#include "hemotrack/scene_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "hemotrack/common.hpp"

namespace fs = std::filesystem;

namespace hemo::synth {

namespace {

constexpr double kTau = 6.283185307179586;

double lattice_hash(int64_t ix, int64_t iy, uint64_t seed) {
    uint64_t k = uint64_t(ix) * 0x9E3779B97F4A7C15ULL ^ uint64_t(iy) * 0xC2B2AE3D27D4EB4FULL ^
                 seed * 0x165667B19E3779F9ULL;
    k ^= k >> 30;
    k *= 0xBF58476D1CE4E5B9ULL;
    k ^= k >> 27;
    k *= 0x94D049BB133111EBULL;
    k ^= k >> 31;
    return double(k >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

// Value noise in [0,1], wavelength in pixels.
double vnoise(double x, double y, double wavelength, uint64_t seed) {
    const double fx = x / wavelength, fy = y / wavelength;
    const int64_t ix = int64_t(std::floor(fx)), iy = int64_t(std::floor(fy));
    const double tx = smooth(fx - double(ix)), ty = smooth(fy - double(iy));
    const double v00 = lattice_hash(ix, iy, seed), v10 = lattice_hash(ix + 1, iy, seed);
    const double v01 = lattice_hash(ix, iy + 1, seed), v11 = lattice_hash(ix + 1, iy + 1, seed);
    return (1 - ty) * ((1 - tx) * v00 + tx * v10) + ty * ((1 - tx) * v01 + tx * v11);
}

struct Rgb {
    double r, g, b;
};

Rgb mix(const Rgb& a, const Rgb& b, double w) {
    return {a.r + (b.r - a.r) * w, a.g + (b.g - a.g) * w, a.b + (b.b - a.b) * w};
}

// Per-clip derived appearance parameters.
struct Palette {
    double base_r;       // 150..190
    double gap_g;        // R-G, 10..32
    double gap_b;        // G-B, 4..16
    double lum_amp;      // luminance noise amplitude
    double blob_phase1, blob_phase2;
};

struct EventState {
    const DisturbanceEvent* ev;
    // jitter: per-frame shake offsets; others: spatial anchors.
    double ax = 0, ay = 0, bx = 0, by = 0;
    std::vector<std::array<double, 2>> shake;
};

}  // namespace

std::vector<DisturbanceEvent> sample_disturbances(const std::string& preset, int length,
                                                  int onset_frame, Rng& rng) {
    int lo, hi;
    double mag_lo, mag_hi;
    if (preset == "easy") {
        lo = 0, hi = 1, mag_lo = 0.2, mag_hi = 0.45;
    } else if (preset == "moderate") {
        lo = 1, hi = 3, mag_lo = 0.3, mag_hi = 0.7;
    } else if (preset == "hard") {
        lo = 3, hi = 5, mag_lo = 0.55, mag_hi = 1.0;
    } else {
        HEMO_CHECK(false, "unknown preset '", preset, "' (expected easy|moderate|hard)");
    }
    static const char* kinds[] = {"jitter", "flush", "reflection", "instrument", "obscure"};
    std::vector<DisturbanceEvent> evs;
    const int n = int(rng.uniform_int(lo, hi));
    for (int i = 0; i < n; ++i) {
        DisturbanceEvent e;
        e.kind = kinds[rng.uniform_int(0, 4)];
        const int dur = int(rng.uniform_int(12, 40));
        int min_start = 0;
        if (e.kind == "obscure")  // pooled blood only exists once bleeding started
            min_start = onset_frame < 0 ? length : onset_frame;
        if (min_start >= length - 2) {
            e.kind = "reflection";
            min_start = 0;
        }
        e.start = int(rng.uniform_int(min_start, std::max(min_start, length - dur)));
        e.end = std::min(length, e.start + dur);
        e.magnitude = rng.uniform(mag_lo, mag_hi);
        e.seed = rng.next_u64();
        evs.push_back(e);
    }
    return evs;
}

SynthResult generate_scene(const SynthConfig& cfg) {
    HEMO_CHECK(cfg.width >= 16 && cfg.height >= 16, "generate_scene: frame too small");
    HEMO_CHECK(cfg.length >= 1, "generate_scene: empty clip");
    HEMO_CHECK(cfg.onset_frame == -1 || (cfg.onset_frame >= 0 && cfg.onset_frame < cfg.length),
               "generate_scene: onset ", cfg.onset_frame, " outside clip of ", cfg.length);
    for (const auto& e : cfg.disturbances) {
        HEMO_CHECK(e.start >= 0 && e.start < e.end && e.end <= cfg.length,
                   "generate_scene: bad disturbance window [", e.start, ",", e.end, ")");
        static const std::set<std::string> kKinds{"jitter", "flush", "reflection", "instrument",
                                                  "obscure"};
        HEMO_CHECK(kKinds.count(e.kind), "generate_scene: unknown disturbance '", e.kind, "'");
    }

    Rng rng(cfg.seed);
    const int W = cfg.width, H = cfg.height, T = cfg.length;

    Palette pal;
    pal.base_r = rng.uniform(150.0, 188.0);
    pal.gap_g = rng.uniform(12.0, 30.0);
    pal.gap_b = rng.uniform(4.0, 16.0);
    pal.lum_amp = rng.uniform(14.0, 26.0);
    pal.blob_phase1 = rng.uniform(0.0, kTau);
    pal.blob_phase2 = rng.uniform(0.0, kTau);
    const uint64_t tex_seed = rng.next_u64();

    // Global scene drift: smooth mean-reverting walk around a base direction.
    const double drift_dir = rng.uniform(0.0, kTau);
    const double drift_speed = cfg.drift_px_per_frame * rng.uniform(0.75, 1.25);
    std::vector<std::array<double, 2>> offset(T, {0.0, 0.0});
    {
        double vx = drift_speed * std::cos(drift_dir), vy = drift_speed * std::sin(drift_dir);
        double ox = 0, oy = 0;
        const double mvx = vx, mvy = vy;
        for (int t = 0; t < T; ++t) {
            offset[t] = {ox, oy};
            vx = 0.92 * vx + 0.08 * mvx + 0.12 * drift_speed * rng.normal();
            vy = 0.92 * vy + 0.08 * mvy + 0.12 * drift_speed * rng.normal();
            ox += vx;
            oy += vy;
        }
    }

    // Source spawn: central at the anchor frame (onset if any, else frame 0), so a late
    // onset still starts in view even after the scene has drifted. It rides the drift field.
    const int anchor_t = cfg.onset_frame >= 0 ? cfg.onset_frame : 0;
    const double sx0 = rng.uniform(0.25 * W, 0.75 * W) - (offset[anchor_t][0] - offset[0][0]);
    const double sy0 = rng.uniform(0.25 * H, 0.75 * H) - (offset[anchor_t][1] - offset[0][1]);

    // Event anchors/shakes.
    std::vector<EventState> events;
    for (const auto& e : cfg.disturbances) {
        EventState st;
        st.ev = &e;
        Rng er(e.seed);
        if (e.kind == "jitter") {
            st.shake.resize(e.end - e.start);
            const double amp = 1.0 + 5.0 * e.magnitude;
            for (auto& s : st.shake) {
                s[0] = amp * er.uniform(-1.0, 1.0);
                s[1] = amp * er.uniform(-1.0, 1.0);
            }
        } else if (e.kind == "reflection") {
            st.ax = er.uniform(0.1 * W, 0.9 * W);
            st.ay = er.uniform(0.1 * H, 0.9 * H);
            st.bx = er.uniform(-0.3, 0.3);  // px/frame drift of the highlight
            st.by = er.uniform(-0.3, 0.3);
        } else if (e.kind == "instrument") {
            const int edge = int(er.uniform_int(0, 3));
            if (edge == 0) st.ax = er.uniform(0.0, W), st.ay = -4;
            if (edge == 1) st.ax = er.uniform(0.0, W), st.ay = H + 4;
            if (edge == 2) st.ax = -4, st.ay = er.uniform(0.0, H);
            if (edge == 3) st.ax = W + 4, st.ay = er.uniform(0.0, H);
            st.bx = er.uniform(0.3 * W, 0.7 * W);
            st.by = er.uniform(0.3 * H, 0.7 * H);
        } else if (e.kind == "obscure") {
            st.ax = er.uniform(-6.0, 6.0);
            st.ay = er.uniform(-6.0, 6.0);
        }
        events.push_back(std::move(st));
    }

    const double max_radius = cfg.max_radius_frac * std::min(W, H);

    SynthResult out;
    out.clip.id = "synthetic";
    out.clip.meta.fps = cfg.fps;
    out.truth.onset_frame = cfg.onset_frame;
    out.truth.track.resize(T, {sx0, sy0});
    out.truth.visible.assign(T, false);
    out.truth.frame_tags.resize(T);
    out.clip.labels.onset_frame = cfg.onset_frame;

    const Rgb haze{215, 225, 235};
    const Rgb pool{96, 58, 52};
    const Rgb tool{70, 72, 78};
    const Rgb tool_hi{150, 152, 158};

    for (int t = 0; t < T; ++t) {
        double jx = 0, jy = 0;
        double flush_w = 0;
        for (auto& st : events) {
            const auto& e = *st.ev;
            if (t < e.start || t >= e.end) continue;
            out.truth.frame_tags[t].push_back(e.kind);
            if (e.kind == "jitter") {
                jx += st.shake[t - e.start][0];
                jy += st.shake[t - e.start][1];
            } else if (e.kind == "flush") {
                const double ph = double(t - e.start) / double(e.end - e.start);
                flush_w = std::max(flush_w, (0.25 + 0.55 * e.magnitude) * std::sin(3.14159265 * ph));
            }
        }
        if (out.truth.frame_tags[t].empty()) out.truth.frame_tags[t].push_back("clear");

        const double ox = offset[t][0] + jx, oy = offset[t][1] + jy;

        // Ground truth before compositing: the source rides the scene motion.
        double px = sx0 + ox - offset[0][0];
        double py = sy0 + oy - offset[0][1];
        bool clamped = false;
        double cx = px, cy = py;
        if (cx < 0) cx = 0, clamped = true;
        if (cx > W - 1) cx = W - 1, clamped = true;
        if (cy < 0) cy = 0, clamped = true;
        if (cy > H - 1) cy = H - 1, clamped = true;
        out.truth.track[t] = {cx, cy};
        const bool bleeding = cfg.onset_frame >= 0 && t >= cfg.onset_frame;
        out.truth.visible[t] = bleeding && !clamped;

        const double age = bleeding ? double(t - cfg.onset_frame) : 0.0;
        const double radius =
            bleeding ? std::min(cfg.initial_radius + cfg.growth_rate * age, max_radius) : 0.0;

        img::Image frame(W, H);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double wx = x + ox, wy = y + oy;  // scene coords

                // Tissue: layered value noise; fine octave gives trackable grain.
                const double n1 = vnoise(wx, wy, 46.0, tex_seed);
                const double n2 = vnoise(wx, wy, 15.0, tex_seed ^ 0x9E37);
                const double n3 = vnoise(wx, wy, 5.0, tex_seed ^ 0x7F4A);
                const double n4 = vnoise(wx, wy, 1.7, tex_seed ^ 0xC2B2);
                const double lum =
                    pal.lum_amp * (0.9 * (n1 - 0.5) + 0.55 * (n2 - 0.5) + 0.4 * (n3 - 0.5) +
                                   0.5 * (n4 - 0.5));
                double r = pal.base_r + lum;
                double gap_g = pal.gap_g + 8.0 * (n2 - 0.5);
                double gap_b = pal.gap_b + 6.0 * (n3 - 0.5);
                gap_g = std::min(std::max(gap_g, 2.0), 38.0);
                gap_b = std::max(gap_b, 0.0);
                r = std::min(std::max(r, 40.0), 208.0);
                Rgb c{r, r - gap_g, r - gap_g - gap_b};

                // Vignette.
                const double dxv = (x - 0.5 * W) / (0.5 * W), dyv = (y - 0.5 * H) / (0.5 * H);
                const double vig = 1.0 - 0.22 * (dxv * dxv + dyv * dyv);
                c.r *= vig, c.g *= vig, c.b *= vig;

                // Bleeding blob (composited after ground truth was recorded).
                if (bleeding && radius > 0) {
                    const double dx = x - px, dy = y - py;
                    const double dist = std::sqrt(dx * dx + dy * dy);
                    if (dist < radius * 1.45) {
                        const double ang = std::atan2(dy, dx);
                        const double rmod =
                            1.0 + 0.22 * std::sin(3 * ang + pal.blob_phase1) +
                            0.12 * std::sin(5 * ang + pal.blob_phase2);
                        const double re = radius * std::max(rmod, 0.4);
                        const double edge = (re - dist) / std::max(0.35 * re, 1.0);
                        const double alpha = std::min(std::max(edge, 0.0), 1.0);
                        if (alpha > 0) {
                            const double core = std::min(std::max(1.5 - dist / std::max(re, 1e-6), 0.0), 1.0);
                            Rgb blood = mix({196, 56, 60}, {142, 22, 30}, core);
                            blood.r += 10.0 * (n4 - 0.5);
                            c = mix(c, blood, alpha);
                        }
                    }
                }

                // Disturbance composites (never touch the recorded truth).
                for (auto& st : events) {
                    const auto& e = *st.ev;
                    if (t < e.start || t >= e.end) continue;
                    const double ph = double(t - e.start) / double(e.end - e.start);
                    if (e.kind == "reflection") {
                        const double hx = st.ax + st.bx * (t - e.start);
                        const double hy = st.ay + st.by * (t - e.start);
                        const double d2 = (x - hx) * (x - hx) + (y - hy) * (y - hy);
                        const double sig = 3.0 + 5.0 * e.magnitude;
                        const double a = (0.55 + 0.4 * e.magnitude) * std::exp(-d2 / (2 * sig * sig));
                        if (a > 0.004) c = mix(c, {252, 252, 252}, std::min(a, 0.95));
                    } else if (e.kind == "instrument") {
                        // Shaft: segment from the edge anchor toward the target.
                        const double reach = std::min(1.0, ph * 1.6);
                        const double ex = st.ax + (st.bx - st.ax) * reach;
                        const double ey = st.ay + (st.by - st.ay) * reach;
                        const double vx = ex - st.ax, vy = ey - st.ay;
                        const double len2 = vx * vx + vy * vy + 1e-9;
                        double tt = ((x - st.ax) * vx + (y - st.ay) * vy) / len2;
                        tt = std::min(std::max(tt, 0.0), 1.0);
                        const double qx = st.ax + tt * vx, qy = st.ay + tt * vy;
                        const double d = std::sqrt((x - qx) * (x - qx) + (y - qy) * (y - qy));
                        const double half = 2.0 + 3.0 * e.magnitude;
                        if (d < half) {
                            const double a = std::min(1.0, (half - d) / 1.5);
                            const Rgb body = d < 0.35 * half ? tool_hi : tool;
                            c = mix(c, body, a);
                        }
                    } else if (e.kind == "obscure") {
                        const double pool_r = (4.0 + 14.0 * e.magnitude) * std::min(1.0, 2.5 * ph);
                        const double dx = x - (px + st.ax), dy = y - (py + st.ay);
                        const double d = std::sqrt(dx * dx + dy * dy);
                        if (d < pool_r) {
                            const double a =
                                (0.45 + 0.4 * e.magnitude) * std::min(1.0, (pool_r - d) / 3.0);
                            c = mix(c, pool, std::min(a, 0.88));
                        }
                    }
                }
                if (flush_w > 0) c = mix(c, haze, flush_w);

                uint8_t* p = frame.at(x, y);
                p[0] = uint8_t(std::lround(std::min(std::max(c.r, 0.0), 255.0)));
                p[1] = uint8_t(std::lround(std::min(std::max(c.g, 0.0), 255.0)));
                p[2] = uint8_t(std::lround(std::min(std::max(c.b, 0.0), 255.0)));
            }
        }
        out.clip.frames.push_back(std::move(frame));
    }

    // Clip-level scenario tags: union of disturbance kinds, or "clear".
    std::set<std::string> tags;
    for (const auto& e : cfg.disturbances) tags.insert(e.kind);
    if (tags.empty())
        out.clip.meta.scenario_tags = {"clear"};
    else
        out.clip.meta.scenario_tags.assign(tags.begin(), tags.end());
    return out;
}

void save_oracle(const std::string& path, const SynthGroundTruth& gt) {
    video::json j;
    if (gt.onset_frame >= 0)
        j["onset_frame"] = gt.onset_frame;
    else
        j["onset_frame"] = nullptr;
    video::json track = video::json::array();
    for (size_t t = 0; t < gt.track.size(); ++t) {
        if (gt.onset_frame >= 0 && int(t) >= gt.onset_frame)
            track.push_back({gt.track[t][0], gt.track[t][1]});
        else
            track.push_back(nullptr);
    }
    j["track"] = track;
    j["visible"] = gt.visible;
    j["frame_tags"] = gt.frame_tags;
    std::ofstream f(path, std::ios::trunc);
    HEMO_CHECK(f.good(), "save_oracle: cannot open '", path, "'");
    f << j.dump() << "\n";
    HEMO_CHECK(f.good(), "save_oracle: write failed");
}

SynthGroundTruth load_oracle(const std::string& path) {
    std::ifstream f(path);
    HEMO_CHECK(f.good(), "load_oracle: cannot open '", path, "'");
    video::json j = video::json::parse(f, nullptr, false);
    HEMO_CHECK(!j.is_discarded(), "load_oracle: unparsable JSON in '", path, "'");
    SynthGroundTruth gt;
    gt.onset_frame = j.at("onset_frame").is_null() ? -1 : j.at("onset_frame").get<int>();
    for (const auto& e : j.at("track")) {
        if (e.is_null())
            gt.track.push_back({0.0, 0.0});
        else
            gt.track.push_back({e[0].get<double>(), e[1].get<double>()});
    }
    gt.visible = j.at("visible").get<std::vector<bool>>();
    gt.frame_tags = j.at("frame_tags").get<std::vector<std::vector<std::string>>>();
    return gt;
}

CorpusManifest generate_corpus(const std::string& out_dir, const CorpusConfig& cfg) {
    HEMO_CHECK(cfg.n_patients > 0 && cfg.clips_per_patient > 0, "generate_corpus: empty corpus");
    fs::create_directories(out_dir);

    CorpusManifest manifest;
    manifest.seed = cfg.seed;
    manifest.preset = cfg.preset;

    Rng corpus_rng(cfg.seed);
    int ordinal = 0;
    for (int p = 0; p < cfg.n_patients; ++p) {
        char pid[16];
        std::snprintf(pid, sizeof(pid), "p%03d", p);
        std::vector<std::string> clip_ids;
        for (int c = 0; c < cfg.clips_per_patient; ++c, ++ordinal) {
            char cid[32];
            std::snprintf(cid, sizeof(cid), "%s_c%02d", pid, c);

            SynthConfig sc = cfg.base;
            sc.seed = mix_seed(cfg.seed, uint64_t(ordinal));
            Rng clip_rng(sc.seed ^ 0x5851F42D4C957F2DULL);
            if (cfg.nonbleeding_fraction > 0 &&
                clip_rng.uniform() < cfg.nonbleeding_fraction)
                sc.onset_frame = -1;
            if (sc.onset_frame >= 0) {
                const int base_onset =
                    std::clamp(cfg.base.onset_frame, 1, cfg.base.length - 2);
                if (cfg.onset_jitter > 0) {
                    const int lo = std::max(1, base_onset - cfg.onset_jitter);
                    const int hi = std::min(cfg.base.length - 2, base_onset + cfg.onset_jitter);
                    sc.onset_frame = clip_rng.uniform_int(lo, hi);
                } else {
                    sc.onset_frame = base_onset;
                }
            }
            sc.growth_rate = cfg.base.growth_rate * clip_rng.uniform(0.8, 1.25);
            sc.disturbances =
                sample_disturbances(cfg.preset, sc.length, sc.onset_frame, clip_rng);

            const fs::path clip_dir = fs::path(out_dir) / cid;
            try {
                SynthResult res = generate_scene(sc);
                res.clip.id = cid;
                res.clip.meta.patient_id = pid;

                // Sparse annotations at the configured cadence, onset first.
                if (res.truth.onset_frame >= 0) {
                    for (int t = res.truth.onset_frame; t < sc.length;
                         t += cfg.sparse_label_stride) {
                        if (!res.truth.visible[t]) continue;
                        video::PointLabel pl;
                        pl.frame = t;
                        pl.x = res.truth.track[t][0];
                        pl.y = res.truth.track[t][1];
                        pl.source = "human";
                        res.clip.labels.points.push_back(pl);
                    }
                }
                video::save_clip(out_dir, res.clip);
                save_oracle((clip_dir / "oracle.json").string(), res.truth);
            } catch (...) {
                std::error_code ec;
                fs::remove_all(clip_dir, ec);
                throw;
            }
            clip_ids.push_back(cid);
        }
        manifest.patients.emplace_back(pid, clip_ids);
    }

    video::json mj;
    mj["seed"] = manifest.seed;
    mj["preset"] = manifest.preset;
    mj["width"] = cfg.base.width;
    mj["height"] = cfg.base.height;
    mj["length"] = cfg.base.length;
    mj["onset_frame"] = cfg.base.onset_frame;
    video::json pats = video::json::array();
    for (const auto& [pid, clips] : manifest.patients) {
        video::json pj;
        pj["id"] = pid;
        pj["clips"] = clips;
        pats.push_back(pj);
    }
    mj["patients"] = pats;

    const fs::path final_path = fs::path(out_dir) / "corpus_manifest.json";
    const fs::path tmp_path = fs::path(out_dir) / "corpus_manifest.json.tmp";
    {
        std::ofstream f(tmp_path, std::ios::trunc);
        HEMO_CHECK(f.good(), "generate_corpus: cannot write manifest");
        f << mj.dump(2) << "\n";
        HEMO_CHECK(f.good(), "generate_corpus: manifest write failed");
    }
    fs::rename(tmp_path, final_path);
    return manifest;
}

}  // namespace hemo::synth
