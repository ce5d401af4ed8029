#include "hemotrack/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hemotrack/common.hpp"
#include "hemotrack/image.hpp"

namespace hemo::bench {

namespace fs = std::filesystem;
using clock_t_ = std::chrono::steady_clock;

// ---- metric primitives -----------------------------------------------------------

double onset_accuracy(const std::vector<int>& t_gt, const std::vector<int>& t_pred, int k) {
    HEMO_CHECK(t_gt.size() == t_pred.size(), "onset_accuracy: ", t_gt.size(), " truths vs ",
               t_pred.size(), " predictions");
    HEMO_CHECK(!t_gt.empty(), "onset_accuracy: empty input");
    HEMO_CHECK(k >= 0, "onset_accuracy: negative tolerance");
    int hit = 0;
    for (size_t i = 0; i < t_gt.size(); ++i)
        if (std::abs(t_gt[i] - t_pred[i]) <= k) ++hit;
    return double(hit) / double(t_gt.size());
}

FrameError avg_frame_error(const std::vector<int>& t_gt, const std::vector<int>& t_pred) {
    HEMO_CHECK(t_gt.size() == t_pred.size() && !t_gt.empty(), "avg_frame_error: bad input");
    FrameError e;
    for (size_t i = 0; i < t_gt.size(); ++i) {
        const double d = double(t_gt[i]) - double(t_pred[i]);
        e.signed_mean += d;
        e.absolute_mean += std::abs(d);
    }
    e.signed_mean /= double(t_gt.size());
    e.absolute_mean /= double(t_gt.size());
    return e;
}

double point_accuracy(const std::vector<std::array<double, 2>>& gt,
                      const std::vector<std::array<double, 2>>& pred, double d) {
    HEMO_CHECK(gt.size() == pred.size(), "point_accuracy: ", gt.size(), " truths vs ",
               pred.size(), " predictions");
    HEMO_CHECK(!gt.empty(), "point_accuracy: empty input");
    int hit = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        const double dx = gt[i][0] - pred[i][0], dy = gt[i][1] - pred[i][1];
        if (std::sqrt(dx * dx + dy * dy) <= d) ++hit;
    }
    return double(hit) / double(gt.size());
}

double point_accuracy_dist(const std::vector<double>& dists, double d) {
    HEMO_CHECK(!dists.empty(), "point_accuracy_dist: empty input");
    int hit = 0;
    for (double x : dists)
        if (x <= d) ++hit;
    return double(hit) / double(dists.size());
}

double ref_diagonal() { return std::sqrt(kRefWidth * kRefWidth + kRefHeight * kRefHeight); }

double scaled_threshold(double d_ref, int width, int height) {
    HEMO_CHECK(width > 0 && height > 0, "scaled_threshold: bad frame size");
    const double diag = std::sqrt(double(width) * width + double(height) * height);
    return d_ref * diag / ref_diagonal();
}

const std::vector<std::string>& scenario_tags() {
    static const std::vector<std::string> tags{"clear",      "jitter",     "flush",
                                               "reflection", "instrument", "obscure"};
    return tags;
}

// ---- pipeline --------------------------------------------------------------------------

ClipRecord run_pipeline(const PipelineModels& models, const video::Clip& clip,
                        const synth::SynthGroundTruth& truth, bool deployment) {
    HEMO_CHECK(models.onset_model && models.detect_model && models.track_model,
               "run_pipeline: missing model");
    nn::NoGradGuard ng;
    ClipRecord rec;
    rec.clip_id = clip.id;
    rec.tags = clip.meta.scenario_tags;
    if (rec.tags.empty()) rec.tags = {"clear"};
    rec.gt_bleeding = truth.onset_frame >= 0;
    rec.t_gt = truth.onset_frame;

    // Stage 1: onset. Deployment decides in streaming order; evaluation scans
    // every window but its output feeds reporting only.
    auto onset_res = onset::locate_onset(*models.onset_model, clip, models.onset_cfg, deployment);
    rec.pred_bleeding = onset_res.bleeding;
    rec.t_pred = onset_res.onset_frame;

    int detect_frame = -1;
    if (deployment) {
        if (!onset_res.bleeding) return rec;  // non-bleeding: downstream skipped
        detect_frame = onset_res.onset_frame;
    } else {
        if (!rec.gt_bleeding) return rec;
        detect_frame = truth.onset_frame;
    }
    rec.detect_frame = detect_frame;

    // Stage 2a: single-frame source localization at the decision frame.
    auto fused = models.detect_model->forward_image(clip.frames[detect_frame]);
    auto loc = detect::locate_source(fused);
    rec.detect_pred = {double(loc[0]), double(loc[1])};
    if (rec.gt_bleeding && detect_frame >= truth.onset_frame) {
        rec.detect_gt = {truth.track[detect_frame][0], truth.track[detect_frame][1]};
        const double dx = rec.detect_pred[0] - rec.detect_gt[0];
        const double dy = rec.detect_pred[1] - rec.detect_gt[1];
        rec.detect_err = std::sqrt(dx * dx + dy * dy);
    }

    // Stage 2b: tracking. Deployment chains the predicted point; evaluation
    // starts from the ground truth so tracker quality is measured in isolation.
    const std::array<double, 2> init_pt =
        deployment ? rec.detect_pred
                   : std::array<double, 2>{truth.track[detect_frame][0],
                                           truth.track[detect_frame][1]};
    rec.track_init_frame = detect_frame;
    rec.trajectory = track::track_clip(*models.track_model, clip, detect_frame, init_pt, true);

    double conf_acc = 0;
    for (const auto& tp : rec.trajectory) {
        conf_acc += tp.confidence;
        if (!rec.gt_bleeding || tp.frame < truth.onset_frame) continue;
        if (tp.frame >= int(truth.visible.size()) || !truth.visible[tp.frame]) continue;
        const double dx = tp.x - truth.track[tp.frame][0];
        const double dy = tp.y - truth.track[tp.frame][1];
        rec.track_dists.push_back(std::sqrt(dx * dx + dy * dy));
    }
    rec.mean_confidence = rec.trajectory.empty() ? 0 : conf_acc / double(rec.trajectory.size());
    return rec;
}

// ---- aggregation ----------------------------------------------------------------------------

MetricsReport aggregate(const std::vector<ClipRecord>& records, const MetricConfig& cfg,
                        int width, int height, bool deployment, uint64_t seed) {
    MetricsReport r;
    r.seed = seed;
    r.mode = deployment ? "deployment" : "evaluation";
    r.width = width;
    r.height = height;
    r.n_clips = int(records.size());
    r.metric_cfg = cfg;

    std::vector<int> gts, preds;
    for (const auto& rec : records) {
        if (!rec.gt_bleeding || !rec.pred_bleeding) continue;
        gts.push_back(rec.t_gt);
        preds.push_back(rec.t_pred);
    }
    r.n_onset = int(gts.size());
    if (!gts.empty()) {
        for (int k : cfg.onset_tolerances) r.onset_acc[k] = onset_accuracy(gts, preds, k);
        r.onset_err = avg_frame_error(gts, preds);
    }

    double derr = 0;
    std::vector<double> all_dists;
    std::map<std::string, std::vector<double>> tag_dists;
    for (const auto& rec : records) {
        if (rec.detect_frame >= 0 && rec.gt_bleeding) {
            derr += rec.detect_err;
            ++r.n_detect;
        }
        for (double d : rec.track_dists) all_dists.push_back(d);
        for (const auto& tag : rec.tags)
            for (double d : rec.track_dists) tag_dists[tag].push_back(d);
    }
    if (r.n_detect > 0) r.detect_mean_err = derr / r.n_detect;
    r.n_track_points = int(all_dists.size());
    if (!all_dists.empty())
        for (double dref : cfg.point_thresholds)
            r.track_acc[int(dref)] = point_accuracy_dist(all_dists,
                                                         scaled_threshold(dref, width, height));
    for (const auto& tag : scenario_tags()) {
        auto it = tag_dists.find(tag);
        r.scenario_counts[tag] = it == tag_dists.end() ? 0 : int(it->second.size());
        if (it == tag_dists.end() || it->second.empty()) continue;
        for (double dref : cfg.point_thresholds)
            r.per_scenario[tag][int(dref)] =
                point_accuracy_dist(it->second, scaled_threshold(dref, width, height));
    }
    return r;
}

namespace {

json acc_map_to_json(const std::map<int, double>& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v;
    return j;
}

}  // namespace

json MetricsReport::to_json(const json& resolved_config) const {
    json j;
    j["schema_version"] = schema_version;
    j["mode"] = mode;
    j["seed"] = seed;
    j["resolution"] = {{"width", width}, {"height", height}};
    j["n_clips"] = n_clips;
    j["onset"] = {{"n", n_onset},
                  {"accuracy", acc_map_to_json(onset_acc)},
                  {"signed_mean_error", onset_err.signed_mean},
                  {"absolute_mean_error", onset_err.absolute_mean}};
    j["localization"] = {{"n", n_detect}, {"mean_error_px", detect_mean_err}};
    json scen = json::object();
    for (const auto& tag : scenario_tags()) {
        json sj;
        sj["n"] = scenario_counts.count(tag) ? scenario_counts.at(tag) : 0;
        sj["accuracy"] = per_scenario.count(tag) ? acc_map_to_json(per_scenario.at(tag))
                                                 : json::object();
        scen[tag] = sj;
    }
    j["tracking"] = {{"n", n_track_points},
                     {"accuracy", acc_map_to_json(track_acc)},
                     {"per_scenario", scen}};
    j["resolved_config"] = resolved_config;
    return j;
}

namespace {

std::string fmt_value(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << "metric,threshold,value,n,scenario\n";
    for (const auto& [k, v] : onset_acc)
        os << "onset_accuracy," << k << "," << fmt_value(v) << "," << n_onset << ",all\n";
    if (n_onset > 0) {
        os << "onset_signed_error,," << fmt_value(onset_err.signed_mean) << "," << n_onset
           << ",all\n";
        os << "onset_absolute_error,," << fmt_value(onset_err.absolute_mean) << "," << n_onset
           << ",all\n";
    }
    if (n_detect > 0)
        os << "localization_mean_error,," << fmt_value(detect_mean_err) << "," << n_detect
           << ",all\n";
    for (const auto& [d, v] : track_acc)
        os << "point_accuracy," << d << "," << fmt_value(v) << "," << n_track_points << ",all\n";
    for (const auto& tag : scenario_tags()) {
        auto it = per_scenario.find(tag);
        if (it == per_scenario.end()) continue;
        const int n = scenario_counts.count(tag) ? scenario_counts.at(tag) : 0;
        for (const auto& [d, v] : it->second)
            os << "point_accuracy," << d << "," << fmt_value(v) << "," << n << "," << tag
               << "\n";
    }
    return os.str();
}

void emit_report(const std::string& out_dir, const MetricsReport& report,
                 const json& resolved_config) {
    fs::create_directories(out_dir);
    {
        std::ofstream f(fs::path(out_dir) / "report.json");
        HEMO_CHECK(f.good(), "emit_report: cannot write report.json in ", out_dir);
        f << report.to_json(resolved_config).dump(2) << "\n";
        HEMO_CHECK(f.good(), "emit_report: report.json write failed");
    }
    {
        std::ofstream f(fs::path(out_dir) / "report.csv");
        HEMO_CHECK(f.good(), "emit_report: cannot write report.csv in ", out_dir);
        f << report.to_csv();
        HEMO_CHECK(f.good(), "emit_report: report.csv write failed");
    }
}

void write_overlays(const std::string& out_dir, const video::Clip& clip,
                    const synth::SynthGroundTruth& truth, const ClipRecord& record) {
    const fs::path dir = fs::path(out_dir) / "overlays" / clip.id;
    fs::create_directories(dir);
    std::map<int, const track::TrackedPoint*> by_frame;
    for (const auto& tp : record.trajectory) by_frame[tp.frame] = &tp;
    for (int t = 0; t < clip.length(); ++t) {
        img::Image frame = clip.frames[t];
        if (truth.onset_frame >= 0 && t >= truth.onset_frame && t < int(truth.track.size()))
            img::draw_cross(frame, truth.track[t][0], truth.track[t][1], 4, 60, 90, 235);
        if (auto it = by_frame.find(t); it != by_frame.end()) {
            const auto& tp = *it->second;
            img::draw_cross(frame, tp.x, tp.y, 4, 40, 220, 60);
            char txt[48];
            std::snprintf(txt, sizeof(txt), "conf %.2f", tp.confidence);
            img::draw_text(frame, txt, 2, 10, 40, 220, 60);
        }
        char name[32];
        std::snprintf(name, sizeof(name), "%06d.png", t);
        img::save_png((dir / name).string(), frame);
    }
}

// ---- efficiency -----------------------------------------------------------------------------

int64_t peak_rss_kb() {
    std::ifstream f("/proc/self/status");
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream is(line.substr(6));
            int64_t kb = 0;
            is >> kb;
            return kb;
        }
    }
    return 0;
}

json EfficiencyReport::to_json() const {
    json j;
    j["resolution"] = {{"width", width}, {"height", height}};
    j["frames"] = frames;
    json st = json::array();
    for (const auto& s : stages) {
        st.push_back({{"stage", s.stage},
                      {"compute_latency_ms", s.compute_latency_ms},
                      {"compute_fps", s.compute_fps},
                      {"e2e_latency_ms", s.e2e_latency_ms},
                      {"e2e_fps", s.e2e_fps},
                      {"params", s.params}});
    }
    j["stages"] = st;
    j["peak_rss_kb"] = peak_rss_kb;
    return j;
}

EfficiencyReport measure_efficiency(const PipelineModels& models, int width, int height,
                                    int n_frames) {
    HEMO_CHECK(models.onset_model && models.detect_model && models.track_model,
               "measure_efficiency: missing model");
    HEMO_CHECK(n_frames >= 4, "measure_efficiency: need at least 4 frames");
    nn::NoGradGuard ng;

    synth::SynthConfig sc;
    sc.width = width;
    sc.height = height;
    sc.length = n_frames;
    sc.onset_frame = 1;
    sc.seed = 7;
    auto scene = synth::generate_scene(sc);
    const auto& clip = scene.clip;

    EfficiencyReport rep;
    rep.width = width;
    rep.height = height;
    rep.frames = n_frames;

    auto ms_since = [](clock_t_::time_point a, clock_t_::time_point b) {
        return std::chrono::duration<double, std::milli>(b - a).count();
    };

    // Onset stage: per-frame confidence gating on prepared working frames
    // (compute) and from raw frames including downsampling and flow (e2e).
    {
        StageEfficiency s;
        s.stage = "onset";
        s.params = models.onset_model->params().param_count();
        auto wf = onset::prepare_work_frames(clip, models.onset_model->config());
        auto t0 = clock_t_::now();
        for (int t = 1; t < n_frames; ++t) (void)models.onset_model->confidences(wf, t - 1, t);
        auto t1 = clock_t_::now();
        const double compute_ms = ms_since(t0, t1);
        auto t2 = clock_t_::now();
        auto wf2 = onset::prepare_work_frames(clip, models.onset_model->config());
        for (int t = 1; t < n_frames; ++t) (void)models.onset_model->confidences(wf2, t - 1, t);
        auto t3 = clock_t_::now();
        const double e2e_ms = ms_since(t2, t3);
        const int n = n_frames - 1;
        s.compute_latency_ms = compute_ms / n;
        s.compute_fps = 1000.0 * n / compute_ms;
        s.e2e_latency_ms = e2e_ms / n;
        s.e2e_fps = 1000.0 * n / e2e_ms;
        rep.stages.push_back(s);
    }

    // Localization stage: fused map from prepared planes (compute) and from
    // the raw frame (e2e).
    {
        StageEfficiency s;
        s.stage = "localization";
        s.params = models.detect_model->params().param_count();
        std::vector<nn::Var> planes;
        for (int t = 0; t < std::min(4, n_frames); ++t)
            planes.push_back(img::to_planes(clip.frames[t]));
        auto t0 = clock_t_::now();
        for (const auto& p : planes) (void)models.detect_model->forward(p);
        auto t1 = clock_t_::now();
        auto t2 = clock_t_::now();
        for (int t = 0; t < int(planes.size()); ++t)
            (void)models.detect_model->forward_image(clip.frames[t]);
        auto t3 = clock_t_::now();
        const int n = int(planes.size());
        const double compute_ms = ms_since(t0, t1), e2e_ms = ms_since(t2, t3);
        s.compute_latency_ms = compute_ms / n;
        s.compute_fps = 1000.0 * n / compute_ms;
        s.e2e_latency_ms = e2e_ms / n;
        s.e2e_fps = 1000.0 * n / e2e_ms;
        rep.stages.push_back(s);
    }

    // Tracking stage: steps over the clip. The step itself includes the
    // work-resolution resize, so "compute" times the decode on a pre-resized
    // frame sequence via a same-size clip.
    {
        StageEfficiency s;
        s.stage = "tracking";
        s.params = models.track_model->params().param_count();
        const auto& tc = models.track_model->config();
        video::Clip small_clip = clip;
        for (auto& f : small_clip.frames) f = img::resize(f, tc.work_w, tc.work_h);
        const std::array<double, 2> p0{double(width) / 2, double(height) / 2};

        auto st = models.track_model->init_track(small_clip.frames[1], 1,
                                                 {tc.work_w / 2.0, tc.work_h / 2.0});
        auto t0 = clock_t_::now();
        for (int t = 2; t < n_frames; ++t)
            st = models.track_model->step(st, small_clip.frames[t], t).state;
        auto t1 = clock_t_::now();

        auto st2 = models.track_model->init_track(clip.frames[1], 1, p0);
        auto t2 = clock_t_::now();
        for (int t = 2; t < n_frames; ++t)
            st2 = models.track_model->step(st2, clip.frames[t], t).state;
        auto t3 = clock_t_::now();
        const int n = n_frames - 2;
        const double compute_ms = ms_since(t0, t1), e2e_ms = ms_since(t2, t3);
        s.compute_latency_ms = compute_ms / n;
        s.compute_fps = 1000.0 * n / compute_ms;
        s.e2e_latency_ms = e2e_ms / n;
        s.e2e_fps = 1000.0 * n / e2e_ms;
        rep.stages.push_back(s);
    }

    rep.peak_rss_kb = peak_rss_kb();
    return rep;
}

}  // namespace hemo::bench
