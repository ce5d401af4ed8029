#pragma once
#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemotrack/onset_detect.hpp"
#include "hemotrack/point_track.hpp"
#include "hemotrack/scene_synth.hpp"
#include "hemotrack/source_detect.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::bench {

using json = nlohmann::ordered_json;

// ---- metric primitives --------------------------------------------------------
// Fraction of clips whose predicted onset lies within k frames of the truth.
double onset_accuracy(const std::vector<int>& t_gt, const std::vector<int>& t_pred, int k);

// Mean signed error (gt - pred) and mean absolute error, in frames.
struct FrameError {
    double signed_mean = 0;
    double absolute_mean = 0;
};
FrameError avg_frame_error(const std::vector<int>& t_gt, const std::vector<int>& t_pred);

// Fraction of point pairs within d pixels (inclusive).
double point_accuracy(const std::vector<std::array<double, 2>>& gt,
                      const std::vector<std::array<double, 2>>& pred, double d);
double point_accuracy_dist(const std::vector<double>& dists, double d);

// Pixel thresholds are defined at the reference resolution and scaled by the
// ratio of frame diagonals when evaluating at other resolutions.
constexpr double kRefWidth = 1240.0, kRefHeight = 1080.0;
double ref_diagonal();
double scaled_threshold(double d_ref, int width, int height);

struct MetricConfig {
    std::vector<int> onset_tolerances{0, 1, 2, 4, 8};
    std::vector<double> point_thresholds{10, 25, 50, 75, 100};  // px at reference
};

// The six recognized scenario tags, fixed order.
const std::vector<std::string>& scenario_tags();

// ---- pipeline ------------------------------------------------------------------
struct PipelineModels {
    onset::OnsetModel* onset_model = nullptr;
    detect::DetectModel* detect_model = nullptr;
    track::TrackModel* track_model = nullptr;
    onset::OnsetConfig onset_cfg;
};

struct ClipRecord {
    std::string clip_id;
    std::vector<std::string> tags;
    bool gt_bleeding = false;
    bool pred_bleeding = false;
    int t_gt = -1;
    int t_pred = -1;
    // Source localization at the detection frame.
    int detect_frame = -1;
    std::array<double, 2> detect_pred{0, 0};
    std::array<double, 2> detect_gt{0, 0};
    double detect_err = 0;
    // Tracking from the init frame to the end of the clip.
    int track_init_frame = -1;
    std::vector<track::TrackedPoint> trajectory;
    std::vector<double> track_dists;  // per evaluated (visible) frame
    double mean_confidence = 0;
};

// One clip through the two-stage pipeline. Evaluation mode localizes and
// tracks from the ground-truth onset (the onset prediction is recorded for
// reporting only); deployment mode chains the streaming onset decision into
// localization and tracking, skipping both when no window is accepted.
ClipRecord run_pipeline(const PipelineModels& models, const video::Clip& clip,
                        const synth::SynthGroundTruth& truth, bool deployment);

// ---- aggregation ----------------------------------------------------------------
struct MetricsReport {
    int schema_version = 1;
    uint64_t seed = 0;
    std::string mode;  // "evaluation" | "deployment"
    int width = 0, height = 0;
    int n_clips = 0;
    MetricConfig metric_cfg;
    // onset
    int n_onset = 0;
    std::map<int, double> onset_acc;  // tolerance -> accuracy
    FrameError onset_err;
    // localization + tracking
    int n_detect = 0;
    double detect_mean_err = 0;
    int n_track_points = 0;
    std::map<int, double> track_acc;                          // threshold(ref px) -> accuracy
    std::map<std::string, std::map<int, double>> per_scenario;  // tag -> threshold -> acc
    std::map<std::string, int> scenario_counts;               // evaluated points per tag

    json to_json(const json& resolved_config) const;
    std::string to_csv() const;
};

MetricsReport aggregate(const std::vector<ClipRecord>& records, const MetricConfig& cfg,
                        int width, int height, bool deployment, uint64_t seed);

// Writes report.json, report.csv and (optionally) overlay frames with the
// predicted point in green, ground truth in blue and the confidence printed
// per frame.
void emit_report(const std::string& out_dir, const MetricsReport& report,
                 const json& resolved_config);
void write_overlays(const std::string& out_dir, const video::Clip& clip,
                    const synth::SynthGroundTruth& truth, const ClipRecord& record);

// ---- efficiency ---------------------------------------------------------------------
struct StageEfficiency {
    std::string stage;
    double compute_latency_ms = 0;  // model math on prepared inputs
    double compute_fps = 0;
    double e2e_latency_ms = 0;  // including conversions from raw frames
    double e2e_fps = 0;
    int64_t params = 0;
};
struct EfficiencyReport {
    int width = 0, height = 0, frames = 0;
    std::vector<StageEfficiency> stages;
    int64_t peak_rss_kb = 0;  // process high-water mark (VmHWM)
    json to_json() const;
};
// Times each stage on a synthetic clip at the given resolution. Timings are
// wall-clock and live outside the metric reports so those stay reproducible.
EfficiencyReport measure_efficiency(const PipelineModels& models, int width = 512,
                                    int height = 384, int n_frames = 16);

int64_t peak_rss_kb();

}  // namespace hemo::bench
