#pragma once
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hemotrack/flow.hpp"
#include "hemotrack/image.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::pseudo {

// ---- sparse matching ---------------------------------------------------------
struct MatchConfig {
    double radius = 50.0;            // candidate disc around the anchor (px)
    double min_confidence = 0.7;     // similarity acceptance threshold
    int max_corners = 48;            // corner budget per frame
    int patch = 9;                   // NCC descriptor side (odd)
    double max_displacement = 24.0;  // allowed motion between the two frames
    double min_corner_response = 0.005;  // min-eigenvalue floor on unit-range gray
    double nms_distance = 4.0;       // min spacing between kept corners
};

struct Corner {
    double x = 0, y = 0;
    double response = 0;
};
// Shi-Tomasi (min-eigenvalue) corners inside a disc, strongest first.
std::vector<Corner> find_corners(const img::Image& im, double cx, double cy, double radius,
                                 const MatchConfig& cfg);

struct PseudoPair {
    double x0 = 0, y0 = 0;  // position in frame a
    double x1 = 0, y1 = 0;  // position in frame b
    double confidence = 0;  // clamped NCC score in [0,1]
};
// Mutual patch-NCC matches between corners of the two frames, restricted to a
// disc around the anchor. Flat or featureless regions come back empty.
std::vector<PseudoPair> match_region(const img::Image& a, const img::Image& b, double ax,
                                     double ay, const MatchConfig& cfg);

// ---- trajectory propagation -----------------------------------------------------
struct Trajectory {
    int start_frame = 0;
    std::vector<std::array<double, 2>> points;  // one per frame from start_frame

    int steps() const { return int(points.size()) - 1; }
};

// Pluggable frame-to-frame tracker: start position at start_frame advanced
// n_steps frames, returning n_steps+1 points.
using TrackerFn =
    std::function<std::vector<std::array<double, 2>>(int start_frame, std::array<double, 2> p0,
                                                     int n_steps)>;
// Dense block-matching tracker over the clip; per-pair flow fields are cached
// inside the returned closure.
TrackerFn make_flow_tracker(const video::Clip& clip);

Trajectory propagate_trajectory(int start_frame, std::array<double, 2> p0, int n_steps,
                                const TrackerFn& tracker);

// ---- smoothing ---------------------------------------------------------------------
struct KalmanConfig {
    double q = 1.0;           // process noise (px^2/frame^2)
    double r = 4.0;           // per-frame measurement noise (px^2)
    double r_terminal = 0.25; // endpoint-anchor noise (px^2); 0 pins the endpoint
};
// Constant-velocity forward filter + RTS backward smoothing of the raw track,
// then an endpoint correction towards the anchor distributed linearly along
// the trajectory. The smoothed final point is a per-axis convex combination of
// the raw final point and the anchor; with r_terminal = 0 it equals the anchor.
Trajectory kalman_smooth(const Trajectory& raw, std::array<double, 2> endpoint_anchor,
                         const KalmanConfig& cfg = {});

// ---- factory --------------------------------------------------------------------------
struct FactoryConfig {
    MatchConfig match;
    KalmanConfig kalman;
    int max_tracks_per_span = 12;  // matched keypoints propagated per span
    bool smooth = true;
};

struct PseudoPoint {
    double x = 0, y = 0;
    double confidence = 1.0;
    std::string provenance;  // "matched" | "tracked" | "smoothed"
    int track_id = 0;        // 0 = the source trajectory
};

struct PseudoLabels {
    int version = 1;
    std::string clip_id;
    std::map<int, std::vector<PseudoPoint>> frames;
    std::vector<std::string> log;  // fallbacks and dropped spans

    // Source-trajectory point (track_id 0) at a frame, if present.
    std::optional<PseudoPoint> source_at(int frame) const;
};

// Expands sparse human labels into dense per-frame pseudo labels: keypoint
// matching between consecutive annotated frames, trajectory propagation from
// the earlier frame, endpoint-anchored smoothing. A span whose matcher comes
// back empty falls back to the anchor itself as a single full-confidence pair
// (recorded in the log).
PseudoLabels run_factory(const video::Clip& clip, const FactoryConfig& cfg,
                         const TrackerFn& tracker);

void save_pseudo_labels(const std::string& path, const PseudoLabels& pl);
PseudoLabels load_pseudo_labels(const std::string& path);

// ---- training sample layout ----------------------------------------------------------
struct TrainSample {
    int start = 0;
    int length = 0;
};
// "short": one span per consecutive pair of human labels; "long": the whole
// labeled range as a single sample; "hybrid": both, deterministically shuffled.
std::vector<TrainSample> build_samples(const video::ClipLabels& labels, const std::string& mode,
                                       uint64_t seed);

}  // namespace hemo::pseudo
