#pragma once
#include <deque>
#include <optional>
#include <utility>
#include <vector>

#include "hemotrack/flow.hpp"
#include "hemotrack/image.hpp"
#include "hemotrack/nn.hpp"
#include "hemotrack/tensor.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::onset {

// ---- configuration ----------------------------------------------------------
struct OnsetConfig {
    int window_N = 60;                     // sliding-window length (frames)
    double alpha = 0.5;                    // color-confidence storage gate
    double gamma = 0.5;                    // flow-confidence storage gate
    int memory_capacity = 8;               // keyframe FIFO size K
    double conf_decision_threshold = 0.5;  // S_conf validity threshold
};

struct OnsetNetConfig {
    int work_w = 32, work_h = 24;  // analysis resolution
    int feat_channels = 32;        // fused channels per difference branch
    int token_dim = 64;            // transformer width
    int layers = 4;
    int heads = 8;
    int ffn_dim = 128;
};

// ---- per-clip working data ----------------------------------------------------
// Downsampled planes plus adjacent optical flow, computed once per clip.
struct WorkFrames {
    int w = 0, h = 0;
    std::vector<img::Image> small;           // work-resolution frames
    std::vector<std::vector<double>> gray;   // per-frame grayscale (for flow)
    std::vector<nn::Var> rgb;                // {3,h,w} per frame
    std::vector<nn::Var> hsv;                // {4,h,w} per frame (cos/sin hue, s, v)
    std::vector<flow::FlowField> adj_flow;   // flow[t]: frame t-1 -> t; flow[0] zero
    int length() const { return int(small.size()); }
};
WorkFrames prepare_work_frames(const video::Clip& clip, const OnsetNetConfig& cfg);

// ---- clean-view frame memory ----------------------------------------------------
// Storage gate: the pair enters memory only when both confidences are low.
bool gate_stores(double c_color, double c_flow, const OnsetConfig& cfg);

struct MemoryStore {
    int capacity = 8;
    std::deque<int> keyframes;  // stored frame indices, oldest first
    int recent = -1;            // predecessor of the newest processed frame

    bool empty() const { return keyframes.empty(); }
    int most_recent_keyframe() const { return keyframes.empty() ? -1 : keyframes.back(); }
};
// Processes the pair (prev_frame, curr_frame): `recent` always becomes
// prev_frame; prev_frame is pushed as a keyframe only when the gate passes,
// evicting the oldest entry beyond capacity.
MemoryStore update_memory(MemoryStore mem, int prev_frame, int curr_frame, double c_color,
                          double c_flow, const OnsetConfig& cfg);

// Per-frame most recent clean keyframe given gate decisions. stores[v] is the
// gate outcome for the pair (v-1, v); stores[0] is ignored. Result[t] is the
// largest v-1 with v <= t and stores[v], or -1 when none exists yet.
std::vector<int> keyframe_for_frame(const std::vector<char>& stores);

// ---- decision rules ---------------------------------------------------------------
struct WindowScore {
    int t = 0;          // window start
    double theta = 0;   // relative onset in [0,1]
    double s_conf = 0;  // window validity score
};
// Offline: earliest t + floor(theta*N) over windows with s_conf > threshold,
// breaking ties towards the smaller window start. Returns (onset, window start).
std::optional<std::pair<int, int>> decide_offline(const std::vector<WindowScore>& scores, int N,
                                                  double threshold);
// Streaming: the first window in scan order with s_conf > threshold decides.
std::optional<std::pair<int, int>> decide_streaming(const std::vector<WindowScore>& scores,
                                                    int N, double threshold);

// ---- model -----------------------------------------------------------------------
class OnsetModel {
public:
    OnsetModel() = default;
    OnsetModel(const OnsetNetConfig& cfg, uint64_t seed);

    // Interframe confidences (c_color, c_flow) for the pair (prev, curr);
    // scalars in (0,1).
    std::pair<nn::Var, nn::Var> confidences(const WorkFrames& wf, int prev, int curr) const;

    // Multi-domain gating over encoded RGB/HSV/flow difference features.
    // Channel attention on the concatenation, then three parallel convolution
    // branches mixed by normalized sigmoid gates. forced_gates bypasses the
    // learned gate head (diagnostics/tests).
    nn::Var mdg_fuse(const nn::Var& f_rgb, const nn::Var& f_hsv, const nn::Var& f_flow,
                     const double* forced_gates = nullptr) const;
    nn::Var mdg_channel_attention(const nn::Var& cat) const;   // SE-style reweighting
    nn::Var mdg_branch(const nn::Var& attended, int i) const;  // branch i response

    // Fused difference features for the ordered pair (ref, curr): {C, gh, gw}.
    nn::Var pair_features(const WorkFrames& wf, int ref, int curr) const;

    // Token for frame t against its clean keyframe: pooled adjacent-pair and
    // keyframe-pair fusions, concatenated to {2C}.
    nn::Var frame_token(const WorkFrames& wf, int t, int keyframe) const;

    // Window scores from N frame tokens: {2} = sigmoid(theta, s_conf). The
    // final projection is zero-initialized, so an untrained model emits
    // (0.5, 0.5).
    nn::Var window_scores(const std::vector<nn::Var>& tokens) const;

    // Gate decisions for every adjacent pair of the clip (no-grad).
    std::vector<char> gate_decisions(const WorkFrames& wf, const OnsetConfig& cfg) const;

    // Score one window starting at t0 (no-grad unless grads are enabled).
    WindowScore score_window(const WorkFrames& wf, int t0, const std::vector<int>& keyframe_at,
                             const OnsetConfig& cfg) const;

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const OnsetNetConfig& config() const { return cfg_; }

private:
    OnsetNetConfig cfg_;
    nn::ParamStore ps_;
    nn::Var flow_planes(const WorkFrames& wf, int ref, int curr) const;
    nn::Var encode_domain(const std::string& prefix, const nn::Var& x) const;
};

// ---- end-to-end location -------------------------------------------------------------
struct OnsetResult {
    bool bleeding = false;
    int onset_frame = -1;   // in [0, T-1] when bleeding
    int window_start = -1;  // contributing window
    double theta = 0;
    double s_conf = 0;
};
// Runs gating, per-frame tokens and sliding windows over the clip. Offline
// mode scans every window start; streaming stops at the first valid window.
// Clips shorter than one window are an error.
OnsetResult locate_onset(const OnsetModel& model, const video::Clip& clip,
                         const OnsetConfig& cfg, bool streaming);
OnsetResult locate_onset_prepared(const OnsetModel& model, const WorkFrames& wf,
                                  const OnsetConfig& cfg, bool streaming);

// ---- training loss ---------------------------------------------------------------------
struct WindowTarget {
    bool positive = false;  // ground-truth onset falls inside [t, t+N)
    double theta_gt = 0;    // (t_gt - t) / N when positive
};
// Mean BCE towards 0 over negative windows, plus per-positive-window
// BCE towards 1 and squared error between N*theta and N*theta_gt.
nn::Var temporal_loss(const std::vector<std::pair<nn::Var, WindowTarget>>& windows, int N);

}  // namespace hemo::onset
