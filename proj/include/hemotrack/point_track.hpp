#pragma once
#include <array>
#include <map>
#include <string>
#include <vector>

#include "hemotrack/image.hpp"
#include "hemotrack/nn.hpp"
#include "hemotrack/tensor.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::track {

struct TrackNetConfig {
    int work_w = 64, work_h = 48;  // analysis resolution (stride-8 grid)
    int dim = 64;                  // decoder width
    int red_channels = 8;          // red-prior feature channels in K/V
    int heads = 4;
    int layers = 2;                // decoder depth
    int ffn_dim = 128;
    double memory_blend = 0.05;    // EMA weight folding new evidence into the query
    int refresh_interval = 60;     // frames between memory refreshes
    double softargmax_temp = 1.0;
};

// Tracker state carried between frames. The query doubles as the tracker's
// memory: it is blended with fresh evidence every step and rebuilt from the
// current prediction on refresh.
struct TrackState {
    nn::Var query;                     // {1, dim}
    std::array<double, 2> point{0, 0}; // last prediction (native px)
    double confidence = 0;
    int frame = -1;
    int frames_since_refresh = 0;
};

class TrackModel {
public:
    TrackModel() = default;
    TrackModel(const TrackNetConfig& cfg, uint64_t seed);

    // Vision features {dim, h/8, w/8} from work-resolution planes.
    nn::Var backbone(const nn::Var& frame) const;
    // Red-prior features on the same grid; all-zero when the prior is disabled.
    nn::Var red_features(const img::Image& native_frame, bool enabled) const;
    // Channel concatenation of vision and red features; grids must align.
    static nn::Var red_attention_augment(const nn::Var& vision, const nn::Var& red);

    TrackState init_track(const img::Image& frame, int frame_index,
                          std::array<double, 2> point_native, bool use_red = true) const;

    struct StepResult {
        std::array<double, 2> point{0, 0};  // native px
        double confidence = 0;
        nn::Var point_var;  // {2} differentiable point (work resolution px)
        nn::Var conf_var;   // {1}
        TrackState state;
    };
    StepResult step(const TrackState& state, const img::Image& frame, int frame_index,
                    bool use_red = true) const;

    // Drops accumulated memory and re-initializes from the state's own
    // prediction on the given frame.
    TrackState refresh(const TrackState& state, const img::Image& frame, int frame_index,
                       bool use_red = true) const;

    // Native-px point converted to work resolution and back.
    std::array<double, 2> to_work(std::array<double, 2> native, int w, int h) const;
    std::array<double, 2> to_native(std::array<double, 2> work, int w, int h) const;

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const TrackNetConfig& config() const { return cfg_; }
    void set_refresh_interval(int frames) {
        HEMO_CHECK(frames > 0, "refresh interval must be positive");
        cfg_.refresh_interval = frames;
    }

    // Adapter-capable decoder linears by name ("dec0.wq" ... "dec1.fc2").
    std::vector<std::string> adapter_targets() const;
    nn::Linear* linear_by_name(const std::string& name);

private:
    friend struct TrackModelTestAccess;
    TrackNetConfig cfg_;
    nn::ParamStore ps_;
    nn::Conv2d c1_, c2_, c3_, c4_, c5_;  // vision backbone
    nn::Conv2d r1_, r2_;                 // red-prior encoder
    nn::Linear kv_in_, kv_pos_, q_init_;
    struct DecoderLayer {
        nn::LayerNormP ln1, ln2;
        nn::Linear wq, wk, wv, wo;
        nn::Linear fc1, fc2;
    };
    std::vector<DecoderLayer> dec_;
    nn::Linear resp_q_, resp_k_;
    nn::Linear conf_fc1_, conf_fc2_;

    struct Decoded {
        nn::Var query;      // {1, dim}
        nn::Var point_var;  // {2} work px
        nn::Var conf_var;   // {1}
    };
    Decoded decode(const nn::Var& query, const img::Image& frame, bool use_red) const;
    nn::Var sample_query(const img::Image& frame, std::array<double, 2> work_pt,
                         bool use_red) const;
};

// ---- adapters ---------------------------------------------------------------
struct AdapterSpec {
    int rank = 4;
    double alpha = 8.0;
    bool adaptive = false;  // prune components by importance after each step
    int rank_budget = 4;    // kept components in adaptive mode
    std::vector<std::string> targets;  // empty = all decoder linears
};
// Attaches low-rank adapters to the named decoder layers, freezes every base
// parameter and leaves only adapter factors trainable. Zero-initialized
// factors keep the adapted model identical to the base until training.
// Unknown layer names are an error.
void apply_adapters(TrackModel& model, const AdapterSpec& spec, uint64_t seed);
int64_t adapter_param_count(const TrackModel& model);
int64_t base_param_count(const TrackModel& model);
// Adaptive-rank maintenance: prune each adapter to the budget by importance
// and zero the masked components (call after optimizer steps).
void adapters_enforce_budget(TrackModel& model, int budget);

// ---- clip-level tracking ---------------------------------------------------------
struct TrackedPoint {
    int frame = 0;
    double x = 0, y = 0;
    double confidence = 0;
};
// Folds step() over the clip from (start_frame, p0). With refresh enabled the
// memory is rebuilt every refresh_interval frames; disabled, the result is the
// exact fold of step().
std::vector<TrackedPoint> track_clip(const TrackModel& model, const video::Clip& clip,
                                     int start_frame, std::array<double, 2> p0,
                                     bool refresh_enabled, bool use_red = true);

// ---- training loss -----------------------------------------------------------------
struct TrackLossConfig {
    double alpha1 = 0.6;  // human-annotated term
    double alpha2 = 0.4;  // pseudo-label term (averaged over labels)
    double delta = 1.0;   // Huber transition
};
// alpha1*Huber(pred, gt) + (alpha2/N)*sum_i Huber(pseudo_pred_i, pseudo_gt_i).
// The pseudo term is skipped when no pseudo labels are given; prediction and
// label lists of different lengths are an error.
nn::Var tracking_loss(const nn::Var& pred, const std::array<double, 2>& gt,
                      const std::vector<nn::Var>& pseudo_preds,
                      const std::vector<std::array<double, 2>>& pseudo_gts,
                      const TrackLossConfig& cfg = {});

}  // namespace hemo::track
