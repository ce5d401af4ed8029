#include "hemotrack/config.hpp"

#include <fstream>

#include "hemotrack/common.hpp"

namespace hemo::cfg {

namespace {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const onset::OnsetConfig& c) {
    return {{"window_N", c.window_N},
            {"alpha", c.alpha},
            {"gamma", c.gamma},
            {"memory_capacity", c.memory_capacity},
            {"conf_decision_threshold", c.conf_decision_threshold}};
}
void merge(const json& j, onset::OnsetConfig& c) {
    get_if(j, "window_N", c.window_N);
    get_if(j, "alpha", c.alpha);
    get_if(j, "gamma", c.gamma);
    get_if(j, "memory_capacity", c.memory_capacity);
    get_if(j, "conf_decision_threshold", c.conf_decision_threshold);
}

json to_json(const onset::OnsetNetConfig& c) {
    return {{"work_w", c.work_w},     {"work_h", c.work_h}, {"feat_channels", c.feat_channels},
            {"token_dim", c.token_dim}, {"layers", c.layers}, {"heads", c.heads},
            {"ffn_dim", c.ffn_dim}};
}
void merge(const json& j, onset::OnsetNetConfig& c) {
    get_if(j, "work_w", c.work_w);
    get_if(j, "work_h", c.work_h);
    get_if(j, "feat_channels", c.feat_channels);
    get_if(j, "token_dim", c.token_dim);
    get_if(j, "layers", c.layers);
    get_if(j, "heads", c.heads);
    get_if(j, "ffn_dim", c.ffn_dim);
}

json to_json(const detect::DetectNetConfig& c) {
    return {{"feat_channels", c.feat_channels},
            {"head_channels", c.head_channels},
            {"fuse_dim", c.fuse_dim},
            {"num_scales", c.num_scales},
            {"key_budget", c.key_budget}};
}
void merge(const json& j, detect::DetectNetConfig& c) {
    get_if(j, "feat_channels", c.feat_channels);
    get_if(j, "head_channels", c.head_channels);
    get_if(j, "fuse_dim", c.fuse_dim);
    get_if(j, "num_scales", c.num_scales);
    get_if(j, "key_budget", c.key_budget);
}

json to_json(const detect::SpatialLossConfig& c) {
    return {{"lambda1", c.lambda1}, {"lambda2", c.lambda2}, {"delta", c.delta}};
}
void merge(const json& j, detect::SpatialLossConfig& c) {
    get_if(j, "lambda1", c.lambda1);
    get_if(j, "lambda2", c.lambda2);
    get_if(j, "delta", c.delta);
}

json to_json(const detect::PropagateConfig& c) {
    return {{"steps", c.steps}, {"min_texture", c.min_texture}, {"patch", c.patch}};
}
void merge(const json& j, detect::PropagateConfig& c) {
    get_if(j, "steps", c.steps);
    get_if(j, "min_texture", c.min_texture);
    get_if(j, "patch", c.patch);
}

json to_json(const track::TrackNetConfig& c) {
    return {{"work_w", c.work_w},
            {"work_h", c.work_h},
            {"dim", c.dim},
            {"red_channels", c.red_channels},
            {"heads", c.heads},
            {"layers", c.layers},
            {"ffn_dim", c.ffn_dim},
            {"memory_blend", c.memory_blend},
            {"refresh_interval", c.refresh_interval},
            {"softargmax_temp", c.softargmax_temp}};
}
void merge(const json& j, track::TrackNetConfig& c) {
    get_if(j, "work_w", c.work_w);
    get_if(j, "work_h", c.work_h);
    get_if(j, "dim", c.dim);
    get_if(j, "red_channels", c.red_channels);
    get_if(j, "heads", c.heads);
    get_if(j, "layers", c.layers);
    get_if(j, "ffn_dim", c.ffn_dim);
    get_if(j, "memory_blend", c.memory_blend);
    get_if(j, "refresh_interval", c.refresh_interval);
    get_if(j, "softargmax_temp", c.softargmax_temp);
}

json to_json(const track::TrackLossConfig& c) {
    return {{"alpha1", c.alpha1}, {"alpha2", c.alpha2}, {"delta", c.delta}};
}
void merge(const json& j, track::TrackLossConfig& c) {
    get_if(j, "alpha1", c.alpha1);
    get_if(j, "alpha2", c.alpha2);
    get_if(j, "delta", c.delta);
}

json to_json(const track::AdapterSpec& c) {
    return {{"rank", c.rank},
            {"alpha", c.alpha},
            {"adaptive", c.adaptive},
            {"rank_budget", c.rank_budget},
            {"targets", c.targets}};
}
void merge(const json& j, track::AdapterSpec& c) {
    get_if(j, "rank", c.rank);
    get_if(j, "alpha", c.alpha);
    get_if(j, "adaptive", c.adaptive);
    get_if(j, "rank_budget", c.rank_budget);
    get_if(j, "targets", c.targets);
}

json to_json(const pseudo::MatchConfig& c) {
    return {{"radius", c.radius},
            {"min_confidence", c.min_confidence},
            {"max_corners", c.max_corners},
            {"patch", c.patch},
            {"max_displacement", c.max_displacement},
            {"min_corner_response", c.min_corner_response},
            {"nms_distance", c.nms_distance}};
}
void merge(const json& j, pseudo::MatchConfig& c) {
    get_if(j, "radius", c.radius);
    get_if(j, "min_confidence", c.min_confidence);
    get_if(j, "max_corners", c.max_corners);
    get_if(j, "patch", c.patch);
    get_if(j, "max_displacement", c.max_displacement);
    get_if(j, "min_corner_response", c.min_corner_response);
    get_if(j, "nms_distance", c.nms_distance);
}

json to_json(const pseudo::KalmanConfig& c) {
    return {{"q", c.q}, {"r", c.r}, {"r_terminal", c.r_terminal}};
}
void merge(const json& j, pseudo::KalmanConfig& c) {
    get_if(j, "q", c.q);
    get_if(j, "r", c.r);
    get_if(j, "r_terminal", c.r_terminal);
}

json to_json(const pseudo::FactoryConfig& c) {
    return {{"match", to_json(c.match)},
            {"kalman", to_json(c.kalman)},
            {"max_tracks_per_span", c.max_tracks_per_span},
            {"smooth", c.smooth}};
}
void merge(const json& j, pseudo::FactoryConfig& c) {
    if (j.contains("match")) merge(j.at("match"), c.match);
    if (j.contains("kalman")) merge(j.at("kalman"), c.kalman);
    get_if(j, "max_tracks_per_span", c.max_tracks_per_span);
    get_if(j, "smooth", c.smooth);
}

json to_json(const bench::MetricConfig& c) {
    return {{"onset_tolerances", c.onset_tolerances}, {"point_thresholds", c.point_thresholds}};
}
void merge(const json& j, bench::MetricConfig& c) {
    get_if(j, "onset_tolerances", c.onset_tolerances);
    get_if(j, "point_thresholds", c.point_thresholds);
}

json to_json(const synth::SynthConfig& c) {
    json dist = json::array();
    for (const auto& d : c.disturbances)
        dist.push_back({{"kind", d.kind},
                        {"start", d.start},
                        {"end", d.end},
                        {"magnitude", d.magnitude},
                        {"seed", d.seed}});
    return {{"width", c.width},
            {"height", c.height},
            {"length", c.length},
            {"onset_frame", c.onset_frame},
            {"fps", c.fps},
            {"drift_px_per_frame", c.drift_px_per_frame},
            {"growth_rate", c.growth_rate},
            {"initial_radius", c.initial_radius},
            {"max_radius_frac", c.max_radius_frac},
            {"disturbances", dist},
            {"seed", c.seed}};
}
void merge(const json& j, synth::SynthConfig& c) {
    get_if(j, "width", c.width);
    get_if(j, "height", c.height);
    get_if(j, "length", c.length);
    get_if(j, "onset_frame", c.onset_frame);
    get_if(j, "fps", c.fps);
    get_if(j, "drift_px_per_frame", c.drift_px_per_frame);
    get_if(j, "growth_rate", c.growth_rate);
    get_if(j, "initial_radius", c.initial_radius);
    get_if(j, "max_radius_frac", c.max_radius_frac);
    get_if(j, "seed", c.seed);
    if (j.contains("disturbances")) {
        c.disturbances.clear();
        for (const auto& dj : j.at("disturbances")) {
            synth::DisturbanceEvent d;
            get_if(dj, "kind", d.kind);
            get_if(dj, "start", d.start);
            get_if(dj, "end", d.end);
            get_if(dj, "magnitude", d.magnitude);
            get_if(dj, "seed", d.seed);
            c.disturbances.push_back(d);
        }
    }
}

json to_json(const synth::CorpusConfig& c) {
    return {{"n_patients", c.n_patients},
            {"clips_per_patient", c.clips_per_patient},
            {"preset", c.preset},
            {"base", to_json(c.base)},
            {"nonbleeding_fraction", c.nonbleeding_fraction},
            {"sparse_label_stride", c.sparse_label_stride},
            {"onset_jitter", c.onset_jitter},
            {"seed", c.seed}};
}
void merge(const json& j, synth::CorpusConfig& c) {
    get_if(j, "n_patients", c.n_patients);
    get_if(j, "clips_per_patient", c.clips_per_patient);
    get_if(j, "preset", c.preset);
    if (j.contains("base")) merge(j.at("base"), c.base);
    get_if(j, "nonbleeding_fraction", c.nonbleeding_fraction);
    get_if(j, "sparse_label_stride", c.sparse_label_stride);
    get_if(j, "onset_jitter", c.onset_jitter);
    get_if(j, "seed", c.seed);
}

json to_json(const trainers::OnsetTrainConfig& c) {
    return {{"conf_epochs", c.conf_epochs},
            {"main_epochs", c.main_epochs},
            {"lr_conf", c.lr_conf},
            {"lr_main", c.lr_main},
            {"pairs_per_clip", c.pairs_per_clip},
            {"windows_per_clip", c.windows_per_clip},
            {"max_train_clips", c.max_train_clips},
            {"max_val_clips", c.max_val_clips},
            {"budget_minutes", c.budget_minutes},
            {"val_tolerance", c.val_tolerance}};
}
void merge(const json& j, trainers::OnsetTrainConfig& c) {
    get_if(j, "conf_epochs", c.conf_epochs);
    get_if(j, "main_epochs", c.main_epochs);
    get_if(j, "lr_conf", c.lr_conf);
    get_if(j, "lr_main", c.lr_main);
    get_if(j, "pairs_per_clip", c.pairs_per_clip);
    get_if(j, "windows_per_clip", c.windows_per_clip);
    get_if(j, "max_train_clips", c.max_train_clips);
    get_if(j, "max_val_clips", c.max_val_clips);
    get_if(j, "budget_minutes", c.budget_minutes);
    get_if(j, "val_tolerance", c.val_tolerance);
}

json to_json(const trainers::DetectTrainConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"train_w", c.train_w},
            {"train_h", c.train_h},
            {"sigma_frac", c.sigma_frac},
            {"max_pseudo", c.max_pseudo},
            {"max_train_samples", c.max_train_samples},
            {"max_val_clips", c.max_val_clips},
            {"budget_minutes", c.budget_minutes},
            {"loss", to_json(c.loss)}};
}
void merge(const json& j, trainers::DetectTrainConfig& c) {
    get_if(j, "epochs", c.epochs);
    get_if(j, "lr", c.lr);
    get_if(j, "train_w", c.train_w);
    get_if(j, "train_h", c.train_h);
    get_if(j, "sigma_frac", c.sigma_frac);
    get_if(j, "max_pseudo", c.max_pseudo);
    get_if(j, "max_train_samples", c.max_train_samples);
    get_if(j, "max_val_clips", c.max_val_clips);
    get_if(j, "budget_minutes", c.budget_minutes);
    if (j.contains("loss")) merge(j.at("loss"), c.loss);
}

json to_json(const trainers::TrackPretrainConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"window", c.window},
            {"samples_per_clip", c.samples_per_clip},
            {"perturb_px", c.perturb_px},
            {"conf_weight", c.conf_weight},
            {"conf_err_scale", c.conf_err_scale},
            {"max_train_clips", c.max_train_clips},
            {"max_val_clips", c.max_val_clips},
            {"budget_minutes", c.budget_minutes}};
}
void merge(const json& j, trainers::TrackPretrainConfig& c) {
    get_if(j, "epochs", c.epochs);
    get_if(j, "lr", c.lr);
    get_if(j, "window", c.window);
    get_if(j, "samples_per_clip", c.samples_per_clip);
    get_if(j, "perturb_px", c.perturb_px);
    get_if(j, "conf_weight", c.conf_weight);
    get_if(j, "conf_err_scale", c.conf_err_scale);
    get_if(j, "max_train_clips", c.max_train_clips);
    get_if(j, "max_val_clips", c.max_val_clips);
    get_if(j, "budget_minutes", c.budget_minutes);
}

json to_json(const trainers::TrackFinetuneConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"adapter", to_json(c.adapter)},
            {"factory", to_json(c.factory)},
            {"loss", to_json(c.loss)},
            {"sample_mode", c.sample_mode},
            {"max_keypoint_tracks", c.max_keypoint_tracks},
            {"max_train_clips", c.max_train_clips},
            {"max_val_clips", c.max_val_clips},
            {"budget_minutes", c.budget_minutes}};
}
void merge(const json& j, trainers::TrackFinetuneConfig& c) {
    get_if(j, "epochs", c.epochs);
    get_if(j, "lr", c.lr);
    if (j.contains("adapter")) merge(j.at("adapter"), c.adapter);
    if (j.contains("factory")) merge(j.at("factory"), c.factory);
    if (j.contains("loss")) merge(j.at("loss"), c.loss);
    get_if(j, "sample_mode", c.sample_mode);
    get_if(j, "max_keypoint_tracks", c.max_keypoint_tracks);
    get_if(j, "max_train_clips", c.max_train_clips);
    get_if(j, "max_val_clips", c.max_val_clips);
    get_if(j, "budget_minutes", c.budget_minutes);
}

json to_json(const ToolConfig& c) {
    return {{"onset", to_json(c.onset)},
            {"onset_net", to_json(c.onset_net)},
            {"detect_net", to_json(c.detect_net)},
            {"propagate", to_json(c.propagate)},
            {"track_net", to_json(c.track_net)},
            {"factory", to_json(c.factory)},
            {"metrics", to_json(c.metrics)},
            {"corpus", to_json(c.corpus)},
            {"train_onset", to_json(c.train_onset)},
            {"train_detect", to_json(c.train_detect)},
            {"pretrain_track", to_json(c.pretrain_track)},
            {"finetune_track", to_json(c.finetune_track)},
            {"split_ratio", c.split_ratio}};
}
void merge(const json& j, ToolConfig& c) {
    if (j.contains("onset")) merge(j.at("onset"), c.onset);
    if (j.contains("onset_net")) merge(j.at("onset_net"), c.onset_net);
    if (j.contains("detect_net")) merge(j.at("detect_net"), c.detect_net);
    if (j.contains("propagate")) merge(j.at("propagate"), c.propagate);
    if (j.contains("track_net")) merge(j.at("track_net"), c.track_net);
    if (j.contains("factory")) merge(j.at("factory"), c.factory);
    if (j.contains("metrics")) merge(j.at("metrics"), c.metrics);
    if (j.contains("corpus")) merge(j.at("corpus"), c.corpus);
    if (j.contains("train_onset")) merge(j.at("train_onset"), c.train_onset);
    if (j.contains("train_detect")) merge(j.at("train_detect"), c.train_detect);
    if (j.contains("pretrain_track")) merge(j.at("pretrain_track"), c.pretrain_track);
    if (j.contains("finetune_track")) merge(j.at("finetune_track"), c.finetune_track);
    get_if(j, "split_ratio", c.split_ratio);
}

ToolConfig load_tool_config(const std::string& path) {
    ToolConfig c;
    if (path.empty()) return c;
    std::ifstream f(path);
    HEMO_CHECK(f.good(), "config file not readable: ", path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        fail("config parse error in ", path, ": ", e.what());
    }
    merge(j, c);
    return c;
}

}  // namespace hemo::cfg
