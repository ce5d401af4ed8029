#pragma once
#include <array>
#include <functional>
#include <string>
#include <vector>

#include "hemotrack/onset_detect.hpp"
#include "hemotrack/point_track.hpp"
#include "hemotrack/pseudo_factory.hpp"
#include "hemotrack/source_detect.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::trainers {

using LogFn = std::function<void(const std::string&)>;
LogFn stderr_log();
inline LogFn null_log() {
    return [](const std::string&) {};
}

struct TrainSummary {
    int epochs_run = 0;
    double final_train_loss = 0;
    double best_val = 0;  // module-specific; see each trainer
    double wall_seconds = 0;
    bool budget_stopped = false;
};

// Clip directories grouped by the patient-level split.
struct CorpusIndex {
    std::string root;
    std::vector<std::string> train_dirs, val_dirs, test_dirs;
};
CorpusIndex index_corpus(const std::string& root, const video::DatasetSplit& split);
// Patient-level split over every clip found under root (patients read from
// each clip's meta.json).
video::DatasetSplit split_corpus(const std::string& root, std::array<double, 3> ratio,
                                 uint64_t seed);

// ---- onset -------------------------------------------------------------------------
struct OnsetTrainConfig {
    int conf_epochs = 2;
    int main_epochs = 6;
    double lr_conf = 3e-3;
    double lr_main = 1e-3;
    int pairs_per_clip = 24;    // confidence-net pairs sampled per clip
    int windows_per_clip = 8;   // scored windows per clip
    int max_train_clips = 0;    // 0 = all
    int max_val_clips = 16;
    double budget_minutes = 22; // wall-clock cap across both phases
    int val_tolerance = 8;      // frames, for the validation accuracy
};
// Phase 1 fits the interframe confidence nets against disturbance/onset tags;
// phase 2 freezes them and fits the fusion and window transformer on window
// targets. Saves the checkpoint with the best validation onset accuracy.
TrainSummary train_onset(onset::OnsetModel& model, const onset::OnsetConfig& onset_cfg,
                         const CorpusIndex& corpus, const OnsetTrainConfig& cfg, uint64_t seed,
                         const std::string& checkpoint_path, const LogFn& log);

// ---- localization ------------------------------------------------------------------
struct DetectTrainConfig {
    int epochs = 3;
    double lr = 2e-3;
    int train_w = 64, train_h = 48;  // training resolution; inference is native
    double sigma_frac = 0.02;        // target width, fraction of the diagonal
    int max_pseudo = 2;              // neighbouring labels used as pseudo maps
    int max_train_samples = 0;       // 0 = every labelled frame
    int max_val_clips = 8;
    double budget_minutes = 6;
    detect::SpatialLossConfig loss;
};
// best_val = mean localization error in training-resolution px (lower wins).
TrainSummary train_detect(detect::DetectModel& model, const CorpusIndex& corpus,
                          const DetectTrainConfig& cfg, uint64_t seed,
                          const std::string& checkpoint_path, const LogFn& log);

// ---- tracking, stage A (full-parameter, no red prior) -------------------------------
struct TrackPretrainConfig {
    int epochs = 4;
    double lr = 1e-3;
    int window = 30;              // supervised steps after the init frame
    int samples_per_clip = 1;
    double perturb_px = 2.0;      // native-px init-point jitter
    double conf_weight = 0.1;     // confidence BCE weight
    double conf_err_scale = 8.0;  // confidence target exp(-err/scale)
    int max_train_clips = 0;
    int max_val_clips = 6;
    double budget_minutes = 12;
};
// best_val = mean tracking error on validation clips in native px (lower wins).
TrainSummary pretrain_track(track::TrackModel& model, const CorpusIndex& corpus,
                            const TrackPretrainConfig& cfg, uint64_t seed,
                            const std::string& checkpoint_path, const LogFn& log);

// ---- tracking, stage B (adapter-only, red prior on, factory supervision) ------------
struct TrackFinetuneConfig {
    int epochs = 2;
    double lr = 2e-3;
    track::AdapterSpec adapter;
    pseudo::FactoryConfig factory;
    track::TrackLossConfig loss;
    std::string sample_mode = "short";
    int max_keypoint_tracks = 1;  // extra factory trajectories per span
    int max_train_clips = 0;
    int max_val_clips = 6;
    double budget_minutes = 5;
};
// Attaches adapters (base weights frozen), then trains them on spans between
// human annotations with factory pseudo labels filling the gaps.
TrainSummary finetune_track(track::TrackModel& model, const CorpusIndex& corpus,
                            const TrackFinetuneConfig& cfg, uint64_t seed,
                            const std::string& checkpoint_path, const LogFn& log);

}  // namespace hemo::trainers
