#pragma once

#include <array>
#include <string>
#include <vector>

#include "hemotrack/rng.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::synth {

// One scripted viewing disturbance. Kinds: "jitter" (camera shake), "flush"
// (irrigation whiteout), "reflection" (specular highlights), "instrument"
// (tool crossing the view), "obscure" (pooled dark blood over the source).
// Frames with no active event are tagged "clear".
struct DisturbanceEvent {
    std::string kind;
    int start = 0, end = 0;      // active on frames [start, end)
    double magnitude = 0.5;      // 0..1 strength
    uint64_t seed = 0;           // event-local randomness
};

struct SynthConfig {
    int width = 128, height = 96;
    int length = 150;            // frames
    int onset_frame = 120;       // -1 = non-bleeding clip
    int fps = 30;
    double drift_px_per_frame = 0.8;
    double growth_rate = 0.35;   // blob radius px/frame after onset
    double initial_radius = 2.5;
    double max_radius_frac = 0.18;  // cap as fraction of min(w,h)
    std::vector<DisturbanceEvent> disturbances;
    uint64_t seed = 0;
};

struct SynthGroundTruth {
    int onset_frame = -1;
    // Per frame; positions are clamped to frame bounds. Entries before the
    // onset are placeholders (the spawn position) and not meaningful.
    std::vector<std::array<double, 2>> track;
    // False before onset and exactly on frames where clamping occurred.
    std::vector<bool> visible;
    std::vector<std::vector<std::string>> frame_tags;
};

struct SynthResult {
    video::Clip clip;
    SynthGroundTruth truth;
};

// Renders a clip from the config. Pure function of the config: identical
// configs give byte-identical pixel stacks. The palette is constructed so
// that no pre-onset pixel reaches a red-prior score of 0.15.
SynthResult generate_scene(const SynthConfig& cfg);

// Random disturbance schedule for a difficulty preset (easy|moderate|hard).
std::vector<DisturbanceEvent> sample_disturbances(const std::string& preset, int length,
                                                  int onset_frame, Rng& rng);

struct CorpusConfig {
    int n_patients = 8;
    int clips_per_patient = 2;
    std::string preset = "moderate";
    SynthConfig base;
    double nonbleeding_fraction = 0.0;
    int sparse_label_stride = 30;   // annotation cadence in frames
    int onset_jitter = 0;           // onset sampled from base +/- jitter per clip
    uint64_t seed = 0;
};

struct CorpusManifest {
    uint64_t seed = 0;
    std::string preset;
    std::vector<std::pair<std::string, std::vector<std::string>>> patients;  // id -> clip ids
};

// Writes <out_dir>/<clip_id>/{frames,meta.json,labels.json,oracle.json} for
// every generated clip plus corpus_manifest.json (written last, atomically).
// On a write failure the partial clip directory is removed and no manifest is
// left behind.
CorpusManifest generate_corpus(const std::string& out_dir, const CorpusConfig& cfg);

void save_oracle(const std::string& path, const SynthGroundTruth& gt);
SynthGroundTruth load_oracle(const std::string& path);

}  // namespace hemo::synth
