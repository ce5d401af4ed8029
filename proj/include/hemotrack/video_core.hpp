#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemotrack/image.hpp"
#include "hemotrack/rng.hpp"

namespace hemo::video {

using json = nlohmann::ordered_json;

struct PointLabel {
    int frame = 0;
    double x = 0, y = 0;
    std::string source = "human";  // "human" or "pseudo"
};

// Clip-level annotation. A clip with no bleeding carries onset_frame = -1
// (serialized as JSON null) and an empty point list.
struct ClipLabels {
    int onset_frame = -1;
    std::vector<PointLabel> points;
    bool has_onset() const { return onset_frame >= 0; }
};

struct ClipMeta {
    int fps = 30;
    std::string patient_id;
    std::vector<std::string> scenario_tags;
};

struct Clip {
    std::string id;
    std::vector<img::Image> frames;
    ClipMeta meta;
    ClipLabels labels;

    int length() const { return int(frames.size()); }
    int width() const { return frames.empty() ? 0 : frames[0].w; }
    int height() const { return frames.empty() ? 0 : frames[0].h; }
    double diagonal() const;
};

// On-disk layout: <root>/<clip_id>/frames/%06d.png + meta.json + labels.json.
void save_clip(const std::string& root, const Clip& clip);
Clip load_clip(const std::string& clip_dir);
std::vector<std::string> list_clip_dirs(const std::string& root);

json labels_to_json(const ClipLabels& l);
ClipLabels labels_from_json(const json& j);

// Drops a uniform-random 0..max_drop frame prefix and shifts annotations;
// labeled points that fall before the new start are discarded. Returns the
// number of dropped frames. Training-time augmentation only.
int random_prefix_drop(Clip& clip, Rng& rng, int max_drop = 60);

struct DatasetSplit {
    std::vector<std::string> train, val, test;
    // Only populated when an explicit count override leaves patients over.
    std::vector<std::string> unassigned;
};

// Patient-level split. Default: shuffle by seed, floor-based sizes from the
// ratio with the remainder going to train. `count_override` pins exact split
// sizes (sum must not exceed the patient count; any leftover patients are
// reported in `unassigned`).
DatasetSplit split_dataset(std::vector<std::string> patients,
                           std::array<double, 3> ratio, uint64_t seed,
                           std::optional<std::array<int, 3>> count_override = std::nullopt);

void write_split_manifest(const std::string& path, const DatasetSplit& split, uint64_t seed);
DatasetSplit read_split_manifest(const std::string& path);

}  // namespace hemo::video
