#pragma once
#include <array>
#include <string>

#include <nlohmann/json.hpp>

#include "hemotrack/bench.hpp"
#include "hemotrack/onset_detect.hpp"
#include "hemotrack/point_track.hpp"
#include "hemotrack/pseudo_factory.hpp"
#include "hemotrack/scene_synth.hpp"
#include "hemotrack/source_detect.hpp"
#include "hemotrack/trainers.hpp"

namespace hemo::cfg {

using json = nlohmann::ordered_json;

// Every tunable of the toolkit in one place. A JSON config file overrides the
// fields it names and leaves the rest at their defaults; outputs echo the
// fully resolved struct so runs are reproducible from the report alone.
struct ToolConfig {
    onset::OnsetConfig onset;
    onset::OnsetNetConfig onset_net;
    detect::DetectNetConfig detect_net;
    detect::PropagateConfig propagate;
    track::TrackNetConfig track_net;
    pseudo::FactoryConfig factory;
    bench::MetricConfig metrics;
    synth::CorpusConfig corpus;
    trainers::OnsetTrainConfig train_onset;
    trainers::DetectTrainConfig train_detect;
    trainers::TrackPretrainConfig pretrain_track;
    trainers::TrackFinetuneConfig finetune_track;
    std::array<double, 3> split_ratio{0.7, 0.15, 0.15};
};

// Per-struct echo / override. merge() only touches fields present in j.
json to_json(const onset::OnsetConfig& c);
void merge(const json& j, onset::OnsetConfig& c);
json to_json(const onset::OnsetNetConfig& c);
void merge(const json& j, onset::OnsetNetConfig& c);
json to_json(const detect::DetectNetConfig& c);
void merge(const json& j, detect::DetectNetConfig& c);
json to_json(const detect::SpatialLossConfig& c);
void merge(const json& j, detect::SpatialLossConfig& c);
json to_json(const detect::PropagateConfig& c);
void merge(const json& j, detect::PropagateConfig& c);
json to_json(const track::TrackNetConfig& c);
void merge(const json& j, track::TrackNetConfig& c);
json to_json(const track::TrackLossConfig& c);
void merge(const json& j, track::TrackLossConfig& c);
json to_json(const track::AdapterSpec& c);
void merge(const json& j, track::AdapterSpec& c);
json to_json(const pseudo::MatchConfig& c);
void merge(const json& j, pseudo::MatchConfig& c);
json to_json(const pseudo::KalmanConfig& c);
void merge(const json& j, pseudo::KalmanConfig& c);
json to_json(const pseudo::FactoryConfig& c);
void merge(const json& j, pseudo::FactoryConfig& c);
json to_json(const bench::MetricConfig& c);
void merge(const json& j, bench::MetricConfig& c);
json to_json(const synth::SynthConfig& c);
void merge(const json& j, synth::SynthConfig& c);
json to_json(const synth::CorpusConfig& c);
void merge(const json& j, synth::CorpusConfig& c);
json to_json(const trainers::OnsetTrainConfig& c);
void merge(const json& j, trainers::OnsetTrainConfig& c);
json to_json(const trainers::DetectTrainConfig& c);
void merge(const json& j, trainers::DetectTrainConfig& c);
json to_json(const trainers::TrackPretrainConfig& c);
void merge(const json& j, trainers::TrackPretrainConfig& c);
json to_json(const trainers::TrackFinetuneConfig& c);
void merge(const json& j, trainers::TrackFinetuneConfig& c);

json to_json(const ToolConfig& c);
void merge(const json& j, ToolConfig& c);

// Defaults when path is empty; otherwise defaults overridden by the file.
ToolConfig load_tool_config(const std::string& path);

}  // namespace hemo::cfg
