#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hemotrack/bench.hpp"
#include "hemotrack/common.hpp"
#include "hemotrack/config.hpp"
#include "hemotrack/trainers.hpp"

namespace fs = std::filesystem;
using hemo::cfg::json;

namespace {

struct Globals {
    uint64_t seed = 0;
    std::string config_path;
    std::string out_dir = "out";
};

void write_json_file(const std::string& path, const json& j) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream f(path);
    if (!f.good()) hemo::fail("cannot write ", path);
    f << j.dump(2) << "\n";
}

void echo_resolved(const Globals& g, const hemo::cfg::ToolConfig& tool) {
    write_json_file((fs::path(g.out_dir) / "resolved_config.json").string(),
                    hemo::cfg::to_json(tool));
}

// Split priority: explicit manifest > manifest written next to the corpus >
// fresh patient-level split from the ratio (persisted into the out dir).
hemo::video::DatasetSplit resolve_split(const std::string& data, const std::string& split_path,
                                        const hemo::cfg::ToolConfig& tool, const Globals& g) {
    if (!split_path.empty()) return hemo::video::read_split_manifest(split_path);
    const auto local = fs::path(data) / "split.json";
    if (fs::exists(local)) return hemo::video::read_split_manifest(local.string());
    auto split = hemo::trainers::split_corpus(data, tool.split_ratio, g.seed);
    hemo::video::write_split_manifest((fs::path(g.out_dir) / "split.json").string(), split,
                                      g.seed);
    return split;
}

hemo::onset::OnsetModel load_onset_model(const std::string& ckpt,
                                         hemo::onset::OnsetConfig& onset_cfg) {
    auto meta = hemo::nn::read_checkpoint_meta(ckpt);
    hemo::onset::OnsetNetConfig nc;
    if (meta.contains("net")) hemo::cfg::merge(meta.at("net"), nc);
    if (meta.contains("onset")) hemo::cfg::merge(meta.at("onset"), onset_cfg);
    hemo::onset::OnsetModel m(nc, 0);
    hemo::nn::load_checkpoint(ckpt, m.params());
    return m;
}

hemo::detect::DetectModel load_detect_model(const std::string& ckpt) {
    auto meta = hemo::nn::read_checkpoint_meta(ckpt);
    hemo::detect::DetectNetConfig nc;
    if (meta.contains("net")) hemo::cfg::merge(meta.at("net"), nc);
    hemo::detect::DetectModel m(nc, 0);
    hemo::nn::load_checkpoint(ckpt, m.params());
    return m;
}

hemo::track::TrackModel load_track_model(const std::string& ckpt) {
    auto meta = hemo::nn::read_checkpoint_meta(ckpt);
    hemo::track::TrackNetConfig nc;
    if (meta.contains("net")) hemo::cfg::merge(meta.at("net"), nc);
    hemo::track::TrackModel m(nc, 0);
    if (meta.contains("adapter")) {
        hemo::track::AdapterSpec spec;
        hemo::cfg::merge(meta.at("adapter"), spec);
        hemo::track::apply_adapters(m, spec, 0);
    }
    hemo::nn::load_checkpoint(ckpt, m.params());
    return m;
}

json summary_json(const hemo::trainers::TrainSummary& s) {
    return {{"epochs_run", s.epochs_run},
            {"final_train_loss", s.final_train_loss},
            {"best_val", s.best_val},
            {"wall_seconds", s.wall_seconds},
            {"budget_stopped", s.budget_stopped}};
}

std::vector<std::string> pick_dirs(const hemo::trainers::CorpusIndex& idx,
                                   const std::string& which) {
    if (which == "train") return idx.train_dirs;
    if (which == "val") return idx.val_dirs;
    if (which == "test") return idx.test_dirs;
    if (which == "all") {
        auto v = idx.train_dirs;
        v.insert(v.end(), idx.val_dirs.begin(), idx.val_dirs.end());
        v.insert(v.end(), idx.test_dirs.begin(), idx.test_dirs.end());
        return v;
    }
    hemo::fail("unknown clip selection '", which, "' (train|val|test|all)");
}

int run_report(const Globals& g, const std::string& data, const std::string& split_path,
               const std::string& which, const std::string& onset_ckpt,
               const std::string& detect_ckpt, const std::string& track_ckpt, int overlays,
               bool deployment) {
    auto tool = hemo::cfg::load_tool_config(g.config_path);
    auto split = resolve_split(data, split_path, tool, g);
    auto idx = hemo::trainers::index_corpus(data, split);
    auto dirs = pick_dirs(idx, which);
    HEMO_CHECK(!dirs.empty(), "no clips selected (", which, ") under ", data);

    hemo::onset::OnsetConfig onset_cfg = tool.onset;
    auto onset_m = load_onset_model(onset_ckpt, onset_cfg);
    auto detect_m = load_detect_model(detect_ckpt);
    auto track_m = load_track_model(track_ckpt);
    hemo::bench::PipelineModels models{&onset_m, &detect_m, &track_m, onset_cfg};

    std::vector<hemo::bench::ClipRecord> records;
    int w = 0, h = 0, done = 0;
    for (const auto& dir : dirs) {
        auto clip = hemo::video::load_clip(dir);
        auto truth = hemo::synth::load_oracle((fs::path(dir) / "oracle.json").string());
        if (w == 0) {
            w = clip.width();
            h = clip.height();
        }
        auto rec = hemo::bench::run_pipeline(models, clip, truth, deployment);
        if (done < overlays)
            hemo::bench::write_overlays(g.out_dir, clip, truth, rec);
        records.push_back(std::move(rec));
        ++done;
        std::cerr << (deployment ? "deploy " : "evaluate ") << done << "/" << dirs.size()
                  << " " << records.back().clip_id << "\n";
    }
    auto report = hemo::bench::aggregate(records, tool.metrics, w, h, deployment, g.seed);
    json resolved = {{"tool", hemo::cfg::to_json(tool)},
                     {"onset_config", hemo::cfg::to_json(onset_cfg)},
                     {"checkpoints",
                      {{"onset", onset_ckpt}, {"detect", detect_ckpt}, {"track", track_ckpt}}},
                     {"data", data},
                     {"clip_selection", which},
                     {"n_clips", int(dirs.size())}};
    hemo::bench::emit_report(g.out_dir, report, resolved);
    std::cout << report.to_csv();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hemotrack: bleeding onset detection, source localization and point tracking"};
    app.require_subcommand(1);
    Globals g;
    auto* seed_opt = app.add_option("--seed", g.seed, "global RNG seed");
    app.add_option("--config", g.config_path, "JSON config file overriding built-in defaults");
    app.add_option("--out", g.out_dir, "output directory")->capture_default_str();

    // synth-gen
    auto* synth = app.add_subcommand("synth-gen", "generate a synthetic labelled corpus");
    int sg_patients = -1, sg_clips = -1, sg_length = -1, sg_jitter = -1, sg_onset = -2;
    std::string sg_preset;
    double sg_nonbleeding = -1;
    synth->add_option("--patients", sg_patients, "number of synthetic patients");
    synth->add_option("--clips-per-patient", sg_clips, "clips per patient");
    synth->add_option("--preset", sg_preset, "disturbance preset (easy|moderate|hard)");
    synth->add_option("--length", sg_length, "frames per clip");
    synth->add_option("--onset", sg_onset, "base onset frame (-1 = non-bleeding)");
    synth->add_option("--onset-jitter", sg_jitter, "max per-clip onset shift in frames");
    synth->add_option("--nonbleeding", sg_nonbleeding, "fraction of clips without bleeding");

    // train-onset
    auto* tro = app.add_subcommand("train-onset", "train the onset detection stage");
    std::string tro_data, tro_split;
    int tro_epochs = -1;
    tro->add_option("--data", tro_data, "corpus root")->required();
    tro->add_option("--split", tro_split, "split manifest (default: derive from --seed)");
    tro->add_option("--epochs", tro_epochs, "override main-phase epoch count");

    // train-detect
    auto* trd = app.add_subcommand("train-detect", "train the source localization stage");
    std::string trd_data, trd_split;
    int trd_epochs = -1;
    trd->add_option("--data", trd_data, "corpus root")->required();
    trd->add_option("--split", trd_split, "split manifest (default: derive from --seed)");
    trd->add_option("--epochs", trd_epochs, "override epoch count");

    // pseudo-label
    auto* pse = app.add_subcommand("pseudo-label",
                                   "expand sparse human labels of one clip to dense labels");
    std::string pse_clip, pse_tracker = "flow";
    bool pse_inplace = false;
    pse->add_option("--clip", pse_clip, "clip directory")->required();
    pse->add_option("--tracker", pse_tracker, "point propagation backend")
        ->capture_default_str();
    pse->add_flag("--in-place", pse_inplace, "also write pseudo_labels.json into the clip dir");

    // finetune-track
    auto* ftt = app.add_subcommand(
        "finetune-track", "adapter fine-tuning of the tracker (pretrains a base if absent)");
    std::string ftt_data, ftt_split, ftt_base, ftt_adapter_mode, ftt_sample_mode;
    int ftt_rank = -1;
    ftt->add_option("--data", ftt_data, "corpus root")->required();
    ftt->add_option("--split", ftt_split, "split manifest (default: derive from --seed)");
    ftt->add_option("--base", ftt_base, "pretrained base checkpoint (skip stage A)");
    ftt->add_option("--rank", ftt_rank, "adapter rank override");
    ftt->add_option("--adapter-mode", ftt_adapter_mode, "fixed|adaptive");
    ftt->add_option("--sample-mode", ftt_sample_mode, "short|long|hybrid");

    // evaluate / deploy-run
    auto* eva = app.add_subcommand("evaluate",
                                   "run the pipeline from ground-truth onsets and report metrics");
    auto* dep = app.add_subcommand("deploy-run",
                                   "run the pipeline end-to-end from streaming decisions");
    std::string ev_data, ev_split, ev_onset, ev_detect, ev_track, ev_which = "test";
    int ev_overlays = 0;
    for (auto* sub : {eva, dep}) {
        sub->add_option("--data", ev_data, "corpus root")->required();
        sub->add_option("--split", ev_split, "split manifest");
        sub->add_option("--clips", ev_which, "clip selection: train|val|test|all")
            ->capture_default_str();
        sub->add_option("--onset-model", ev_onset, "onset checkpoint")->required();
        sub->add_option("--detect-model", ev_detect, "localization checkpoint")->required();
        sub->add_option("--track-model", ev_track, "tracker checkpoint")->required();
        sub->add_option("--overlays", ev_overlays, "clips to render with overlays");
    }

    // bench-efficiency
    auto* eff = app.add_subcommand("bench-efficiency",
                                   "measure per-stage latency, throughput and memory");
    std::string ef_onset, ef_detect, ef_track;
    int ef_w = 512, ef_h = 384, ef_frames = 16;
    eff->add_option("--onset-model", ef_onset, "onset checkpoint")->required();
    eff->add_option("--detect-model", ef_detect, "localization checkpoint")->required();
    eff->add_option("--track-model", ef_track, "tracker checkpoint")->required();
    eff->add_option("--width", ef_w)->capture_default_str();
    eff->add_option("--height", ef_h)->capture_default_str();
    eff->add_option("--frames", ef_frames)->capture_default_str();

    // detect-onset
    auto* don = app.add_subcommand("detect-onset", "onset decision for a single clip");
    std::string don_clip, don_model;
    bool don_stream = false;
    don->add_option("--clip", don_clip, "clip directory")->required();
    don->add_option("--model", don_model, "onset checkpoint")->required();
    don->add_flag("--streaming", don_stream, "stop at the first accepted window");

    // detect-point
    auto* dpt = app.add_subcommand("detect-point", "source localization on a single frame");
    std::string dpt_clip, dpt_model, dpt_heatmap;
    int dpt_frame = 0;
    dpt->add_option("--clip", dpt_clip, "clip directory")->required();
    dpt->add_option("--model", dpt_model, "localization checkpoint")->required();
    dpt->add_option("--frame", dpt_frame, "frame index")->required();
    dpt->add_option("--emit-heatmap", dpt_heatmap, "write the fused heatmap as a PNG");

    // track
    auto* trk = app.add_subcommand("track", "track a point through a clip (CSV output)");
    std::string trk_clip, trk_model, trk_overlay;
    int trk_start = 0, trk_refresh = -1;
    double trk_x = 0, trk_y = 0;
    bool trk_norefresh = false, trk_nored = false;
    trk->add_option("--clip", trk_clip, "clip directory")->required();
    trk->add_option("--model", trk_model, "tracker checkpoint")->required();
    trk->add_option("--start", trk_start, "start frame")->required();
    trk->add_option("--x", trk_x, "start point x (native px)")->required();
    trk->add_option("--y", trk_y, "start point y (native px)")->required();
    trk->add_option("--refresh", trk_refresh, "memory refresh interval in frames");
    trk->add_flag("--no-refresh", trk_norefresh, "disable periodic memory refresh");
    trk->add_flag("--no-red", trk_nored, "disable the red-prior features");
    trk->add_option("--emit-overlay", trk_overlay, "directory for overlay frames");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        fs::create_directories(g.out_dir);
        auto tool = hemo::cfg::load_tool_config(g.config_path);

        if (synth->parsed()) {
            if (seed_opt->count() > 0) tool.corpus.seed = g.seed;
            if (sg_patients > 0) tool.corpus.n_patients = sg_patients;
            if (sg_clips > 0) tool.corpus.clips_per_patient = sg_clips;
            if (!sg_preset.empty()) tool.corpus.preset = sg_preset;
            if (sg_length > 0) {
                // Keep the default onset proportional when only the length moves.
                tool.corpus.base.onset_frame = tool.corpus.base.onset_frame *
                                               sg_length / tool.corpus.base.length;
                tool.corpus.base.length = sg_length;
            }
            if (sg_onset >= -1) tool.corpus.base.onset_frame = sg_onset;
            if (sg_jitter >= 0) tool.corpus.onset_jitter = sg_jitter;
            if (sg_nonbleeding >= 0) tool.corpus.nonbleeding_fraction = sg_nonbleeding;
            echo_resolved(g, tool);
            auto manifest = hemo::synth::generate_corpus(g.out_dir, tool.corpus);
            {
                std::vector<std::string> pids;
                for (const auto& [pid, clips] : manifest.patients) pids.push_back(pid);
                auto split = hemo::video::split_dataset(pids, tool.split_ratio,
                                                        tool.corpus.seed, std::nullopt);
                hemo::video::write_split_manifest(
                    (fs::path(g.out_dir) / "split.json").string(), split, tool.corpus.seed);
            }
            int n = 0;
            for (const auto& [pid, clips] : manifest.patients) n += int(clips.size());
            std::cout << "generated " << n << " clips for " << manifest.patients.size()
                      << " patients under " << g.out_dir << "\n";
            return 0;
        }
        if (tro->parsed()) {
            if (tro_epochs >= 0) tool.train_onset.main_epochs = tro_epochs;
            echo_resolved(g, tool);
            auto split = resolve_split(tro_data, tro_split, tool, g);
            auto idx = hemo::trainers::index_corpus(tro_data, split);
            hemo::onset::OnsetModel model(tool.onset_net, hemo::mix_seed(g.seed, 1));
            const auto ckpt = (fs::path(g.out_dir) / "onset.ckpt").string();
            auto s = hemo::trainers::train_onset(model, tool.onset, idx, tool.train_onset,
                                                 g.seed, ckpt, hemo::trainers::stderr_log());
            write_json_file((fs::path(g.out_dir) / "train_summary.json").string(),
                            summary_json(s));
            std::cout << "onset checkpoint " << ckpt << " val_acc@"
                      << tool.train_onset.val_tolerance << " " << s.best_val << "\n";
            return 0;
        }
        if (trd->parsed()) {
            if (trd_epochs >= 0) tool.train_detect.epochs = trd_epochs;
            echo_resolved(g, tool);
            auto split = resolve_split(trd_data, trd_split, tool, g);
            auto idx = hemo::trainers::index_corpus(trd_data, split);
            hemo::detect::DetectModel model(tool.detect_net, hemo::mix_seed(g.seed, 2));
            const auto ckpt = (fs::path(g.out_dir) / "detect.ckpt").string();
            auto s = hemo::trainers::train_detect(model, idx, tool.train_detect, g.seed, ckpt,
                                                  hemo::trainers::stderr_log());
            write_json_file((fs::path(g.out_dir) / "train_summary.json").string(),
                            summary_json(s));
            std::cout << "localization checkpoint " << ckpt << " val_err " << s.best_val
                      << "\n";
            return 0;
        }
        if (pse->parsed()) {
            HEMO_CHECK(pse_tracker == "flow", "unknown tracker '", pse_tracker,
                       "' (available: flow)");
            echo_resolved(g, tool);
            auto clip = hemo::video::load_clip(pse_clip);
            auto tracker = hemo::pseudo::make_flow_tracker(clip);
            auto pl = hemo::pseudo::run_factory(clip, tool.factory, tracker);
            const auto path = (fs::path(g.out_dir) / "pseudo_labels.json").string();
            hemo::pseudo::save_pseudo_labels(path, pl);
            if (pse_inplace)
                hemo::pseudo::save_pseudo_labels(
                    (fs::path(pse_clip) / "pseudo_labels.json").string(), pl);
            int pts = 0;
            for (const auto& [f, v] : pl.frames) pts += int(v.size());
            std::cout << "wrote " << path << " (" << pl.frames.size() << " frames, " << pts
                      << " points, " << pl.log.size() << " log lines)\n";
            for (const auto& line : pl.log) std::cerr << "factory: " << line << "\n";
            return 0;
        }
        if (ftt->parsed()) {
            if (ftt_rank > 0) {
                tool.finetune_track.adapter.rank = ftt_rank;
                tool.finetune_track.adapter.rank_budget = ftt_rank;
            }
            if (!ftt_adapter_mode.empty()) {
                HEMO_CHECK(ftt_adapter_mode == "fixed" || ftt_adapter_mode == "adaptive",
                           "--adapter-mode must be fixed or adaptive");
                tool.finetune_track.adapter.adaptive = ftt_adapter_mode == "adaptive";
            }
            if (!ftt_sample_mode.empty()) tool.finetune_track.sample_mode = ftt_sample_mode;
            echo_resolved(g, tool);
            auto split = resolve_split(ftt_data, ftt_split, tool, g);
            auto idx = hemo::trainers::index_corpus(ftt_data, split);
            hemo::track::TrackModel model;
            if (ftt_base.empty()) {
                model = hemo::track::TrackModel(tool.track_net, hemo::mix_seed(g.seed, 3));
                const auto base_ckpt = (fs::path(g.out_dir) / "track_base.ckpt").string();
                auto sa = hemo::trainers::pretrain_track(model, idx, tool.pretrain_track,
                                                         g.seed, base_ckpt,
                                                         hemo::trainers::stderr_log());
                std::cout << "base checkpoint " << base_ckpt << " val_err " << sa.best_val
                          << "\n";
            } else {
                model = load_track_model(ftt_base);
            }
            const auto ckpt = (fs::path(g.out_dir) / "track.ckpt").string();
            auto s = hemo::trainers::finetune_track(model, idx, tool.finetune_track, g.seed,
                                                    ckpt, hemo::trainers::stderr_log());
            write_json_file((fs::path(g.out_dir) / "train_summary.json").string(),
                            summary_json(s));
            std::cout << "tracker checkpoint " << ckpt << " val_err " << s.best_val << "\n";
            return 0;
        }
        if (eva->parsed() || dep->parsed())
            return run_report(g, ev_data, ev_split, ev_which, ev_onset, ev_detect, ev_track,
                              ev_overlays, dep->parsed());
        if (eff->parsed()) {
            hemo::onset::OnsetConfig ocfg = tool.onset;
            auto onset_m = load_onset_model(ef_onset, ocfg);
            auto detect_m = load_detect_model(ef_detect);
            auto track_m = load_track_model(ef_track);
            hemo::bench::PipelineModels models{&onset_m, &detect_m, &track_m, ocfg};
            auto rep = hemo::bench::measure_efficiency(models, ef_w, ef_h, ef_frames);
            write_json_file((fs::path(g.out_dir) / "efficiency.json").string(), rep.to_json());
            std::cout << rep.to_json().dump(2) << "\n";
            return 0;
        }
        if (don->parsed()) {
            hemo::onset::OnsetConfig ocfg = tool.onset;
            auto model = load_onset_model(don_model, ocfg);
            auto clip = hemo::video::load_clip(don_clip);
            auto res = hemo::onset::locate_onset(model, clip, ocfg, don_stream);
            json j = {{"clip_id", clip.id},
                      {"bleeding", res.bleeding},
                      {"onset_frame", res.bleeding ? json(res.onset_frame) : json(nullptr)},
                      {"window_start", res.window_start},
                      {"theta", res.theta},
                      {"s_conf", res.s_conf}};
            write_json_file((fs::path(g.out_dir) / "onset_result.json").string(), j);
            std::cout << j.dump(2) << "\n";
            return 0;
        }
        if (dpt->parsed()) {
            auto model = load_detect_model(dpt_model);
            auto clip = hemo::video::load_clip(dpt_clip);
            HEMO_CHECK(dpt_frame >= 0 && dpt_frame < clip.length(), "frame ", dpt_frame,
                       " outside clip of ", clip.length(), " frames");
            hemo::nn::NoGradGuard ng;
            auto fused = model.forward_image(clip.frames[dpt_frame]);
            auto loc = hemo::detect::locate_source(fused);
            if (!dpt_heatmap.empty()) {
                const int nd = int(fused.shape().size());
                const int hh = int(fused.dim(nd - 2)), hw = int(fused.dim(nd - 1));
                hemo::img::Image vis(hw, hh);
                for (int64_t i = 0; i < fused.size(); ++i) {
                    const auto v = uint8_t(std::lround(255.0 * fused.val()[i]));
                    vis.px[size_t(i) * 3] = vis.px[size_t(i) * 3 + 1] =
                        vis.px[size_t(i) * 3 + 2] = v;
                }
                hemo::img::save_png(dpt_heatmap, vis);
            }
            json j = {{"clip_id", clip.id},
                      {"frame", dpt_frame},
                      {"x", loc[0]},
                      {"y", loc[1]}};
            write_json_file((fs::path(g.out_dir) / "detect_point.json").string(), j);
            std::cout << j.dump(2) << "\n";
            return 0;
        }
        if (trk->parsed()) {
            auto model = load_track_model(trk_model);
            if (trk_refresh > 0) model.set_refresh_interval(trk_refresh);
            auto clip = hemo::video::load_clip(trk_clip);
            auto traj = hemo::track::track_clip(model, clip, trk_start, {trk_x, trk_y},
                                                !trk_norefresh, !trk_nored);
            std::string csv = "frame,x,y,confidence\n";
            char line[128];
            for (const auto& tp : traj) {
                std::snprintf(line, sizeof(line), "%d,%.4f,%.4f,%.6f\n", tp.frame, tp.x, tp.y,
                              tp.confidence);
                csv += line;
            }
            std::ofstream f(fs::path(g.out_dir) / "track.csv");
            f << csv;
            std::cout << csv;
            if (!trk_overlay.empty()) {
                fs::create_directories(trk_overlay);
                for (const auto& tp : traj) {
                    hemo::img::Image frame = clip.frames[tp.frame];
                    hemo::img::draw_cross(frame, tp.x, tp.y, 4, 40, 220, 60);
                    char txt[48];
                    std::snprintf(txt, sizeof(txt), "conf %.2f", tp.confidence);
                    hemo::img::draw_text(frame, txt, 2, 10, 40, 220, 60);
                    char name[32];
                    std::snprintf(name, sizeof(name), "%06d.png", tp.frame);
                    hemo::img::save_png((fs::path(trk_overlay) / name).string(), frame);
                }
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
