#include "hemotrack/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>

#include "hemotrack/common.hpp"
#include "hemotrack/config.hpp"
#include "hemotrack/rng.hpp"
#include "hemotrack/scene_synth.hpp"

namespace hemo::trainers {

namespace fs = std::filesystem;
using json = nn::json;

namespace {

void ensure_parent_dir(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

}  // namespace

LogFn stderr_log() {
    return [](const std::string& s) { std::cerr << s << std::endl; };
}

namespace {

struct Budget {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double limit_s;
    bool hit = false;
    explicit Budget(double minutes) : limit_s(minutes * 60.0) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    bool expired() {
        if (!hit && seconds() > limit_s) hit = true;
        return hit;
    }
};

std::vector<std::string> capped(std::vector<std::string> v, int mx) {
    if (mx > 0 && int(v.size()) > mx) v.resize(mx);
    return v;
}

template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
    for (int i = int(v.size()) - 1; i > 0; --i) std::swap(v[i], v[size_t(rng.uniform_int(0, i))]);
}

synth::SynthGroundTruth load_clip_oracle(const std::string& dir) {
    return synth::load_oracle((fs::path(dir) / "oracle.json").string());
}

bool has_tag(const std::vector<std::string>& tags, const char* k) {
    return std::find(tags.begin(), tags.end(), k) != tags.end();
}

double dist2d(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    return std::hypot(a[0] - b[0], a[1] - b[1]);
}

}  // namespace

CorpusIndex index_corpus(const std::string& root, const video::DatasetSplit& split) {
    CorpusIndex idx;
    idx.root = root;
    const std::set<std::string> tr(split.train.begin(), split.train.end());
    const std::set<std::string> va(split.val.begin(), split.val.end());
    const std::set<std::string> te(split.test.begin(), split.test.end());
    for (const auto& dir : video::list_clip_dirs(root)) {
        std::ifstream f(fs::path(dir) / "meta.json");
        HEMO_CHECK(f.good(), "index_corpus: missing meta.json in ", dir);
        nlohmann::json meta;
        f >> meta;
        const std::string patient = meta.value("patient_id", std::string());
        if (tr.count(patient)) idx.train_dirs.push_back(dir);
        else if (va.count(patient)) idx.val_dirs.push_back(dir);
        else if (te.count(patient)) idx.test_dirs.push_back(dir);
    }
    return idx;
}

video::DatasetSplit split_corpus(const std::string& root, std::array<double, 3> ratio,
                                 uint64_t seed) {
    std::set<std::string> patients;
    for (const auto& dir : video::list_clip_dirs(root)) {
        std::ifstream f(fs::path(dir) / "meta.json");
        HEMO_CHECK(f.good(), "split_corpus: missing meta.json in ", dir);
        nlohmann::json meta;
        f >> meta;
        patients.insert(meta.value("patient_id", std::string()));
    }
    return video::split_dataset({patients.begin(), patients.end()}, ratio, seed);
}

// ---- onset ---------------------------------------------------------------------------------

namespace {

// Interframe supervision from the oracle: appearance changes (onset, flushes,
// reflections, occlusions, instruments) should raise the color confidence;
// motion disturbances (jitter, instruments) the flow confidence.
struct PairTargets {
    std::vector<double> color, flow;  // index = pair (t-1, t)
};

PairTargets pair_targets(const synth::SynthGroundTruth& truth, int T) {
    PairTargets tg;
    tg.color.assign(T, 0.0);
    tg.flow.assign(T, 0.0);
    auto tagged = [&](int t, const char* k) {
        return t >= 0 && t < int(truth.frame_tags.size()) && has_tag(truth.frame_tags[t], k);
    };
    for (int t = 1; t < T; ++t) {
        bool color = truth.onset_frame >= 0 && t >= truth.onset_frame &&
                     t <= truth.onset_frame + 8;
        for (const char* k : {"flush", "reflection", "obscure", "instrument"})
            color = color || tagged(t, k) || tagged(t - 1, k);
        bool flow = false;
        for (const char* k : {"jitter", "instrument"})
            flow = flow || tagged(t, k) || tagged(t - 1, k);
        tg.color[t] = color ? 1.0 : 0.0;
        tg.flow[t] = flow ? 1.0 : 0.0;
    }
    return tg;
}

double validate_onset(const onset::OnsetModel& model, const onset::OnsetConfig& onset_cfg,
                      const std::vector<std::string>& dirs, int tol) {
    int n = 0, hit = 0;
    for (const auto& dir : dirs) {
        auto truth = load_clip_oracle(dir);
        if (truth.onset_frame < 0) continue;
        auto clip = video::load_clip(dir);
        if (clip.length() < 1) continue;
        ++n;
        try {
            auto res = onset::locate_onset(model, clip, onset_cfg, false);
            if (res.bleeding && std::abs(res.onset_frame - truth.onset_frame) <= tol) ++hit;
        } catch (const Error&) {
            // clip shorter than a window: counted as a miss
        }
    }
    return n > 0 ? double(hit) / n : 0.0;
}

}  // namespace

TrainSummary train_onset(onset::OnsetModel& model, const onset::OnsetConfig& onset_cfg,
                         const CorpusIndex& corpus, const OnsetTrainConfig& cfg, uint64_t seed,
                         const std::string& checkpoint_path, const LogFn& log) {
    Budget budget(cfg.budget_minutes);
    TrainSummary sum;
    const auto train_dirs = capped(corpus.train_dirs, cfg.max_train_clips);
    const auto val_dirs = capped(corpus.val_dirs, cfg.max_val_clips);
    HEMO_CHECK(!train_dirs.empty(), "train_onset: empty train split under ", corpus.root);
    auto& ps = model.params();

    ensure_parent_dir(checkpoint_path);
    const json meta = {{"module", "onset"},
                       {"net", cfg::to_json(model.config())},
                       {"onset", cfg::to_json(onset_cfg)},
                       {"seed", seed}};

    // Phase 1: interframe confidence nets only.
    ps.set_trainable("", false);
    ps.set_trainable("conf.", true);
    {
        nn::Adam opt(ps, cfg.lr_conf);
        for (int epoch = 0; epoch < cfg.conf_epochs && !budget.expired(); ++epoch) {
            Rng erng(mix_seed(seed, 101 + uint64_t(epoch)));
            auto order = train_dirs;
            shuffle_vec(order, erng);
            double acc = 0;
            int n = 0;
            for (const auto& dir : order) {
                if (budget.expired()) break;
                auto clip = video::load_clip(dir);
                auto truth = load_clip_oracle(dir);
                auto wf = onset::prepare_work_frames(clip, model.config());
                const int T = wf.length();
                if (T < 2) continue;
                auto tg = pair_targets(truth, T);
                std::vector<int> pos, neg;
                for (int t = 1; t < T; ++t)
                    (tg.color[t] > 0.5 || tg.flow[t] > 0.5 ? pos : neg).push_back(t);
                shuffle_vec(pos, erng);
                shuffle_vec(neg, erng);
                std::vector<int> chosen;
                const int half = cfg.pairs_per_clip / 2;
                for (int i = 0; i < int(pos.size()) && int(chosen.size()) < half; ++i)
                    chosen.push_back(pos[i]);
                for (int i = 0; i < int(neg.size()) &&
                                int(chosen.size()) < cfg.pairs_per_clip;
                     ++i)
                    chosen.push_back(neg[i]);
                if (chosen.empty()) continue;
                std::vector<nn::Var> terms;
                for (int t : chosen) {
                    auto [cc, cf] = model.confidences(wf, t - 1, t);
                    terms.push_back(nn::bce(cc, {tg.color[t]}));
                    terms.push_back(nn::bce(cf, {tg.flow[t]}));
                }
                auto loss = nn::scale(nn::sum_all(nn::concat0(terms)), 1.0 / terms.size());
                opt.zero_grad();
                nn::backward(loss);
                opt.step();
                acc += loss.val()[0];
                ++n;
            }
            log("train-onset phase1 epoch " + std::to_string(epoch) + " loss " +
                std::to_string(n ? acc / n : 0.0));
        }
    }

    // Phase 2: everything but the confidence nets on window targets.
    ps.set_trainable("", true);
    ps.set_trainable("conf.", false);
    double best = -1.0;
    {
        nn::Adam opt(ps, cfg.lr_main);
        for (int epoch = 0; epoch < cfg.main_epochs && !budget.expired(); ++epoch) {
            Rng erng(mix_seed(seed, 201 + uint64_t(epoch)));
            auto order = train_dirs;
            shuffle_vec(order, erng);
            double acc = 0;
            int n = 0;
            for (const auto& dir : order) {
                if (budget.expired()) break;
                auto clip = video::load_clip(dir);
                auto truth = load_clip_oracle(dir);
                auto wf = onset::prepare_work_frames(clip, model.config());
                const int T = wf.length(), N = onset_cfg.window_N;
                if (T < N) continue;
                std::vector<char> stores;
                {
                    nn::NoGradGuard g;
                    stores = model.gate_decisions(wf, onset_cfg);
                }
                auto kf = onset::keyframe_for_frame(stores);
                const int t_gt = truth.onset_frame;
                std::vector<int> pos, pre, post;
                for (int t0 = 0; t0 + N <= T; ++t0) {
                    if (t_gt >= 0 && t0 <= t_gt && t_gt < t0 + N) pos.push_back(t0);
                    else if (t_gt >= 0 && t0 + N <= t_gt) pre.push_back(t0);
                    else post.push_back(t0);
                }
                shuffle_vec(pos, erng);
                shuffle_vec(pre, erng);
                shuffle_vec(post, erng);
                std::vector<std::pair<int, onset::WindowTarget>> chosen;
                const int n_pos = std::min<int>((cfg.windows_per_clip + 1) / 2, int(pos.size()));
                for (int i = 0; i < n_pos; ++i)
                    chosen.push_back({pos[i], {true, double(t_gt - pos[i]) / N}});
                // Alternate the two negative pools so both sides of the onset
                // are represented when available.
                size_t ipre = 0, ipost = 0;
                while (int(chosen.size()) < cfg.windows_per_clip &&
                       (ipre < pre.size() || ipost < post.size())) {
                    if (ipost < post.size()) chosen.push_back({post[ipost++], {false, 0.0}});
                    if (int(chosen.size()) < cfg.windows_per_clip && ipre < pre.size())
                        chosen.push_back({pre[ipre++], {false, 0.0}});
                }
                if (chosen.empty()) continue;

                std::map<std::pair<int, int>, nn::Var> cache;  // (frame, keyframe) -> token
                std::vector<std::pair<nn::Var, onset::WindowTarget>> windows;
                for (const auto& [t0, tgt] : chosen) {
                    std::vector<nn::Var> toks;
                    toks.reserve(N);
                    for (int u = t0; u < t0 + N; ++u) {
                        const int key = kf[u] >= 0 ? kf[u] : t0;
                        auto it = cache.find({u, key});
                        if (it == cache.end())
                            it = cache.emplace(std::make_pair(u, key),
                                               model.frame_token(wf, u, key))
                                     .first;
                        toks.push_back(it->second);
                    }
                    windows.push_back({model.window_scores(toks), tgt});
                }
                auto loss = onset::temporal_loss(windows, N);
                opt.zero_grad();
                nn::backward(loss);
                opt.step();
                acc += loss.val()[0];
                ++n;
            }
            sum.final_train_loss = n ? acc / n : 0.0;
            const double val = validate_onset(model, onset_cfg, val_dirs, cfg.val_tolerance);
            log("train-onset phase2 epoch " + std::to_string(epoch) + " loss " +
                std::to_string(sum.final_train_loss) + " val_acc@" +
                std::to_string(cfg.val_tolerance) + " " + std::to_string(val));
            sum.epochs_run = epoch + 1;
            if (val > best) {
                best = val;
                nn::save_checkpoint(checkpoint_path, ps, meta);
            }
        }
    }
    if (best < 0) nn::save_checkpoint(checkpoint_path, ps, meta);  // budget hit before epoch end
    else nn::load_checkpoint(checkpoint_path, ps);                 // restore the best epoch
    ps.set_trainable("", true);
    sum.best_val = std::max(best, 0.0);
    sum.wall_seconds = budget.seconds();
    sum.budget_stopped = budget.hit;
    return sum;
}

// ---- localization ----------------------------------------------------------------------------

namespace {

double validate_detect(const detect::DetectModel& model, const std::vector<std::string>& dirs,
                       int w, int h) {
    nn::NoGradGuard ng;
    double err = 0;
    int n = 0;
    for (const auto& dir : dirs) {
        auto clip = video::load_clip(dir);
        if (clip.labels.points.empty()) continue;
        const auto& lab = clip.labels.points[clip.labels.points.size() / 2];
        auto small = img::resize(clip.frames[lab.frame], w, h);
        auto fused = model.forward(img::to_planes(small));
        auto loc = detect::locate_source(fused);
        const double sx = lab.x * w / clip.width(), sy = lab.y * h / clip.height();
        err += std::hypot(loc[0] - sx, loc[1] - sy);
        ++n;
    }
    return n > 0 ? err / n : std::numeric_limits<double>::infinity();
}

}  // namespace

TrainSummary train_detect(detect::DetectModel& model, const CorpusIndex& corpus,
                          const DetectTrainConfig& cfg, uint64_t seed,
                          const std::string& checkpoint_path, const LogFn& log) {
    Budget budget(cfg.budget_minutes);
    TrainSummary sum;
    const auto train_dirs = capped(corpus.train_dirs, 0);
    const auto val_dirs = capped(corpus.val_dirs, cfg.max_val_clips);
    HEMO_CHECK(!train_dirs.empty(), "train_detect: empty train split under ", corpus.root);
    HEMO_CHECK(cfg.train_w % 8 == 0 && cfg.train_h % 8 == 0,
               "train_detect: training resolution must be divisible by 8");
    auto& ps = model.params();
    ps.set_trainable("", true);
    nn::Adam opt(ps, cfg.lr);
    const double sigma = detect::default_sigma(cfg.train_w, cfg.train_h, cfg.sigma_frac);
    ensure_parent_dir(checkpoint_path);
    const json meta = {{"module", "detect"},
                       {"net", cfg::to_json(model.config())},
                       {"seed", seed}};

    double best = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg.epochs && !budget.expired(); ++epoch) {
        Rng erng(mix_seed(seed, 301 + uint64_t(epoch)));
        auto order = train_dirs;
        shuffle_vec(order, erng);
        double acc = 0;
        int n = 0;
        for (const auto& dir : order) {
            if (budget.expired()) break;
            if (cfg.max_train_samples > 0 && n >= cfg.max_train_samples) break;
            auto clip = video::load_clip(dir);
            if (clip.labels.points.empty()) continue;
            auto labels = clip.labels.points;
            shuffle_vec(labels, erng);
            const int per_clip = std::max<int>(1, int(labels.size()) / 2);
            for (int li = 0; li < per_clip && li < int(labels.size()); ++li) {
                if (budget.expired()) break;
                if (cfg.max_train_samples > 0 && n >= cfg.max_train_samples) break;
                const auto& lab = labels[li];
                auto small = img::resize(clip.frames[lab.frame], cfg.train_w, cfg.train_h);
                const double sx = lab.x * cfg.train_w / clip.width();
                const double sy = lab.y * cfg.train_h / clip.height();
                auto heat_gt = detect::gaussian_target(cfg.train_w, cfg.train_h, sx, sy, sigma);
                // Neighbouring annotations stand in as imperfect pseudo maps.
                std::vector<nn::Var> pseudos;
                std::vector<video::PointLabel> others;
                for (const auto& o : clip.labels.points)
                    if (o.frame != lab.frame) others.push_back(o);
                std::sort(others.begin(), others.end(),
                          [&](const auto& a, const auto& b) {
                              return std::abs(a.frame - lab.frame) <
                                     std::abs(b.frame - lab.frame);
                          });
                for (int pi = 0; pi < cfg.max_pseudo && pi < int(others.size()); ++pi)
                    pseudos.push_back(detect::gaussian_target(
                        cfg.train_w, cfg.train_h, others[pi].x * cfg.train_w / clip.width(),
                        others[pi].y * cfg.train_h / clip.height(), sigma));
                auto fused = model.forward(img::to_planes(small));
                auto point = detect::soft_argmax(fused);
                auto loss = detect::spatial_loss(fused, heat_gt, pseudos, point, {sx, sy},
                                                 cfg.loss);
                opt.zero_grad();
                nn::backward(loss);
                opt.step();
                acc += loss.val()[0];
                ++n;
            }
        }
        sum.final_train_loss = n ? acc / n : 0.0;
        const double val = validate_detect(model, val_dirs, cfg.train_w, cfg.train_h);
        log("train-detect epoch " + std::to_string(epoch) + " loss " +
            std::to_string(sum.final_train_loss) + " val_err " + std::to_string(val));
        sum.epochs_run = epoch + 1;
        if (val < best) {
            best = val;
            nn::save_checkpoint(checkpoint_path, ps, meta);
        }
    }
    if (!std::isfinite(best)) nn::save_checkpoint(checkpoint_path, ps, meta);
    else nn::load_checkpoint(checkpoint_path, ps);
    sum.best_val = best;
    sum.wall_seconds = budget.seconds();
    sum.budget_stopped = budget.hit;
    return sum;
}

// ---- tracking --------------------------------------------------------------------------------

namespace {

double validate_track(const track::TrackModel& model, const std::vector<std::string>& dirs,
                      bool use_red) {
    nn::NoGradGuard ng;
    double err = 0;
    int n = 0;
    for (const auto& dir : dirs) {
        auto truth = load_clip_oracle(dir);
        if (truth.onset_frame < 0) continue;
        auto clip = video::load_clip(dir);
        const int t0 = truth.onset_frame;
        auto traj = track::track_clip(model, clip, t0,
                                      {truth.track[t0][0], truth.track[t0][1]}, true, use_red);
        for (const auto& tp : traj) {
            if (tp.frame >= int(truth.visible.size()) || !truth.visible[tp.frame]) continue;
            err += std::hypot(tp.x - truth.track[tp.frame][0], tp.y - truth.track[tp.frame][1]);
            ++n;
        }
    }
    return n > 0 ? err / n : std::numeric_limits<double>::infinity();
}

}  // namespace

TrainSummary pretrain_track(track::TrackModel& model, const CorpusIndex& corpus,
                            const TrackPretrainConfig& cfg, uint64_t seed,
                            const std::string& checkpoint_path, const LogFn& log) {
    Budget budget(cfg.budget_minutes);
    TrainSummary sum;
    const auto train_dirs = capped(corpus.train_dirs, cfg.max_train_clips);
    const auto val_dirs = capped(corpus.val_dirs, cfg.max_val_clips);
    HEMO_CHECK(!train_dirs.empty(), "pretrain_track: empty train split under ", corpus.root);
    auto& ps = model.params();
    ps.set_trainable("", true);
    nn::Adam opt(ps, cfg.lr);
    ensure_parent_dir(checkpoint_path);
    const json meta = {{"module", "track"},
                       {"stage", "pretrain"},
                       {"net", cfg::to_json(model.config())},
                       {"seed", seed}};

    double best = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg.epochs && !budget.expired(); ++epoch) {
        Rng erng(mix_seed(seed, 401 + uint64_t(epoch)));
        auto order = train_dirs;
        shuffle_vec(order, erng);
        double acc = 0;
        int n = 0;
        for (const auto& dir : order) {
            if (budget.expired()) break;
            auto truth = load_clip_oracle(dir);
            if (truth.onset_frame < 0) continue;
            auto clip = video::load_clip(dir);
            const int T = clip.length(), W = clip.width(), H = clip.height();
            for (int si = 0; si < cfg.samples_per_clip; ++si) {
                if (budget.expired()) break;
                const int max_start = T - 1 - std::max(8, cfg.window / 2);
                if (max_start < truth.onset_frame) break;
                const int start = erng.uniform_int(truth.onset_frame, max_start);
                const int steps = std::min(cfg.window, T - 1 - start);
                if (steps < 4) continue;
                std::array<double, 2> init{truth.track[start][0] +
                                               erng.uniform(-cfg.perturb_px, cfg.perturb_px),
                                           truth.track[start][1] +
                                               erng.uniform(-cfg.perturb_px, cfg.perturb_px)};
                init[0] = std::clamp(init[0], 0.0, double(W - 1));
                init[1] = std::clamp(init[1], 0.0, double(H - 1));
                auto state = model.init_track(clip.frames[start], start, init, false);
                std::vector<nn::Var> point_terms, conf_terms;
                for (int t = start + 1; t <= start + steps; ++t) {
                    auto sr = model.step(state, clip.frames[t], t, false);
                    const std::array<double, 2> gt{truth.track[t][0], truth.track[t][1]};
                    auto gt_work = model.to_work(gt, W, H);
                    auto gt_var = nn::Var::from({2}, {gt_work[0], gt_work[1]});
                    point_terms.push_back(nn::huber_sum(sr.point_var, gt_var, 1.0));
                    const double e = dist2d(sr.point, gt);
                    conf_terms.push_back(
                        nn::bce(sr.conf_var, {std::exp(-e / cfg.conf_err_scale)}));
                    state = sr.state;
                }
                auto loss = nn::scale(nn::sum_all(nn::concat0(point_terms)),
                                      1.0 / point_terms.size());
                loss = nn::add(loss, nn::scale(nn::sum_all(nn::concat0(conf_terms)),
                                               cfg.conf_weight / conf_terms.size()));
                opt.zero_grad();
                nn::backward(loss);
                opt.step();
                acc += loss.val()[0];
                ++n;
            }
        }
        sum.final_train_loss = n ? acc / n : 0.0;
        const double val = validate_track(model, val_dirs, false);
        log("pretrain-track epoch " + std::to_string(epoch) + " loss " +
            std::to_string(sum.final_train_loss) + " val_err " + std::to_string(val));
        sum.epochs_run = epoch + 1;
        if (val < best) {
            best = val;
            nn::save_checkpoint(checkpoint_path, ps, meta);
        }
    }
    if (!std::isfinite(best)) nn::save_checkpoint(checkpoint_path, ps, meta);
    else nn::load_checkpoint(checkpoint_path, ps);
    sum.best_val = best;
    sum.wall_seconds = budget.seconds();
    sum.budget_stopped = budget.hit;
    return sum;
}

TrainSummary finetune_track(track::TrackModel& model, const CorpusIndex& corpus,
                            const TrackFinetuneConfig& cfg, uint64_t seed,
                            const std::string& checkpoint_path, const LogFn& log) {
    Budget budget(cfg.budget_minutes);
    TrainSummary sum;
    const auto train_dirs = capped(corpus.train_dirs, cfg.max_train_clips);
    const auto val_dirs = capped(corpus.val_dirs, cfg.max_val_clips);
    HEMO_CHECK(!train_dirs.empty(), "finetune_track: empty train split under ", corpus.root);

    track::apply_adapters(model, cfg.adapter, mix_seed(seed, 0x517A));
    auto& ps = model.params();
    nn::Adam opt(ps, cfg.lr);
    ensure_parent_dir(checkpoint_path);
    const json meta = {{"module", "track"},
                       {"stage", "finetune"},
                       {"net", cfg::to_json(model.config())},
                       {"adapter", cfg::to_json(cfg.adapter)},
                       {"seed", seed}};

    double best = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg.epochs && !budget.expired(); ++epoch) {
        Rng erng(mix_seed(seed, 501 + uint64_t(epoch)));
        auto order = train_dirs;
        shuffle_vec(order, erng);
        double acc = 0;
        int n = 0;
        for (const auto& dir : order) {
            if (budget.expired()) break;
            auto clip = video::load_clip(dir);
            if (clip.labels.points.size() < 2) continue;
            const int W = clip.width(), H = clip.height();
            auto tracker = pseudo::make_flow_tracker(clip);
            auto pl = pseudo::run_factory(clip, cfg.factory, tracker);
            auto spans =
                pseudo::build_samples(clip.labels, cfg.sample_mode, mix_seed(seed, epoch));
            // Human label positions by frame for the endpoint term.
            std::map<int, std::array<double, 2>> human;
            for (const auto& p : clip.labels.points) human[p.frame] = {p.x, p.y};

            for (const auto& span : spans) {
                if (budget.expired()) break;
                const int a = span.start, b = span.start + span.length - 1;
                if (b <= a || !human.count(a) || !human.count(b)) continue;

                auto state = model.init_track(clip.frames[a], a, human[a], true);
                std::vector<nn::Var> pseudo_preds;
                std::vector<std::array<double, 2>> pseudo_gts;
                nn::Var end_pred;
                for (int t = a + 1; t <= b; ++t) {
                    auto sr = model.step(state, clip.frames[t], t, true);
                    if (t == b) {
                        end_pred = sr.point_var;
                    } else if (auto sp = pl.source_at(t)) {
                        pseudo_preds.push_back(sr.point_var);
                        pseudo_gts.push_back(model.to_work({sp->x, sp->y}, W, H));
                    }
                    state = sr.state;
                }

                // Optionally supervise extra factory keypoint trajectories that
                // persist across the whole span.
                int extra = 0;
                if (cfg.max_keypoint_tracks > 0 && pl.frames.count(a) && pl.frames.count(b)) {
                    std::vector<int> ids;
                    for (const auto& p : pl.frames.at(a))
                        if (p.track_id > 0) ids.push_back(p.track_id);
                    std::sort(ids.begin(), ids.end());
                    for (int id : ids) {
                        if (extra >= cfg.max_keypoint_tracks) break;
                        std::map<int, std::array<double, 2>> kp;
                        for (int t = a; t <= b; ++t) {
                            if (!pl.frames.count(t)) continue;
                            for (const auto& p : pl.frames.at(t))
                                if (p.track_id == id) kp[t] = {p.x, p.y};
                        }
                        if (!kp.count(a) || !kp.count(b)) continue;
                        auto kstate = model.init_track(clip.frames[a], a, kp[a], true);
                        for (int t = a + 1; t <= b; ++t) {
                            auto sr = model.step(kstate, clip.frames[t], t, true);
                            if (kp.count(t)) {
                                pseudo_preds.push_back(sr.point_var);
                                pseudo_gts.push_back(model.to_work(kp[t], W, H));
                            }
                            kstate = sr.state;
                        }
                        ++extra;
                    }
                }

                auto gt_work = model.to_work(human[b], W, H);
                auto loss =
                    track::tracking_loss(end_pred, gt_work, pseudo_preds, pseudo_gts, cfg.loss);
                opt.zero_grad();
                nn::backward(loss);
                opt.step();
                if (cfg.adapter.adaptive)
                    track::adapters_enforce_budget(model, cfg.adapter.rank_budget);
                acc += loss.val()[0];
                ++n;
            }
        }
        sum.final_train_loss = n ? acc / n : 0.0;
        const double val = validate_track(model, val_dirs, true);
        log("finetune-track epoch " + std::to_string(epoch) + " loss " +
            std::to_string(sum.final_train_loss) + " val_err " + std::to_string(val));
        sum.epochs_run = epoch + 1;
        if (val < best) {
            best = val;
            nn::save_checkpoint(checkpoint_path, ps, meta);
        }
    }
    if (!std::isfinite(best)) nn::save_checkpoint(checkpoint_path, ps, meta);
    else nn::load_checkpoint(checkpoint_path, ps);
    sum.best_val = best;
    sum.wall_seconds = budget.seconds();
    sum.budget_stopped = budget.hit;
    return sum;
}

}  // namespace hemo::trainers
