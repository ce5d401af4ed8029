#include "hemotrack/point_track.hpp"

#include <cmath>

#include "hemotrack/source_detect.hpp"

namespace hemo::track {

TrackModel::TrackModel(const TrackNetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    HEMO_CHECK(cfg.work_w % 8 == 0 && cfg.work_h % 8 == 0,
               "track model: work resolution must be divisible by 8");
    HEMO_CHECK(cfg.dim % cfg.heads == 0, "track model: dim % heads != 0");
    Rng rng(seed);
    const int d = cfg.dim;
    c1_ = nn::Conv2d(ps_, "bb.c1.", 3, 16, 3, 2, 1, rng);
    c2_ = nn::Conv2d(ps_, "bb.c2.", 16, 32, 3, 2, 1, rng);
    c3_ = nn::Conv2d(ps_, "bb.c3.", 32, d, 3, 2, 1, rng);
    c4_ = nn::Conv2d(ps_, "bb.c4.", d, d, 3, 1, 1, rng);
    c5_ = nn::Conv2d(ps_, "bb.c5.", d, d, 3, 1, 1, rng);
    r1_ = nn::Conv2d(ps_, "red.c1.", 1, cfg.red_channels, 5, 4, 2, rng);
    r2_ = nn::Conv2d(ps_, "red.c2.", cfg.red_channels, cfg.red_channels, 3, 2, 1, rng);
    const int kv_ch = d + cfg.red_channels;
    kv_in_ = nn::Linear(ps_, "kv.in.", kv_ch, d, rng);
    kv_pos_ = nn::Linear(ps_, "kv.pos.", 2, d, rng);
    q_init_ = nn::Linear(ps_, "q.init.", kv_ch + 2, d, rng);
    dec_.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "dec" + std::to_string(l) + ".";
        dec_[l].ln1 = nn::LayerNormP(ps_, p + "ln1.", d);
        dec_[l].ln2 = nn::LayerNormP(ps_, p + "ln2.", d);
        dec_[l].wq = nn::Linear(ps_, p + "wq.", d, d, rng);
        dec_[l].wk = nn::Linear(ps_, p + "wk.", d, d, rng);
        dec_[l].wv = nn::Linear(ps_, p + "wv.", d, d, rng);
        dec_[l].wo = nn::Linear(ps_, p + "wo.", d, d, rng);
        dec_[l].fc1 = nn::Linear(ps_, p + "fc1.", d, cfg.ffn_dim, rng);
        dec_[l].fc2 = nn::Linear(ps_, p + "fc2.", cfg.ffn_dim, d, rng);
    }
    resp_q_ = nn::Linear(ps_, "resp.q.", d, d, rng);
    resp_k_ = nn::Linear(ps_, "resp.k.", d, d, rng);
    conf_fc1_ = nn::Linear(ps_, "conf.fc1.", d + 1, 32, rng);
    conf_fc2_ = nn::Linear(ps_, "conf.fc2.", 32, 1, rng);
}

nn::Var TrackModel::backbone(const nn::Var& frame) const {
    HEMO_CHECK(frame.shape().size() == 3 && frame.dim(0) == 3,
               "backbone: expected {3,H,W} planes");
    auto x = nn::relu(c1_.forward(frame));
    x = nn::relu(c2_.forward(x));
    x = nn::relu(c3_.forward(x));
    x = nn::relu(c4_.forward(x));
    return nn::relu(c5_.forward(x));
}

nn::Var TrackModel::red_features(const img::Image& native_frame, bool enabled) const {
    const int gw = cfg_.work_w / 8, gh = cfg_.work_h / 8;
    if (!enabled) return nn::Var::leaf({cfg_.red_channels, gh, gw}, false);
    auto small = img::resize(native_frame, cfg_.work_w, cfg_.work_h);
    auto mask = detect::red_mask_map(small);  // {1, work_h, work_w}
    auto x = nn::relu(r1_.forward(mask));
    return nn::relu(r2_.forward(x));
}

nn::Var TrackModel::red_attention_augment(const nn::Var& vision, const nn::Var& red) {
    HEMO_CHECK(vision.shape().size() == 3 && red.shape().size() == 3,
               "red_attention_augment: expected {C,h,w} maps");
    HEMO_CHECK(vision.dim(1) == red.dim(1) && vision.dim(2) == red.dim(2),
               "red_attention_augment: grids misaligned (", vision.dim(2), "x", vision.dim(1),
               " vs ", red.dim(2), "x", red.dim(1), ")");
    return nn::concat0({vision, red});
}

std::array<double, 2> TrackModel::to_work(std::array<double, 2> native, int w, int h) const {
    return {native[0] * cfg_.work_w / double(w), native[1] * cfg_.work_h / double(h)};
}

std::array<double, 2> TrackModel::to_native(std::array<double, 2> work, int w, int h) const {
    return {work[0] * double(w) / cfg_.work_w, work[1] * double(h) / cfg_.work_h};
}

namespace {

// {C,h,w} -> {h*w, C}
nn::Var to_rows(const nn::Var& m) {
    const int C = m.dim(0), h = m.dim(1), w = m.dim(2);
    return nn::reshape(nn::permute102(nn::reshape(m, {C, 1, h * w})), {h * w, C});
}

}  // namespace

nn::Var TrackModel::sample_query(const img::Image& frame, std::array<double, 2> work_pt,
                                 bool use_red) const {
    auto small = img::resize(frame, cfg_.work_w, cfg_.work_h);
    auto feat = backbone(img::to_planes(small));
    auto aug = red_attention_augment(feat, red_features(frame, use_red));
    const double gx = std::clamp(work_pt[0] / 8.0 - 0.5, 0.0, double(aug.dim(2) - 1));
    const double gy = std::clamp(work_pt[1] / 8.0 - 0.5, 0.0, double(aug.dim(1) - 1));
    auto sampled = nn::bilinear_sample(aug, gx, gy);  // {kv_ch}
    nn::Var coords = nn::Var::leaf({2}, false);
    coords.val() = {work_pt[0] / cfg_.work_w, work_pt[1] / cfg_.work_h};
    auto in = nn::reshape(nn::concat0({sampled, coords}), {1, aug.dim(0) + 2});
    return q_init_.forward(in);  // {1, dim}
}

TrackState TrackModel::init_track(const img::Image& frame, int frame_index,
                                  std::array<double, 2> point_native, bool use_red) const {
    TrackState st;
    st.query = sample_query(frame, to_work(point_native, frame.w, frame.h), use_red);
    st.point = point_native;
    st.confidence = 1.0;
    st.frame = frame_index;
    st.frames_since_refresh = 0;
    return st;
}

TrackModel::Decoded TrackModel::decode(const nn::Var& query, const img::Image& frame,
                                       bool use_red) const {
    const int d = cfg_.dim;
    auto small = img::resize(frame, cfg_.work_w, cfg_.work_h);
    auto feat = backbone(img::to_planes(small));
    auto aug = red_attention_augment(feat, red_features(frame, use_red));
    const int gh = aug.dim(1), gw = aug.dim(2), S = gh * gw;

    nn::Var coords = nn::Var::leaf({S, 2}, false);
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
            coords.val()[(size_t(y) * gw + x) * 2 + 0] = (x + 0.5) / gw;
            coords.val()[(size_t(y) * gw + x) * 2 + 1] = (y + 0.5) / gh;
        }
    auto kv = nn::add(kv_in_.forward(to_rows(aug)), kv_pos_.forward(coords));  // {S, d}

    auto q = query;  // {1, d}
    const double att_scale = 1.0 / std::sqrt(double(d));
    for (const auto& layer : dec_) {
        auto qn = layer.ln1.forward(q);
        auto qq = layer.wq.forward(qn);
        auto kk = layer.wk.forward(kv);
        auto vv = layer.wv.forward(kv);
        auto attn = nn::softmax_last(nn::scale(nn::matmul_nt(qq, kk), att_scale));  // {1,S}
        auto mixed = layer.wo.forward(nn::matmul(attn, vv));
        q = nn::add(q, mixed);
        auto hn = layer.ln2.forward(q);
        q = nn::add(q, layer.fc2.forward(nn::relu(layer.fc1.forward(hn))));
    }

    auto logits = nn::scale(nn::matmul_nt(resp_q_.forward(q), resp_k_.forward(kv)), att_scale);
    auto grid = nn::reshape(logits, {1, gh, gw});
    auto up = nn::resize_bilinear(grid, gh * 4, gw * 4);  // quarter-cell resolution
    auto probs = nn::softmax_last(
        nn::scale(nn::reshape(up, {1, gh * 4 * gw * 4}), 1.0 / cfg_.softargmax_temp));
    const int uw = gw * 4, uh = gh * 4;
    nn::Var centers = nn::Var::leaf({uh * uw, 2}, false);
    const double cellx = double(cfg_.work_w) / uw, celly = double(cfg_.work_h) / uh;
    for (int y = 0; y < uh; ++y)
        for (int x = 0; x < uw; ++x) {
            centers.val()[(size_t(y) * uw + x) * 2 + 0] = (x + 0.5) * cellx;
            centers.val()[(size_t(y) * uw + x) * 2 + 1] = (y + 0.5) * celly;
        }
    Decoded out;
    out.point_var = nn::reshape(nn::matmul(probs, centers), {2});  // work px, in-bounds
    auto peak = nn::max_all(probs);
    auto cin = nn::reshape(nn::concat0({nn::reshape(q, {d}), peak}), {1, d + 1});
    out.conf_var = nn::reshape(nn::sigmoid(conf_fc2_.forward(nn::relu(conf_fc1_.forward(cin)))),
                               {1});
    out.query = q;
    return out;
}

TrackModel::StepResult TrackModel::step(const TrackState& state, const img::Image& frame,
                                        int frame_index, bool use_red) const {
    HEMO_CHECK(state.query.defined(), "step: uninitialized tracker state");
    auto dec = decode(state.query, frame, use_red);
    StepResult res;
    res.point_var = dec.point_var;
    res.conf_var = dec.conf_var;
    const auto wp = dec.point_var.val();
    res.point = to_native({wp[0], wp[1]}, frame.w, frame.h);
    res.confidence = dec.conf_var.val()[0];
    res.state.query = nn::add(nn::scale(state.query, 1.0 - cfg_.memory_blend),
                              nn::scale(dec.query, cfg_.memory_blend));
    res.state.point = res.point;
    res.state.confidence = res.confidence;
    res.state.frame = frame_index;
    res.state.frames_since_refresh = state.frames_since_refresh + 1;
    return res;
}

TrackState TrackModel::refresh(const TrackState& state, const img::Image& frame, int frame_index,
                               bool use_red) const {
    TrackState st = init_track(frame, frame_index, state.point, use_red);
    st.confidence = state.confidence;
    return st;
}

// ---- adapters -------------------------------------------------------------------

std::vector<std::string> TrackModel::adapter_targets() const {
    std::vector<std::string> out;
    for (int l = 0; l < cfg_.layers; ++l)
        for (const char* nm : {"wq", "wk", "wv", "wo", "fc1", "fc2"})
            out.push_back("dec" + std::to_string(l) + "." + nm);
    return out;
}

nn::Linear* TrackModel::linear_by_name(const std::string& name) {
    for (int l = 0; l < int(dec_.size()); ++l) {
        const std::string p = "dec" + std::to_string(l) + ".";
        if (name == p + "wq") return &dec_[l].wq;
        if (name == p + "wk") return &dec_[l].wk;
        if (name == p + "wv") return &dec_[l].wv;
        if (name == p + "wo") return &dec_[l].wo;
        if (name == p + "fc1") return &dec_[l].fc1;
        if (name == p + "fc2") return &dec_[l].fc2;
    }
    return nullptr;
}

void apply_adapters(TrackModel& model, const AdapterSpec& spec, uint64_t seed) {
    HEMO_CHECK(spec.rank >= 1, "apply_adapters: rank must be >= 1");
    Rng rng(seed);
    auto targets = spec.targets.empty() ? model.adapter_targets() : spec.targets;
    for (const auto& name : targets) {
        nn::Linear* lin = model.linear_by_name(name);
        HEMO_CHECK(lin != nullptr, "apply_adapters: no such layer '", name, "'");
        lin->attach_adapter(model.params(), "adapter." + name + ".", spec.rank, spec.alpha, rng);
    }
    model.params().set_trainable("", false);
    model.params().set_trainable("adapter.", true);
}

int64_t adapter_param_count(const TrackModel& model) {
    int64_t n = 0;
    for (const auto& [name, v] : model.params().items())
        if (name.rfind("adapter.", 0) == 0) n += v.size();
    return n;
}

int64_t base_param_count(const TrackModel& model) {
    int64_t n = 0;
    for (const auto& [name, v] : model.params().items())
        if (name.rfind("adapter.", 0) != 0) n += v.size();
    return n;
}

void adapters_enforce_budget(TrackModel& model, int budget) {
    for (const auto& name : model.adapter_targets()) {
        nn::Linear* lin = model.linear_by_name(name);
        if (lin && lin->adapter) {
            lin->adapter->prune_to(budget);
            lin->adapter->apply_keep_mask();
        }
    }
}

// ---- clip-level tracking -----------------------------------------------------------

std::vector<TrackedPoint> track_clip(const TrackModel& model, const video::Clip& clip,
                                     int start_frame, std::array<double, 2> p0,
                                     bool refresh_enabled, bool use_red) {
    HEMO_CHECK(start_frame >= 0 && start_frame < clip.length(), "track_clip: start frame ",
               start_frame, " outside clip of length ", clip.length());
    nn::NoGradGuard ng;
    const auto& cfg = model.config();
    std::vector<TrackedPoint> out;
    TrackState st = model.init_track(clip.frames[start_frame], start_frame, p0, use_red);
    out.push_back({start_frame, p0[0], p0[1], st.confidence});
    for (int t = start_frame + 1; t < clip.length(); ++t) {
        auto res = model.step(st, clip.frames[t], t, use_red);
        st = res.state;
        if (refresh_enabled && cfg.refresh_interval > 0 &&
            st.frames_since_refresh >= cfg.refresh_interval)
            st = model.refresh(st, clip.frames[t], t, use_red);
        out.push_back({t, res.point[0], res.point[1], res.confidence});
    }
    return out;
}

// ---- loss ----------------------------------------------------------------------------

nn::Var tracking_loss(const nn::Var& pred, const std::array<double, 2>& gt,
                      const std::vector<nn::Var>& pseudo_preds,
                      const std::vector<std::array<double, 2>>& pseudo_gts,
                      const TrackLossConfig& cfg) {
    HEMO_CHECK(pred.size() == 2, "tracking_loss: prediction must be (x,y)");
    HEMO_CHECK(pseudo_preds.size() == pseudo_gts.size(),
               "tracking_loss: ", pseudo_preds.size(), " pseudo predictions vs ",
               pseudo_gts.size(), " pseudo labels");
    nn::Var gtv = nn::Var::leaf({2}, false);
    gtv.val() = {gt[0], gt[1]};
    auto loss = nn::scale(nn::huber_sum(pred, gtv, cfg.delta), cfg.alpha1);
    if (!pseudo_preds.empty()) {
        nn::Var acc;
        for (size_t i = 0; i < pseudo_preds.size(); ++i) {
            HEMO_CHECK(pseudo_preds[i].size() == 2, "tracking_loss: pseudo prediction ", i,
                       " must be (x,y)");
            nn::Var pg = nn::Var::leaf({2}, false);
            pg.val() = {pseudo_gts[i][0], pseudo_gts[i][1]};
            auto term = nn::huber_sum(pseudo_preds[i], pg, cfg.delta);
            acc = acc.defined() ? nn::add(acc, term) : term;
        }
        loss = nn::add(loss, nn::scale(acc, cfg.alpha2 / double(pseudo_preds.size())));
    }
    return loss;
}

}  // namespace hemo::track
