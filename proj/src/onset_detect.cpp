#include "hemotrack/onset_detect.hpp"

#include <cmath>

namespace hemo::onset {

// ---- working data -----------------------------------------------------------

WorkFrames prepare_work_frames(const video::Clip& clip, const OnsetNetConfig& cfg) {
    HEMO_CHECK(clip.length() > 0, "prepare_work_frames: empty clip ", clip.id);
    WorkFrames wf;
    wf.w = cfg.work_w;
    wf.h = cfg.work_h;
    wf.small.reserve(clip.length());
    wf.rgb.reserve(clip.length());
    wf.hsv.reserve(clip.length());
    wf.adj_flow.reserve(clip.length());
    flow::BlockMatchConfig fcfg;
    fcfg.block = 8;
    fcfg.search = 4;
    fcfg.levels = 1;
    for (int t = 0; t < clip.length(); ++t) {
        wf.small.push_back(img::resize(clip.frames[t], cfg.work_w, cfg.work_h));
        wf.gray.push_back(img::to_gray(wf.small.back()));
        wf.rgb.push_back(img::to_planes(wf.small.back()));
        wf.hsv.push_back(img::to_hsv_planes(wf.small.back()));
        if (t == 0)
            wf.adj_flow.emplace_back(cfg.work_w, cfg.work_h);
        else
            wf.adj_flow.push_back(flow::block_matching(wf.gray[t - 1], wf.gray[t], cfg.work_w,
                                                       cfg.work_h, fcfg));
    }
    return wf;
}

// ---- memory -------------------------------------------------------------------

bool gate_stores(double c_color, double c_flow, const OnsetConfig& cfg) {
    return c_color < cfg.alpha && c_flow < cfg.gamma;
}

MemoryStore update_memory(MemoryStore mem, int prev_frame, int /*curr_frame*/, double c_color,
                          double c_flow, const OnsetConfig& cfg) {
    mem.capacity = cfg.memory_capacity;
    mem.recent = prev_frame;
    if (gate_stores(c_color, c_flow, cfg)) {
        mem.keyframes.push_back(prev_frame);
        while (int(mem.keyframes.size()) > mem.capacity) mem.keyframes.pop_front();
    }
    return mem;
}

std::vector<int> keyframe_for_frame(const std::vector<char>& stores) {
    std::vector<int> out(stores.size(), -1);
    int last = -1;
    for (size_t t = 0; t < stores.size(); ++t) {
        if (t >= 1 && stores[t]) last = int(t) - 1;
        out[t] = last;
    }
    return out;
}

// ---- decision rules --------------------------------------------------------------

std::optional<std::pair<int, int>> decide_offline(const std::vector<WindowScore>& scores, int N,
                                                  double threshold) {
    std::optional<std::pair<int, int>> best;
    for (const auto& s : scores) {
        if (!(s.s_conf > threshold)) continue;
        const int onset = s.t + int(std::floor(s.theta * N));
        if (!best || onset < best->first) best = {onset, s.t};
    }
    return best;
}

std::optional<std::pair<int, int>> decide_streaming(const std::vector<WindowScore>& scores,
                                                    int N, double threshold) {
    for (const auto& s : scores)
        if (s.s_conf > threshold) return {{s.t + int(std::floor(s.theta * N)), s.t}};
    return std::nullopt;
}

// ---- model --------------------------------------------------------------------------

OnsetModel::OnsetModel(const OnsetNetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    HEMO_CHECK(cfg.work_w % 8 == 0 && cfg.work_h % 8 == 0,
               "onset model: work resolution must be divisible by 8");
    HEMO_CHECK(cfg.token_dim % cfg.heads == 0, "onset model: token_dim % heads != 0");
    Rng rng(seed);
    const int C = cfg.feat_channels, tc = 3 * C;

    auto conf_net = [&](const std::string& p, int cin) {
        ps_.create(p + "c1.w", {8, cin, 3, 3}, rng);
        ps_.create_zeros(p + "c1.b", {8});
        ps_.create(p + "c2.w", {16, 8, 3, 3}, rng);
        ps_.create_zeros(p + "c2.b", {16});
        ps_.create(p + "c3.w", {16, 16, 3, 3}, rng);
        ps_.create_zeros(p + "c3.b", {16});
        ps_.create(p + "fc.w", {1, 16}, rng);
        ps_.create_zeros(p + "fc.b", {1});
    };
    conf_net("conf.color.", 7);
    conf_net("conf.flow.", 2);

    auto domain_enc = [&](const std::string& p, int cin) {
        ps_.create(p + "c1.w", {16, cin, 5, 5}, rng);
        ps_.create_zeros(p + "c1.b", {16});
        ps_.create(p + "c2.w", {C, 16, 3, 3}, rng);
        ps_.create_zeros(p + "c2.b", {C});
    };
    domain_enc("enc.rgb.", 3);
    domain_enc("enc.hsv.", 4);
    domain_enc("enc.flow.", 2);

    ps_.create("mdg.se.fc1.w", {tc / 4, tc}, rng);
    ps_.create_zeros("mdg.se.fc1.b", {tc / 4});
    ps_.create("mdg.se.fc2.w", {tc, tc / 4}, rng);
    ps_.create_zeros("mdg.se.fc2.b", {tc});
    for (int i = 0; i < 3; ++i) {
        const std::string p = "mdg.b" + std::to_string(i) + ".";
        ps_.create(p + "w", {C, tc, 3, 3}, rng);
        ps_.create_zeros(p + "b", {C});
    }
    ps_.create("mdg.gate.w", {3, tc}, rng);
    ps_.create_zeros("mdg.gate.b", {3});

    ps_.create("tok.proj.w", {cfg.token_dim, 2 * C}, rng);
    ps_.create_zeros("tok.proj.b", {cfg.token_dim});
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "tf.l" + std::to_string(l) + ".";
        ps_.create_const(p + "ln1.g", {cfg.token_dim}, 1.0);
        ps_.create_zeros(p + "ln1.b", {cfg.token_dim});
        for (const char* nm : {"q", "k", "v", "o"}) {
            ps_.create(p + nm + std::string(".w"), {cfg.token_dim, cfg.token_dim}, rng);
            ps_.create_zeros(p + nm + std::string(".b"), {cfg.token_dim});
        }
        ps_.create_const(p + "ln2.g", {cfg.token_dim}, 1.0);
        ps_.create_zeros(p + "ln2.b", {cfg.token_dim});
        ps_.create(p + "fc1.w", {cfg.ffn_dim, cfg.token_dim}, rng);
        ps_.create_zeros(p + "fc1.b", {cfg.ffn_dim});
        ps_.create(p + "fc2.w", {cfg.token_dim, cfg.ffn_dim}, rng);
        ps_.create_zeros(p + "fc2.b", {cfg.token_dim});
    }
    ps_.create("head.fc1.w", {cfg.token_dim, cfg.token_dim}, rng);
    ps_.create_zeros("head.fc1.b", {cfg.token_dim});
    // Zero-initialized final projection: an untrained model scores every
    // window as (0.5, 0.5).
    ps_.create_zeros("head.fc2.w", {2, cfg.token_dim});
    ps_.create_zeros("head.fc2.b", {2});
}

nn::Var OnsetModel::flow_planes(const WorkFrames& wf, int ref, int curr) const {
    const int h = wf.h, w = wf.w;
    nn::Var v = nn::Var::leaf({2, h, w}, false);
    if (ref != curr) {
        flow::FlowField f;
        const flow::FlowField* fp = nullptr;
        if (curr == ref + 1) {
            fp = &wf.adj_flow[curr];
        } else {
            flow::BlockMatchConfig fcfg;
            fcfg.block = 8;
            fcfg.search = 4;
            fcfg.levels = 1;
            f = flow::block_matching(wf.gray[ref], wf.gray[curr], wf.w, wf.h, fcfg);
            fp = &f;
        }
        constexpr double kFlowScale = 0.25;  // keep activations near unit range
        for (int i = 0; i < w * h; ++i) {
            v.val()[i] = fp->u[i] * kFlowScale;
            v.val()[size_t(w) * h + i] = fp->v[i] * kFlowScale;
        }
    }
    return v;
}

std::pair<nn::Var, nn::Var> OnsetModel::confidences(const WorkFrames& wf, int prev,
                                                    int curr) const {
    HEMO_CHECK(prev >= 0 && curr >= 0 && prev < wf.length() && curr < wf.length(),
               "confidences: frame index out of range");
    auto run = [&](const std::string& p, const nn::Var& x) {
        auto h1 = nn::relu(nn::conv2d(x, ps_.get(p + "c1.w"), ps_.get(p + "c1.b"), 2, 1));
        auto h2 = nn::relu(nn::conv2d(h1, ps_.get(p + "c2.w"), ps_.get(p + "c2.b"), 2, 1));
        auto h3 = nn::relu(nn::conv2d(h2, ps_.get(p + "c3.w"), ps_.get(p + "c3.b"), 2, 1));
        auto pooled = nn::reshape(nn::global_avgpool(h3), {1, 16});
        return nn::reshape(
            nn::sigmoid(nn::linear(pooled, ps_.get(p + "fc.w"), ps_.get(p + "fc.b"))), {1});
    };
    auto color_in = nn::concat0({nn::sub(wf.rgb[curr], wf.rgb[prev]),
                                 nn::sub(wf.hsv[curr], wf.hsv[prev])});
    auto c_color = run("conf.color.", color_in);
    auto c_flow = run("conf.flow.", flow_planes(wf, prev, curr));
    return {c_color, c_flow};
}

nn::Var OnsetModel::encode_domain(const std::string& prefix, const nn::Var& x) const {
    auto h1 = nn::relu(nn::conv2d(x, ps_.get(prefix + "c1.w"), ps_.get(prefix + "c1.b"), 4, 2));
    return nn::relu(nn::conv2d(h1, ps_.get(prefix + "c2.w"), ps_.get(prefix + "c2.b"), 2, 1));
}

nn::Var OnsetModel::mdg_channel_attention(const nn::Var& cat) const {
    auto pooled = nn::reshape(nn::global_avgpool(cat), {1, cat.dim(0)});
    auto a1 = nn::relu(nn::linear(pooled, ps_.get("mdg.se.fc1.w"), ps_.get("mdg.se.fc1.b")));
    auto a2 = nn::sigmoid(nn::linear(a1, ps_.get("mdg.se.fc2.w"), ps_.get("mdg.se.fc2.b")));
    return nn::scale_channels(cat, nn::reshape(a2, {cat.dim(0)}));
}

nn::Var OnsetModel::mdg_branch(const nn::Var& attended, int i) const {
    const std::string p = "mdg.b" + std::to_string(i) + ".";
    return nn::relu(nn::conv2d(attended, ps_.get(p + "w"), ps_.get(p + "b"), 1, 1));
}

nn::Var OnsetModel::mdg_fuse(const nn::Var& f_rgb, const nn::Var& f_hsv, const nn::Var& f_flow,
                             const double* forced_gates) const {
    HEMO_CHECK(f_rgb.shape() == f_hsv.shape() && f_rgb.shape() == f_flow.shape(),
               "mdg_fuse: domain feature shapes differ");
    auto attended = mdg_channel_attention(nn::concat0({f_rgb, f_hsv, f_flow}));
    nn::Var gates;
    if (forced_gates) {
        gates = nn::Var::leaf({3}, false);
        gates.val() = {forced_gates[0], forced_gates[1], forced_gates[2]};
    } else {
        auto pooled = nn::reshape(nn::global_avgpool(attended), {1, attended.dim(0)});
        gates = nn::reshape(
            nn::sigmoid(nn::linear(pooled, ps_.get("mdg.gate.w"), ps_.get("mdg.gate.b"))), {3});
    }
    // Normalized so the gates form convex mixing weights: a single hot gate
    // selects that branch alone, uniform gates average the branches.
    auto gsum = nn::sum_all(gates);
    nn::Var out;
    for (int i = 0; i < 3; ++i) {
        auto w = nn::div_by_scalar(nn::slice0(gates, i, 1), gsum);
        auto term = nn::mul_by_scalar(mdg_branch(attended, i), w);
        out = out.defined() ? nn::add(out, term) : term;
    }
    return out;
}

nn::Var OnsetModel::pair_features(const WorkFrames& wf, int ref, int curr) const {
    auto f_rgb = encode_domain("enc.rgb.", nn::sub(wf.rgb[curr], wf.rgb[ref]));
    auto f_hsv = encode_domain("enc.hsv.", nn::sub(wf.hsv[curr], wf.hsv[ref]));
    auto f_flow = encode_domain("enc.flow.", flow_planes(wf, ref, curr));
    return mdg_fuse(f_rgb, f_hsv, f_flow);
}

nn::Var OnsetModel::frame_token(const WorkFrames& wf, int t, int keyframe) const {
    HEMO_CHECK(t >= 0 && t < wf.length(), "frame_token: frame out of range");
    HEMO_CHECK(keyframe >= 0 && keyframe < wf.length(), "frame_token: keyframe out of range");
    auto adj = pair_features(wf, std::max(t - 1, 0), t);
    auto key = pair_features(wf, keyframe, t);
    return nn::concat0({nn::global_avgpool(adj), nn::global_avgpool(key)});
}

nn::Var OnsetModel::window_scores(const std::vector<nn::Var>& tokens) const {
    HEMO_CHECK(!tokens.empty(), "window_scores: no tokens");
    const int N = int(tokens.size()), d = cfg_.token_dim;
    std::vector<nn::Var> rows;
    rows.reserve(tokens.size());
    for (const auto& t : tokens) rows.push_back(nn::reshape(t, {1, t.dim(0)}));
    auto x = nn::linear(nn::concat0(rows), ps_.get("tok.proj.w"), ps_.get("tok.proj.b"));
    x = nn::add(x, nn::positional_encoding(N, d));
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "tf.l" + std::to_string(l) + ".";
        auto ln1 = nn::layer_norm(x, ps_.get(p + "ln1.g"), ps_.get(p + "ln1.b"));
        nn::MHSA attn;
        attn.heads = cfg_.heads;
        attn.d = d;
        attn.wq.w = ps_.get(p + "q.w"), attn.wq.b = ps_.get(p + "q.b");
        attn.wk.w = ps_.get(p + "k.w"), attn.wk.b = ps_.get(p + "k.b");
        attn.wv.w = ps_.get(p + "v.w"), attn.wv.b = ps_.get(p + "v.b");
        attn.wo.w = ps_.get(p + "o.w"), attn.wo.b = ps_.get(p + "o.b");
        x = nn::add(x, attn.forward(ln1));
        auto ln2 = nn::layer_norm(x, ps_.get(p + "ln2.g"), ps_.get(p + "ln2.b"));
        auto h = nn::relu(nn::linear(ln2, ps_.get(p + "fc1.w"), ps_.get(p + "fc1.b")));
        x = nn::add(x, nn::linear(h, ps_.get(p + "fc2.w"), ps_.get(p + "fc2.b")));
    }
    auto pooled = nn::reshape(nn::mean0(x), {1, d});
    auto h = nn::relu(nn::linear(pooled, ps_.get("head.fc1.w"), ps_.get("head.fc1.b")));
    return nn::reshape(
        nn::sigmoid(nn::linear(h, ps_.get("head.fc2.w"), ps_.get("head.fc2.b"))), {2});
}

std::vector<char> OnsetModel::gate_decisions(const WorkFrames& wf, const OnsetConfig& cfg) const {
    nn::NoGradGuard ng;
    std::vector<char> stores(wf.length(), 0);
    for (int t = 1; t < wf.length(); ++t) {
        auto [cc, cf] = confidences(wf, t - 1, t);
        stores[t] = gate_stores(cc.item(), cf.item(), cfg) ? 1 : 0;
    }
    return stores;
}

WindowScore OnsetModel::score_window(const WorkFrames& wf, int t0,
                                     const std::vector<int>& keyframe_at,
                                     const OnsetConfig& cfg) const {
    HEMO_CHECK(t0 >= 0 && t0 + cfg.window_N <= wf.length(),
               "score_window: window [", t0, ",", t0 + cfg.window_N, ") outside clip");
    std::vector<nn::Var> tokens;
    tokens.reserve(cfg.window_N);
    for (int u = t0; u < t0 + cfg.window_N; ++u) {
        const int key = keyframe_at[u] >= 0 ? keyframe_at[u] : t0;
        tokens.push_back(frame_token(wf, u, key));
    }
    auto s = window_scores(tokens);
    return {t0, s.val()[0], s.val()[1]};
}

// ---- end-to-end -------------------------------------------------------------------------

OnsetResult locate_onset_prepared(const OnsetModel& model, const WorkFrames& wf,
                                  const OnsetConfig& cfg, bool streaming) {
    const int T = wf.length(), N = cfg.window_N;
    HEMO_CHECK(T >= N, "locate_onset: clip of ", T, " frames is shorter than one window (", N,
               ")");
    nn::NoGradGuard ng;

    // Evolve the clean-view memory through the whole clip via the gate; the
    // per-frame keyframe is the store's most recent entry at that time.
    std::vector<int> keyframe_at(T, -1);
    MemoryStore mem;
    mem.capacity = cfg.memory_capacity;
    for (int t = 1; t < T; ++t) {
        auto [cc, cf] = model.confidences(wf, t - 1, t);
        mem = update_memory(mem, t - 1, t, cc.item(), cf.item(), cfg);
        keyframe_at[t] = mem.most_recent_keyframe();
    }

    OnsetResult res;
    std::vector<WindowScore> scores;
    for (int t0 = 0; t0 + N <= T; ++t0) {
        scores.push_back(model.score_window(wf, t0, keyframe_at, cfg));
        if (streaming && scores.back().s_conf > cfg.conf_decision_threshold) break;
    }
    auto decision = streaming ? decide_streaming(scores, N, cfg.conf_decision_threshold)
                              : decide_offline(scores, N, cfg.conf_decision_threshold);
    if (!decision) return res;
    res.bleeding = true;
    res.onset_frame = std::min(decision->first, T - 1);
    res.window_start = decision->second;
    for (const auto& s : scores)
        if (s.t == res.window_start) {
            res.theta = s.theta;
            res.s_conf = s.s_conf;
        }
    return res;
}

OnsetResult locate_onset(const OnsetModel& model, const video::Clip& clip,
                         const OnsetConfig& cfg, bool streaming) {
    auto wf = prepare_work_frames(clip, model.config());
    return locate_onset_prepared(model, wf, cfg, streaming);
}

// ---- training loss ------------------------------------------------------------------------

nn::Var temporal_loss(const std::vector<std::pair<nn::Var, WindowTarget>>& windows, int N) {
    HEMO_CHECK(!windows.empty(), "temporal_loss: no windows");
    nn::Var neg_acc, pos_acc;
    int n_neg = 0, n_pos = 0;
    for (const auto& [pred, target] : windows) {
        HEMO_CHECK(pred.size() == 2, "temporal_loss: prediction must be (theta, s_conf)");
        auto theta = nn::slice0(nn::reshape(pred, {2}), 0, 1);
        auto s = nn::slice0(nn::reshape(pred, {2}), 1, 1);
        if (target.positive) {
            auto term = nn::bce(s, {1.0});
            nn::Var gt = nn::Var::leaf({1}, false);
            gt.val() = {double(N) * target.theta_gt};
            term = nn::add(term, nn::mse(nn::scale(theta, double(N)), gt));
            pos_acc = pos_acc.defined() ? nn::add(pos_acc, term) : term;
            ++n_pos;
        } else {
            auto term = nn::bce(s, {0.0});
            neg_acc = neg_acc.defined() ? nn::add(neg_acc, term) : term;
            ++n_neg;
        }
    }
    nn::Var loss;
    if (neg_acc.defined()) loss = nn::scale(neg_acc, 1.0 / n_neg);
    if (pos_acc.defined()) {
        auto pos_mean = nn::scale(pos_acc, 1.0 / n_pos);
        loss = loss.defined() ? nn::add(loss, pos_mean) : pos_mean;
    }
    return loss;
}

}  // namespace hemo::onset
