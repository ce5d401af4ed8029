#include "hemotrack/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace hemo::nn {

namespace {

void xavier_fill(std::vector<double>& v, const std::vector<int>& shape, Rng& rng) {
    int64_t fan_in = 1, fan_out = 1;
    if (shape.size() == 2) {
        fan_out = shape[0];
        fan_in = shape[1];
    } else if (shape.size() == 4) {
        fan_out = int64_t(shape[0]) * shape[2] * shape[3];
        fan_in = int64_t(shape[1]) * shape[2] * shape[3];
    } else {
        fan_in = fan_out = int64_t(v.size());
    }
    const double s = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto& x : v) x = rng.uniform(-s, s);
}

}  // namespace

Var ParamStore::create(const std::string& name, std::vector<int> shape, Rng& rng) {
    HEMO_CHECK(!by_name_.count(name), "param '", name, "' already exists");
    Var v = Var::leaf(std::move(shape), true);
    xavier_fill(v.val(), v.shape(), rng);
    items_.emplace_back(name, v);
    by_name_[name] = v;
    return v;
}

Var ParamStore::create_zeros(const std::string& name, std::vector<int> shape) {
    HEMO_CHECK(!by_name_.count(name), "param '", name, "' already exists");
    Var v = Var::leaf(std::move(shape), true);
    items_.emplace_back(name, v);
    by_name_[name] = v;
    return v;
}

Var ParamStore::create_const(const std::string& name, std::vector<int> shape, double value) {
    Var v = create_zeros(name, std::move(shape));
    std::fill(v.val().begin(), v.val().end(), value);
    return v;
}

bool ParamStore::has(const std::string& name) const { return by_name_.count(name) > 0; }

Var ParamStore::get(const std::string& name) const {
    auto it = by_name_.find(name);
    HEMO_CHECK(it != by_name_.end(), "no param named '", name, "'");
    return it->second;
}

int64_t ParamStore::param_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : items_) n += v.size();
    return n;
}

int64_t ParamStore::trainable_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : items_)
        if (v.needs_grad()) n += v.size();
    return n;
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, v] : items_)
        if (name.rfind(prefix, 0) == 0) v.node()->needs_grad = trainable;
}

// Checkpoint layout: magic line, 8-byte little-endian header length, JSON
// header (param names/shapes/offsets + user metadata), then raw f64 values.
static const char kMagic[6] = {'H', 'T', 'C', 'K', '1', '\n'};

void save_checkpoint(const std::string& path, const ParamStore& ps, const json& meta) {
    json header;
    header["meta"] = meta;
    json params = json::array();
    int64_t offset = 0;
    for (const auto& [name, v] : ps.items()) {
        json p;
        p["name"] = name;
        p["shape"] = v.shape();
        p["offset"] = offset;
        offset += v.size();
        params.push_back(p);
    }
    header["params"] = params;
    header["total"] = offset;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    HEMO_CHECK(f.good(), "checkpoint: cannot open '", path, "' for writing");
    f.write(kMagic, sizeof(kMagic));
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, v] : ps.items())
        f.write(reinterpret_cast<const char*>(v.val().data()),
                std::streamsize(v.size() * sizeof(double)));
    f.flush();
    HEMO_CHECK(f.good(), "checkpoint: write to '", path, "' failed");
}

namespace {
json read_header(std::ifstream& f, const std::string& path) {
    char magic[6];
    f.read(magic, sizeof(magic));
    HEMO_CHECK(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
               "checkpoint: '", path, "' is not a valid checkpoint file");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    HEMO_CHECK(f.good() && hlen > 0 && hlen < (1ull << 30), "checkpoint: bad header in '", path,
               "'");
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    HEMO_CHECK(f.good(), "checkpoint: truncated header in '", path, "'");
    json header = json::parse(hs, nullptr, false);
    HEMO_CHECK(!header.is_discarded(), "checkpoint: unparsable header in '", path, "'");
    return header;
}
}  // namespace

json load_checkpoint(const std::string& path, ParamStore& ps) {
    std::ifstream f(path, std::ios::binary);
    HEMO_CHECK(f.good(), "checkpoint: cannot open '", path, "'");
    json header = read_header(f, path);
    const auto& params = header.at("params");
    HEMO_CHECK(params.size() == ps.items().size(), "checkpoint: '", path, "' holds ",
               params.size(), " params, model expects ", ps.items().size());
    size_t i = 0;
    for (auto& [name, v] : ps.items()) {
        const auto& p = params[i++];
        HEMO_CHECK(p.at("name").get<std::string>() == name, "checkpoint: param order mismatch at '",
                   name, "'");
        auto shape = p.at("shape").get<std::vector<int>>();
        HEMO_CHECK(shape == v.shape(), "checkpoint: shape mismatch for '", name, "'");
        f.read(reinterpret_cast<char*>(v.val().data()),
               std::streamsize(v.size() * sizeof(double)));
        HEMO_CHECK(f.good(), "checkpoint: truncated values in '", path, "'");
    }
    return header.at("meta");
}

json read_checkpoint_meta(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    HEMO_CHECK(f.good(), "checkpoint: cannot open '", path, "'");
    return read_header(f, path).at("meta");
}

Adam::Adam(ParamStore& ps, double lr, double beta1, double beta2, double eps)
    : ps_(ps), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::zero_grad() {
    for (auto& [name, v] : ps_.items())
        if (v.needs_grad()) v.zero_grad();
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (auto& [name, v] : ps_.items()) {
        if (!v.needs_grad()) continue;
        Var& vv = v;
        if (vv.grad().size() != size_t(vv.size())) continue;  // untouched this step
        auto& [m, s] = state_[name];
        if (m.empty()) {
            m.assign(vv.size(), 0.0);
            s.assign(vv.size(), 0.0);
        }
        auto& val = vv.val();
        const auto& g = vv.grad();
        for (int64_t i = 0; i < vv.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            s[i] = beta2_ * s[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double sh = s[i] / bc2;
            val[i] -= lr_ * mh / (std::sqrt(sh) + eps_);
        }
    }
}

// ---- LoRA ----

int LoraAdapter::effective_rank() const {
    int n = 0;
    for (char k : keep) n += k ? 1 : 0;
    return n;
}

std::vector<double> LoraAdapter::importance() const {
    const int in = a.dim(1), out = b.dim(0);
    std::vector<double> imp(rank, 0.0);
    for (int r = 0; r < rank; ++r) {
        double na = 0.0, nb = 0.0;
        for (int j = 0; j < in; ++j) na += a.val()[int64_t(r) * in + j] * a.val()[int64_t(r) * in + j];
        for (int o = 0; o < out; ++o) nb += b.val()[int64_t(o) * rank + r] * b.val()[int64_t(o) * rank + r];
        imp[r] = std::sqrt(na) * std::sqrt(nb);
    }
    return imp;
}

void LoraAdapter::prune_to(int budget) {
    HEMO_CHECK(budget >= 0, "adapter: negative rank budget");
    auto imp = importance();
    std::vector<int> order(rank);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return imp[x] > imp[y]; });
    std::fill(keep.begin(), keep.end(), 0);
    for (int i = 0; i < std::min(budget, rank); ++i) keep[order[i]] = 1;
    apply_keep_mask();
}

void LoraAdapter::apply_keep_mask() {
    const int in = a.dim(1), out = b.dim(0);
    for (int r = 0; r < rank; ++r) {
        if (keep[r]) continue;
        for (int j = 0; j < in; ++j) a.val()[int64_t(r) * in + j] = 0.0;
        for (int o = 0; o < out; ++o) b.val()[int64_t(o) * rank + r] = 0.0;
    }
}

// ---- layers ----

Linear::Linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng, bool bias) {
    w = ps.create(prefix + ".w", {out, in}, rng);
    if (bias) b = ps.create_zeros(prefix + ".b", {out});
}

Var Linear::forward(const Var& x) const {
    Var y = linear(x, w, b);
    if (adapter) {
        Var lo = linear(linear(x, adapter->a, Var()), adapter->b, Var());
        y = add(y, scale(lo, adapter->scaling));
    }
    return y;
}

void Linear::attach_adapter(ParamStore& ps, const std::string& prefix, int rank, double alpha,
                            Rng& rng) {
    HEMO_CHECK(!adapter, "adapter already attached at ", prefix);
    HEMO_CHECK(rank > 0, "adapter rank must be positive");
    adapter = std::make_shared<LoraAdapter>();
    const int out = w.dim(0), in = w.dim(1);
    adapter->a = ps.create(prefix + ".lora_a", {rank, in}, rng);
    adapter->b = ps.create_zeros(prefix + ".lora_b", {out, rank});
    adapter->rank = rank;
    adapter->scaling = alpha / double(rank);
    adapter->keep.assign(rank, 1);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& prefix, int cin, int cout, int k, int stride_,
               int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    w = ps.create(prefix + ".w", {cout, cin, k, k}, rng);
    b = ps.create_zeros(prefix + ".b", {cout});
}

LayerNormP::LayerNormP(ParamStore& ps, const std::string& prefix, int d) {
    gamma = ps.create_const(prefix + ".gamma", {d}, 1.0);
    beta = ps.create_zeros(prefix + ".beta", {d});
}

MHSA::MHSA(ParamStore& ps, const std::string& prefix, int d_, int heads_, Rng& rng)
    : heads(heads_), d(d_) {
    HEMO_CHECK(d % heads == 0, "attention width ", d, " not divisible by ", heads, " heads");
    wq = Linear(ps, prefix + ".wq", d, d, rng);
    wk = Linear(ps, prefix + ".wk", d, d, rng);
    wv = Linear(ps, prefix + ".wv", d, d, rng);
    wo = Linear(ps, prefix + ".wo", d, d, rng);
}

Var MHSA::forward(const Var& x) const {
    const int t = x.dim(0);
    const int dh = d / heads;
    auto split = [&](const Var& v) { return permute102(reshape(v, {t, heads, dh})); };
    Var q = split(wq.forward(x));
    Var k = split(wk.forward(x));
    Var v = split(wv.forward(x));
    Var scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(double(dh)));
    Var attn = softmax_last(scores);
    Var ctx = bmm(attn, v);                       // {H,T,dh}
    Var merged = reshape(permute102(ctx), {t, d});
    return wo.forward(merged);
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& prefix, int d, int heads,
                                   int ffn, Rng& rng) {
    ln1 = LayerNormP(ps, prefix + ".ln1", d);
    ln2 = LayerNormP(ps, prefix + ".ln2", d);
    attn = MHSA(ps, prefix + ".attn", d, heads, rng);
    fc1 = Linear(ps, prefix + ".fc1", d, ffn, rng);
    fc2 = Linear(ps, prefix + ".fc2", ffn, d, rng);
}

Var TransformerBlock::forward(const Var& x) const {
    Var h = add(x, attn.forward(ln1.forward(x)));
    return add(h, fc2.forward(relu(fc1.forward(ln2.forward(h)))));
}

Var positional_encoding(int t, int d) {
    Var pe = Var::leaf({t, d}, false);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < d; j += 2) {
            const double freq = std::pow(10000.0, -double(j) / double(d));
            pe.val()[int64_t(i) * d + j] = std::sin(i * freq);
            if (j + 1 < d) pe.val()[int64_t(i) * d + j + 1] = std::cos(i * freq);
        }
    }
    return pe;
}

GradCheckResult grad_check(const std::function<Var()>& loss_fn, std::vector<Var> wrt, double eps,
                           double floor_denom) {
    for (auto& v : wrt) v.zero_grad();
    Var loss = loss_fn();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& v : wrt) {
        if (v.grad().size() != size_t(v.size())) v.zero_grad();
        analytic.push_back(v.grad());
    }

    GradCheckResult res;
    NoGradGuard ng;
    for (size_t pi = 0; pi < wrt.size(); ++pi) {
        auto& v = wrt[pi];
        for (int64_t i = 0; i < v.size(); ++i) {
            const double old = v.val()[i];
            v.val()[i] = old + eps;
            const double lp = loss_fn().item();
            v.val()[i] = old - eps;
            const double lm = loss_fn().item();
            v.val()[i] = old;
            const double gn = (lp - lm) / (2.0 * eps);
            const double ga = analytic[pi][i];
            const double denom = std::max({std::abs(ga), std::abs(gn), floor_denom});
            const double rel = std::abs(ga - gn) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "param " + std::to_string(pi) + "[" + std::to_string(i) +
                            "] analytic=" + std::to_string(ga) + " numeric=" + std::to_string(gn);
            }
        }
    }
    return res;
}

}  // namespace hemo::nn
