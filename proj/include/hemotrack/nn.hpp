#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemotrack/rng.hpp"
#include "hemotrack/tensor.hpp"

namespace hemo::nn {

using json = nlohmann::ordered_json;

// Named parameter registry. Insertion order is the serialization order, so
// checkpoints are byte-stable for a fixed architecture.
class ParamStore {
public:
    // Xavier-uniform init (or zeros/constant via explicit helpers below).
    Var create(const std::string& name, std::vector<int> shape, Rng& rng);
    Var create_zeros(const std::string& name, std::vector<int> shape);
    Var create_const(const std::string& name, std::vector<int> shape, double value);

    bool has(const std::string& name) const;
    Var get(const std::string& name) const;
    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
    std::vector<std::pair<std::string, Var>>& items() { return items_; }

    int64_t param_count() const;
    int64_t trainable_count() const;
    // Enables/disables gradients for every parameter whose name starts with
    // `prefix` ("" = all).
    void set_trainable(const std::string& prefix, bool trainable);

private:
    std::vector<std::pair<std::string, Var>> items_;
    std::map<std::string, Var> by_name_;
};

void save_checkpoint(const std::string& path, const ParamStore& ps, const json& meta);
// Loads values into existing parameters (names and shapes must match the
// store exactly); returns the stored metadata.
json load_checkpoint(const std::string& path, ParamStore& ps);
json read_checkpoint_meta(const std::string& path);

class Adam {
public:
    explicit Adam(ParamStore& ps, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    void zero_grad();
    void step();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    ParamStore& ps_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

// ---- layers ----

// Low-rank adapter attached to a Linear. `b` starts at zero so the adapted
// layer is exactly the base layer until training moves it. `keep` masks rank
// components for the adaptive-rank mode.
struct LoraAdapter {
    Var a;  // {rank, in}
    Var b;  // {out, rank}
    int rank = 0;
    double scaling = 1.0;
    std::vector<char> keep;

    int effective_rank() const;
    // Importance of component i: |a_i| * |b_i| (L2 norms).
    std::vector<double> importance() const;
    void prune_to(int budget);
    void apply_keep_mask();  // zeroes pruned components in-place
};

struct Linear {
    Var w, b;
    std::shared_ptr<LoraAdapter> adapter;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng, bool bias = true);
    Var forward(const Var& x) const;
    void attach_adapter(ParamStore& ps, const std::string& prefix, int rank, double alpha,
                        Rng& rng);
};

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& prefix, int cin, int cout, int k, int stride,
           int pad, Rng& rng);
    Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LayerNormP {
    Var gamma, beta;

    LayerNormP() = default;
    LayerNormP(ParamStore& ps, const std::string& prefix, int d);
    Var forward(const Var& x) const { return layer_norm(x, gamma, beta); }
};

// Multi-head self-attention over a {T,d} sequence.
struct MHSA {
    Linear wq, wk, wv, wo;
    int heads = 1, d = 0;

    MHSA() = default;
    MHSA(ParamStore& ps, const std::string& prefix, int d, int heads, Rng& rng);
    Var forward(const Var& x) const;
};

// Pre-norm transformer encoder block.
struct TransformerBlock {
    LayerNormP ln1, ln2;
    MHSA attn;
    Linear fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& prefix, int d, int heads, int ffn,
                     Rng& rng);
    Var forward(const Var& x) const;
};

// Sinusoidal positional encoding rows for a {T,d} sequence.
Var positional_encoding(int t, int d);

// Central-difference gradient check: returns max relative error between
// analytic and numeric gradients of `loss_fn` w.r.t. the given parameters.
// Relative error uses max(|g_a|, |g_n|, floor) as the denominator.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};
GradCheckResult grad_check(const std::function<Var()>& loss_fn, std::vector<Var> wrt,
                           double eps = 1e-4, double floor_denom = 1e-6);

}  // namespace hemo::nn
