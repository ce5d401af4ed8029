#pragma once
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hemotrack/image.hpp"
#include "hemotrack/nn.hpp"
#include "hemotrack/rng.hpp"
#include "hemotrack/tensor.hpp"
#include "hemotrack/video_core.hpp"

namespace hemo::detect {

// ---- red prior ------------------------------------------------------------
// Per-pixel score (R/255) * max(0, (R - max(G,B)) / 255) in [0,1].
std::vector<double> red_mask(const img::Image& im);
nn::Var red_mask_map(const img::Image& im);   // {1,H,W} constant tensor
double mean_red_score(const img::Image& im);

// ---- supervision targets ---------------------------------------------------
// Peak-normalized isotropic Gaussian centred at (x,y); value 1 at the peak.
nn::Var gaussian_target(int w, int h, double x, double y, double sigma);
// Default sigma for a frame: fraction of the frame diagonal.
double default_sigma(int w, int h, double frac = 0.02);

// ---- model -----------------------------------------------------------------
struct DetectNetConfig {
    int feat_channels = 32;   // spatial-encoder output channels (stride 8)
    int head_channels = 16;   // heat-map head hidden width
    int fuse_dim = 16;        // Q/K/V projection width per scale
    int num_scales = 4;       // pyramid {H, H/2, H/4, H/8}
    int key_budget = 256;     // max attention keys per scale (subsample above)
};

class DetectModel {
public:
    DetectModel() = default;
    DetectModel(const DetectNetConfig& cfg, uint64_t seed);

    // Coarse candidate map from the raw frame; sigmoid output {1,H,W}.
    nn::Var heat_map_head(const nn::Var& frame) const;
    // Stride-8 spatial features {C, H/8, W/8}; H and W must be divisible by 8.
    nn::Var encode(const nn::Var& frame) const;
    // Scaled-dot-product fusion of heat (Q), red prior (K) and spatial
    // features (V) over num_scales resolutions; output {1,H,W} in [0,1].
    nn::Var fuse_multiscale(const nn::Var& heat, const nn::Var& red,
                            const nn::Var& feat) const;
    // Full single-frame pass: frame planes {3,H,W} -> fused map {1,H,W}.
    nn::Var forward(const nn::Var& frame) const;
    nn::Var forward_image(const img::Image& im) const;

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const DetectNetConfig& config() const { return cfg_; }

private:
    DetectNetConfig cfg_;
    nn::ParamStore ps_;
};

// ---- decisions ---------------------------------------------------------------
// Argmax of a {1,H,W} (or {H,W}) map as pixel coordinates (x,y); ties resolve
// to the smallest row-major index.
std::array<int, 2> locate_source(const nn::Var& map);
std::array<int, 2> locate_source(const std::vector<double>& map, int w, int h);
// Differentiable point estimate: softmax-weighted mean of pixel centres.
nn::Var soft_argmax(const nn::Var& map, double temperature = 1.0);

// ---- training loss -----------------------------------------------------------
struct SpatialLossConfig {
    double lambda1 = 0.5;   // ground-truth heat-map term
    double lambda2 = 0.5;   // pseudo heat-map term (divided by count)
    double delta = 1.0;     // Huber transition for the point term
};
// lambda1*MSE(pred, gt) + (lambda2/N)*sum_i MSE(pred, pseudo_i)
//   + delta-weighted Huber(point_pred, point_gt) summed per axis.
nn::Var spatial_loss(const nn::Var& heat_pred, const nn::Var& heat_gt,
                     const std::vector<nn::Var>& heat_pseudo,
                     const nn::Var& point_pred, const std::array<double, 2>& point_gt,
                     const SpatialLossConfig& cfg = {});

// ---- pseudo seeding ----------------------------------------------------------
struct PropagateConfig {
    int steps = 10;            // frames to chain optical flow through
    double min_texture = 0.002;  // mean |grad| floor (unit-range gray) in the source patch
    int patch = 9;             // texture-check window side
};
struct PropagateResult {
    bool ok = false;
    video::PointLabel point;   // pseudo label at frame start+steps when ok
    std::string reason;        // failure cause when !ok
};
// Chain per-frame optical flow from a human label n frames forward. Degenerate
// texture around the point marks the result as dropped rather than guessing.
PropagateResult propagate_pseudo(const video::Clip& clip, int frame,
                                 const video::PointLabel& label,
                                 const PropagateConfig& cfg = {});

}  // namespace hemo::detect
