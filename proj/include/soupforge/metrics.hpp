#pragma once

#include <array>
#include <functional>
#include <utility>

#include "soupforge/attack.hpp"

namespace soupforge {

// Optional per-image preprocessing (defenses) applied before target inference.
using Preprocess = std::function<TensorF(const TensorF&, int index)>;

// Percentage of adversarial images the target misclassifies.
double attack_success_rate(const AdvBatch& batch, const ModelF& target, int threads = 0,
                           const Preprocess& pre = {});

// Indices of images every listed model classifies correctly; evaluation
// batches are restricted to these.
std::vector<int> correctly_classified(const ImageBatch& data, const std::vector<const ModelF*>& models,
                                      int threads = 0);

double mse(const TensorF& a, const TensorF& b);
// 10*log10(1/MSE) on the [0,1] domain, capped at 99 dB for MSE < 1e-10.
double psnr(const TensorF& a, const TensorF& b);
// Gaussian-window SSIM (11x11, sigma 1.5, C1=0.01^2, C2=0.03^2).
double ssim(const TensorF& a, const TensorF& b);

struct StealthStats {
    double mean_l2 = 0;    // mean per-image l2 of the perturbation
    double max_linf = 0;   // max per-image l-inf of the perturbation
    double mean_psnr = 0;
    double mean_ssim = 0;
};
StealthStats stealth_stats(const AdvBatch& batch);

struct FlatnessSpec {
    std::uint64_t seed = 0;
    double radius = 0.1;
    int samples = 100;
    double grid_range = 0.5;
    double grid_step = 0.025;
};

using LossFn = std::function<double(const TensorF&)>;

// Two seeded orthonormal directions spanning the probe plane.
std::pair<TensorF, TensorF> flatness_directions(const std::vector<int>& shape, std::uint64_t seed);

// Mean |L(center) - L(sample)| over points on the radius circle in the plane
// of the two seeded directions; lower is flatter.
double flatness_probe(const LossFn& loss, const TensorF& center, const FlatnessSpec& spec);
double flatness_probe(const ModelF& model, const TensorF& x_adv, int label, const FlatnessSpec& spec);

// Loss over the (u, v) grid spanned by the same directions, for plotting.
std::vector<std::array<double, 3>> flatness_surface(const LossFn& loss, const TensorF& center,
                                                    const FlatnessSpec& spec);

// Cross-entropy of a model's prediction, accumulated in double.
double model_loss(const ModelF& model, const TensorF& image, int label);

struct BasinRow {
    int session_id = 0;
    double feature_l2 = 0;  // mean feature-tap activation norm over the batch
    double loss = 0;        // mean probe-target loss
    double asr = 0;
};
struct BasinTable {
    std::vector<BasinRow> rows;
    BasinRow mean;
    BasinRow stddev;  // population standard deviation over sessions
};
BasinTable basin_diagnostic(const std::vector<const AdvBatch*>& sessions, const ModelF& probe_target,
                            int threads = 0);

// Defense: quantize to 2^bits levels.
TensorF bit_reduction(const TensorF& x, int bits);
// Defense: seeded nearest resize into [H, H+growth], seeded zero-pad to
// H+growth, then resize back to the original size.
TensorF random_resize_pad(const TensorF& x, std::uint64_t seed, int growth);

// Plain nearest-neighbour resize of a (c,h,w) tensor.
TensorF resize_nearest(const TensorF& x, int oh, int ow);

struct EvalRow {
    std::string surrogate;
    std::string attack;
    std::string variant;
    std::string target;
    double asr = 0;
    double l2 = 0;
    double linf = 0;
    double psnr = 0;
    double ssim = 0;
    double flatness = 0;
};

// CSV with the pinned header, fixed 4-decimal formatting, LF endings.
std::string render_report(const std::vector<EvalRow>& rows);
std::string render_surface(const std::vector<std::array<double, 3>>& grid);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace soupforge
