#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "soupforge/model.hpp"
#include "soupforge/rng.hpp"

namespace soupforge {

enum class AttackKind {
    IFGSM,
    MI,
    NI,
    VMI,
    PGN,
    DIM,
    SIM,
    Admix,
    SSA,
    FIA,
    NAA,
    // gradient smoothing; only valid as a modifier on top of another kind
    TI,
};

const char* kind_name(AttackKind k);
AttackKind kind_from_string(const std::string& s);

struct AttackParams {
    double mu = 1.0;                // momentum decay (MI/NI and friends)
    int vmi_n = 20;                 // variance-tuning samples
    double vmi_beta = 1.5;          // neighbourhood radius factor (times eps)
    int pgn_n = 20;                 // gradient-norm-penalty samples
    double pgn_delta = 0.5;         // lookahead blend
    double pgn_zeta_factor = 3.0;   // sample radius (times eps)
    double dim_p = 0.5;             // transform probability
    double dim_r = 1.1;             // max resize rate
    int sim_n = 5;                  // scale copies (x / 2^i)
    double admix_eta = 0.2;         // mix strength
    int admix_mix_count = 3;        // sampled mix images per step
    double ssa_rho = 0.5;           // spectrum mask amplitude
    int ssa_n = 20;                 // spectrum samples
    double ssa_sigma = -1.0;        // spectrum noise std; < 0 means "use eps"
    int fia_n = 30;                 // aggregation passes
    double fia_pd = 0.3;            // mask drop probability
    int naa_steps = 30;             // path integration steps
    double naa_gamma = 1.0;         // negative-attribution weight
    int ti_kernel = 7;              // triangle kernel length when TI is on
    double grad_jitter = 0.0;       // relative gradient noise (backend-noise stand-in)
};

struct AttackSpec {
    AttackKind kind = AttackKind::MI;
    std::vector<AttackKind> modifiers;  // any of DIM, SIM, SSA, Admix, TI
    double epsilon = 16.0 / 255.0;
    double alpha = 1.6 / 255.0;
    int iters = 10;
    AttackParams params;
    std::uint64_t seed = 0;
    std::string label;  // display name; defaults to the kind/modifier chain

    void validate() const;
    std::string display_name() const;
    std::string canonical_text() const;
};

AttackSpec default_attack(AttackKind kind);
// Merge a chain of kinds (at most one momentum flavour plus transform
// modifiers) into a single spec.
AttackSpec compose(const std::vector<AttackKind>& chain);
// Named integrated attacks: "TI-DIM", "SI-NI-DIM", "SSA-SI-DIM", "PGN-DIM".
AttackSpec attack_preset(const std::string& name);

struct SessionSpec {
    int id = 0;
    std::string surrogate_id;
    AttackSpec attack;
    bool is_default = false;

    std::uint64_t seed() const { return attack.seed; }
    std::string canonical_text() const;
};

// Inverse of SessionSpec::canonical_text (used by the archive reader).
SessionSpec parse_session_text(const std::string& text);

struct Surrogate {
    std::string id;
    std::vector<const ModelF*> members;

    const ModelF& single() const {
        if (members.size() != 1) throw ShapeError("surrogate: expected a single model");
        return *members[0];
    }
};

struct AdvBatch {
    std::vector<TensorF> adv;
    std::vector<TensorF> clean;
    std::vector<int> labels;
    std::vector<float> final_loss;  // surrogate loss at the final iterate
    SessionSpec session;
    std::string provenance;  // non-empty for soups and other derived batches
    std::uint64_t config_hash = 0;

    int count() const { return int(adv.size()); }
    std::uint64_t originals_hash() const;
    // eps-ball and pixel-range invariants, with slack for float accumulation
    void validate_budget(double slack = 1e-6) const;
};

struct AttackOptions {
    const ImageBatch* mix_pool = nullptr;  // Admix source; defaults to the batch itself
    int threads = 0;
    std::uint64_t config_hash = 0;
};

AdvBatch run_attack(const SessionSpec& session, const Surrogate& surrogate, const ImageBatch& batch,
                    const AttackOptions& opts = {});

// ----- building blocks, exposed for direct testing -----

// g_next = mu * g_prev + grad / l1(grad); a zero gradient only decays.
TensorF mi_accumulate(const TensorF& g_prev, const TensorF& grad, double mu);

// Nesterov-style lookahead point x + alpha * mu * g_prev.
TensorF ni_lookahead(const TensorF& x, const TensorF& g_prev, double alpha, double mu);

// Gradient of the surrogate loss at an arbitrary point, with the spec's input
// transforms folded in; callers provide it to the sampling helpers below.
using GradFn = std::function<TensorF(const TensorF& point, std::uint64_t eval_key)>;

struct VmiStep {
    TensorF momentum_input;  // grad + v_prev (normalization happens in mi_accumulate)
    TensorF v_next;
};
VmiStep vmi_gradient(const TensorF& x, const TensorF& grad, const TensorF& v_prev, const GradFn& grad_fn,
                     int n, double beta, double eps, std::uint64_t iter_key);

TensorF pgn_gradient(const TensorF& x, const GradFn& grad_fn, int n, double delta, double zeta, double alpha,
                     std::uint64_t iter_key);

struct DimDraw {
    bool apply = false;
    int canvas = 0;  // padded side length, floor(h * r)
    int size = 0;
    int top = 0;
    int left = 0;
};
DimDraw dim_draw(int h, double p, double r, Rng& rng);
TapeF::Id dim_apply(TapeF& tape, TapeF::Id node, const DimDraw& d, int h, int w);

struct SsaDraw {
    TensorF noise;  // added in pixel space before the DCT
    TensorF mask;   // multiplied onto the spectrum
};
SsaDraw ssa_draw(const std::vector<int>& shape, double rho, double sigma, Rng& rng);
TapeF::Id ssa_apply(TapeF& tape, TapeF::Id node, const SsaDraw& d);

// Normalized 2-d triangle kernel and the gradient smoothing built on it.
TensorF ti_kernel(int len);
TensorF ti_smooth(const TensorF& grad, int len);

// RNG stream tags used inside one gradient evaluation / iteration. Tests
// replay draws by forking the same streams.
namespace attack_tags {
constexpr std::uint64_t kImage = 0xA1;
constexpr std::uint64_t kIter = 0xA2;
constexpr std::uint64_t kBaseEval = 0xA3;
constexpr std::uint64_t kDim = 0xA4;
constexpr std::uint64_t kAdmix = 0xA5;
constexpr std::uint64_t kSsa = 0xA6;
constexpr std::uint64_t kJitter = 0xA7;
constexpr std::uint64_t kVmiOffsets = 0xA8;
constexpr std::uint64_t kVmiEval = 0xA9;
constexpr std::uint64_t kPgnOffsets = 0xAA;
constexpr std::uint64_t kPgnEval = 0xAB;
constexpr std::uint64_t kFiaMask = 0xAC;
}  // namespace attack_tags

}  // namespace soupforge
