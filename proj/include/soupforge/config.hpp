#pragma once

#include <string>

#include "soupforge/attack.hpp"

namespace soupforge {

// Flat dotted-key JSON config. Every knob has a default, so an empty object
// {} is a complete experiment description; unknown keys are rejected.
struct ExperimentConfig {
    // dataset
    std::string dataset_source = "synthetic";  // synthetic | idx
    std::string dataset_idx_images;
    std::string dataset_idx_labels;
    int dataset_classes = 10;
    int dataset_channels = 1;
    int dataset_height = 28;
    int dataset_width = 28;
    int dataset_count = 2400;
    int dataset_modes = 3;         // texture variants per class
    double dataset_texture = 0.28; // texture amplitude relative to the bumps
    double dataset_margin = 0.42;  // class-signal scale; keeps attacks inside the epsilon budget
    double dataset_noise = 0.18;

    // model zoo
    int zoo_epochs = 8;
    double zoo_train_fraction = 0.8;  // per-model seeded subsample of the train split
    double zoo_lr = 0.1;
    int zoo_batch = 32;
    int zoo_test_count = 400;
    std::string zoo_surrogate_arch = "conv2w8";
    std::string zoo_cross_arch = "conv1w16";
    std::string zoo_holdout_arch = "conv2w16";
    double zoo_adv_mix_ratio = 0.15;
    int zoo_adv_iters = 1;
    double zoo_adv_epsilon = 12.0 / 255.0;

    // attack defaults
    double attack_epsilon = 16.0 / 255.0;
    double attack_alpha = 1.6 / 255.0;
    int attack_iters = 10;
    std::string attack_kinds = "MI,DIM";  // comma list or preset names
    int attack_batch = 256;
    double attack_mu = 1.0;
    int attack_vmi_n = 20;
    double attack_vmi_beta = 1.5;
    int attack_pgn_n = 20;
    double attack_pgn_delta = 0.5;
    double attack_pgn_zeta_factor = 3.0;
    double attack_dim_p = 0.5;
    double attack_dim_r = 1.1;
    int attack_sim_n = 5;
    double attack_admix_eta = 0.2;
    int attack_admix_mix_count = 3;
    double attack_ssa_rho = 0.5;
    int attack_ssa_n = 20;
    double attack_ssa_sigma = -1.0;  // < 0: use epsilon
    int attack_fia_n = 30;
    double attack_fia_pd = 0.3;
    int attack_naa_steps = 30;
    double attack_naa_gamma = 1.0;
    int attack_ti_kernel = 7;
    double attack_grad_jitter = 0.5;  // run-noise stand-in applied to every session

    // soup plan
    int soup_m = 10;
    std::string soup_strategy = "all";  // all | uniform | weighted | greedy | wild
    double soup_rand_jitter = -1.0;  // <0 = inherit attack.grad_jitter
    double soup_weighted_base = 16.0;
    int soup_greedy_k = 5;
    std::string soup_greedy_fill = "random";  // random | default
    double soup_wild_gate = 0.2;
    bool soup_quantize = false;

    // evaluation plan
    double eval_flatness_radius = 0.1;
    int eval_flatness_samples = 100;
    double eval_flatness_range = 0.5;
    double eval_flatness_step = 0.025;
    int eval_flatness_images = 8;  // images probed per row for the flatness column
    bool eval_defenses = true;
    int eval_defense_bits = 4;
    int eval_defense_growth = 3;

    // orchestration
    std::uint64_t seed = 42;
    int threads = 0;  // 0 = hardware default
    std::string out_dir = "out";

    void validate() const;
    // Sorted key=value lines; the provenance hash is FNV-1a64 of these bytes.
    std::string canonical_dump() const;
    std::uint64_t hash() const;
    // Attack spec assembled from the defaults above (seed left at 0).
    AttackSpec base_attack(AttackKind kind) const;
    std::vector<AttackSpec> planned_attacks() const;
};

ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
// Full JSON rendering of the given config (every key present).
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace soupforge
