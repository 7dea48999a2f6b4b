#pragma once

#include "soupforge/config.hpp"
#include "soupforge/dataset.hpp"
#include "soupforge/metrics.hpp"
#include "soupforge/soup.hpp"

namespace soupforge {

struct DeskData {
    ImageBatch train;
    ImageBatch test;
    std::string dataset_id;
};

// Synthesize (or load) the dataset named by the config and split it.
DeskData build_desk_data(const ExperimentConfig& cfg);

// Surrogate A plus the transfer targets: B shares A's architecture with a
// different training seed, C is a different architecture, Badv is B's
// adversarially trained twin, D is the held-out ranking model.
struct Zoo {
    ModelF A, B, C, Badv, D;

    std::vector<std::pair<std::string, const ModelF*>> eval_targets() const {
        return {{"B", &B}, {"C", &C}, {"Badv", &Badv}};
    }
    std::vector<const ModelF*> all() const { return {&A, &B, &C, &Badv, &D}; }
};

Zoo build_zoo(const ExperimentConfig& cfg, const DeskData& data);
void save_zoo(const Zoo& zoo, const std::string& dir);
Zoo load_zoo(const std::string& dir);

// Images every zoo model classifies correctly, capped at attack.batch.
ImageBatch select_eval_batch(const ExperimentConfig& cfg, const Zoo& zoo, const DeskData& data);

struct SessionRun {
    SessionSpec spec;
    AdvBatch batch;
    double holdout_asr = 0;  // ASR on D, the ranking signal
};

// One attack kind studied end to end: the default-hyperparameter baseline,
// the hyperparameter-grid sessions, and the repeated-seed sessions.
struct KindStudy {
    AttackSpec base;
    SessionRun baseline;
    std::vector<SessionRun> tune;
    std::vector<SessionRun> rand;
};

KindStudy run_kind_study(const ExperimentConfig& cfg, const AttackSpec& base, int kind_index, const Zoo& zoo,
                         const ImageBatch& eval_batch);

// Derived per-stage seeds, all forked from the master experiment seed.
namespace stage_seeds {
std::uint64_t dataset(const ExperimentConfig& cfg);
std::uint64_t model(const ExperimentConfig& cfg, int which);  // 0=A 1=B 2=C 3=Badv 4=D
std::uint64_t baseline_attack(const ExperimentConfig& cfg, int kind_index);
std::uint64_t tune_attack(const ExperimentConfig& cfg, int kind_index);
std::uint64_t rand_attack(const ExperimentConfig& cfg, int kind_index);
std::uint64_t soup(const ExperimentConfig& cfg);
std::uint64_t flatness(const ExperimentConfig& cfg);
std::uint64_t defense(const ExperimentConfig& cfg);
}  // namespace stage_seeds

// Orchestration stages behind the CLI subcommands. Each reads its inputs from
// cfg.out_dir and leaves its artifacts there.
void stage_train(const ExperimentConfig& cfg);
void stage_attack(const ExperimentConfig& cfg);
void stage_soup(const ExperimentConfig& cfg);
void stage_eval(const ExperimentConfig& cfg);
void stage_flatness(const ExperimentConfig& cfg);
void stage_repro(const ExperimentConfig& cfg);
void run_stage(const std::string& name, const ExperimentConfig& cfg);

}  // namespace soupforge
