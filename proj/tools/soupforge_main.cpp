#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "soupforge/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"adversarial example soup laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;

    struct StageDesc {
        const char* name;
        const char* help;
    };
    const std::vector<StageDesc> stages = {
        {"train", "build the dataset and train the model zoo"},
        {"attack", "run the per-kind attack sessions and archive them"},
        {"soup", "average archived sessions into soups"},
        {"eval", "score archives and soups against the transfer targets"},
        {"flatness", "export loss-surface grids around selected examples"},
        {"repro", "run every stage in order from a clean output directory"},
    };
    for (const auto& s : stages) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        sub->add_option("--config", config_path, "experiment config (flat JSON)")->required();
        sub->add_option("--seed", seed, "override experiment.seed");
        sub->add_option("--out", out_dir, "override experiment.out_dir");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    CLI::App* chosen = app.get_subcommands().front();
    try {
        soupforge::ExperimentConfig cfg = soupforge::load_config(config_path);
        if (chosen->count("--seed")) cfg.seed = seed;
        if (chosen->count("--out")) cfg.out_dir = out_dir;
        cfg.validate();
        soupforge::run_stage(chosen->get_name(), cfg);
        return 0;
    } catch (const soupforge::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
