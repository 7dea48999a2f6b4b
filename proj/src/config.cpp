#include "soupforge/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "soupforge/model.hpp"

namespace soupforge {

namespace {

using nlohmann::json;

struct Field {
    enum Type { Int, Double, Bool, Str, U64 } type;
    void* (*ptr)(ExperimentConfig&);
    std::string (*render)(const ExperimentConfig&);
};

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

#define FIELD_INT(member)                                                              \
    Field{Field::Int, [](ExperimentConfig& c) -> void* { return &c.member; },          \
          [](const ExperimentConfig& c) { return std::to_string(c.member); }}
#define FIELD_DOUBLE(member)                                                           \
    Field{Field::Double, [](ExperimentConfig& c) -> void* { return &c.member; },       \
          [](const ExperimentConfig& c) { return num(c.member); }}
#define FIELD_BOOL(member)                                                             \
    Field{Field::Bool, [](ExperimentConfig& c) -> void* { return &c.member; },         \
          [](const ExperimentConfig& c) { return c.member ? std::string("true") : std::string("false"); }}
#define FIELD_STR(member)                                                              \
    Field{Field::Str, [](ExperimentConfig& c) -> void* { return &c.member; },          \
          [](const ExperimentConfig& c) { return c.member; }}
#define FIELD_U64(member)                                                              \
    Field{Field::U64, [](ExperimentConfig& c) -> void* { return &c.member; },          \
          [](const ExperimentConfig& c) { return std::to_string(c.member); }}

const std::vector<std::pair<std::string, Field>>& field_table() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"dataset.source", FIELD_STR(dataset_source)},
        {"dataset.idx_images", FIELD_STR(dataset_idx_images)},
        {"dataset.idx_labels", FIELD_STR(dataset_idx_labels)},
        {"dataset.classes", FIELD_INT(dataset_classes)},
        {"dataset.channels", FIELD_INT(dataset_channels)},
        {"dataset.height", FIELD_INT(dataset_height)},
        {"dataset.width", FIELD_INT(dataset_width)},
        {"dataset.count", FIELD_INT(dataset_count)},
        {"dataset.modes", FIELD_INT(dataset_modes)},
        {"dataset.texture", FIELD_DOUBLE(dataset_texture)},
        {"dataset.margin", FIELD_DOUBLE(dataset_margin)},
        {"dataset.noise", FIELD_DOUBLE(dataset_noise)},
        {"zoo.epochs", FIELD_INT(zoo_epochs)},
        {"zoo.train_fraction", FIELD_DOUBLE(zoo_train_fraction)},
        {"zoo.lr", FIELD_DOUBLE(zoo_lr)},
        {"zoo.batch", FIELD_INT(zoo_batch)},
        {"zoo.test_count", FIELD_INT(zoo_test_count)},
        {"zoo.surrogate_arch", FIELD_STR(zoo_surrogate_arch)},
        {"zoo.cross_arch", FIELD_STR(zoo_cross_arch)},
        {"zoo.holdout_arch", FIELD_STR(zoo_holdout_arch)},
        {"zoo.adv_mix_ratio", FIELD_DOUBLE(zoo_adv_mix_ratio)},
        {"zoo.adv_iters", FIELD_INT(zoo_adv_iters)},
        {"zoo.adv_epsilon", FIELD_DOUBLE(zoo_adv_epsilon)},
        {"attack.epsilon", FIELD_DOUBLE(attack_epsilon)},
        {"attack.alpha", FIELD_DOUBLE(attack_alpha)},
        {"attack.iters", FIELD_INT(attack_iters)},
        {"attack.kinds", FIELD_STR(attack_kinds)},
        {"attack.batch", FIELD_INT(attack_batch)},
        {"attack.mu", FIELD_DOUBLE(attack_mu)},
        {"attack.vmi_n", FIELD_INT(attack_vmi_n)},
        {"attack.vmi_beta", FIELD_DOUBLE(attack_vmi_beta)},
        {"attack.pgn_n", FIELD_INT(attack_pgn_n)},
        {"attack.pgn_delta", FIELD_DOUBLE(attack_pgn_delta)},
        {"attack.pgn_zeta_factor", FIELD_DOUBLE(attack_pgn_zeta_factor)},
        {"attack.dim_p", FIELD_DOUBLE(attack_dim_p)},
        {"attack.dim_r", FIELD_DOUBLE(attack_dim_r)},
        {"attack.sim_n", FIELD_INT(attack_sim_n)},
        {"attack.admix_eta", FIELD_DOUBLE(attack_admix_eta)},
        {"attack.admix_mix_count", FIELD_INT(attack_admix_mix_count)},
        {"attack.ssa_rho", FIELD_DOUBLE(attack_ssa_rho)},
        {"attack.ssa_n", FIELD_INT(attack_ssa_n)},
        {"attack.ssa_sigma", FIELD_DOUBLE(attack_ssa_sigma)},
        {"attack.fia_n", FIELD_INT(attack_fia_n)},
        {"attack.fia_pd", FIELD_DOUBLE(attack_fia_pd)},
        {"attack.naa_steps", FIELD_INT(attack_naa_steps)},
        {"attack.naa_gamma", FIELD_DOUBLE(attack_naa_gamma)},
        {"attack.ti_kernel", FIELD_INT(attack_ti_kernel)},
        {"attack.grad_jitter", FIELD_DOUBLE(attack_grad_jitter)},
        {"soup.m", FIELD_INT(soup_m)},
        {"soup.strategy", FIELD_STR(soup_strategy)},
        {"soup.rand_jitter", FIELD_DOUBLE(soup_rand_jitter)},
        {"soup.weighted_base", FIELD_DOUBLE(soup_weighted_base)},
        {"soup.greedy_k", FIELD_INT(soup_greedy_k)},
        {"soup.greedy_fill", FIELD_STR(soup_greedy_fill)},
        {"soup.wild_gate", FIELD_DOUBLE(soup_wild_gate)},
        {"soup.quantize", FIELD_BOOL(soup_quantize)},
        {"eval.flatness_radius", FIELD_DOUBLE(eval_flatness_radius)},
        {"eval.flatness_samples", FIELD_INT(eval_flatness_samples)},
        {"eval.flatness_range", FIELD_DOUBLE(eval_flatness_range)},
        {"eval.flatness_step", FIELD_DOUBLE(eval_flatness_step)},
        {"eval.flatness_images", FIELD_INT(eval_flatness_images)},
        {"eval.defenses", FIELD_BOOL(eval_defenses)},
        {"eval.defense_bits", FIELD_INT(eval_defense_bits)},
        {"eval.defense_growth", FIELD_INT(eval_defense_growth)},
        {"experiment.seed", FIELD_U64(seed)},
        {"experiment.threads", FIELD_INT(threads)},
        {"experiment.out_dir", FIELD_STR(out_dir)},
    };
    return table;
}

#undef FIELD_INT
#undef FIELD_DOUBLE
#undef FIELD_BOOL
#undef FIELD_STR
#undef FIELD_U64

void assign(ExperimentConfig& cfg, const std::string& key, const Field& f, const json& v) {
    switch (f.type) {
        case Field::Int:
            if (!v.is_number_integer()) throw ConfigError("config: " + key + " must be an integer");
            *static_cast<int*>(f.ptr(cfg)) = v.get<int>();
            break;
        case Field::Double:
            if (!v.is_number()) throw ConfigError("config: " + key + " must be a number");
            *static_cast<double*>(f.ptr(cfg)) = v.get<double>();
            break;
        case Field::Bool:
            if (!v.is_boolean()) throw ConfigError("config: " + key + " must be a boolean");
            *static_cast<bool*>(f.ptr(cfg)) = v.get<bool>();
            break;
        case Field::Str:
            if (!v.is_string()) throw ConfigError("config: " + key + " must be a string");
            *static_cast<std::string*>(f.ptr(cfg)) = v.get<std::string>();
            break;
        case Field::U64:
            if (!v.is_number_unsigned() && !v.is_number_integer())
                throw ConfigError("config: " + key + " must be a nonnegative integer");
            *static_cast<std::uint64_t*>(f.ptr(cfg)) = v.get<std::uint64_t>();
            break;
    }
}

}  // namespace

ExperimentConfig config_from_json_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    ExperimentConfig cfg;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (it.value().is_object() || it.value().is_array())
            throw ConfigError("config: key '" + it.key() + "' must be scalar (use flat dotted keys)");
        bool found = false;
        for (const auto& [key, field] : field_table()) {
            if (key == it.key()) {
                assign(cfg, key, field, it.value());
                found = true;
                break;
            }
        }
        if (!found) throw ConfigError("config: unknown key '" + it.key() + "'");
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return config_from_json_text(os.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json doc = json::object();
    ExperimentConfig& mut = const_cast<ExperimentConfig&>(cfg);
    for (const auto& [key, field] : field_table()) {
        switch (field.type) {
            case Field::Int: doc[key] = *static_cast<const int*>(field.ptr(mut)); break;
            case Field::Double: doc[key] = *static_cast<const double*>(field.ptr(mut)); break;
            case Field::Bool: doc[key] = *static_cast<const bool*>(field.ptr(mut)); break;
            case Field::Str: doc[key] = *static_cast<const std::string*>(field.ptr(mut)); break;
            case Field::U64: doc[key] = *static_cast<const std::uint64_t*>(field.ptr(mut)); break;
        }
    }
    return doc.dump(2) + "\n";
}

std::string ExperimentConfig::canonical_dump() const {
    std::vector<std::pair<std::string, std::string>> items;
    for (const auto& [key, field] : field_table()) items.emplace_back(key, field.render(*this));
    std::sort(items.begin(), items.end());
    std::ostringstream os;
    for (const auto& [k, v] : items) os << k << '=' << v << '\n';
    return os.str();
}

std::uint64_t ExperimentConfig::hash() const {
    std::string dump = canonical_dump();
    return fnv1a64(dump.data(), dump.size());
}

void ExperimentConfig::validate() const {
    if (dataset_source != "synthetic" && dataset_source != "idx")
        throw ConfigError("config: dataset.source must be synthetic or idx");
    if (dataset_source == "idx" && (dataset_idx_images.empty() || dataset_idx_labels.empty()))
        throw ConfigError("config: idx source needs dataset.idx_images and dataset.idx_labels");
    if (dataset_classes < 2) throw ConfigError("config: dataset.classes must be >= 2");
    if (dataset_channels < 1 || dataset_height < 1 || dataset_width < 1)
        throw ConfigError("config: dataset dimensions must be positive");
    if (dataset_count < 2) throw ConfigError("config: dataset.count must be >= 2");
    if (dataset_modes < 1) throw ConfigError("config: dataset.modes must be >= 1");
    if (dataset_texture < 0) throw ConfigError("config: dataset.texture must be nonnegative");
    if (dataset_noise < 0 || dataset_margin <= 0) throw ConfigError("config: bad dataset margin/noise");
    if (zoo_epochs < 1 || zoo_batch < 1) throw ConfigError("config: bad zoo training plan");
    if (zoo_train_fraction <= 0 || zoo_train_fraction > 1)
        throw ConfigError("config: zoo.train_fraction must lie in (0,1]");
    if (zoo_lr < 0) throw ConfigError("config: zoo.lr must be nonnegative");
    if (zoo_test_count < 1 || zoo_test_count >= dataset_count)
        throw ConfigError("config: zoo.test_count must leave a training split");
    for (const std::string* arch : {&zoo_surrogate_arch, &zoo_cross_arch, &zoo_holdout_arch}) {
        bool known = false;
        for (const auto& a : desk_archs(dataset_channels, dataset_height, dataset_width, dataset_classes))
            known = known || a.name == *arch;
        if (!known) throw ConfigError("config: unknown architecture '" + *arch + "'");
    }
    if (zoo_adv_mix_ratio < 0 || zoo_adv_mix_ratio > 1)
        throw ConfigError("config: zoo.adv_mix_ratio must lie in [0,1]");
    if (zoo_adv_iters < 1) throw ConfigError("config: zoo.adv_iters must be >= 1");
    if (zoo_adv_epsilon < 0 || zoo_adv_epsilon > 1)
        throw ConfigError("config: zoo.adv_epsilon must lie in [0,1]");
    if (attack_batch < 1) throw ConfigError("config: attack.batch must be >= 1");
    if (soup_m < 1) throw ConfigError("config: soup.m must be >= 1");
    if (soup_strategy != "all" && soup_strategy != "uniform" && soup_strategy != "weighted" &&
        soup_strategy != "greedy" && soup_strategy != "wild")
        throw ConfigError("config: unknown soup.strategy '" + soup_strategy + "'");
    if (soup_rand_jitter < 0 && soup_rand_jitter != -1.0)
        throw ConfigError("config: soup.rand_jitter must be nonnegative (or -1 to inherit attack.grad_jitter)");
    if (attack_grad_jitter < 0) throw ConfigError("config: attack.grad_jitter must be nonnegative");
    if (soup_weighted_base < 0) throw ConfigError("config: soup.weighted_base must be nonnegative");
    if (soup_greedy_k < 1 || soup_greedy_k > soup_m)
        throw ConfigError("config: soup.greedy_k must lie in [1, soup.m]");
    if (soup_greedy_fill != "random" && soup_greedy_fill != "default")
        throw ConfigError("config: soup.greedy_fill must be random or default");
    if (soup_wild_gate < 0 || soup_wild_gate > 1)
        throw ConfigError("config: soup.wild_gate must lie in [0,1]");
    if (eval_flatness_radius <= 0 || eval_flatness_samples < 1 || eval_flatness_step <= 0 ||
        eval_flatness_range <= 0)
        throw ConfigError("config: bad flatness probe settings");
    if (eval_flatness_images < 1) throw ConfigError("config: eval.flatness_images must be >= 1");
    if (eval_defense_bits < 1 || eval_defense_bits > 16)
        throw ConfigError("config: eval.defense_bits must lie in [1,16]");
    if (eval_defense_growth < 0) throw ConfigError("config: eval.defense_growth must be nonnegative");
    if (threads < 0) throw ConfigError("config: experiment.threads must be nonnegative");
    if (out_dir.empty()) throw ConfigError("config: experiment.out_dir must not be empty");
    // the attack block must itself be a valid spec for every planned kind
    for (const AttackSpec& s : planned_attacks()) s.validate();
}

AttackSpec ExperimentConfig::base_attack(AttackKind kind) const {
    AttackSpec s;
    s.kind = kind;
    s.label = kind_name(kind);
    s.epsilon = attack_epsilon;
    s.alpha = attack_alpha;
    s.iters = attack_iters;
    AttackParams& p = s.params;
    p.mu = attack_mu;
    p.vmi_n = attack_vmi_n;
    p.vmi_beta = attack_vmi_beta;
    p.pgn_n = attack_pgn_n;
    p.pgn_delta = attack_pgn_delta;
    p.pgn_zeta_factor = attack_pgn_zeta_factor;
    p.dim_p = attack_dim_p;
    p.dim_r = attack_dim_r;
    p.sim_n = attack_sim_n;
    p.admix_eta = attack_admix_eta;
    p.admix_mix_count = attack_admix_mix_count;
    p.ssa_rho = attack_ssa_rho;
    p.ssa_n = attack_ssa_n;
    p.ssa_sigma = attack_ssa_sigma;
    p.fia_n = attack_fia_n;
    p.fia_pd = attack_fia_pd;
    p.naa_steps = attack_naa_steps;
    p.naa_gamma = attack_naa_gamma;
    p.ti_kernel = attack_ti_kernel;
    p.grad_jitter = attack_grad_jitter;
    return s;
}

std::vector<AttackSpec> ExperimentConfig::planned_attacks() const {
    std::vector<AttackSpec> out;
    std::size_t pos = 0;
    while (pos <= attack_kinds.size()) {
        auto comma = attack_kinds.find(',', pos);
        if (comma == std::string::npos) comma = attack_kinds.size();
        std::string name = attack_kinds.substr(pos, comma - pos);
        if (name.empty()) throw ConfigError("config: attack.kinds has an empty entry");
        AttackSpec preset = attack_preset(name);  // validates the name
        AttackSpec s = base_attack(preset.kind);
        s.modifiers = preset.modifiers;
        s.label = preset.label;
        out.push_back(std::move(s));
        pos = comma + 1;
        if (comma == attack_kinds.size()) break;
    }
    if (out.empty()) throw ConfigError("config: attack.kinds must name at least one attack");
    return out;
}

}  // namespace soupforge
