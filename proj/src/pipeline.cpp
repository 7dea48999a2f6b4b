#include "soupforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

#include "json.hpp"
#include "soupforge/archive.hpp"

namespace fs = std::filesystem;

namespace soupforge {

namespace stage_seeds {

std::uint64_t dataset(const ExperimentConfig& cfg) { return fork_seed(cfg.seed, 0xD5); }
std::uint64_t model(const ExperimentConfig& cfg, int which) {
    return fork_seed(fork_seed(cfg.seed, 0x3D0), std::uint64_t(which));
}
std::uint64_t baseline_attack(const ExperimentConfig& cfg, int kind_index) {
    return fork_seed(fork_seed(cfg.seed, 0xA77), std::uint64_t(kind_index));
}
std::uint64_t tune_attack(const ExperimentConfig& cfg, int kind_index) {
    return fork_seed(fork_seed(cfg.seed, 0xA78), std::uint64_t(kind_index));
}
std::uint64_t rand_attack(const ExperimentConfig& cfg, int kind_index) {
    return fork_seed(fork_seed(cfg.seed, 0xA79), std::uint64_t(kind_index));
}
std::uint64_t soup(const ExperimentConfig& cfg) { return fork_seed(cfg.seed, 0x50A); }
std::uint64_t flatness(const ExperimentConfig& cfg) { return fork_seed(cfg.seed, 0xF7A); }
std::uint64_t defense(const ExperimentConfig& cfg) { return fork_seed(cfg.seed, 0xDEF); }

}  // namespace stage_seeds

namespace {

std::string hex16(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)v);
    return buf;
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '-';
    return out;
}

ArchDescriptor arch_by_name(const ExperimentConfig& cfg, const std::string& name) {
    for (const auto& a :
         desk_archs(cfg.dataset_channels, cfg.dataset_height, cfg.dataset_width, cfg.dataset_classes))
        if (a.name == name) return a;
    throw ConfigError("zoo: unknown architecture '" + name + "'");
}

void update_manifest(const ExperimentConfig& cfg, const std::vector<std::string>& new_artifacts) {
    fs::path mpath = fs::path(cfg.out_dir) / "MANIFEST.json";
    std::set<std::string> artifacts(new_artifacts.begin(), new_artifacts.end());
    if (fs::exists(mpath)) {
        try {
            auto doc = nlohmann::json::parse(read_text_file(mpath.string()));
            if (doc.contains("artifacts"))
                for (const auto& a : doc["artifacts"]) artifacts.insert(a.get<std::string>());
        } catch (const std::exception&) {
            // stale or foreign manifest: rebuild from scratch
        }
    }
    nlohmann::json doc;
    doc["config_hash"] = hex16(cfg.hash());
    doc["seed"] = cfg.seed;
    doc["artifacts"] = artifacts;
    write_text_file(mpath.string(), doc.dump(2) + "\n");
}

void require_file(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw ConfigError("missing input " + p.string() + "; " + hint);
}

std::string kind_file_tag(const AttackSpec& s) { return sanitize(s.label.empty() ? s.display_name() : s.label); }

}  // namespace

DeskData build_desk_data(const ExperimentConfig& cfg) {
    ImageBatch full;
    std::string source;
    if (cfg.dataset_source == "synthetic") {
        SynthSpec spec;
        spec.classes = cfg.dataset_classes;
        spec.channels = cfg.dataset_channels;
        spec.height = cfg.dataset_height;
        spec.width = cfg.dataset_width;
        spec.count = cfg.dataset_count;
        spec.modes = cfg.dataset_modes;
        spec.texture = cfg.dataset_texture;
        spec.margin = cfg.dataset_margin;
        spec.noise = cfg.dataset_noise;
        full = synth_dataset(spec, stage_seeds::dataset(cfg));
        source = "synthetic";
    } else {
        full = load_idx(cfg.dataset_idx_images, cfg.dataset_idx_labels);
        source = "idx:" + cfg.dataset_idx_images;
    }
    for (int lbl : full.labels)
        if (lbl < 0 || lbl >= cfg.dataset_classes)
            throw ConfigError("dataset: label " + std::to_string(lbl) + " outside dataset.classes");
    if (full.count() <= cfg.zoo_test_count)
        throw ConfigError("dataset: too small for the configured test split");
    std::vector<int> train_idx, test_idx;
    for (int i = 0; i < full.count() - cfg.zoo_test_count; ++i) train_idx.push_back(i);
    for (int i = full.count() - cfg.zoo_test_count; i < full.count(); ++i) test_idx.push_back(i);
    DeskData d;
    d.train = full.subset(train_idx);
    d.test = full.subset(test_idx);
    d.dataset_id = source + "#" + hex16(full.content_hash());
    return d;
}

Zoo build_zoo(const ExperimentConfig& cfg, const DeskData& data) {
    Zoo zoo;
    TrainConfig tc;
    tc.epochs = cfg.zoo_epochs;
    tc.lr = cfg.zoo_lr;
    tc.batch = cfg.zoo_batch;
    tc.threads = cfg.threads;

    // Each model draws its own training subsample so that seeds produce
    // genuinely different functions, not just different minibatch orders.
    auto shard = [&](int which) {
        int keep = int(std::lround(cfg.zoo_train_fraction * data.train.count()));
        keep = std::max(1, std::min(keep, data.train.count()));
        if (keep == data.train.count()) return data.train;
        Rng rng(mix64(fork_seed(stage_seeds::model(cfg, which), 0x5AB)));
        std::vector<int> all(static_cast<std::size_t>(data.train.count()));
        for (int i = 0; i < data.train.count(); ++i) all[std::size_t(i)] = i;
        for (int i = data.train.count() - 1; i > 0; --i)
            std::swap(all[std::size_t(i)], all[std::size_t(rng.uniform_int(0, i))]);
        all.resize(std::size_t(keep));
        std::sort(all.begin(), all.end());
        return data.train.subset(all);
    };
    auto prep = [&](ModelF& m, const std::string& id, const std::string& arch, int which) {
        m = build_model<float>(arch_by_name(cfg, arch), stage_seeds::model(cfg, which));
        m.id = id;
        m.dataset_id = data.dataset_id;
        tc.seed = fork_seed(stage_seeds::model(cfg, which), 0x7EA);
    };
    prep(zoo.A, "A", cfg.zoo_surrogate_arch, 0);
    train(zoo.A, shard(0), data.test, tc);
    prep(zoo.B, "B", cfg.zoo_surrogate_arch, 1);
    train(zoo.B, shard(1), data.test, tc);
    prep(zoo.C, "C", cfg.zoo_cross_arch, 2);
    train(zoo.C, shard(2), data.test, tc);
    prep(zoo.Badv, "Badv", cfg.zoo_surrogate_arch, 3);
    {
        AdvTrainConfig atc;
        atc.base = tc;
        atc.mix_ratio = cfg.zoo_adv_mix_ratio;
        AttackSpec fgsm;
        fgsm.kind = AttackKind::IFGSM;
        fgsm.label = "IFGSM";
        fgsm.epsilon = cfg.zoo_adv_epsilon;
        fgsm.alpha = cfg.zoo_adv_epsilon;
        fgsm.iters = cfg.zoo_adv_iters;
        // Full split here: the harder mixed objective on top of a subsample
        // destabilizes training at this scale.
        adversarial_train(zoo.Badv, data.train, data.test, atc, fgsm);
    }
    prep(zoo.D, "D", cfg.zoo_holdout_arch, 4);
    train(zoo.D, shard(4), data.test, tc);
    return zoo;
}

void save_zoo(const Zoo& zoo, const std::string& dir) {
    fs::create_directories(dir);
    save_checkpoint(zoo.A, (fs::path(dir) / "A.ckpt").string());
    save_checkpoint(zoo.B, (fs::path(dir) / "B.ckpt").string());
    save_checkpoint(zoo.C, (fs::path(dir) / "C.ckpt").string());
    save_checkpoint(zoo.Badv, (fs::path(dir) / "Badv.ckpt").string());
    save_checkpoint(zoo.D, (fs::path(dir) / "D.ckpt").string());
}

Zoo load_zoo(const std::string& dir) {
    Zoo zoo;
    for (const auto& [name, slot] :
         std::vector<std::pair<std::string, ModelF*>>{{"A", &zoo.A}, {"B", &zoo.B}, {"C", &zoo.C},
                                                      {"Badv", &zoo.Badv}, {"D", &zoo.D}}) {
        fs::path p = fs::path(dir) / (name + ".ckpt");
        require_file(p, "run the train stage first");
        *slot = load_checkpoint(p.string());
    }
    return zoo;
}

ImageBatch select_eval_batch(const ExperimentConfig& cfg, const Zoo& zoo, const DeskData& data) {
    std::vector<int> ok = correctly_classified(data.test, zoo.all(), cfg.threads);
    if (ok.empty()) throw ConfigError("eval batch: no test image is correctly classified by every model");
    if (int(ok.size()) > cfg.attack_batch) ok.resize(std::size_t(cfg.attack_batch));
    return data.test.subset(ok);
}

KindStudy run_kind_study(const ExperimentConfig& cfg, const AttackSpec& base, int kind_index, const Zoo& zoo,
                         const ImageBatch& eval_batch) {
    Surrogate surrogate{zoo.A.id, {&zoo.A}};
    AttackOptions opts;
    opts.threads = cfg.threads;
    opts.config_hash = cfg.hash();

    KindStudy study;
    study.base = base;

    auto run_one = [&](const SessionSpec& s) {
        SessionRun r;
        r.spec = s;
        r.batch = run_attack(s, surrogate, eval_batch, opts);
        r.holdout_asr = attack_success_rate(r.batch, zoo.D, cfg.threads);
        return r;
    };

    SessionSpec baseline;
    baseline.id = 0;
    baseline.surrogate_id = zoo.A.id;
    baseline.attack = base;
    baseline.attack.seed = stage_seeds::baseline_attack(cfg, kind_index);
    baseline.is_default = true;
    study.baseline = run_one(baseline);

    AttackSpec tune_base = base;
    tune_base.seed = stage_seeds::tune_attack(cfg, kind_index);
    for (const SessionSpec& s : make_tune_sessions(tune_base, zoo.A.id)) study.tune.push_back(run_one(s));

    double rand_jitter = cfg.soup_rand_jitter >= 0 ? cfg.soup_rand_jitter : cfg.attack_grad_jitter;
    for (const SessionSpec& s : make_rand_sessions(base, zoo.A.id, cfg.soup_m,
                                                   stage_seeds::rand_attack(cfg, kind_index),
                                                   rand_jitter))
        study.rand.push_back(run_one(s));
    return study;
}

// ----- stages -----

namespace {

fs::path models_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir) / "models"; }
fs::path archives_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir) / "archives"; }
fs::path soups_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir) / "soups"; }
fs::path reports_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir) / "reports"; }

std::string session_file(const std::string& tag, const std::string& group, int id) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%02d", id);
    return tag + "_" + group + "_" + buf + ".adv";
}

std::string fixed4(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

struct LoadedStudy {
    std::string tag;
    AttackSpec base;
    AdvBatch baseline;
    std::vector<AdvBatch> tune;
    std::vector<AdvBatch> rand;
    std::vector<double> tune_holdout;
    std::vector<double> rand_holdout;
};

LoadedStudy load_study(const ExperimentConfig& cfg, const AttackSpec& base, const Zoo& zoo) {
    LoadedStudy s;
    s.tag = kind_file_tag(base);
    s.base = base;
    fs::path dir = archives_dir(cfg);
    fs::path bp = dir / (s.tag + "_baseline_00.adv");
    require_file(bp, "run the attack stage first");
    s.baseline = read_advbatch(bp.string());
    for (int i = 1;; ++i) {
        fs::path p = dir / session_file(s.tag, "tune", i);
        if (!fs::exists(p)) break;
        s.tune.push_back(read_advbatch(p.string()));
    }
    for (int i = 1;; ++i) {
        fs::path p = dir / session_file(s.tag, "rand", i);
        if (!fs::exists(p)) break;
        s.rand.push_back(read_advbatch(p.string()));
    }
    if (s.tune.empty() || s.rand.empty())
        throw ConfigError("missing session archives for " + s.tag + "; run the attack stage first");
    for (const AdvBatch& b : s.tune) s.tune_holdout.push_back(attack_success_rate(b, zoo.D, cfg.threads));
    for (const AdvBatch& b : s.rand) s.rand_holdout.push_back(attack_success_rate(b, zoo.D, cfg.threads));
    return s;
}

std::vector<const AdvBatch*> ptrs(const std::vector<AdvBatch>& v) {
    std::vector<const AdvBatch*> out;
    for (const auto& b : v) out.push_back(&b);
    return out;
}

AdvBatch maybe_quantize(const ExperimentConfig& cfg, const AdvBatch& b) {
    if (!cfg.soup_quantize) return b;
    AdvBatch q = b;
    for (auto& img : q.adv) img = bit_reduction(img, 8);
    q.provenance += " quantized=8bit";
    return q;
}

double batch_flatness(const ExperimentConfig& cfg, const ModelF& surrogate, const AdvBatch& b) {
    FlatnessSpec spec;
    spec.seed = stage_seeds::flatness(cfg);
    spec.radius = cfg.eval_flatness_radius;
    spec.samples = cfg.eval_flatness_samples;
    spec.grid_range = cfg.eval_flatness_range;
    spec.grid_step = cfg.eval_flatness_step;
    int k = std::min(cfg.eval_flatness_images, b.count());
    std::vector<double> vals(static_cast<std::size_t>(k));
    parallel_for(k, cfg.threads, [&](int i) {
        vals[std::size_t(i)] = flatness_probe(surrogate, b.adv[std::size_t(i)], b.labels[std::size_t(i)], spec);
    });
    double acc = 0;
    for (double v : vals) acc += v;
    return acc / double(k);
}

}  // namespace

void stage_train(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    DeskData data = build_desk_data(cfg);
    Zoo zoo = build_zoo(cfg, data);
    save_zoo(zoo, models_dir(cfg).string());
    write_text_file((fs::path(cfg.out_dir) / "config.resolved.json").string(), config_to_json(cfg));
    fs::create_directories(reports_dir(cfg));
    std::ostringstream os;
    os << "model,arch,clean_accuracy\n";
    for (const ModelF* m : zoo.all()) os << m->id << ',' << m->arch.name << ',' << fixed4(m->clean_accuracy) << '\n';
    write_text_file((reports_dir(cfg) / "zoo.csv").string(), os.str());
    update_manifest(cfg, {"config.resolved.json", "models/A.ckpt", "models/B.ckpt", "models/C.ckpt",
                          "models/Badv.ckpt", "models/D.ckpt", "reports/zoo.csv"});
}

void stage_attack(const ExperimentConfig& cfg) {
    DeskData data = build_desk_data(cfg);
    Zoo zoo = load_zoo(models_dir(cfg).string());
    ImageBatch batch = select_eval_batch(cfg, zoo, data);
    fs::create_directories(archives_dir(cfg));
    std::vector<std::string> artifacts;
    std::vector<AttackSpec> kinds = cfg.planned_attacks();
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        KindStudy study = run_kind_study(cfg, kinds[k], int(k), zoo, batch);
        std::string tag = kind_file_tag(study.base);
        auto emit = [&](const SessionRun& r, const std::string& group, int id) {
            std::string name = session_file(tag, group, id);
            write_advbatch((archives_dir(cfg) / name).string(), r.batch);
            artifacts.push_back("archives/" + name);
        };
        emit(study.baseline, "baseline", 0);
        for (std::size_t i = 0; i < study.tune.size(); ++i) emit(study.tune[i], "tune", int(i) + 1);
        for (std::size_t i = 0; i < study.rand.size(); ++i) emit(study.rand[i], "rand", int(i) + 1);
    }
    update_manifest(cfg, artifacts);
}

void stage_soup(const ExperimentConfig& cfg) {
    Zoo zoo = load_zoo(models_dir(cfg).string());
    fs::create_directories(soups_dir(cfg));
    std::vector<std::string> artifacts;
    std::vector<AttackSpec> kinds = cfg.planned_attacks();
    bool all = cfg.soup_strategy == "all";
    std::vector<const AdvBatch*> wild_candidates;
    std::vector<double> wild_scores;
    std::vector<LoadedStudy> studies;
    for (const AttackSpec& base : kinds) studies.push_back(load_study(cfg, base, zoo));
    for (const LoadedStudy& s : studies) {
        auto emit = [&](const AdvBatch& b, const std::string& name) {
            std::string file = s.tag + "_" + name + ".adv";
            write_advbatch((soups_dir(cfg) / file).string(), b);
            artifacts.push_back("soups/" + file);
        };
        if (all || cfg.soup_strategy == "uniform") {
            emit(average_uniform(ptrs(s.tune)), "tune_uniform");
            emit(average_uniform(ptrs(s.rand)), "rand_uniform");
        }
        if (all || cfg.soup_strategy == "weighted")
            emit(average_weighted(ptrs(s.tune), s.tune_holdout, cfg.soup_weighted_base), "tune_weighted");
        if (all || cfg.soup_strategy == "greedy")
            emit(average_greedy(ptrs(s.tune), s.tune_holdout, cfg.soup_greedy_k,
                                fill_policy_from_string(cfg.soup_greedy_fill), stage_seeds::soup(cfg)),
                 "tune_greedy");
    }
    if ((all || cfg.soup_strategy == "wild") && studies.size() >= 2) {
        std::string joined;
        for (const LoadedStudy& s : studies) {
            wild_candidates.push_back(&s.baseline);
            wild_scores.push_back(attack_success_rate(s.baseline, zoo.D, cfg.threads));
            joined += (joined.empty() ? "" : "-") + s.tag;
        }
        WildResult wr = wild_soup(wild_candidates, wild_scores, cfg.soup_wild_gate);
        std::string file = "wild_" + joined + ".adv";
        write_advbatch((soups_dir(cfg) / file).string(), wr.batch);
        artifacts.push_back("soups/" + file);
    }
    update_manifest(cfg, artifacts);
}

void stage_eval(const ExperimentConfig& cfg) {
    Zoo zoo = load_zoo(models_dir(cfg).string());
    fs::create_directories(reports_dir(cfg));
    std::vector<AttackSpec> kinds = cfg.planned_attacks();
    std::vector<EvalRow> rows;
    std::vector<EvalRow> defense_rows;
    std::vector<std::string> artifacts;
    auto targets = zoo.eval_targets();
    targets.emplace_back("D", &zoo.D);

    std::vector<LoadedStudy> studies;
    for (const AttackSpec& base : kinds) studies.push_back(load_study(cfg, base, zoo));
    for (const LoadedStudy& s : studies) {
        const std::string& label = s.base.label;

        auto add_rows = [&](const AdvBatch& b, const std::string& variant, bool defended_too) {
            StealthStats st = stealth_stats(b);
            double flat = batch_flatness(cfg, zoo.A, b);
            for (const auto& [tname, tmodel] : targets) {
                EvalRow r;
                r.surrogate = zoo.A.id;
                r.attack = label;
                r.variant = variant;
                r.target = tname;
                r.asr = attack_success_rate(b, *tmodel, cfg.threads);
                r.l2 = st.mean_l2;
                r.linf = st.max_linf;
                r.psnr = st.mean_psnr;
                r.ssim = st.mean_ssim;
                r.flatness = flat;
                rows.push_back(r);
            }
            if (defended_too && cfg.eval_defenses) {
                for (const auto& [tname, tmodel] : targets) {
                    if (tname == "D") continue;
                    int bits = cfg.eval_defense_bits;
                    EvalRow r;
                    r.surrogate = zoo.A.id;
                    r.attack = label;
                    r.target = tname;
                    r.l2 = st.mean_l2;
                    r.linf = st.max_linf;
                    r.psnr = st.mean_psnr;
                    r.ssim = st.mean_ssim;
                    r.flatness = 0;  // defenses do not change the surrogate landscape
                    r.variant = variant + "+bitred" + std::to_string(bits);
                    r.asr = attack_success_rate(b, *tmodel, cfg.threads,
                                                [bits](const TensorF& x, int) { return bit_reduction(x, bits); });
                    defense_rows.push_back(r);
                    std::uint64_t dseed = stage_seeds::defense(cfg);
                    int growth = cfg.eval_defense_growth;
                    r.variant = variant + "+rp" + std::to_string(growth);
                    r.asr = attack_success_rate(b, *tmodel, cfg.threads, [dseed, growth](const TensorF& x, int i) {
                        return random_resize_pad(x, fork_seed(dseed, std::uint64_t(i)), growth);
                    });
                    defense_rows.push_back(r);
                }
            }
        };

        add_rows(s.baseline, "baseline", true);

        // per-target envelope of the tuning sessions; stealth/flatness columns
        // come from the session that ranks best on the hold-out model
        {
            std::size_t best = 0;
            for (std::size_t i = 1; i < s.tune.size(); ++i)
                if (s.tune_holdout[i] > s.tune_holdout[best]) best = i;
            StealthStats st = stealth_stats(s.tune[best]);
            double flat = batch_flatness(cfg, zoo.A, s.tune[best]);
            for (const auto& [tname, tmodel] : targets) {
                EvalRow r;
                r.surrogate = zoo.A.id;
                r.attack = label;
                r.variant = "best-session";
                r.target = tname;
                r.asr = 0;
                for (const AdvBatch& b : s.tune)
                    r.asr = std::max(r.asr, attack_success_rate(b, *tmodel, cfg.threads));
                r.l2 = st.mean_l2;
                r.linf = st.max_linf;
                r.psnr = st.mean_psnr;
                r.ssim = st.mean_ssim;
                r.flatness = flat;
                rows.push_back(r);
            }
        }

        AdvBatch tune_soup = maybe_quantize(cfg, average_uniform(ptrs(s.tune)));
        AdvBatch rand_soup = maybe_quantize(cfg, average_uniform(ptrs(s.rand)));
        add_rows(tune_soup, "aes-tune", true);
        add_rows(rand_soup, "aes-rand", false);
        add_rows(maybe_quantize(cfg, average_weighted(ptrs(s.tune), s.tune_holdout, cfg.soup_weighted_base)),
                 "soup-weighted", false);
        add_rows(maybe_quantize(cfg, average_greedy(ptrs(s.tune), s.tune_holdout, cfg.soup_greedy_k,
                                                    fill_policy_from_string(cfg.soup_greedy_fill),
                                                    stage_seeds::soup(cfg))),
                 "soup-greedy", false);

        // m-saturation prefixes of the tune soup (ascending session id)
        for (int m = 2; m < int(s.tune.size()); m += 2) {
            std::vector<const AdvBatch*> prefix;
            for (int i = 0; i < m; ++i) prefix.push_back(&s.tune[std::size_t(i)]);
            char buf[32];
            std::snprintf(buf, sizeof buf, "aes-tune-m%02d", m);
            add_rows(maybe_quantize(cfg, average_uniform(prefix)), buf, false);
        }

        // per-session scatter on the same-architecture probe target
        BasinTable basin = basin_diagnostic(ptrs(s.rand), zoo.B, cfg.threads);
        std::ostringstream bs;
        bs << "session,feature,loss,asr\n";
        for (const BasinRow& r : basin.rows)
            bs << r.session_id << ',' << fixed4(r.feature_l2) << ',' << fixed4(r.loss) << ',' << fixed4(r.asr)
               << '\n';
        bs << "mean," << fixed4(basin.mean.feature_l2) << ',' << fixed4(basin.mean.loss) << ','
           << fixed4(basin.mean.asr) << '\n';
        bs << "std," << fixed4(basin.stddev.feature_l2) << ',' << fixed4(basin.stddev.loss) << ','
           << fixed4(basin.stddev.asr) << '\n';
        std::string bfile = "basin_" + s.tag + ".csv";
        write_text_file((reports_dir(cfg) / bfile).string(), bs.str());
        artifacts.push_back("reports/" + bfile);
    }

    // soup across attack kinds, gated on comparable hold-out success
    if (studies.size() >= 2) {
        std::vector<const AdvBatch*> cands;
        std::vector<double> scores;
        std::string joined;
        for (const LoadedStudy& s : studies) {
            cands.push_back(&s.baseline);
            scores.push_back(attack_success_rate(s.baseline, zoo.D, cfg.threads));
            joined += (joined.empty() ? "" : "&") + s.base.label;
        }
        WildResult wr = wild_soup(cands, scores, cfg.soup_wild_gate);
        AdvBatch wb = maybe_quantize(cfg, wr.batch);
        StealthStats st = stealth_stats(wb);
        double flat = batch_flatness(cfg, zoo.A, wb);
        for (const auto& [tname, tmodel] : targets) {
            EvalRow r;
            r.surrogate = zoo.A.id;
            r.attack = joined;
            r.variant = wr.degenerate ? "aes-wild-degenerate" : "aes-wild";
            r.target = tname;
            r.asr = attack_success_rate(wb, *tmodel, cfg.threads);
            r.l2 = st.mean_l2;
            r.linf = st.max_linf;
            r.psnr = st.mean_psnr;
            r.ssim = st.mean_ssim;
            r.flatness = flat;
            rows.push_back(r);
        }
    }

    write_text_file((reports_dir(cfg) / "transfer.csv").string(), render_report(rows));
    artifacts.push_back("reports/transfer.csv");
    if (cfg.eval_defenses) {
        write_text_file((reports_dir(cfg) / "defense.csv").string(), render_report(defense_rows));
        artifacts.push_back("reports/defense.csv");
    }
    update_manifest(cfg, artifacts);
}

void stage_flatness(const ExperimentConfig& cfg) {
    Zoo zoo = load_zoo(models_dir(cfg).string());
    fs::path dir = reports_dir(cfg) / "surfaces";
    fs::create_directories(dir);
    std::vector<std::string> artifacts;
    FlatnessSpec spec;
    spec.seed = stage_seeds::flatness(cfg);
    spec.radius = cfg.eval_flatness_radius;
    spec.samples = cfg.eval_flatness_samples;
    spec.grid_range = cfg.eval_flatness_range;
    spec.grid_step = cfg.eval_flatness_step;
    for (const AttackSpec& base : cfg.planned_attacks()) {
        std::string tag = kind_file_tag(base);
        fs::path bp = archives_dir(cfg) / (tag + "_baseline_00.adv");
        fs::path sp = soups_dir(cfg) / (tag + "_tune_uniform.adv");
        require_file(bp, "run the attack stage first");
        require_file(sp, "run the soup stage first");
        for (const auto& [path, name] :
             std::vector<std::pair<fs::path, std::string>>{{bp, "baseline"}, {sp, "soup"}}) {
            AdvBatch b = read_advbatch(path.string());
            int label = b.labels[0];
            auto loss = [&](const TensorF& p) { return model_loss(zoo.A, p, label); };
            auto grid = flatness_surface(loss, b.adv[0], spec);
            std::string file = tag + "_" + name + ".csv";
            write_text_file((dir / file).string(), render_surface(grid));
            artifacts.push_back("reports/surfaces/" + file);
        }
    }
    update_manifest(cfg, artifacts);
}

void stage_repro(const ExperimentConfig& cfg) {
    stage_train(cfg);
    stage_attack(cfg);
    stage_soup(cfg);
    stage_eval(cfg);
    stage_flatness(cfg);
}

void run_stage(const std::string& name, const ExperimentConfig& cfg) {
    if (name == "train") stage_train(cfg);
    else if (name == "attack") stage_attack(cfg);
    else if (name == "soup") stage_soup(cfg);
    else if (name == "eval") stage_eval(cfg);
    else if (name == "flatness") stage_flatness(cfg);
    else if (name == "repro") stage_repro(cfg);
    else throw ConfigError("unknown subcommand '" + name + "'");
}

}  // namespace soupforge
