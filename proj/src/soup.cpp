#include "soupforge/soup.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace soupforge {

namespace {

std::vector<double> ratio_grid(int lo, int hi, int denom) {
    std::vector<double> g;
    for (int i = lo; i <= hi; ++i) g.push_back(double(i) / double(denom));
    return g;
}

double default_tune_value(AttackKind kind) {
    AttackParams d;
    switch (kind) {
        case AttackKind::MI:
        case AttackKind::NI:
        case AttackKind::SIM: return d.mu;
        case AttackKind::VMI: return double(d.vmi_n);
        case AttackKind::PGN: return d.pgn_delta;
        case AttackKind::DIM: return d.dim_r;
        case AttackKind::Admix: return d.admix_eta;
        case AttackKind::SSA: return d.ssa_rho;
        case AttackKind::FIA: return d.fia_pd;
        case AttackKind::NAA: return d.naa_gamma;
        default: throw ConfigError(std::string(kind_name(kind)) + " has no tuned hyperparameter");
    }
}

}  // namespace

std::vector<double> tune_grid(AttackKind kind) {
    switch (kind) {
        case AttackKind::MI:
        case AttackKind::NI:
        case AttackKind::SIM: return ratio_grid(91, 100, 100);   // decay factor
        case AttackKind::VMI: return ratio_grid(16, 25, 1);      // sample count
        case AttackKind::PGN: return ratio_grid(491, 500, 1000); // balance
        case AttackKind::DIM: return ratio_grid(566, 575, 500);  // resize rate 1.132..1.150
        case AttackKind::Admix: return ratio_grid(191, 200, 1000);
        case AttackKind::SSA: return ratio_grid(100, 109, 200);  // 0.500..0.545
        case AttackKind::FIA: return ratio_grid(51, 60, 200);    // 0.255..0.300
        case AttackKind::NAA: return ratio_grid(91, 100, 100);
        default: throw ConfigError(std::string(kind_name(kind)) + " has no tuned hyperparameter");
    }
}

AttackSpec with_tune_value(const AttackSpec& base, double value) {
    AttackSpec s = base;
    switch (base.kind) {
        case AttackKind::MI:
        case AttackKind::NI:
        case AttackKind::SIM: s.params.mu = value; break;
        case AttackKind::VMI: s.params.vmi_n = int(std::lround(value)); break;
        case AttackKind::PGN: s.params.pgn_delta = value; break;
        case AttackKind::DIM: s.params.dim_r = value; break;
        case AttackKind::Admix: s.params.admix_eta = value; break;
        case AttackKind::SSA: s.params.ssa_rho = value; break;
        case AttackKind::FIA: s.params.fia_pd = value; break;
        case AttackKind::NAA: s.params.naa_gamma = value; break;
        default: throw ConfigError(std::string(kind_name(base.kind)) + " has no tuned hyperparameter");
    }
    s.validate();
    return s;
}

std::vector<SessionSpec> make_tune_sessions(const AttackSpec& base, const std::string& surrogate_id,
                                            const std::vector<double>& grid) {
    if (grid.empty()) throw ConfigError("tune sessions: empty grid");
    double def = default_tune_value(base.kind);
    std::vector<SessionSpec> out;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        SessionSpec s;
        s.id = int(i) + 1;
        s.surrogate_id = surrogate_id;
        s.attack = with_tune_value(base, grid[i]);
        s.is_default = grid[i] == def;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SessionSpec> make_tune_sessions(const AttackSpec& base, const std::string& surrogate_id) {
    return make_tune_sessions(base, surrogate_id, tune_grid(base.kind));
}

std::vector<SessionSpec> make_rand_sessions(const AttackSpec& base, const std::string& surrogate_id, int m,
                                            std::uint64_t base_seed, double jitter) {
    if (m < 1) throw ConfigError("rand sessions: m must be >= 1");
    if (jitter < 0) throw ConfigError("rand sessions: jitter must be nonnegative");
    std::vector<SessionSpec> out;
    for (int i = 1; i <= m; ++i) {
        SessionSpec s;
        s.id = i;
        s.surrogate_id = surrogate_id;
        s.attack = base;
        s.attack.seed = fork_seed(base_seed, std::uint64_t(i));
        s.attack.params.grad_jitter = jitter;
        s.is_default = true;
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void check_soupable(const std::vector<const AdvBatch*>& members) {
    if (members.empty()) throw ConfigError("soup: no members");
    const AdvBatch& first = *members[0];
    if (first.count() == 0) throw ShapeError("soup: empty member batch");
    std::uint64_t oh = first.originals_hash();
    for (const AdvBatch* m : members) {
        if (m->count() != first.count()) throw ShapeError("soup: member batch sizes differ");
        if (m->originals_hash() != oh) throw ConfigError("soup: members disagree on the clean originals");
        if (m->config_hash != first.config_hash)
            throw ConfigError("soup: members come from different configurations");
        if (m->session.attack.epsilon != first.session.attack.epsilon)
            throw ConfigError("soup: members disagree on epsilon");
        for (int i = 0; i < m->count(); ++i) check_same_shape(m->adv[std::size_t(i)], first.adv[std::size_t(i)], "soup");
    }
}

}  // namespace

AdvBatch average_members(const std::vector<const AdvBatch*>& members, const std::vector<double>& weights,
                         const std::string& tag) {
    check_soupable(members);
    if (weights.size() != members.size()) throw ConfigError("soup: one weight per member required");
    double total = 0;
    for (double w : weights) {
        if (!(w >= 0)) throw ConfigError("soup: weights must be nonnegative");
        total += w;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("soup: weights must sum to 1");

    std::vector<std::size_t> order(members.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (members[a]->session.id != members[b]->session.id)
            return members[a]->session.id < members[b]->session.id;
        return members[a]->session.canonical_text() < members[b]->session.canonical_text();
    });

    const AdvBatch& head = *members[order[0]];
    AdvBatch out;
    out.clean = head.clean;
    out.labels = head.labels;
    out.session = head.session;
    out.config_hash = head.config_hash;
    out.adv.resize(std::size_t(head.count()));
    out.final_loss.resize(std::size_t(head.count()));
    for (int i = 0; i < head.count(); ++i) {
        TensorF px(head.adv[std::size_t(i)].shape);
        std::vector<double> accum(px.data.size(), 0.0);
        double loss = 0;
        for (std::size_t oi : order) {
            const AdvBatch& m = *members[oi];
            double w = weights[oi];
            const auto& img = m.adv[std::size_t(i)].data;
            for (std::size_t q = 0; q < img.size(); ++q) accum[q] += w * double(img[q]);
            loss += w * double(m.final_loss[std::size_t(i)]);
        }
        for (std::size_t q = 0; q < px.data.size(); ++q) px.data[q] = float(accum[q]);
        out.adv[std::size_t(i)] = std::move(px);
        out.final_loss[std::size_t(i)] = float(loss);  // bookkeeping: member mean, not re-evaluated
    }

    std::ostringstream prov;
    prov << "soup strategy=" << tag << " members=";
    for (std::size_t k = 0; k < order.size(); ++k) prov << (k ? "," : "") << members[order[k]]->session.id;
    prov << " weights=";
    for (std::size_t k = 0; k < order.size(); ++k) prov << (k ? "," : "") << num(weights[order[k]]);
    out.provenance = prov.str();
    out.session.is_default = false;
    out.validate_budget();  // convexity guarantees this; the check is a tripwire
    return out;
}

AdvBatch average_uniform(const std::vector<const AdvBatch*>& members) {
    if (members.empty()) throw ConfigError("soup: no members");
    std::vector<double> w(members.size(), 1.0 / double(members.size()));
    return average_members(members, w, "uniform");
}

AdvBatch average_weighted(const std::vector<const AdvBatch*>& members, const std::vector<double>& scores,
                          double schedule_base) {
    if (scores.size() != members.size()) throw ConfigError("soup: one score per member required");
    if (members.empty()) throw ConfigError("soup: no members");
    if (schedule_base < 0) throw ConfigError("soup: schedule base must be nonnegative");
    std::size_t m = members.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return members[a]->session.id < members[b]->session.id;
    });
    // fractional ranking: tied scores share their group's mean position, so a
    // fully tied field collapses to uniform weights
    std::vector<double> position(m, 0.0);
    std::size_t g = 0;
    while (g < m) {
        std::size_t h = g;
        while (h + 1 < m && scores[order[h + 1]] == scores[order[g]]) ++h;
        double mean_pos = (double(g) + double(h)) / 2.0;
        for (std::size_t k = g; k <= h; ++k) position[order[k]] = mean_pos;
        g = h + 1;
    }
    std::vector<double> w(m);
    double total = 0;
    for (std::size_t i = 0; i < m; ++i) {
        w[i] = schedule_base + position[i];
        total += w[i];
    }
    if (total <= 0) throw ConfigError("soup: degenerate weight schedule");
    for (auto& v : w) v /= total;
    return average_members(members, w, "weighted");
}

FillPolicy fill_policy_from_string(const std::string& s) {
    if (s == "default") return FillPolicy::Default;
    if (s == "random") return FillPolicy::Random;
    throw ConfigError("soup: unknown fill policy '" + s + "'");
}

AdvBatch average_greedy(const std::vector<const AdvBatch*>& members, const std::vector<double>& scores,
                        int k, FillPolicy fill, std::uint64_t seed) {
    if (scores.size() != members.size()) throw ConfigError("soup: one score per member required");
    int m = int(members.size());
    if (k < 1 || k > m) throw ConfigError("soup: keep count must lie in [1, member count]");
    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[std::size_t(a)] != scores[std::size_t(b)]) return scores[std::size_t(a)] > scores[std::size_t(b)];
        return members[std::size_t(a)]->session.id < members[std::size_t(b)]->session.id;
    });
    std::vector<int> counts(std::size_t(m), 0);
    for (int i = 0; i < k; ++i) ++counts[std::size_t(order[std::size_t(i)])];
    int fill_slots = m - k;
    if (fill_slots > 0) {
        if (fill == FillPolicy::Default) {
            int def = -1;
            for (int i = 0; i < m; ++i)
                if (members[std::size_t(i)]->session.is_default &&
                    (def < 0 || members[std::size_t(i)]->session.id < members[std::size_t(def)]->session.id))
                    def = i;
            if (def < 0) def = order[0];  // no default member in the pool: fall back to the best
            counts[std::size_t(def)] += fill_slots;
        } else {
            Rng rng(fork_seed(seed, 0x50F1));
            for (int s = 0; s < fill_slots; ++s) ++counts[std::size_t(rng.uniform_int(0, m - 1))];
        }
    }
    std::vector<const AdvBatch*> kept;
    std::vector<double> w;
    for (int i = 0; i < m; ++i) {
        if (counts[std::size_t(i)] == 0) continue;
        kept.push_back(members[std::size_t(i)]);
        w.push_back(double(counts[std::size_t(i)]) / double(m));
    }
    return average_members(kept, w, "greedy");
}

WildResult wild_soup(const std::vector<const AdvBatch*>& candidates, const std::vector<double>& scores,
                     double gate) {
    if (scores.size() != candidates.size()) throw ConfigError("soup: one score per candidate required");
    if (candidates.empty()) throw ConfigError("soup: no candidates");
    if (gate < 0 || gate > 1) throw ConfigError("soup: gate must lie in [0,1]");
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    double floor_score = scores[best] * (1.0 - gate);
    WildResult out;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (scores[i] >= floor_score - 1e-12) out.admitted.push_back(int(i));
    if (out.admitted.size() < 2) {
        out.degenerate = true;
        out.admitted = {int(best)};
        out.batch = *candidates[best];
        out.batch.provenance = "soup strategy=wild degenerate pass-through member=" +
                               std::to_string(candidates[best]->session.id);
        return out;
    }
    std::vector<const AdvBatch*> kept;
    for (int i : out.admitted) kept.push_back(candidates[std::size_t(i)]);
    std::vector<double> w(kept.size(), 1.0 / double(kept.size()));
    out.batch = average_members(kept, w, "wild");
    return out;
}

}  // namespace soupforge
