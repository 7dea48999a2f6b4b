#pragma once

#include "soupforge/attack.hpp"

namespace soupforge {

// Exact sweep values for the one knob each attack kind tunes; rationals are
// generated from integer numerators so grid membership tests are exact.
std::vector<double> tune_grid(AttackKind kind);

// The knob a tune grid varies, applied to a copy of the base spec.
AttackSpec with_tune_value(const AttackSpec& base, double value);

// One session per grid value, all other knobs at their defaults, shared base
// seed. Sessions whose grid value equals the default knob value are flagged
// is_default.
std::vector<SessionSpec> make_tune_sessions(const AttackSpec& base, const std::string& surrogate_id,
                                            const std::vector<double>& grid);
std::vector<SessionSpec> make_tune_sessions(const AttackSpec& base, const std::string& surrogate_id);

// m identical specs with derived seeds; jitter > 0 injects seeded gradient
// noise so deterministic kinds still vary across sessions (the stand-in for
// run-to-run backend noise).
std::vector<SessionSpec> make_rand_sessions(const AttackSpec& base, const std::string& surrogate_id, int m,
                                            std::uint64_t base_seed, double jitter);

// Core convex combination: members are aligned per image, sorted by session
// id (then spec text) so the summation order never depends on caller order.
// Refuses members with mismatched originals, labels, epsilon, or config hash.
AdvBatch average_members(const std::vector<const AdvBatch*>& members, const std::vector<double>& weights,
                         const std::string& tag);

AdvBatch average_uniform(const std::vector<const AdvBatch*>& members);

// Rank members by score (higher is better, e.g. hold-out ASR); weights follow
// the arithmetic schedule base+position, position 0 = worst. Tied scores share
// their group's mean position, so fully tied scores give uniform weights.
AdvBatch average_weighted(const std::vector<const AdvBatch*>& members, const std::vector<double>& scores,
                          double schedule_base = 16.0);

enum class FillPolicy {
    Default,  // duplicate the default-hyperparameter member
    Random,   // seeded uniform picks from all members
};
FillPolicy fill_policy_from_string(const std::string& s);

// Keep the k best-scoring members (ties by lower session id), fill the
// remaining m-k multiset slots per policy, then uniform-average the multiset.
AdvBatch average_greedy(const std::vector<const AdvBatch*>& members, const std::vector<double>& scores,
                        int k, FillPolicy fill, std::uint64_t seed);

struct WildResult {
    AdvBatch batch;
    std::vector<int> admitted;  // indices into the candidate list
    bool degenerate = false;    // fewer than 2 admitted: pass-through best
};

// Admit candidates whose score is within the relative band gate of the best
// (score >= best * (1 - gate)); uniform-average the admitted set.
WildResult wild_soup(const std::vector<const AdvBatch*>& candidates, const std::vector<double>& scores,
                     double gate);

}  // namespace soupforge
