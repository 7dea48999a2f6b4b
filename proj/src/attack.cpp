#include "soupforge/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace soupforge {

using Id = TapeF::Id;
namespace tags = attack_tags;

const char* kind_name(AttackKind k) {
    switch (k) {
        case AttackKind::IFGSM: return "IFGSM";
        case AttackKind::MI: return "MI";
        case AttackKind::NI: return "NI";
        case AttackKind::VMI: return "VMI";
        case AttackKind::PGN: return "PGN";
        case AttackKind::DIM: return "DIM";
        case AttackKind::SIM: return "SIM";
        case AttackKind::Admix: return "Admix";
        case AttackKind::SSA: return "SSA";
        case AttackKind::FIA: return "FIA";
        case AttackKind::NAA: return "NAA";
        case AttackKind::TI: return "TI";
    }
    throw ConfigError("unknown attack kind");
}

AttackKind kind_from_string(const std::string& s) {
    static const AttackKind all[] = {AttackKind::IFGSM, AttackKind::MI,  AttackKind::NI,  AttackKind::VMI,
                                     AttackKind::PGN,   AttackKind::DIM, AttackKind::SIM, AttackKind::Admix,
                                     AttackKind::SSA,   AttackKind::FIA, AttackKind::NAA, AttackKind::TI};
    for (AttackKind k : all)
        if (s == kind_name(k)) return k;
    throw ConfigError("unknown attack kind '" + s + "'");
}

namespace {

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);  // round-trips doubles exactly
    return buf;
}

bool is_momentum_kind(AttackKind k) {
    return k == AttackKind::IFGSM || k == AttackKind::MI || k == AttackKind::NI || k == AttackKind::VMI ||
           k == AttackKind::PGN;
}

bool is_transform_kind(AttackKind k) {
    return k == AttackKind::DIM || k == AttackKind::SIM || k == AttackKind::SSA || k == AttackKind::Admix ||
           k == AttackKind::TI;
}

}  // namespace

void AttackSpec::validate() const {
    if (kind == AttackKind::TI) throw ConfigError("attack: TI is a modifier, pick a base kind");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack: epsilon must lie in [0,1]");
    if (alpha < 0.0) throw ConfigError("attack: alpha must be nonnegative");
    if (iters < 1) throw ConfigError("attack: needs at least one iteration");
    const auto& p = params;
    if (p.mu < 0) throw ConfigError("attack: mu must be nonnegative");
    if (p.vmi_n < 1 || p.pgn_n < 1 || p.sim_n < 1 || p.ssa_n < 1 || p.fia_n < 1 || p.naa_steps < 1)
        throw ConfigError("attack: sample counts must be positive");
    if (p.vmi_beta < 0 || p.pgn_zeta_factor < 0) throw ConfigError("attack: sample radius must be nonnegative");
    if (p.pgn_delta < 0 || p.pgn_delta > 1) throw ConfigError("attack: pgn delta must lie in [0,1]");
    if (p.dim_p < 0 || p.dim_p > 1) throw ConfigError("attack: dim probability must lie in [0,1]");
    if (p.dim_r < 1) throw ConfigError("attack: dim resize rate must be >= 1");
    if (p.admix_eta < 0 || p.admix_mix_count < 0) throw ConfigError("attack: admix settings must be nonnegative");
    if (p.ssa_rho < 0) throw ConfigError("attack: ssa rho must be nonnegative");
    if (p.fia_pd < 0 || p.fia_pd >= 1) throw ConfigError("attack: fia drop probability must lie in [0,1)");
    if (p.naa_gamma < 0) throw ConfigError("attack: naa gamma must be nonnegative");
    if (p.ti_kernel < 1 || p.ti_kernel % 2 == 0) throw ConfigError("attack: ti kernel must be odd");
    if (p.grad_jitter < 0) throw ConfigError("attack: gradient jitter must be nonnegative");
    for (AttackKind m : modifiers) {
        if (!is_transform_kind(m)) throw ConfigError("attack: modifier must be DIM/SIM/SSA/Admix/TI");
        if (kind == AttackKind::FIA || kind == AttackKind::NAA)
            throw ConfigError("attack: feature-level kinds do not take modifiers");
    }
}

std::string AttackSpec::display_name() const {
    if (!label.empty()) return label;
    std::string s = kind_name(kind);
    for (AttackKind m : modifiers) s += std::string("+") + kind_name(m);
    return s;
}

std::string AttackSpec::canonical_text() const {
    std::ostringstream os;
    os << "kind=" << kind_name(kind);
    os << " mods=";
    for (std::size_t i = 0; i < modifiers.size(); ++i) os << (i ? "," : "") << kind_name(modifiers[i]);
    const auto& p = params;
    os << " eps=" << num(epsilon) << " alpha=" << num(alpha) << " iters=" << iters << " seed=" << seed
       << " mu=" << num(p.mu) << " vmi_n=" << p.vmi_n << " vmi_beta=" << num(p.vmi_beta)
       << " pgn_n=" << p.pgn_n << " pgn_delta=" << num(p.pgn_delta)
       << " pgn_zeta_factor=" << num(p.pgn_zeta_factor) << " dim_p=" << num(p.dim_p)
       << " dim_r=" << num(p.dim_r) << " sim_n=" << p.sim_n << " admix_eta=" << num(p.admix_eta)
       << " admix_mix_count=" << p.admix_mix_count << " ssa_rho=" << num(p.ssa_rho) << " ssa_n=" << p.ssa_n
       << " ssa_sigma=" << num(p.ssa_sigma) << " fia_n=" << p.fia_n << " fia_pd=" << num(p.fia_pd)
       << " naa_steps=" << p.naa_steps << " naa_gamma=" << num(p.naa_gamma) << " ti_kernel=" << p.ti_kernel
       << " grad_jitter=" << num(p.grad_jitter);
    return os.str();
}

AttackSpec default_attack(AttackKind kind) {
    AttackSpec s;
    s.kind = kind;
    s.label = kind_name(kind);
    s.validate();
    return s;
}

AttackSpec compose(const std::vector<AttackKind>& chain) {
    if (chain.empty()) throw ConfigError("compose: empty chain");
    AttackSpec s;
    bool have_momentum = false;
    std::string lbl;
    for (AttackKind k : chain) {
        lbl += (lbl.empty() ? "" : "-") + std::string(kind_name(k));
        if (is_momentum_kind(k)) {
            if (have_momentum) throw ConfigError("compose: more than one momentum flavour");
            have_momentum = true;
            s.kind = k;
        } else if (is_transform_kind(k)) {
            s.modifiers.push_back(k);
        } else {
            throw ConfigError(std::string("compose: ") + kind_name(k) + " cannot be chained");
        }
    }
    if (!have_momentum) s.kind = AttackKind::MI;
    s.label = lbl;
    s.validate();
    return s;
}

AttackSpec attack_preset(const std::string& name) {
    AttackSpec s;
    if (name == "TI-DIM") {
        s = compose({AttackKind::TI, AttackKind::MI, AttackKind::DIM});
    } else if (name == "SI-NI-DIM") {
        s = compose({AttackKind::SIM, AttackKind::NI, AttackKind::DIM});
    } else if (name == "SSA-SI-DIM") {
        s = compose({AttackKind::SSA, AttackKind::SIM, AttackKind::DIM});
    } else if (name == "PGN-DIM") {
        s = compose({AttackKind::PGN, AttackKind::DIM});
    } else {
        return default_attack(kind_from_string(name));
    }
    s.label = name;
    return s;
}

std::string SessionSpec::canonical_text() const {
    std::ostringstream os;
    os << "session id=" << id << " surrogate=" << surrogate_id << " default=" << (is_default ? 1 : 0) << " "
       << attack.canonical_text();
    return os.str();
}

SessionSpec parse_session_text(const std::string& text) {
    std::istringstream is(text);
    std::string head;
    is >> head;
    if (head != "session") throw IoError("session text: missing leading tag");
    SessionSpec s;
    s.attack.modifiers.clear();
    std::string tok;
    while (is >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw IoError("session text: expected key=value, got '" + tok + "'");
        std::string key = tok.substr(0, eq);
        std::string val = tok.substr(eq + 1);
        auto as_double = [&] {
            try {
                std::size_t used = 0;
                double v = std::stod(val, &used);
                if (used != val.size()) throw std::invalid_argument("trailing junk");
                return v;
            } catch (const std::logic_error&) {
                throw IoError("session text: bad number for " + key);
            }
        };
        auto as_int = [&] { return int(std::llround(as_double())); };
        AttackParams& p = s.attack.params;
        if (key == "id") s.id = as_int();
        else if (key == "surrogate") s.surrogate_id = val;
        else if (key == "default") s.is_default = as_int() != 0;
        else if (key == "kind") s.attack.kind = kind_from_string(val);
        else if (key == "mods") {
            std::size_t pos = 0;
            while (pos < val.size()) {
                auto comma = val.find(',', pos);
                if (comma == std::string::npos) comma = val.size();
                s.attack.modifiers.push_back(kind_from_string(val.substr(pos, comma - pos)));
                pos = comma + 1;
            }
        } else if (key == "eps") s.attack.epsilon = as_double();
        else if (key == "alpha") s.attack.alpha = as_double();
        else if (key == "iters") s.attack.iters = as_int();
        else if (key == "seed") {
            try {
                std::size_t used = 0;
                s.attack.seed = std::stoull(val, &used);
                if (used != val.size()) throw std::invalid_argument("trailing junk");
            } catch (const std::logic_error&) {
                throw IoError("session text: bad number for " + key);
            }
        }
        else if (key == "mu") p.mu = as_double();
        else if (key == "vmi_n") p.vmi_n = as_int();
        else if (key == "vmi_beta") p.vmi_beta = as_double();
        else if (key == "pgn_n") p.pgn_n = as_int();
        else if (key == "pgn_delta") p.pgn_delta = as_double();
        else if (key == "pgn_zeta_factor") p.pgn_zeta_factor = as_double();
        else if (key == "dim_p") p.dim_p = as_double();
        else if (key == "dim_r") p.dim_r = as_double();
        else if (key == "sim_n") p.sim_n = as_int();
        else if (key == "admix_eta") p.admix_eta = as_double();
        else if (key == "admix_mix_count") p.admix_mix_count = as_int();
        else if (key == "ssa_rho") p.ssa_rho = as_double();
        else if (key == "ssa_n") p.ssa_n = as_int();
        else if (key == "ssa_sigma") p.ssa_sigma = as_double();
        else if (key == "fia_n") p.fia_n = as_int();
        else if (key == "fia_pd") p.fia_pd = as_double();
        else if (key == "naa_steps") p.naa_steps = as_int();
        else if (key == "naa_gamma") p.naa_gamma = as_double();
        else if (key == "ti_kernel") p.ti_kernel = as_int();
        else if (key == "grad_jitter") p.grad_jitter = as_double();
        else throw IoError("session text: unknown key '" + key + "'");
    }
    s.attack.validate();
    return s;
}

std::uint64_t AdvBatch::originals_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& img : clean) h = fnv1a64(img.data.data(), img.data.size() * sizeof(float), h);
    h = fnv1a64(labels.data(), labels.size() * sizeof(int), h);
    return h;
}

void AdvBatch::validate_budget(double slack) const {
    if (adv.size() != clean.size() || adv.size() != labels.size() || adv.size() != final_loss.size())
        throw ShapeError("adv batch: inconsistent member counts");
    double eps = session.attack.epsilon;
    for (std::size_t i = 0; i < adv.size(); ++i) {
        check_same_shape(adv[i], clean[i], "adv batch");
        for (std::size_t q = 0; q < adv[i].data.size(); ++q) {
            double a = double(adv[i].data[q]);
            if (!(a >= 0.0 && a <= 1.0)) throw NumericError("adv batch: pixel outside [0,1]");
            if (std::fabs(a - double(clean[i].data[q])) > eps + slack)
                throw NumericError("adv batch: perturbation exceeds the budget");
        }
    }
}

// ----- building blocks -----

TensorF mi_accumulate(const TensorF& g_prev, const TensorF& grad, double mu) {
    check_same_shape(g_prev, grad, "mi_accumulate");
    double n1 = l1_norm(grad);
    TensorF out(g_prev.shape);
    if (n1 == 0.0) {
        for (std::size_t q = 0; q < out.data.size(); ++q) out.data[q] = float(mu * double(g_prev.data[q]));
        return out;
    }
    for (std::size_t q = 0; q < out.data.size(); ++q)
        out.data[q] = float(mu * double(g_prev.data[q]) + double(grad.data[q]) / n1);
    return out;
}

TensorF ni_lookahead(const TensorF& x, const TensorF& g_prev, double alpha, double mu) {
    check_same_shape(x, g_prev, "ni_lookahead");
    TensorF out(x.shape);
    for (std::size_t q = 0; q < out.data.size(); ++q)
        out.data[q] = float(double(x.data[q]) + alpha * mu * double(g_prev.data[q]));
    return out;
}

VmiStep vmi_gradient(const TensorF& x, const TensorF& grad, const TensorF& v_prev, const GradFn& grad_fn,
                     int n, double beta, double eps, std::uint64_t iter_key) {
    check_same_shape(grad, v_prev, "vmi_gradient");
    VmiStep out;
    out.momentum_input = TensorF(grad.shape);
    for (std::size_t q = 0; q < grad.data.size(); ++q)
        out.momentum_input.data[q] = grad.data[q] + v_prev.data[q];
    if (beta == 0.0 || n < 1) {
        // empty neighbourhood: the sampled mean is the gradient itself
        out.v_next = TensorF(grad.shape);
        return out;
    }
    double radius = beta * eps;
    Rng offsets(fork_seed(iter_key, tags::kVmiOffsets));
    TensorF acc(grad.shape);
    for (int i = 0; i < n; ++i) {
        TensorF xp(x.shape);
        for (std::size_t q = 0; q < xp.data.size(); ++q)
            xp.data[q] = float(double(x.data[q]) + offsets.uniform(-radius, radius));
        TensorF gi = grad_fn(xp, fork_seed(fork_seed(iter_key, tags::kVmiEval), std::uint64_t(i)));
        for (std::size_t q = 0; q < acc.data.size(); ++q) acc.data[q] += gi.data[q];
    }
    out.v_next = TensorF(grad.shape);
    for (std::size_t q = 0; q < acc.data.size(); ++q)
        out.v_next.data[q] = float(double(acc.data[q]) / double(n) - double(grad.data[q]));
    return out;
}

TensorF pgn_gradient(const TensorF& x, const GradFn& grad_fn, int n, double delta, double zeta, double alpha,
                     std::uint64_t iter_key) {
    if (n < 1) throw ConfigError("pgn_gradient: needs at least one sample");
    Rng offsets(fork_seed(iter_key, tags::kPgnOffsets));
    TensorF acc(x.shape);
    for (int i = 0; i < n; ++i) {
        TensorF xp(x.shape);
        for (std::size_t q = 0; q < xp.data.size(); ++q)
            xp.data[q] = float(double(x.data[q]) + offsets.uniform(-zeta, zeta));
        TensorF g1 = grad_fn(xp, fork_seed(fork_seed(iter_key, tags::kPgnEval), std::uint64_t(2 * i)));
        double n1 = l1_norm(g1);
        TensorF g2;
        if (delta == 0.0 || n1 == 0.0) {
            g2 = g1;  // no lookahead contribution (or nowhere to look)
        } else {
            TensorF xq(x.shape);
            for (std::size_t q = 0; q < xq.data.size(); ++q)
                xq.data[q] = float(double(xp.data[q]) + alpha * double(g1.data[q]) / n1);
            g2 = grad_fn(xq, fork_seed(fork_seed(iter_key, tags::kPgnEval), std::uint64_t(2 * i + 1)));
        }
        for (std::size_t q = 0; q < acc.data.size(); ++q)
            acc.data[q] += float((1.0 - delta) * double(g1.data[q]) + delta * double(g2.data[q]));
    }
    if (n > 1)
        for (auto& v : acc.data) v = float(double(v) / double(n));
    return acc;
}

DimDraw dim_draw(int h, double p, double r, Rng& rng) {
    if (h <= 0 || r < 1.0) throw ConfigError("dim_draw: bad size or rate");
    DimDraw d;
    d.canvas = int(std::floor(double(h) * r));
    d.apply = rng.uniform() < p;
    if (!d.apply) return d;
    d.size = rng.uniform_int(h, d.canvas);
    d.top = rng.uniform_int(0, d.canvas - d.size);
    d.left = rng.uniform_int(0, d.canvas - d.size);
    return d;
}

Id dim_apply(TapeF& tape, Id node, const DimDraw& d, int h, int w) {
    if (!d.apply) return node;
    if (h != w) throw ShapeError("dim_apply: inputs must be square");
    auto cur = tape.resize_nearest(node, d.size, d.size);
    cur = tape.pad2d(cur, d.top, d.left, d.canvas, d.canvas);
    return tape.resize_nearest(cur, h, w);
}

SsaDraw ssa_draw(const std::vector<int>& shape, double rho, double sigma, Rng& rng) {
    SsaDraw d;
    d.noise = TensorF(shape);
    d.mask = TensorF(shape);
    for (auto& v : d.noise.data) v = float(sigma * rng.normal());
    for (auto& v : d.mask.data) v = float(rng.uniform(1.0 - rho, 1.0 + rho));
    return d;
}

Id ssa_apply(TapeF& tape, Id node, const SsaDraw& d) {
    auto cur = tape.add(node, tape.constant(d.noise));
    cur = tape.dct2(cur);
    cur = tape.mul(cur, tape.constant(d.mask));
    return tape.idct2(cur);
}

TensorF ti_kernel(int len) {
    if (len < 1 || len % 2 == 0) throw ConfigError("ti_kernel: length must be odd");
    int c = (len - 1) / 2;
    std::vector<double> line(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) line[std::size_t(i)] = 1.0 - std::abs(i - c) / double(c + 1);
    TensorF k({len, len});
    double total = 0;
    for (int y = 0; y < len; ++y)
        for (int x = 0; x < len; ++x) {
            double v = line[std::size_t(y)] * line[std::size_t(x)];
            k.data[std::size_t(y) * len + x] = float(v);
            total += v;
        }
    for (auto& v : k.data) v = float(double(v) / total);
    return k;
}

TensorF ti_smooth(const TensorF& grad, int len) {
    if (len == 1) return grad;
    TapeF tape;
    auto g = tape.constant(grad);
    return tape.value(tape.smooth2d(g, ti_kernel(len)));
}

// ----- the iterative engine -----

namespace {

struct Plan {
    bool ni = false, vmi = false, pgn = false;
    double mu = 1.0;
    bool dim = false;
    double dim_p = 0.5, dim_r = 1.1;
    bool ssa = false;
    int ssa_n = 20;
    double rho = 0.5, sigma = 0.0;
    bool admix = false;
    double eta = 0.2;
    int mix_count = 3;
    int scales = 1;
    int ti_len = 1;
    double jitter = 0.0;
    int vmi_n = 20;
    double vmi_beta = 1.5;
    int pgn_n = 20;
    double pgn_delta = 0.5, pgn_zeta = 0.0;
};

Plan resolve(const AttackSpec& s) {
    s.validate();
    const auto& p = s.params;
    Plan out;
    out.mu = s.kind == AttackKind::IFGSM ? 0.0 : p.mu;
    switch (s.kind) {
        case AttackKind::NI: out.ni = true; break;
        case AttackKind::VMI: out.vmi = true; break;
        case AttackKind::PGN: out.pgn = true; break;
        case AttackKind::DIM: out.dim = true; break;
        case AttackKind::SIM: out.scales = p.sim_n; break;
        case AttackKind::Admix:
            out.admix = true;
            out.scales = p.sim_n;
            break;
        case AttackKind::SSA: out.ssa = true; break;
        default: break;
    }
    for (AttackKind m : s.modifiers) {
        switch (m) {
            case AttackKind::DIM: out.dim = true; break;
            case AttackKind::SIM: out.scales = p.sim_n; break;
            case AttackKind::SSA: out.ssa = true; break;
            case AttackKind::Admix:
                out.admix = true;
                out.scales = p.sim_n;
                break;
            case AttackKind::TI: out.ti_len = p.ti_kernel; break;
            default: throw ConfigError("attack: invalid modifier");
        }
    }
    out.dim_p = p.dim_p;
    out.dim_r = p.dim_r;
    out.ssa_n = p.ssa_n;
    out.rho = p.ssa_rho;
    out.sigma = p.ssa_sigma < 0 ? s.epsilon : p.ssa_sigma;
    out.eta = p.admix_eta;
    out.mix_count = p.admix_mix_count;
    out.jitter = p.grad_jitter;
    out.vmi_n = p.vmi_n;
    out.vmi_beta = p.vmi_beta;
    out.pgn_n = p.pgn_n;
    out.pgn_delta = p.pgn_delta;
    out.pgn_zeta = p.pgn_zeta_factor * s.epsilon;
    // identity knobs collapse to the exact base path
    if (out.admix && (out.eta == 0.0 || out.mix_count == 0)) out.admix = false;
    if (out.ssa && out.rho == 0.0 && out.sigma == 0.0) out.ssa = false;
    return out;
}

// Gradient of the surrogate loss with the transform chain folded in. Loop
// nesting per evaluation: one DIM draw applied outermost, then spectrum
// samples, then mix images, then scale copies innermost.
TensorF raw_gradient(const TensorF& x, const Plan& plan, const Surrogate& sur, int label,
                     const ImageBatch& mix_pool, std::uint64_t key) {
    int h = x.shape[1], w = x.shape[2];
    DimDraw dd;
    if (plan.dim) {
        Rng r(fork_seed(key, tags::kDim));
        dd = dim_draw(h, plan.dim_p, plan.dim_r, r);
    }
    std::vector<int> mixes;
    if (plan.admix) {
        Rng r(fork_seed(key, tags::kAdmix));
        for (int m = 0; m < plan.mix_count; ++m) {
            int cand = r.uniform_int(0, mix_pool.count() - 1);
            for (int tries = 0; tries < 64 && mix_pool.labels[std::size_t(cand)] == label; ++tries)
                cand = r.uniform_int(0, mix_pool.count() - 1);
            mixes.push_back(cand);
        }
    }
    TensorF acc(x.shape);
    int count = 0;
    int ssa_loop = plan.ssa ? plan.ssa_n : 1;
    int mix_loop = plan.admix ? plan.mix_count : 1;
    for (int j = 0; j < ssa_loop; ++j) {
        SsaDraw sd;
        if (plan.ssa) {
            Rng r(fork_seed(fork_seed(key, tags::kSsa), std::uint64_t(j)));
            sd = ssa_draw(x.shape, plan.rho, plan.sigma, r);
        }
        for (int m = 0; m < mix_loop; ++m) {
            for (int i = 0; i < plan.scales; ++i) {
                TapeF tape;
                auto xid = tape.leaf(x);
                Id cur = xid;
                if (plan.admix) {
                    const auto& mix_img = mix_pool.images[std::size_t(mixes[std::size_t(m)])];
                    check_same_shape(x, mix_img, "admix");
                    TensorF scaled(mix_img.shape);
                    for (std::size_t q = 0; q < scaled.data.size(); ++q)
                        scaled.data[q] = float(plan.eta * double(mix_img.data[q]));
                    cur = tape.add(cur, tape.constant(scaled));
                }
                if (i > 0) cur = tape.scalar_mul(cur, 1.0 / double(1 << i));
                if (plan.ssa) cur = ssa_apply(tape, cur, sd);
                if (plan.dim) cur = dim_apply(tape, cur, dd, h, w);
                auto loss = tape.softmax_cross_entropy(ensemble_forward(tape, sur.members, cur), label);
                tape.backward(loss);
                const auto& g = tape.grad(xid);
                for (std::size_t q = 0; q < acc.data.size(); ++q) acc.data[q] += g.data[q];
                ++count;
            }
        }
    }
    if (count > 1)
        for (auto& v : acc.data) v = float(double(v) / double(count));
    if (plan.ti_len > 1) acc = ti_smooth(acc, plan.ti_len);
    if (plan.jitter > 0.0) {
        double rms = l2_norm(acc) / std::sqrt(double(acc.numel()));
        if (rms > 0.0) {
            Rng r(fork_seed(key, tags::kJitter));
            for (auto& v : acc.data) v = float(double(v) + plan.jitter * rms * r.normal());
        }
    }
    return acc;
}

void signed_step(TensorF& x, const TensorF& g, const TensorF& x0, double alpha, double eps, int direction) {
    for (std::size_t q = 0; q < x.data.size(); ++q) {
        double nx = double(x.data[q]) + direction * alpha * double(sign_of(g.data[q]));
        double lo = std::max(0.0, double(x0.data[q]) - eps);
        double hi = std::min(1.0, double(x0.data[q]) + eps);
        x.data[q] = float(nx < lo ? lo : (nx > hi ? hi : nx));
    }
}

float surrogate_loss(const Surrogate& sur, const TensorF& x, int label) {
    TapeF tape;
    auto loss = tape.softmax_cross_entropy(ensemble_forward(tape, sur.members, tape.constant(x)), label);
    return tape.value(loss).data[0];
}

TensorF attack_iterative(const AttackSpec& spec, const Plan& plan, const Surrogate& sur, const TensorF& x0,
                         int label, const ImageBatch& mix_pool, std::uint64_t img_seed) {
    TensorF x = x0, g(x0.shape), v(x0.shape);
    GradFn gfn = [&](const TensorF& pt, std::uint64_t key) {
        return raw_gradient(pt, plan, sur, label, mix_pool, key);
    };
    for (int t = 0; t < spec.iters; ++t) {
        std::uint64_t it_key = fork_seed(fork_seed(img_seed, tags::kIter), std::uint64_t(t));
        TensorF x_eval = plan.ni ? ni_lookahead(x, g, spec.alpha, plan.mu) : x;
        TensorF gm_in;
        if (plan.pgn) {
            gm_in = pgn_gradient(x_eval, gfn, plan.pgn_n, plan.pgn_delta, plan.pgn_zeta, spec.alpha, it_key);
        } else if (plan.vmi) {
            TensorF ghat = gfn(x_eval, fork_seed(it_key, tags::kBaseEval));
            auto step = vmi_gradient(x_eval, ghat, v, gfn, plan.vmi_n, plan.vmi_beta, spec.epsilon, it_key);
            gm_in = std::move(step.momentum_input);
            v = std::move(step.v_next);
        } else {
            gm_in = gfn(x_eval, fork_seed(it_key, tags::kBaseEval));
        }
        g = mi_accumulate(g, gm_in, plan.mu);
        signed_step(x, g, x0, spec.alpha, spec.epsilon, +1);
    }
    return x;
}

void add_jitter(TensorF& g, double jitter, std::uint64_t key) {
    if (jitter <= 0.0) return;
    double rms = l2_norm(g) / std::sqrt(double(g.numel()));
    if (rms <= 0.0) return;
    Rng r(fork_seed(key, tags::kJitter));
    for (auto& v : g.data) v = float(double(v) + jitter * rms * r.normal());
}

// Feature-importance attack: aggregate the true-logit feature gradient over
// masked copies once, then descend sum(delta * f(x)) with momentum.
TensorF attack_fia(const AttackSpec& spec, const Plan& plan, const Surrogate& sur, const TensorF& x0,
                   int label, std::uint64_t img_seed) {
    const ModelF& model = sur.single();
    const auto& p = spec.params;
    TensorF delta_agg;
    int passes = p.fia_pd == 0.0 ? 1 : p.fia_n;  // identity masks all agree
    for (int i = 0; i < passes; ++i) {
        TapeF tape;
        auto xid = tape.leaf(x0);
        Id cur = xid;
        if (p.fia_pd > 0.0) {
            Rng r(fork_seed(fork_seed(img_seed, tags::kFiaMask), std::uint64_t(i)));
            TensorF mask(x0.shape);
            for (auto& v : mask.data) v = r.bernoulli(p.fia_pd) ? 0.0f : 1.0f;
            cur = tape.mul(cur, tape.constant(mask));
        }
        Id tap = -1;
        auto logits = model.forward(tape, cur, &tap);
        tape.backward(tape.pick(logits, label));
        const auto& g = tape.grad(tap);
        if (delta_agg.data.empty()) delta_agg = TensorF(g.shape);
        for (std::size_t q = 0; q < g.data.size(); ++q) delta_agg.data[q] += g.data[q];
    }
    if (passes > 1)
        for (auto& v : delta_agg.data) v = float(double(v) / double(passes));
    double n2 = l2_norm(delta_agg);
    if (n2 == 0.0) throw NumericError("fia: feature importance is identically zero");
    for (auto& v : delta_agg.data) v = float(double(v) / n2);

    TensorF x = x0, g(x0.shape);
    for (int t = 0; t < spec.iters; ++t) {
        std::uint64_t it_key = fork_seed(fork_seed(img_seed, tags::kIter), std::uint64_t(t));
        TapeF tape;
        auto xid = tape.leaf(x);
        Id tap = -1;
        model.forward(tape, xid, &tap);
        tape.backward(tape.sum(tape.mul(tap, tape.constant(delta_agg))));
        TensorF gt = tape.grad(xid);
        add_jitter(gt, plan.jitter, it_key);
        g = mi_accumulate(g, gt, plan.mu);
        signed_step(x, g, x0, spec.alpha, spec.epsilon, -1);
    }
    return x;
}

// Neuron-attribution attack: weight feature deviations from a black baseline
// by the path-integrated loss gradient, then descend the weighted sum.
TensorF attack_naa(const AttackSpec& spec, const Plan& plan, const Surrogate& sur, const TensorF& x0,
                   int label, std::uint64_t img_seed) {
    const ModelF& model = sur.single();
    const auto& p = spec.params;
    TensorF baseline(x0.shape);
    TensorF f0 = features_of(model, baseline);
    TensorF w(f0.shape);
    for (int j = 1; j <= p.naa_steps; ++j) {
        TensorF xj(x0.shape);
        double frac = double(j) / double(p.naa_steps);
        for (std::size_t q = 0; q < xj.data.size(); ++q) xj.data[q] = float(frac * double(x0.data[q]));
        TapeF tape;
        auto xid = tape.leaf(xj);
        Id tap = -1;
        auto logits = model.forward(tape, xid, &tap);
        tape.backward(tape.softmax_cross_entropy(logits, label));
        const auto& g = tape.grad(tap);
        for (std::size_t q = 0; q < w.data.size(); ++q) w.data[q] += g.data[q];
    }
    for (auto& v : w.data) v = float(double(v) / double(p.naa_steps));

    TensorF x = x0, g(x0.shape);
    for (int t = 0; t < spec.iters; ++t) {
        std::uint64_t it_key = fork_seed(fork_seed(img_seed, tags::kIter), std::uint64_t(t));
        TapeF tape;
        auto xid = tape.leaf(x);
        Id tap = -1;
        model.forward(tape, xid, &tap);
        const auto& f = tape.value(tap);
        TensorF weights(w.shape);
        for (std::size_t q = 0; q < weights.data.size(); ++q) {
            double a = (double(f.data[q]) - double(f0.data[q])) * double(w.data[q]);
            weights.data[q] = float((a >= 0.0 ? 1.0 : p.naa_gamma) * double(w.data[q]));
        }
        tape.backward(tape.sum(tape.mul(tape.sub(tap, tape.constant(f0)), tape.constant(weights))));
        TensorF gt = tape.grad(xid);
        add_jitter(gt, plan.jitter, it_key);
        g = mi_accumulate(g, gt, plan.mu);
        signed_step(x, g, x0, spec.alpha, spec.epsilon, -1);
    }
    return x;
}

}  // namespace

AdvBatch run_attack(const SessionSpec& session, const Surrogate& surrogate, const ImageBatch& batch,
                    const AttackOptions& opts) {
    const AttackSpec& spec = session.attack;
    spec.validate();
    batch.validate();
    if (batch.count() == 0) throw ShapeError("run_attack: empty batch");
    if (surrogate.members.empty()) throw ShapeError("run_attack: surrogate has no members");
    Plan plan = resolve(spec);
    if (plan.dim && batch.images[0].shape[1] != batch.images[0].shape[2])
        throw ShapeError("run_attack: diverse-input resizing expects square images");
    const ImageBatch& pool = opts.mix_pool ? *opts.mix_pool : batch;
    if (plan.admix) pool.validate();

    AdvBatch out;
    out.clean = batch.images;
    out.labels = batch.labels;
    out.session = session;
    out.config_hash = opts.config_hash;
    out.adv.resize(std::size_t(batch.count()));
    out.final_loss.resize(std::size_t(batch.count()));
    // Each session owns an independent stream, even when sessions share a base
    // seed: two runs of the same recipe are distinct draws, not replays.
    std::uint64_t stream = fork_seed(spec.seed, std::uint64_t(session.id));
    parallel_for(batch.count(), opts.threads, [&](int i) {
        std::uint64_t img_seed = fork_seed(fork_seed(stream, tags::kImage), std::uint64_t(i));
        const TensorF& x0 = batch.images[std::size_t(i)];
        int label = batch.labels[std::size_t(i)];
        TensorF adv;
        if (spec.kind == AttackKind::FIA)
            adv = attack_fia(spec, plan, surrogate, x0, label, img_seed);
        else if (spec.kind == AttackKind::NAA)
            adv = attack_naa(spec, plan, surrogate, x0, label, img_seed);
        else
            adv = attack_iterative(spec, plan, surrogate, x0, label, pool, img_seed);
        out.final_loss[std::size_t(i)] = surrogate_loss(surrogate, adv, label);
        out.adv[std::size_t(i)] = std::move(adv);
    });
    return out;
}

float adversarial_train(ModelF& m, const ImageBatch& train_data, const ImageBatch& test_data,
                        const AdvTrainConfig& cfg, const AttackSpec& attack) {
    if (cfg.mix_ratio < 0.0 || cfg.mix_ratio > 1.0) throw ConfigError("adversarial_train: mix ratio in [0,1]");
    attack.validate();
    BatchHook hook;
    if (cfg.mix_ratio > 0.0) {
        hook = [&m, &cfg, &attack](ImageBatch& mini, int epoch, int step) {
            int k = int(std::lround(cfg.mix_ratio * mini.count()));
            if (k == 0) return;
            std::vector<int> idx(static_cast<std::size_t>(k));
            for (int i = 0; i < k; ++i) idx[std::size_t(i)] = i;
            SessionSpec s;
            s.surrogate_id = m.id;
            s.attack = attack;
            s.attack.seed = fork_seed(cfg.base.seed,
                                      hash_combine(0xadf, hash_combine(std::uint64_t(epoch), std::uint64_t(step))));
            Surrogate sur{m.id, {&m}};
            AttackOptions ao;
            ao.threads = cfg.base.threads;
            AdvBatch ab = run_attack(s, sur, mini.subset(idx), ao);
            for (int i = 0; i < k; ++i) mini.images[std::size_t(i)] = ab.adv[std::size_t(i)];
        };
    }
    return train_with_hook(m, train_data, test_data, cfg.base, hook);
}

}  // namespace soupforge
