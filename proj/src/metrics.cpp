#include "soupforge/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace soupforge {

namespace {

double ce_from_logits(const TensorF& logits, int label) {
    if (logits.shape.size() != 1) throw ShapeError("loss: logits must be 1-d");
    int n = logits.shape[0];
    if (label < 0 || label >= n) throw ShapeError("loss: label out of range");
    double m = -1e300;
    for (float v : logits.data) m = std::max(m, double(v));
    double s = 0;
    for (float v : logits.data) s += std::exp(double(v) - m);
    return std::log(s) + m - double(logits.data[std::size_t(label)]);
}

}  // namespace

double attack_success_rate(const AdvBatch& batch, const ModelF& target, int threads, const Preprocess& pre) {
    if (batch.count() == 0) throw ShapeError("asr: empty batch");
    std::vector<char> miss(std::size_t(batch.count()), 0);
    parallel_for(batch.count(), threads, [&](int i) {
        TensorF img = pre ? pre(batch.adv[std::size_t(i)], i) : batch.adv[std::size_t(i)];
        miss[std::size_t(i)] = predict(target, img) != batch.labels[std::size_t(i)] ? 1 : 0;
    });
    int hits = 0;
    for (char f : miss) hits += f;
    return 100.0 * double(hits) / double(batch.count());
}

std::vector<int> correctly_classified(const ImageBatch& data, const std::vector<const ModelF*>& models,
                                      int threads) {
    data.validate();
    std::vector<char> ok(std::size_t(data.count()), 1);
    parallel_for(data.count(), threads, [&](int i) {
        for (const ModelF* m : models)
            if (predict(*m, data.images[std::size_t(i)]) != data.labels[std::size_t(i)]) {
                ok[std::size_t(i)] = 0;
                return;
            }
    });
    std::vector<int> idx;
    for (int i = 0; i < data.count(); ++i)
        if (ok[std::size_t(i)]) idx.push_back(i);
    return idx;
}

double mse(const TensorF& a, const TensorF& b) {
    check_same_shape(a, b, "mse");
    double s = 0;
    for (std::size_t q = 0; q < a.data.size(); ++q) {
        double d = double(a.data[q]) - double(b.data[q]);
        s += d * d;
    }
    return s / double(a.data.size());
}

double psnr(const TensorF& a, const TensorF& b) {
    double m = mse(a, b);
    if (m < 1e-10) return 99.0;
    return 10.0 * std::log10(1.0 / m);
}

double ssim(const TensorF& a, const TensorF& b) {
    check_same_shape(a, b, "ssim");
    if (a.shape.size() != 3) throw ShapeError("ssim: expects (c,h,w)");
    int c = a.shape[0], h = a.shape[1], w = a.shape[2];
    int win = std::min({11, h, w});
    if (win % 2 == 0) --win;
    if (win < 1) throw ShapeError("ssim: image too small");
    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    std::vector<double> kern(std::size_t(win) * win);
    int half = win / 2;
    double total = 0;
    for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
            double dy = y - half, dx = x - half;
            double v = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            kern[std::size_t(y) * win + x] = v;
            total += v;
        }
    for (auto& v : kern) v /= total;

    double acc = 0;
    long windows = 0;
    for (int ch = 0; ch < c; ++ch) {
        const float* pa = a.data.data() + std::size_t(ch) * h * w;
        const float* pb = b.data.data() + std::size_t(ch) * h * w;
        for (int y = 0; y + win <= h; ++y)
            for (int x = 0; x + win <= w; ++x) {
                double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int ky = 0; ky < win; ++ky)
                    for (int kx = 0; kx < win; ++kx) {
                        double wgt = kern[std::size_t(ky) * win + kx];
                        double xa = double(pa[std::size_t(y + ky) * w + (x + kx)]);
                        double xb = double(pb[std::size_t(y + ky) * w + (x + kx)]);
                        ma += wgt * xa;
                        mb += wgt * xb;
                        va += wgt * xa * xa;
                        vb += wgt * xb * xb;
                        cov += wgt * xa * xb;
                    }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                double num = (2 * ma * mb + c1) * (2 * cov + c2);
                double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
                ++windows;
            }
    }
    if (windows == 0) throw ShapeError("ssim: no full window fits");
    return acc / double(windows);
}

StealthStats stealth_stats(const AdvBatch& batch) {
    if (batch.count() == 0) throw ShapeError("stealth: empty batch");
    StealthStats s;
    for (int i = 0; i < batch.count(); ++i) {
        const TensorF& adv = batch.adv[std::size_t(i)];
        const TensorF& cln = batch.clean[std::size_t(i)];
        check_same_shape(adv, cln, "stealth");
        double l2 = 0, linf = 0;
        for (std::size_t q = 0; q < adv.data.size(); ++q) {
            double d = double(adv.data[q]) - double(cln.data[q]);
            l2 += d * d;
            linf = std::max(linf, std::fabs(d));
        }
        s.mean_l2 += std::sqrt(l2);
        s.max_linf = std::max(s.max_linf, linf);
        s.mean_psnr += psnr(cln, adv);
        s.mean_ssim += ssim(cln, adv);
    }
    s.mean_l2 /= batch.count();
    s.mean_psnr /= batch.count();
    s.mean_ssim /= batch.count();
    return s;
}

std::pair<TensorF, TensorF> flatness_directions(const std::vector<int>& shape, std::uint64_t seed) {
    Rng rng(mix64(hash_combine(seed, 0xF1A7)));
    TensorF d1(shape), d2(shape);
    for (int attempt = 0;; ++attempt) {
        for (auto& v : d1.data) v = float(rng.normal());
        for (auto& v : d2.data) v = float(rng.normal());
        double n1 = l2_norm(d1);
        if (n1 < 1e-12) continue;
        for (auto& v : d1.data) v = float(double(v) / n1);
        double dot = 0;
        for (std::size_t q = 0; q < d1.data.size(); ++q) dot += double(d1.data[q]) * double(d2.data[q]);
        for (std::size_t q = 0; q < d2.data.size(); ++q)
            d2.data[q] = float(double(d2.data[q]) - dot * double(d1.data[q]));
        double n2 = l2_norm(d2);
        if (n2 >= 1e-12) {
            for (auto& v : d2.data) v = float(double(v) / n2);
            return {d1, d2};
        }
        if (attempt > 64) throw NumericError("flatness: cannot build two independent directions");
    }
}

namespace {

TensorF plane_point(const TensorF& center, const TensorF& d1, const TensorF& d2, double u, double v) {
    TensorF p(center.shape);
    for (std::size_t q = 0; q < p.data.size(); ++q)
        p.data[q] = float(double(center.data[q]) + u * double(d1.data[q]) + v * double(d2.data[q]));
    return p;
}

}  // namespace

double flatness_probe(const LossFn& loss, const TensorF& center, const FlatnessSpec& spec) {
    if (spec.radius <= 0) throw ConfigError("flatness: radius must be positive");
    if (spec.samples < 1) throw ConfigError("flatness: needs at least one sample");
    auto [d1, d2] = flatness_directions(center.shape, spec.seed);
    double center_loss = loss(center);
    double acc = 0;
    for (int k = 0; k < spec.samples; ++k) {
        double th = 2.0 * std::acos(-1.0) * double(k) / double(spec.samples);
        TensorF p = plane_point(center, d1, d2, spec.radius * std::cos(th), spec.radius * std::sin(th));
        acc += std::fabs(center_loss - loss(p));
    }
    return acc / double(spec.samples);
}

double model_loss(const ModelF& model, const TensorF& image, int label) {
    return ce_from_logits(logits_of(model, image), label);
}

double flatness_probe(const ModelF& model, const TensorF& x_adv, int label, const FlatnessSpec& spec) {
    return flatness_probe([&](const TensorF& p) { return model_loss(model, p, label); }, x_adv, spec);
}

std::vector<std::array<double, 3>> flatness_surface(const LossFn& loss, const TensorF& center,
                                                    const FlatnessSpec& spec) {
    if (spec.grid_step <= 0) throw ConfigError("flatness: grid step must be positive");
    auto [d1, d2] = flatness_directions(center.shape, spec.seed);
    int steps = int(std::floor(spec.grid_range / spec.grid_step + 1e-9));
    std::vector<std::array<double, 3>> out;
    for (int i = -steps; i <= steps; ++i)
        for (int j = -steps; j <= steps; ++j) {
            double u = i * spec.grid_step, v = j * spec.grid_step;
            out.push_back({u, v, loss(plane_point(center, d1, d2, u, v))});
        }
    return out;
}

BasinTable basin_diagnostic(const std::vector<const AdvBatch*>& sessions, const ModelF& probe_target,
                            int threads) {
    if (sessions.empty()) throw ConfigError("basin: no sessions");
    BasinTable table;
    for (const AdvBatch* s : sessions) {
        if (s->count() == 0) throw ShapeError("basin: empty session batch");
        std::vector<double> feats(std::size_t(s->count()));
        std::vector<double> losses(std::size_t(s->count()));
        std::vector<char> miss(std::size_t(s->count()), 0);
        parallel_for(s->count(), threads, [&](int i) {
            const TensorF& img = s->adv[std::size_t(i)];
            feats[std::size_t(i)] = l2_norm(features_of(probe_target, img));
            TensorF logits = logits_of(probe_target, img);
            losses[std::size_t(i)] = ce_from_logits(logits, s->labels[std::size_t(i)]);
            int pred = 0;
            for (int k = 1; k < logits.shape[0]; ++k)
                if (logits.data[std::size_t(k)] > logits.data[std::size_t(pred)]) pred = k;
            miss[std::size_t(i)] = pred != s->labels[std::size_t(i)] ? 1 : 0;
        });
        BasinRow row;
        row.session_id = s->session.id;
        for (int i = 0; i < s->count(); ++i) {
            row.feature_l2 += feats[std::size_t(i)];
            row.loss += losses[std::size_t(i)];
            row.asr += miss[std::size_t(i)];
        }
        row.feature_l2 /= s->count();
        row.loss /= s->count();
        row.asr = 100.0 * row.asr / s->count();
        table.rows.push_back(row);
    }
    // Anchor the moments at the first row so identical sessions come out with
    // a stddev of exactly zero instead of a one-ulp rounding residue.
    double m = double(table.rows.size());
    const BasinRow& a = table.rows[0];
    for (const BasinRow& r : table.rows) {
        table.mean.feature_l2 += (r.feature_l2 - a.feature_l2) / m;
        table.mean.loss += (r.loss - a.loss) / m;
        table.mean.asr += (r.asr - a.asr) / m;
    }
    table.mean.feature_l2 += a.feature_l2;
    table.mean.loss += a.loss;
    table.mean.asr += a.asr;
    for (const BasinRow& r : table.rows) {
        table.stddev.feature_l2 += (r.feature_l2 - table.mean.feature_l2) * (r.feature_l2 - table.mean.feature_l2);
        table.stddev.loss += (r.loss - table.mean.loss) * (r.loss - table.mean.loss);
        table.stddev.asr += (r.asr - table.mean.asr) * (r.asr - table.mean.asr);
    }
    table.stddev.feature_l2 = std::sqrt(table.stddev.feature_l2 / m);
    table.stddev.loss = std::sqrt(table.stddev.loss / m);
    table.stddev.asr = std::sqrt(table.stddev.asr / m);
    return table;
}

TensorF bit_reduction(const TensorF& x, int bits) {
    if (bits < 1 || bits > 16) throw ConfigError("bit_reduction: bits must lie in [1,16]");
    double levels = double((1 << bits) - 1);
    TensorF out(x.shape);
    for (std::size_t q = 0; q < x.data.size(); ++q)
        out.data[q] = float(std::round(double(x.data[q]) * levels) / levels);
    return out;
}

TensorF resize_nearest(const TensorF& x, int oh, int ow) {
    if (x.shape.size() != 3) throw ShapeError("resize: expects (c,h,w)");
    if (oh < 1 || ow < 1) throw ShapeError("resize: bad output size");
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    TensorF out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            int sy = int(std::int64_t(y) * h / oh);
            for (int xx = 0; xx < ow; ++xx) {
                int sx = int(std::int64_t(xx) * w / ow);
                out.data[(std::size_t(ch) * oh + y) * ow + xx] = x.data[(std::size_t(ch) * h + sy) * w + sx];
            }
        }
    return out;
}

TensorF random_resize_pad(const TensorF& x, std::uint64_t seed, int growth) {
    if (x.shape.size() != 3) throw ShapeError("resize_pad: expects (c,h,w)");
    if (growth < 0) throw ConfigError("resize_pad: growth must be nonnegative");
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    if (h != w) throw ShapeError("resize_pad: expects square images");
    Rng rng(mix64(hash_combine(seed, 0x9Ad)));
    int canvas = h + growth;
    int size = rng.uniform_int(h, canvas);
    int top = rng.uniform_int(0, canvas - size);
    int left = rng.uniform_int(0, canvas - size);
    TensorF resized = resize_nearest(x, size, size);
    TensorF padded({c, canvas, canvas});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < size; ++y)
            for (int xx = 0; xx < size; ++xx)
                padded.data[(std::size_t(ch) * canvas + (y + top)) * canvas + (xx + left)] =
                    resized.data[(std::size_t(ch) * size + y) * size + xx];
    return resize_nearest(padded, h, w);
}

}  // namespace soupforge
