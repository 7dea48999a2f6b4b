#pragma once

// Shared numeric oracles for the unit suites. Everything here is deliberately
// dumb and slow: central differences, direct O(n^2)-per-coefficient
// transforms, seeded fills. The suites trust these against closed forms and
// then hold the fast library code to them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "soupforge/rng.hpp"
#include "soupforge/tensor.hpp"

namespace testsupport {

using soupforge::Rng;
using soupforge::Tensor;
using soupforge::TensorD;
using soupforge::TensorF;

// Central-difference gradient of a scalar-valued function, one coordinate at
// a time. h = 1e-5 balances truncation against round-off in double.
inline TensorD central_diff(const std::function<double(const TensorD&)>& f, const TensorD& x,
                            double h = 1e-5) {
    TensorD g(x.shape);
    TensorD probe = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double keep = probe.data[i];
        probe.data[i] = keep + h;
        double up = f(probe);
        probe.data[i] = keep - h;
        double down = f(probe);
        probe.data[i] = keep;
        g.data[i] = (up - down) / (2.0 * h);
    }
    return g;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(double(a.data[i]) - double(b.data[i])));
    return m;
}

// max |a-b| / max(1, |a|, |b|): absolute near zero, relative for large values.
template <class S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double va = double(a.data[i]), vb = double(b.data[i]);
        double scale = std::max({1.0, std::fabs(va), std::fabs(vb)});
        m = std::max(m, std::fabs(va - vb) / scale);
    }
    return m;
}

template <class S>
Tensor<S> seeded_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t(std::move(shape));
    Rng rng(soupforge::mix64(seed));
    for (auto& v : t.data) v = S(rng.uniform(lo, hi));
    return t;
}

// Direct-sum orthonormal 2-d DCT-II: X[u,v] = s(u)s(v) sum_{i,j} x[i,j]
// cos(pi(2i+1)u/2h) cos(pi(2j+1)v/2w). Quadratic per coefficient on purpose.
inline TensorD brute_dct2(const TensorD& x) {
    int h = x.shape[x.ndim() == 3 ? 1 : 0];
    int w = x.shape[x.ndim() == 3 ? 2 : 1];
    int c = x.ndim() == 3 ? x.shape[0] : 1;
    const double pi = 3.14159265358979323846264338327950288;
    TensorD out(x.shape);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = x.data.data() + std::size_t(ch) * h * w;
        double* dst = out.data.data() + std::size_t(ch) * h * w;
        for (int u = 0; u < h; ++u)
            for (int v = 0; v < w; ++v) {
                double acc = 0;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                        acc += src[std::size_t(i) * w + j] *
                               std::cos(pi * (2.0 * i + 1.0) * u / (2.0 * h)) *
                               std::cos(pi * (2.0 * j + 1.0) * v / (2.0 * w));
                double su = std::sqrt((u == 0 ? 1.0 : 2.0) / h);
                double sv = std::sqrt((v == 0 ? 1.0 : 2.0) / w);
                dst[std::size_t(u) * w + v] = su * sv * acc;
            }
    }
    return out;
}

}  // namespace testsupport
