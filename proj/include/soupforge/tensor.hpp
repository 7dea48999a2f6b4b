#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "soupforge/common.hpp"

namespace soupforge {

// Dense row-major tensor. The scalar type is a template parameter because the
// laboratory runs experiments in float and numeric checks in double.
template <class S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
        data.assign(std::size_t(numel_of(shape)), S(0));
    }
    Tensor(std::vector<int> shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
        if (std::int64_t(data.size()) != numel_of(shape))
            throw ShapeError("tensor: value count does not match shape");
    }

    static std::int64_t numel_of(const std::vector<int>& shp) {
        std::int64_t n = 1;
        for (int d : shp) {
            if (d <= 0) throw ShapeError("tensor: nonpositive dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return std::int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }
    static Tensor full(std::vector<int> shp, S v) {
        Tensor t(std::move(shp));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ')';
        return os.str();
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
    for (S v : t.data)
        if (!std::isfinite(double(v))) throw NumericError(std::string(op) + ": non-finite value produced");
}

// sign with sign(0) = 0
template <class S>
S sign_of(S v) {
    return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
}

template <class S>
double l1_norm(const Tensor<S>& t) {
    double s = 0;
    for (S v : t.data) s += std::fabs(double(v));
    return s;
}

template <class S>
double l2_norm(const Tensor<S>& t) {
    double s = 0;
    for (S v : t.data) s += double(v) * double(v);
    return std::sqrt(s);
}

template <class S>
double linf_norm(const Tensor<S>& t) {
    double m = 0;
    for (S v : t.data) m = std::max(m, std::fabs(double(v)));
    return m;
}

template <class S>
Tensor<S> widen_or_cast(const Tensor<S>& t) {
    return t;
}

template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
    Tensor<To> out(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = To(t.data[i]);
    return out;
}

}  // namespace soupforge
