#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "soupforge/tensor.hpp"

namespace soupforge {

// Orthonormal DCT-II basis for one dimension, cached per size and scalar type.
template <class S>
const std::vector<S>& dct_basis(int n) {
    thread_local std::unordered_map<int, std::vector<S>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::vector<S> d(std::size_t(n) * n);
    const double pi = 3.14159265358979323846264338327950288;
    for (int k = 0; k < n; ++k) {
        double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
        for (int i = 0; i < n; ++i)
            d[std::size_t(k) * n + i] = S(scale * std::cos(pi * (2.0 * i + 1.0) * k / (2.0 * n)));
    }
    return cache.emplace(n, std::move(d)).first->second;
}

// Wengert-list reverse-mode engine. Nodes are appended in evaluation order, so
// a single reverse sweep visits each node once with a complete adjoint.
template <class S>
class Tape {
public:
    using Id = std::int32_t;

    Id leaf(Tensor<S> v) {
        check_finite(v, "leaf");
        return push(std::move(v), true, {});
    }

    Id constant(Tensor<S> v) {
        check_finite(v, "constant");
        return push(std::move(v), false, {});
    }

    const Tensor<S>& value(Id id) const { return node(id).value; }
    bool needs_grad(Id id) const { return node(id).needs_grad; }

    Id add(Id a, Id b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        check_same_shape(ta, tb, "add");
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
        return record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor<S>& g) {
            t.accum(a, g);
            t.accum(b, g);
        });
    }

    Id sub(Id a, Id b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        check_same_shape(ta, tb, "sub");
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - tb.data[i];
        return record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor<S>& g) {
            t.accum(a, g);
            Tensor<S> neg(g.shape);
            for (std::size_t i = 0; i < g.data.size(); ++i) neg.data[i] = -g.data[i];
            t.accum(b, neg);
        });
    }

    Id mul(Id a, Id b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        check_same_shape(ta, tb, "mul");
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        return record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor<S>& g) {
            const auto& va = t.value(a);
            const auto& vb = t.value(b);
            if (t.needs_grad(a)) {
                Tensor<S> ga(g.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] = g.data[i] * vb.data[i];
                t.accum(a, ga);
            }
            if (t.needs_grad(b)) {
                Tensor<S> gb(g.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] = g.data[i] * va.data[i];
                t.accum(b, gb);
            }
        });
    }

    Id scalar_mul(Id a, double c) {
        const auto& ta = value(a);
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = S(double(ta.data[i]) * c);
        return record("scalar_mul", std::move(out), {a}, [a, c](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga(g.shape);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] = S(double(g.data[i]) * c);
            t.accum(a, ga);
        });
    }

    // A (m x k) times B, where B is (k x n) or a length-k vector.
    Id matmul(Id a, Id b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        if (ta.ndim() != 2) throw ShapeError("matmul: lhs must be 2-d, got " + ta.shape_str());
        int m = ta.shape[0], k = ta.shape[1];
        bool vec = tb.ndim() == 1;
        if (vec) {
            if (tb.shape[0] != k) throw ShapeError("matmul: inner dims " + ta.shape_str() + " vs " + tb.shape_str());
            Tensor<S> out({m});
            for (int i = 0; i < m; ++i) {
                double acc = 0;
                for (int j = 0; j < k; ++j) acc += double(ta.data[std::size_t(i) * k + j]) * double(tb.data[j]);
                out.data[i] = S(acc);
            }
            return record("matmul", std::move(out), {a, b}, [a, b, m, k](Tape& t, const Tensor<S>& g) {
                const auto& va = t.value(a);
                const auto& vb = t.value(b);
                if (t.needs_grad(a)) {
                    Tensor<S> ga(va.shape);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < k; ++j) ga.data[std::size_t(i) * k + j] = g.data[i] * vb.data[j];
                    t.accum(a, ga);
                }
                if (t.needs_grad(b)) {
                    Tensor<S> gb(vb.shape);
                    for (int j = 0; j < k; ++j) {
                        double acc = 0;
                        for (int i = 0; i < m; ++i) acc += double(va.data[std::size_t(i) * k + j]) * double(g.data[i]);
                        gb.data[j] = S(acc);
                    }
                    t.accum(b, gb);
                }
            });
        }
        if (tb.ndim() != 2 || tb.shape[0] != k)
            throw ShapeError("matmul: inner dims " + ta.shape_str() + " vs " + tb.shape_str());
        int n = tb.shape[1];
        Tensor<S> out({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0;
                for (int q = 0; q < k; ++q)
                    acc += double(ta.data[std::size_t(i) * k + q]) * double(tb.data[std::size_t(q) * n + j]);
                out.data[std::size_t(i) * n + j] = S(acc);
            }
        return record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor<S>& g) {
            const auto& va = t.value(a);
            const auto& vb = t.value(b);
            if (t.needs_grad(a)) {
                Tensor<S> ga(va.shape);
                for (int i = 0; i < m; ++i)
                    for (int q = 0; q < k; ++q) {
                        double acc = 0;
                        for (int j = 0; j < n; ++j)
                            acc += double(g.data[std::size_t(i) * n + j]) * double(vb.data[std::size_t(q) * n + j]);
                        ga.data[std::size_t(i) * k + q] = S(acc);
                    }
                t.accum(a, ga);
            }
            if (t.needs_grad(b)) {
                Tensor<S> gb(vb.shape);
                for (int q = 0; q < k; ++q)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0;
                        for (int i = 0; i < m; ++i)
                            acc += double(va.data[std::size_t(i) * k + q]) * double(g.data[std::size_t(i) * n + j]);
                        gb.data[std::size_t(q) * n + j] = S(acc);
                    }
                t.accum(b, gb);
            }
        });
    }

    // x: (C_in, H, W), w: (C_out, C_in, k, k), bias: (C_out). Stride 1 with
    // symmetric zero padding.
    Id conv2d(Id x, Id w, Id bias, int pad) {
        const auto& tx = value(x);
        const auto& tw = value(w);
        const auto& tb = value(bias);
        if (tx.ndim() != 3) throw ShapeError("conv2d: input must be (C,H,W), got " + tx.shape_str());
        if (tw.ndim() != 4) throw ShapeError("conv2d: weight must be 4-d, got " + tw.shape_str());
        int ci = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
        int co = tw.shape[0], k = tw.shape[2];
        if (tw.shape[1] != ci) throw ShapeError("conv2d: channel mismatch " + tx.shape_str() + " vs " + tw.shape_str());
        if (tw.shape[3] != k) throw ShapeError("conv2d: kernel must be square, got " + tw.shape_str());
        if (tb.ndim() != 1 || tb.shape[0] != co) throw ShapeError("conv2d: bias shape " + tb.shape_str());
        if (pad < 0) throw ShapeError("conv2d: negative padding");
        int oh = h + 2 * pad - k + 1;
        int ow = wd + 2 * pad - k + 1;
        if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");
        Tensor<S> out({co, oh, ow});
        for (int oc = 0; oc < co; ++oc)
            for (int y = 0; y < oh; ++y)
                for (int xpos = 0; xpos < ow; ++xpos) {
                    double acc = double(tb.data[oc]);
                    for (int ic = 0; ic < ci; ++ic)
                        for (int dy = 0; dy < k; ++dy) {
                            int iy = y + dy - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int dx = 0; dx < k; ++dx) {
                                int ix = xpos + dx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                acc += double(tx.data[(std::size_t(ic) * h + iy) * wd + ix]) *
                                       double(tw.data[((std::size_t(oc) * ci + ic) * k + dy) * k + dx]);
                            }
                        }
                    out.data[(std::size_t(oc) * oh + y) * ow + xpos] = S(acc);
                }
        return record("conv2d", std::move(out), {x, w, bias},
                      [x, w, bias, ci, h, wd, co, k, pad, oh, ow](Tape& t, const Tensor<S>& g) {
                          const auto& vx = t.value(x);
                          const auto& vw = t.value(w);
                          if (t.needs_grad(x)) {
                              Tensor<S> gx(vx.shape);
                              for (int oc = 0; oc < co; ++oc)
                                  for (int y = 0; y < oh; ++y)
                                      for (int xpos = 0; xpos < ow; ++xpos) {
                                          double gv = double(g.data[(std::size_t(oc) * oh + y) * ow + xpos]);
                                          if (gv == 0) continue;
                                          for (int ic = 0; ic < ci; ++ic)
                                              for (int dy = 0; dy < k; ++dy) {
                                                  int iy = y + dy - pad;
                                                  if (iy < 0 || iy >= h) continue;
                                                  for (int dx = 0; dx < k; ++dx) {
                                                      int ix = xpos + dx - pad;
                                                      if (ix < 0 || ix >= wd) continue;
                                                      gx.data[(std::size_t(ic) * h + iy) * wd + ix] +=
                                                          S(gv * double(vw.data[((std::size_t(oc) * ci + ic) * k + dy) * k + dx]));
                                                  }
                                              }
                                      }
                              t.accum(x, gx);
                          }
                          if (t.needs_grad(w)) {
                              Tensor<S> gw(vw.shape);
                              for (int oc = 0; oc < co; ++oc)
                                  for (int y = 0; y < oh; ++y)
                                      for (int xpos = 0; xpos < ow; ++xpos) {
                                          double gv = double(g.data[(std::size_t(oc) * oh + y) * ow + xpos]);
                                          if (gv == 0) continue;
                                          for (int ic = 0; ic < ci; ++ic)
                                              for (int dy = 0; dy < k; ++dy) {
                                                  int iy = y + dy - pad;
                                                  if (iy < 0 || iy >= h) continue;
                                                  for (int dx = 0; dx < k; ++dx) {
                                                      int ix = xpos + dx - pad;
                                                      if (ix < 0 || ix >= wd) continue;
                                                      gw.data[((std::size_t(oc) * ci + ic) * k + dy) * k + dx] +=
                                                          S(gv * double(vx.data[(std::size_t(ic) * h + iy) * wd + ix]));
                                                  }
                                              }
                                      }
                              t.accum(w, gw);
                          }
                          if (t.needs_grad(bias)) {
                              Tensor<S> gb({co});
                              for (int oc = 0; oc < co; ++oc) {
                                  double acc = 0;
                                  for (int y = 0; y < oh; ++y)
                                      for (int xpos = 0; xpos < ow; ++xpos)
                                          acc += double(g.data[(std::size_t(oc) * oh + y) * ow + xpos]);
                                  gb.data[oc] = S(acc);
                              }
                              t.accum(bias, gb);
                          }
                      });
    }

    Id relu(Id a) {
        const auto& ta = value(a);
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] > S(0) ? ta.data[i] : S(0);
        return record("relu", std::move(out), {a}, [a](Tape& t, const Tensor<S>& g) {
            const auto& va = t.value(a);
            Tensor<S> ga(g.shape);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] = va.data[i] > S(0) ? g.data[i] : S(0);
            t.accum(a, ga);
        });
    }

    // Non-overlapping k x k average pooling; spatial dims must divide evenly.
    Id avgpool(Id a, int k) {
        const auto& ta = value(a);
        if (ta.ndim() != 3) throw ShapeError("avgpool: input must be (C,H,W), got " + ta.shape_str());
        if (k <= 0) throw ShapeError("avgpool: window must be positive");
        int c = ta.shape[0], h = ta.shape[1], w = ta.shape[2];
        if (h % k != 0 || w % k != 0) throw ShapeError("avgpool: " + ta.shape_str() + " not divisible by window");
        int oh = h / k, ow = w / k;
        Tensor<S> out({c, oh, ow});
        double inv = 1.0 / (double(k) * k);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    double acc = 0;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx)
                            acc += double(ta.data[(std::size_t(ch) * h + y * k + dy) * w + x * k + dx]);
                    out.data[(std::size_t(ch) * oh + y) * ow + x] = S(acc * inv);
                }
        return record("avgpool", std::move(out), {a}, [a, c, h, w, k, oh, ow, inv](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga({c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < oh; ++y)
                    for (int x = 0; x < ow; ++x) {
                        S gv = S(double(g.data[(std::size_t(ch) * oh + y) * ow + x]) * inv);
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx)
                                ga.data[(std::size_t(ch) * h + y * k + dy) * w + x * k + dx] = gv;
                    }
            t.accum(a, ga);
        });
    }

    Id flatten(Id a) {
        const auto& ta = value(a);
        Tensor<S> out({int(ta.numel())}, ta.data);
        auto shape = ta.shape;
        return record("flatten", std::move(out), {a}, [a, shape](Tape& t, const Tensor<S>& g) {
            t.accum(a, Tensor<S>(shape, g.data));
        });
    }

    // Numerically stable cross-entropy for one logit vector and an int label.
    Id softmax_cross_entropy(Id logits, int label) {
        const auto& tz = value(logits);
        if (tz.ndim() != 1) throw ShapeError("softmax_cross_entropy: logits must be 1-d, got " + tz.shape_str());
        int k = tz.shape[0];
        if (label < 0 || label >= k) throw ShapeError("softmax_cross_entropy: label out of range");
        double m = -1e300;
        for (S v : tz.data) m = std::max(m, double(v));
        double s = 0;
        for (S v : tz.data) s += std::exp(double(v) - m);
        double loss = m + std::log(s) - double(tz.data[label]);
        Tensor<S> out({1});
        out.data[0] = S(loss);
        return record("softmax_cross_entropy", std::move(out), {logits},
                      [logits, label, m, s, k](Tape& t, const Tensor<S>& g) {
                          const auto& vz = t.value(logits);
                          Tensor<S> gz({k});
                          double gv = double(g.data[0]);
                          for (int i = 0; i < k; ++i) {
                              double p = std::exp(double(vz.data[i]) - m) / s;
                              gz.data[i] = S(gv * (p - (i == label ? 1.0 : 0.0)));
                          }
                          t.accum(logits, gz);
                      });
    }

    Id clip(Id a, double lo, double hi) {
        if (!(lo <= hi)) throw ShapeError("clip: empty interval");
        const auto& ta = value(a);
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            double v = double(ta.data[i]);
            out.data[i] = S(v < lo ? lo : (v > hi ? hi : v));
        }
        return record("clip", std::move(out), {a}, [a, lo, hi](Tape& t, const Tensor<S>& g) {
            const auto& va = t.value(a);
            Tensor<S> ga(g.shape);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                double v = double(va.data[i]);
                ga.data[i] = (v > lo && v < hi) ? g.data[i] : S(0);
            }
            t.accum(a, ga);
        });
    }

    // sign(0) = 0; gradient is zero everywhere.
    Id sign(Id a) {
        const auto& ta = value(a);
        Tensor<S> out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = sign_of(ta.data[i]);
        return record("sign", std::move(out), {a}, [a](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga(g.shape);
            (void)g;
            t.accum(a, ga);
        });
    }

    Id dct2(Id a) { return dct_like(a, false); }
    Id idct2(Id a) { return dct_like(a, true); }

    // Depthwise 2-d convolution with a fixed odd-size kernel, zero padded to
    // keep the shape. Used to smooth gradients.
    Id smooth2d(Id a, const Tensor<S>& kernel) {
        const auto& ta = value(a);
        if (ta.ndim() != 3) throw ShapeError("smooth2d: input must be (C,H,W), got " + ta.shape_str());
        if (kernel.ndim() != 2 || kernel.shape[0] != kernel.shape[1] || kernel.shape[0] % 2 == 0)
            throw ShapeError("smooth2d: kernel must be odd square, got " + kernel.shape_str());
        int c = ta.shape[0], h = ta.shape[1], w = ta.shape[2];
        int L = kernel.shape[0], c0 = L / 2;
        Tensor<S> out(ta.shape);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double acc = 0;
                    for (int dy = 0; dy < L; ++dy) {
                        int iy = y + dy - c0;
                        if (iy < 0 || iy >= h) continue;
                        for (int dx = 0; dx < L; ++dx) {
                            int ix = x + dx - c0;
                            if (ix < 0 || ix >= w) continue;
                            acc += double(kernel.data[std::size_t(dy) * L + dx]) *
                                   double(ta.data[(std::size_t(ch) * h + iy) * w + ix]);
                        }
                    }
                    out.data[(std::size_t(ch) * h + y) * w + x] = S(acc);
                }
        Tensor<S> ker = kernel;
        return record("smooth2d", std::move(out), {a}, [a, ker, c, h, w, L, c0](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga({c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        double acc = 0;
                        for (int dy = 0; dy < L; ++dy) {
                            int oy = y - (dy - c0);
                            if (oy < 0 || oy >= h) continue;
                            for (int dx = 0; dx < L; ++dx) {
                                int ox = x - (dx - c0);
                                if (ox < 0 || ox >= w) continue;
                                acc += double(ker.data[std::size_t(dy) * L + dx]) *
                                       double(g.data[(std::size_t(ch) * h + oy) * w + ox]);
                            }
                        }
                        ga.data[(std::size_t(ch) * h + y) * w + x] = S(acc);
                    }
            t.accum(a, ga);
        });
    }

    // Nearest-neighbour resize of the spatial dims; source index is
    // floor(i * in / out), so equal sizes give the identity map.
    Id resize_nearest(Id a, int oh, int ow) {
        const auto& ta = value(a);
        if (ta.ndim() != 3) throw ShapeError("resize_nearest: input must be (C,H,W), got " + ta.shape_str());
        if (oh <= 0 || ow <= 0) throw ShapeError("resize_nearest: target size must be positive");
        int c = ta.shape[0], h = ta.shape[1], w = ta.shape[2];
        Tensor<S> out({c, oh, ow});
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y) {
                int sy = int((std::int64_t(y) * h) / oh);
                for (int x = 0; x < ow; ++x) {
                    int sx = int((std::int64_t(x) * w) / ow);
                    out.data[(std::size_t(ch) * oh + y) * ow + x] = ta.data[(std::size_t(ch) * h + sy) * w + sx];
                }
            }
        return record("resize_nearest", std::move(out), {a}, [a, c, h, w, oh, ow](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga({c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < oh; ++y) {
                    int sy = int((std::int64_t(y) * h) / oh);
                    for (int x = 0; x < ow; ++x) {
                        int sx = int((std::int64_t(x) * w) / ow);
                        ga.data[(std::size_t(ch) * h + sy) * w + sx] += g.data[(std::size_t(ch) * oh + y) * ow + x];
                    }
                }
            t.accum(a, ga);
        });
    }

    // Embed into a zero canvas of (oh, ow) at the given offset.
    Id pad2d(Id a, int top, int left, int oh, int ow) {
        const auto& ta = value(a);
        if (ta.ndim() != 3) throw ShapeError("pad2d: input must be (C,H,W), got " + ta.shape_str());
        int c = ta.shape[0], h = ta.shape[1], w = ta.shape[2];
        if (top < 0 || left < 0 || top + h > oh || left + w > ow)
            throw ShapeError("pad2d: input does not fit the canvas");
        Tensor<S> out({c, oh, ow});
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    out.data[(std::size_t(ch) * oh + y + top) * ow + x + left] =
                        ta.data[(std::size_t(ch) * h + y) * w + x];
        return record("pad2d", std::move(out), {a}, [a, c, h, w, top, left, oh, ow](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga({c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        ga.data[(std::size_t(ch) * h + y) * w + x] =
                            g.data[(std::size_t(ch) * oh + y + top) * ow + x + left];
            t.accum(a, ga);
        });
    }

    // One element of a 1-d tensor as a scalar node.
    Id pick(Id a, int index) {
        const auto& ta = value(a);
        if (ta.ndim() != 1) throw ShapeError("pick: input must be 1-d, got " + ta.shape_str());
        if (index < 0 || index >= ta.shape[0]) throw ShapeError("pick: index out of range");
        Tensor<S> out({1});
        out.data[0] = ta.data[index];
        int n = ta.shape[0];
        return record("pick", std::move(out), {a}, [a, index, n](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga({n});
            ga.data[index] = g.data[0];
            t.accum(a, ga);
        });
    }

    Id sum(Id a) {
        const auto& ta = value(a);
        double acc = 0;
        for (S v : ta.data) acc += double(v);
        Tensor<S> out({1});
        out.data[0] = S(acc);
        auto shape = ta.shape;
        return record("sum", std::move(out), {a}, [a, shape](Tape& t, const Tensor<S>& g) {
            Tensor<S> ga(shape);
            for (auto& v : ga.data) v = g.data[0];
            t.accum(a, ga);
        });
    }

    // Reverse sweep from a scalar loss. Each node is visited exactly once.
    void backward(Id loss) {
        const auto& tl = value(loss);
        if (tl.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + tl.shape_str());
        adj_.assign(nodes_.size(), Tensor<S>{});
        Tensor<S> seed({1});
        seed.data[0] = S(1);
        adj_[std::size_t(loss)] = std::move(seed);
        for (Id id = loss; id >= 0; --id) {
            auto& n = nodes_[std::size_t(id)];
            if (adj_[std::size_t(id)].data.empty() || !n.back) continue;
            n.back(*this, adj_[std::size_t(id)]);
        }
        ran_ = true;
    }

    // Adjoint of any node after backward; zeros for nodes the loss never saw.
    const Tensor<S>& grad(Id id) {
        node(id);
        if (!ran_) throw NumericError("grad: backward has not run");
        auto& g = adj_[std::size_t(id)];
        if (g.data.empty()) g = Tensor<S>(nodes_[std::size_t(id)].value.shape);
        return g;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<S> value;
        bool needs_grad = false;
        std::function<void(Tape&, const Tensor<S>&)> back;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor<S>> adj_;
    bool ran_ = false;

    const Node& node(Id id) const {
        if (id < 0 || std::size_t(id) >= nodes_.size()) throw ShapeError("tape: node id not on tape");
        return nodes_[std::size_t(id)];
    }

    Id push(Tensor<S> v, bool needs, std::function<void(Tape&, const Tensor<S>&)> back) {
        nodes_.push_back(Node{std::move(v), needs, std::move(back)});
        ran_ = false;
        return Id(nodes_.size() - 1);
    }

    Id record(const char* opname, Tensor<S> out, std::initializer_list<Id> inputs,
              std::function<void(Tape&, const Tensor<S>&)> back) {
        check_finite(out, opname);
        bool needs = false;
        for (Id i : inputs) needs = needs || node(i).needs_grad;
        return push(std::move(out), needs, needs ? std::move(back) : std::function<void(Tape&, const Tensor<S>&)>{});
    }

    void accum(Id id, const Tensor<S>& g) {
        if (!node(id).needs_grad) return;
        auto& slot = adj_[std::size_t(id)];
        if (slot.data.empty()) {
            slot = g;
            return;
        }
        check_same_shape(slot, g, "accum");
        for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
    }

    Id dct_like(Id a, bool inverse) {
        const auto& ta = value(a);
        if (ta.ndim() != 2 && ta.ndim() != 3)
            throw ShapeError("dct2: input must be (H,W) or (C,H,W), got " + ta.shape_str());
        Tensor<S> out = apply_dct2(ta, inverse);
        const char* name = inverse ? "idct2" : "dct2";
        check_finite(out, name);
        return record(name, std::move(out), {a}, [a, inverse](Tape& t, const Tensor<S>& g) {
            t.accum(a, apply_dct2(g, !inverse));
        });
    }

public:
    // Orthonormal 2-d DCT-II (and its inverse) applied per channel. The
    // inverse is the transpose, which is also the adjoint used in backward.
    static Tensor<S> apply_dct2(const Tensor<S>& t, bool inverse) {
        int c = t.ndim() == 3 ? t.shape[0] : 1;
        int h = t.shape[t.ndim() == 3 ? 1 : 0];
        int w = t.shape[t.ndim() == 3 ? 2 : 1];
        const auto& dh = dct_basis<S>(h);
        const auto& dw = dct_basis<S>(w);
        Tensor<S> out(t.shape);
        std::vector<double> tmp(std::size_t(h) * w);
        for (int ch = 0; ch < c; ++ch) {
            const S* src = t.data.data() + std::size_t(ch) * h * w;
            S* dst = out.data.data() + std::size_t(ch) * h * w;
            // rows: tmp = B_h * X, where B is D or D^T
            for (int u = 0; u < h; ++u)
                for (int j = 0; j < w; ++j) {
                    double acc = 0;
                    for (int i = 0; i < h; ++i) {
                        double b = inverse ? double(dh[std::size_t(i) * h + u]) : double(dh[std::size_t(u) * h + i]);
                        acc += b * double(src[std::size_t(i) * w + j]);
                    }
                    tmp[std::size_t(u) * w + j] = acc;
                }
            // cols: dst = tmp * B_w^T
            for (int u = 0; u < h; ++u)
                for (int v = 0; v < w; ++v) {
                    double acc = 0;
                    for (int j = 0; j < w; ++j) {
                        double b = inverse ? double(dw[std::size_t(j) * w + v]) : double(dw[std::size_t(v) * w + j]);
                        acc += tmp[std::size_t(u) * w + j] * b;
                    }
                    dst[std::size_t(u) * w + v] = S(acc);
                }
        }
        return out;
    }
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace soupforge
