#include "jsmtk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "jsmtk/errors.hpp"

namespace jsmtk::ops {

namespace {

Tape &tape_of(const Var &a) {
    if (!a.valid()) throw InputError("operation on an invalid Var");
    return *a.tape();
}

void same_shape(const Var &a, const Var &b, const char *op) {
    if (a.tape() != b.tape()) throw InputError(std::string(op) + ": operands live on different tapes");
    if (a.shape() != b.shape())
        throw InputError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename F>
Tensor map1(const Tensor &a, F f) {
    Tensor out(a.shape());
    const double *src = a.data();
    double *dst = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
    return out;
}

template <typename F>
Tensor map2(const Tensor &a, const Tensor &b, F f) {
    Tensor out(a.shape());
    const double *pa = a.data();
    const double *pb = b.data();
    double *dst = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(pa[i], pb[i]);
    return out;
}

// Flattened [N, C, rest] view of a tensor with at least two axes.
struct ChannelView {
    std::size_t n, c, rest;
};

ChannelView channel_view(const Shape &s) {
    if (s.size() < 2) throw InputError("expected a tensor with batch and channel axes, got " + shape_str(s));
    std::size_t rest = 1;
    for (std::size_t i = 2; i < s.size(); ++i) rest *= static_cast<std::size_t>(s[i]);
    return {static_cast<std::size_t>(s[0]), static_cast<std::size_t>(s[1]), rest};
}

} // namespace

Var add(const Var &a, const Var &b) {
    same_shape(a, b, "add");
    return tape_of(a).record(
        map2(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
        [](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var &a, const Var &b) {
    same_shape(a, b, "sub");
    return tape_of(a).record(
        map2(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
        [](const Var &, const Var &g, const std::vector<bool> &need) {
            return std::vector<Var>{g, need[1] ? scale(g, -1.0) : Var{}};
        },
        "sub");
}

Var mul(const Var &a, const Var &b) {
    same_shape(a, b, "mul");
    return tape_of(a).record(
        map2(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
        [a, b](const Var &, const Var &g, const std::vector<bool> &need) {
            return std::vector<Var>{need[0] ? mul(g, b) : Var{}, need[1] ? mul(g, a) : Var{}};
        },
        "mul");
}

Var scale(const Var &a, double c) {
    return tape_of(a).record(
        map1(a.value(), [c](double x) { return c * x; }), {a},
        [c](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{scale(g, c)}; }, "scale");
}

Var square(const Var &a) {
    return tape_of(a).record(
        map1(a.value(), [](double x) { return x * x; }), {a},
        [a](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{scale(mul(g, a), 2.0)}; },
        "square");
}

Var exp(const Var &a) {
    return tape_of(a).record(
        map1(a.value(), [](double x) { return std::exp(x); }), {a},
        [](const Var &out, const Var &g, const std::vector<bool> &) { return std::vector<Var>{mul(g, out)}; }, "exp");
}

Var rsqrt(const Var &a) {
    return tape_of(a).record(
        map1(a.value(), [](double x) { return 1.0 / std::sqrt(x); }), {a},
        [](const Var &out, const Var &g, const std::vector<bool> &) {
            return std::vector<Var>{mul(g, scale(mul(out, square(out)), -0.5))};
        },
        "rsqrt");
}

Var sum(const Var &a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const Shape in_shape = a.shape();
    return tape_of(a).record(
        Tensor::scalar(s), {a},
        [in_shape](const Var &, const Var &g, const std::vector<bool> &) {
            return std::vector<Var>{broadcast_scalar(g, in_shape)};
        },
        "sum");
}

Var broadcast_scalar(const Var &s, const Shape &shape) {
    if (s.value().size() != 1) throw InputError("broadcast_scalar expects a one-element tensor");
    return tape_of(s).record(
        Tensor(shape, s.value()[0]), {s},
        [](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{sum(g)}; },
        "broadcast_scalar");
}

Var reshape(const Var &a, const Shape &shape) {
    const Shape in_shape = a.shape();
    return tape_of(a).record(
        a.value().reshaped(shape), {a},
        [in_shape](const Var &, const Var &g, const std::vector<bool> &) {
            return std::vector<Var>{reshape(g, in_shape)};
        },
        "reshape");
}

Var sum_to_channels(const Var &a) {
    const Shape in_shape = a.shape();
    const auto v = channel_view(in_shape);
    Tensor out(Shape{static_cast<std::int64_t>(v.c)});
    const double *src = a.value().data();
    for (std::size_t n = 0; n < v.n; ++n)
        for (std::size_t c = 0; c < v.c; ++c) {
            const double *p = src + (n * v.c + c) * v.rest;
            double acc = 0.0;
            for (std::size_t i = 0; i < v.rest; ++i) acc += p[i];
            out[c] += acc;
        }
    return tape_of(a).record(
        std::move(out), {a},
        [in_shape](const Var &, const Var &g, const std::vector<bool> &) {
            return std::vector<Var>{broadcast_channels(g, in_shape)};
        },
        "sum_to_channels");
}

Var broadcast_channels(const Var &c, const Shape &shape) {
    const auto v = channel_view(shape);
    if (c.value().size() != v.c) throw InputError("broadcast_channels: channel count mismatch");
    Tensor out(shape);
    const double *src = c.value().data();
    double *dst = out.data();
    for (std::size_t n = 0; n < v.n; ++n)
        for (std::size_t ch = 0; ch < v.c; ++ch) std::fill_n(dst + (n * v.c + ch) * v.rest, v.rest, src[ch]);
    return tape_of(c).record(
        std::move(out), {c},
        [](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{sum_to_channels(g)}; },
        "broadcast_channels");
}

Var sum_rows(const Var &a) {
    if (a.shape().size() != 2) throw InputError("sum_rows expects [N, K]");
    const auto n = static_cast<std::size_t>(a.shape()[0]);
    const std::int64_t k = a.shape()[1];
    Tensor out(Shape{static_cast<std::int64_t>(n)});
    for (std::size_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) out[i] += a.value()[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)];
    return tape_of(a).record(
        std::move(out), {a},
        [k](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{broadcast_rows(g, k)}; },
        "sum_rows");
}

Var broadcast_rows(const Var &r, std::int64_t k) {
    if (r.shape().size() != 1) throw InputError("broadcast_rows expects [N]");
    const auto n = static_cast<std::size_t>(r.shape()[0]);
    Tensor out(Shape{static_cast<std::int64_t>(n), k});
    for (std::size_t i = 0; i < n; ++i)
        std::fill_n(out.data() + i * static_cast<std::size_t>(k), static_cast<std::size_t>(k), r.value()[i]);
    return tape_of(r).record(
        std::move(out), {r},
        [](const Var &, const Var &g, const std::vector<bool> &) { return std::vector<Var>{sum_rows(g)}; },
        "broadcast_rows");
}

Var matmul(const Var &a, const Var &b, bool trans_a, bool trans_b) {
    if (a.shape().size() != 2 || b.shape().size() != 2) throw InputError("matmul expects 2-D operands");
    if (a.tape() != b.tape()) throw InputError("matmul: operands live on different tapes");
    const std::int64_t m = trans_a ? a.shape()[1] : a.shape()[0];
    const std::int64_t ka = trans_a ? a.shape()[0] : a.shape()[1];
    const std::int64_t kb = trans_b ? b.shape()[1] : b.shape()[0];
    const std::int64_t n = trans_b ? b.shape()[0] : b.shape()[1];
    if (ka != kb)
        throw InputError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t lda = a.shape()[1];
    const std::int64_t ldb = b.shape()[1];
    const double *pa = a.value().data();
    const double *pb = b.value().data();
    Tensor out(Shape{m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < ka; ++t) {
                const double av = trans_a ? pa[t * lda + i] : pa[i * lda + t];
                const double bv = trans_b ? pb[j * ldb + t] : pb[t * ldb + j];
                acc += av * bv;
            }
            out[static_cast<std::size_t>(i * n + j)] = acc;
        }
    return tape_of(a).record(
        std::move(out), {a, b},
        [a, b, trans_a, trans_b](const Var &, const Var &g, const std::vector<bool> &need) {
            Var ga, gb;
            if (need[0]) ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
            if (need[1]) gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
            return std::vector<Var>{ga, gb};
        },
        "matmul");
}

namespace {

struct ConvGeom {
    std::int64_t n, ci, co, d, h, w, k;
};

// Volumes are processed on a zero-padded copy (border k/2) laid out flat, so every kernel
// tap is a constant offset and the inner loops run over one contiguous range. Outputs
// computed on padding positions are discarded.
struct PaddedGrid {
    std::int64_t p, wp, hp, dp, total, begin, end;
    std::vector<std::int64_t> offsets;  // per tap, input index minus output index

    explicit PaddedGrid(const ConvGeom &g) : p(g.k / 2) {
        wp = g.w + 2 * p;
        hp = g.h + 2 * p;
        dp = g.d + 2 * p;
        total = wp * hp * dp;
        begin = (p * hp + p) * wp + p;
        end = ((g.d - 1 + p) * hp + (g.h - 1 + p)) * wp + (g.w - 1 + p) + 1;
        for (std::int64_t kz = 0; kz < g.k; ++kz)
            for (std::int64_t ky = 0; ky < g.k; ++ky)
                for (std::int64_t kx = 0; kx < g.k; ++kx)
                    offsets.push_back(((kz - p) * hp + (ky - p)) * wp + (kx - p));
    }

    void pad(const double *src, const ConvGeom &g, double *dst) const {
        std::fill_n(dst, total, 0.0);
        for (std::int64_t z = 0; z < g.d; ++z)
            for (std::int64_t y = 0; y < g.h; ++y)
                std::copy_n(src + (z * g.h + y) * g.w, g.w, dst + ((z + p) * hp + (y + p)) * wp + p);
    }

    void unpad_add(const double *src, const ConvGeom &g, double *dst) const {
        for (std::int64_t z = 0; z < g.d; ++z)
            for (std::int64_t y = 0; y < g.h; ++y) {
                const double *s = src + ((z + p) * hp + (y + p)) * wp + p;
                double *o = dst + (z * g.h + y) * g.w;
                for (std::int64_t x = 0; x < g.w; ++x) o[x] += s[x];
            }
    }
};

ConvGeom conv_geom(const Shape &x, const Shape &w) {
    if (x.size() != 5) throw InputError("conv3d expects input [N, C, D, H, W], got " + shape_str(x));
    if (w.size() != 5 || w[2] != w[3] || w[2] != w[4] || w[2] % 2 == 0)
        throw InputError("conv3d expects weights [Co, Ci, k, k, k] with odd k, got " + shape_str(w));
    if (x[1] != w[1])
        throw InputError("conv3d: input has " + std::to_string(x[1]) + " channels, weights expect " +
                         std::to_string(w[1]));
    return {x[0], w[1], w[0], x[2], x[3], x[4], w[2]};
}

// All channels of one sample, padded.
std::vector<double> pad_sample(const Tensor &t, std::int64_t n, std::int64_t channels, const ConvGeom &g,
                               const PaddedGrid &pg) {
    const std::int64_t vol = g.d * g.h * g.w;
    std::vector<double> out(static_cast<std::size_t>(channels * pg.total));
    for (std::int64_t c = 0; c < channels; ++c)
        pg.pad(t.data() + (n * channels + c) * vol, g, out.data() + c * pg.total);
    return out;
}

Tensor conv_forward_raw(const Tensor &x, const Tensor &w, const ConvGeom &g) {
    const PaddedGrid pg(g);
    const std::int64_t vol = g.d * g.h * g.w;
    const std::int64_t taps = g.k * g.k * g.k;
    Tensor y(Shape{g.n, g.co, g.d, g.h, g.w});
    std::vector<double> acc(static_cast<std::size_t>(pg.total));
    for (std::int64_t n = 0; n < g.n; ++n) {
        const std::vector<double> xp = pad_sample(x, n, g.ci, g, pg);
        for (std::int64_t co = 0; co < g.co; ++co) {
            std::fill(acc.begin(), acc.end(), 0.0);
            double *a = acc.data();
            for (std::int64_t ci = 0; ci < g.ci; ++ci) {
                const double *in = xp.data() + ci * pg.total;
                const double *wk = w.data() + (co * g.ci + ci) * taps;
                for (std::int64_t t = 0; t < taps; ++t) {
                    const double wv = wk[t];
                    const double *s = in + pg.offsets[static_cast<std::size_t>(t)];
                    for (std::int64_t o = pg.begin; o < pg.end; ++o) a[o] += wv * s[o];
                }
            }
            pg.unpad_add(a, g, y.data() + (n * g.co + co) * vol);
        }
    }
    return y;
}

Tensor conv_data_grad_raw(const Tensor &gy, const Tensor &w, const ConvGeom &g) {
    const PaddedGrid pg(g);
    const std::int64_t vol = g.d * g.h * g.w;
    const std::int64_t taps = g.k * g.k * g.k;
    Tensor gx(Shape{g.n, g.ci, g.d, g.h, g.w});
    std::vector<double> acc(static_cast<std::size_t>(pg.total));
    for (std::int64_t n = 0; n < g.n; ++n) {
        const std::vector<double> gp = pad_sample(gy, n, g.co, g, pg);
        for (std::int64_t ci = 0; ci < g.ci; ++ci) {
            std::fill(acc.begin(), acc.end(), 0.0);
            double *a = acc.data();
            for (std::int64_t co = 0; co < g.co; ++co) {
                const double *src = gp.data() + co * pg.total;
                const double *wk = w.data() + (co * g.ci + ci) * taps;
                for (std::int64_t t = 0; t < taps; ++t) {
                    // gx[o + off] += w * gy[o]  <=>  gx[i] += w * gy[i - off]
                    const double wv = wk[t];
                    const std::int64_t off = pg.offsets[static_cast<std::size_t>(t)];
                    const double *s = src - off;
                    for (std::int64_t i = pg.begin; i < pg.end; ++i) a[i] += wv * s[i];
                }
            }
            pg.unpad_add(a, g, gx.data() + (n * g.ci + ci) * vol);
        }
    }
    return gx;
}

Tensor conv_filter_grad_raw(const Tensor &x, const Tensor &gy, const ConvGeom &g) {
    const PaddedGrid pg(g);
    const std::int64_t taps = g.k * g.k * g.k;
    Tensor gw(Shape{g.co, g.ci, g.k, g.k, g.k});
    for (std::int64_t n = 0; n < g.n; ++n) {
        const std::vector<double> xp = pad_sample(x, n, g.ci, g, pg);
        const std::vector<double> gp = pad_sample(gy, n, g.co, g, pg);
        for (std::int64_t co = 0; co < g.co; ++co) {
            const double *src = gp.data() + co * pg.total;
            for (std::int64_t ci = 0; ci < g.ci; ++ci) {
                const double *in = xp.data() + ci * pg.total;
                double *wk = gw.data() + (co * g.ci + ci) * taps;
                for (std::int64_t t = 0; t < taps; ++t) {
                    const double *s = in + pg.offsets[static_cast<std::size_t>(t)];
                    double sum = 0.0;
                    for (std::int64_t o = pg.begin; o < pg.end; ++o) sum += src[o] * s[o];
                    wk[t] += sum;
                }
            }
        }
    }
    return gw;
}

} // namespace

Var conv3d(const Var &x, const Var &w, const Var &b) {
    const ConvGeom g = conv_geom(x.shape(), w.shape());
    Tensor y = conv_forward_raw(x.value(), w.value(), g);
    std::vector<Var> inputs{x, w};
    if (b.valid()) {
        if (b.shape() != Shape{g.co}) throw InputError("conv3d: bias must have shape [Co]");
        const std::int64_t vol = g.d * g.h * g.w;
        for (std::int64_t n = 0; n < g.n; ++n)
            for (std::int64_t co = 0; co < g.co; ++co) {
                double *o = y.data() + (n * g.co + co) * vol;
                const double bv = b.value()[static_cast<std::size_t>(co)];
                for (std::int64_t i = 0; i < vol; ++i) o[i] += bv;
            }
        inputs.push_back(b);
    }
    const std::int64_t k = g.k;
    return tape_of(x).record(
        std::move(y), inputs,
        [x, w, k](const Var &, const Var &gy, const std::vector<bool> &need) {
            std::vector<Var> out(need.size());
            if (need[0]) out[0] = conv3d_data_grad(gy, w);
            if (need[1]) out[1] = conv3d_filter_grad(x, gy, k);
            if (need.size() > 2 && need[2]) out[2] = sum_to_channels(gy);
            return out;
        },
        "conv3d");
}

Var conv3d_data_grad(const Var &gy, const Var &w) {
    if (gy.shape().size() != 5 || w.shape().size() != 5 || gy.shape()[1] != w.shape()[0])
        throw InputError("conv3d_data_grad: shapes " + shape_str(gy.shape()) + " and " + shape_str(w.shape()));
    const Shape xs{gy.shape()[0], w.shape()[1], gy.shape()[2], gy.shape()[3], gy.shape()[4]};
    const ConvGeom g = conv_geom(xs, w.shape());
    return tape_of(gy).record(
        conv_data_grad_raw(gy.value(), w.value(), g), {gy, w},
        [gy, w](const Var &, const Var &gz, const std::vector<bool> &need) {
            // <gz, A_w^T gy> = <A_w gz, gy>
            std::vector<Var> out(2);
            if (need[0]) out[0] = conv3d(gz, w);
            if (need[1]) out[1] = conv3d_filter_grad(gz, gy, w.shape()[2]);
            return out;
        },
        "conv3d_data_grad");
}

Var conv3d_filter_grad(const Var &x, const Var &gy, std::int64_t kernel) {
    if (x.shape().size() != 5 || gy.shape().size() != 5 || x.shape()[0] != gy.shape()[0])
        throw InputError("conv3d_filter_grad: shapes " + shape_str(x.shape()) + " and " + shape_str(gy.shape()));
    const Shape ws{gy.shape()[1], x.shape()[1], kernel, kernel, kernel};
    const ConvGeom g = conv_geom(x.shape(), ws);
    return tape_of(x).record(
        conv_filter_grad_raw(x.value(), gy.value(), g), {x, gy},
        [x, gy](const Var &, const Var &gw, const std::vector<bool> &need) {
            // <gw, F(x, gy)> = <conv(x, gw), gy> = <x, A_gw^T gy>
            std::vector<Var> out(2);
            if (need[0]) out[0] = conv3d_data_grad(gy, gw);
            if (need[1]) out[1] = conv3d(x, gw);
            return out;
        },
        "conv3d_filter_grad");
}

Var gather(const Var &a, IndexMap idx, const Shape &out_shape) {
    if (idx->size() != shape_count(out_shape)) throw InputError("gather: index count does not match output shape");
    Tensor out(out_shape);
    const double *src = a.value().data();
    for (std::size_t j = 0; j < idx->size(); ++j) out[j] = src[(*idx)[j]];
    const Shape in_shape = a.shape();
    return tape_of(a).record(
        std::move(out), {a},
        [idx, in_shape](const Var &, const Var &g, const std::vector<bool> &) {
            return std::vector<Var>{scatter_add(g, idx, in_shape)};
        },
        "gather");
}

Var scatter_add(const Var &g, IndexMap idx, const Shape &out_shape) {
    if (idx->size() != g.value().size()) throw InputError("scatter_add: index count does not match input");
    Tensor out(out_shape);
    const double *src = g.value().data();
    for (std::size_t j = 0; j < idx->size(); ++j) out[(*idx)[j]] += src[j];
    const Shape in_shape = g.shape();
    return tape_of(g).record(
        std::move(out), {g},
        [idx, in_shape](const Var &, const Var &gg, const std::vector<bool> &) {
            return std::vector<Var>{gather(gg, idx, in_shape)};
        },
        "scatter_add");
}

Var maxpool3d(const Var &x) {
    const Shape &s = x.shape();
    if (s.size() != 5) throw InputError("maxpool3d expects [N, C, D, H, W], got " + shape_str(s));
    const std::int64_t od = s[2] / 2, oh = s[3] / 2, ow = s[4] / 2;
    if (od == 0 || oh == 0 || ow == 0) throw InputError("maxpool3d: spatial extent below 2");
    const Shape out_shape{s[0], s[1], od, oh, ow};
    auto idx = std::make_shared<std::vector<std::size_t>>(shape_count(out_shape));
    const double *v = x.value().data();
    std::size_t j = 0;
    for (std::int64_t nc = 0; nc < s[0] * s[1]; ++nc) {
        const std::int64_t base = nc * s[2] * s[3] * s[4];
        for (std::int64_t z = 0; z < od; ++z)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx) {
                    std::int64_t best = -1;
                    double bv = -std::numeric_limits<double>::infinity();
                    for (std::int64_t dz = 0; dz < 2; ++dz)
                        for (std::int64_t dy = 0; dy < 2; ++dy)
                            for (std::int64_t dx = 0; dx < 2; ++dx) {
                                const std::int64_t i =
                                    base + ((2 * z + dz) * s[3] + (2 * y + dy)) * s[4] + (2 * xx + dx);
                                if (best < 0 || v[i] > bv) {
                                    bv = v[i];
                                    best = i;
                                }
                            }
                    (*idx)[j++] = static_cast<std::size_t>(best);
                }
    }
    return gather(x, std::move(idx), out_shape);
}

Var sigmoid_scaled(const Var &a, double beta) {
    Tensor s = map1(a.value(), [beta](double x) {
        const double t = beta * x;
        if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
        const double e = std::exp(t);
        return e / (1.0 + e);
    });
    return tape_of(a).record(
        std::move(s), {a},
        [beta](const Var &out, const Var &g, const std::vector<bool> &) {
            // d/da = beta * s * (1 - s)
            return std::vector<Var>{mul(g, scale(sub(out, square(out)), beta))};
        },
        "sigmoid_scaled");
}

Var softplus(const Var &a, double beta) {
    if (!(beta > 0.0)) throw InputError("softplus beta must be > 0");
    Tensor y = map1(a.value(), [beta](double x) {
        const double t = beta * x;
        return (std::max(t, 0.0) + std::log1p(std::exp(-std::fabs(t)))) / beta;
    });
    return tape_of(a).record(
        std::move(y), {a},
        [a, beta](const Var &, const Var &g, const std::vector<bool> &) {
            return std::vector<Var>{mul(g, sigmoid_scaled(a, beta))};
        },
        "softplus");
}

Var relu(const Var &a) {
    Tape &t = tape_of(a);
    Var mask = t.constant(map1(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
    return mul(a, mask);
}

Var log_softmax(const Var &logits) {
    const Shape &s = logits.shape();
    if (s.size() != 2) throw InputError("log_softmax expects [N, K], got " + shape_str(s));
    const std::int64_t n = s[0], k = s[1];
    Tensor out(s);
    const double *z = logits.value().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double *row = z + i * k;
        const double m = *std::max_element(row, row + k);
        double acc = 0.0;
        for (std::int64_t j = 0; j < k; ++j) acc += std::exp(row[j] - m);
        const double lse = m + std::log(acc);
        for (std::int64_t j = 0; j < k; ++j) out[static_cast<std::size_t>(i * k + j)] = row[j] - lse;
    }
    return tape_of(logits).record(
        std::move(out), {logits},
        [k](const Var &out, const Var &g, const std::vector<bool> &) {
            // g - softmax * rowsum(g)
            return std::vector<Var>{sub(g, mul(exp(out), broadcast_rows(sum_rows(g), k)))};
        },
        "log_softmax");
}

} // namespace jsmtk::ops
