// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero when any
// criterion fails.
//
//   acceptance [--only N[,M...]] [--seeds K]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "check_util.hpp"
#include "jsmtk/errors.hpp"
#include "jsmtk/harness.hpp"
#include "jsmtk/jal.hpp"
#include "jsmtk/jsm.hpp"
#include "jsmtk/metrics.hpp"
#include "jsmtk/model.hpp"
#include "jsmtk/ops.hpp"
#include "jsmtk/registration.hpp"
#include "jsmtk/synth.hpp"

namespace fs = std::filesystem;
using namespace jsmtk;
using testutil::central_diff;
using testutil::max_rel_err;
using testutil::random_tensor;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string &what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------- criterion 1

using OpFn = std::function<Var(const std::vector<Var> &)>;

// f = sum(r * op(x)); h = sum_i sum(c_i * (df/dx_i)^2).
struct Probe {
    OpFn op;
    Tensor r;

    double value(const std::vector<Tensor> &in) const {
        Tape t;
        std::vector<Var> vs;
        for (const auto &x : in) vs.push_back(t.constant(x));
        return ops::sum(ops::mul(t.constant(r), op(vs))).value().item();
    }
    std::vector<Tensor> grad(const std::vector<Tensor> &in) const {
        Tape t;
        std::vector<Var> vs;
        for (const auto &x : in) vs.push_back(t.variable(x));
        const Var f = ops::sum(ops::mul(t.constant(r), op(vs)));
        std::vector<Tensor> out;
        for (const auto &g : t.gradient(f, vs)) out.push_back(g.value());
        return out;
    }
    double second(const std::vector<Tensor> &in, const std::vector<Tensor> &c, std::vector<Tensor> *dh) const {
        Tape t;
        std::vector<Var> vs;
        for (const auto &x : in) vs.push_back(t.variable(x));
        const Var f = ops::sum(ops::mul(t.constant(r), op(vs)));
        const auto g = t.gradient(f, vs, dh != nullptr);
        Var h;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Var term = ops::sum(ops::mul(t.constant(c[i]), ops::square(g[i])));
            h = h.valid() ? ops::add(h, term) : term;
        }
        if (dh) {
            dh->clear();
            for (const auto &v : t.gradient(h, vs)) dh->push_back(v.value());
        }
        return h.value().item();
    }
};

struct GradErrors {
    double first = 0.0;
    double second = 0.0;
};

GradErrors probe_op(std::vector<Tensor> in, OpFn op, std::mt19937_64 &rng, bool second_order) {
    Probe p{std::move(op), {}};
    {
        Tape t;
        std::vector<Var> vs;
        for (const auto &x : in) vs.push_back(t.constant(x));
        p.r = random_tensor(p.op(vs).shape(), rng);
    }
    GradErrors e;
    const auto an = p.grad(in);
    for (std::size_t i = 0; i < in.size(); ++i)
        e.first = std::max(e.first, max_rel_err(an[i], central_diff(in[i], [&] { return p.value(in); }, 1e-5)));
    if (!second_order) return e;
    std::vector<Tensor> c;
    for (const auto &x : in) c.push_back(random_tensor(x.shape(), rng, 0.5, 1.5));
    std::vector<Tensor> dh;
    p.second(in, c, &dh);
    for (std::size_t i = 0; i < in.size(); ++i)
        e.second = std::max(e.second,
                            max_rel_err(dh[i], central_diff(in[i], [&] { return p.second(in, c, nullptr); }, 1e-4), 1e-5));
    return e;
}

ModelSpec every_layer_spec() {
    ModelSpec s;
    s.in_channels = 2;
    s.depth = s.height = s.width = 6;
    s.layers = {LayerSpec::conv(2, 3), LayerSpec::batchnorm(3), LayerSpec::act(Activation::softplus, 2.0),
                LayerSpec::dropout(0.3), LayerSpec::maxpool(), LayerSpec::flatten(), LayerSpec::dense(3 * 27, 4)};
    return s;
}

void perturb_model(Model &m, std::mt19937_64 &rng) {
    for (std::size_t i = 0; i < m.buffers.size(); i += 2) {
        m.buffers[i] = random_tensor(m.buffers[i].shape(), rng, -0.2, 0.2);
        m.buffers[i + 1] = random_tensor(m.buffers[i + 1].shape(), rng, 0.5, 1.5);
    }
    for (std::size_t i = 0; i < m.params.size(); ++i)
        if (m.param_names[i].ends_with("gamma") || m.param_names[i].ends_with("beta") ||
            m.param_names[i].ends_with("bias"))
            m.params[i] = random_tensor(m.params[i].shape(), rng, -0.5, 0.5);
}

Volume3D uniform_volume(Dims d, std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Volume3D v(d);
    for (auto &x : v.values()) x = u(rng);
    return v;
}

DisplacementField bump_field(Dims d, std::mt19937_64 &rng, double amp) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DisplacementField f(d);
    for (auto &c : f.comp)
        for (int b = 0; b < 3; ++b) {
            const double cx = u(rng) * d.w, cy = u(rng) * d.h, cz = u(rng) * d.d;
            const double s = 0.3 * d.w + 1.0, a = amp * (2 * u(rng) - 1);
            for (std::int64_t z = 0; z < d.d; ++z)
                for (std::int64_t y = 0; y < d.h; ++y)
                    for (std::int64_t x = 0; x < d.w; ++x) {
                        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz);
                        c(x, y, z) += a * std::exp(-r2 / (2 * s * s));
                    }
        }
    return f;
}

void criterion1(Outcome &o) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    double first = 0.0, second = 0.0;
    std::string worst_first;
    auto note_first = [&](double e, const std::string &name) {
        if (e > first) {
            first = e;
            worst_first = name;
        }
    };
    auto track = [&](const char *name, GradErrors e, bool has_second) {
        note_first(e.first, name);
        if (has_second) second = std::max(second, e.second);
        o.require(e.first < 1e-4, std::string(name) + " first-order");
        if (has_second) o.require(e.second < 1e-3, std::string(name) + " second-order");
    };

    // Layer primitives, first and second order.
    const Tensor x = random_tensor({1, 2, 6, 6, 6}, rng);
    track("conv3d",
          probe_op({x, random_tensor({2, 2, 3, 3, 3}, rng, -0.5, 0.5), random_tensor({2}, rng)},
                   [](const std::vector<Var> &v) { return ops::conv3d(v[0], v[1], v[2]); }, rng, true),
          true);
    track("maxpool3d", probe_op({x}, [](const std::vector<Var> &v) { return ops::maxpool3d(v[0]); }, rng, true), true);
    track("softplus",
          probe_op({x}, [](const std::vector<Var> &v) { return ops::softplus(v[0], 2.0); }, rng, true), true);
    track("relu", probe_op({x}, [](const std::vector<Var> &v) { return ops::relu(v[0]); }, rng, false), false);
    track("dense",
          probe_op({random_tensor({2, 12}, rng), random_tensor({4, 12}, rng)},
                   [](const std::vector<Var> &v) { return ops::matmul(v[0], v[1], false, true); }, rng, true),
          true);
    track("log_softmax",
          probe_op({random_tensor({3, 4}, rng, -2, 2)}, [](const std::vector<Var> &v) { return ops::log_softmax(v[0]); },
                   rng, true),
          true);
    // Batchnorm normalization pattern: (a - mean) * rsqrt(var + eps) per channel.
    track("batchnorm",
          probe_op({random_tensor({2, 3, 2, 2, 2}, rng)},
                   [](const std::vector<Var> &v) {
                       const Shape &s = v[0].shape();
                       const double inv = 1.0 / static_cast<double>(v[0].value().size() / static_cast<std::size_t>(s[1]));
                       const Var mean = ops::scale(ops::sum_to_channels(v[0]), inv);
                       const Var centered = ops::sub(v[0], ops::broadcast_channels(mean, s));
                       const Var var = ops::scale(ops::sum_to_channels(ops::square(centered)), inv);
                       const Var eps = ops::broadcast_scalar(v[0].tape()->constant(Tensor::scalar(1e-5)), var.shape());
                       return ops::mul(centered, ops::broadcast_channels(ops::rsqrt(ops::add(var, eps)), s));
                   },
                   rng, true),
          true);

    // Whole network: every parameter in train and eval mode, and the input gradient.
    for (Mode mode : {Mode::train, Mode::eval}) {
        Model m = build_model(every_layer_spec(), 11);
        perturb_model(m, rng);
        const Tensor xb = random_tensor({2, 2, 6, 6, 6}, rng);
        const std::vector<int> labels{0, 3};
        const auto an = ce_param_gradient(m, xb, labels, mode, 99);
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            const Tensor fd = central_diff(m.params[i], [&] {
                double loss = 0.0;
                ce_param_gradient(m, xb, labels, mode, 99, &loss);
                return loss;
            }, 1e-5);
            const double e = max_rel_err(an[i], fd);
            note_first(e, m.param_names[i] + (mode == Mode::train ? " (train)" : " (eval)"));
            o.require(e < 1e-4, "parameter " + m.param_names[i]);
        }
    }
    {
        Model m = build_model(every_layer_spec(), 12);
        perturb_model(m, rng);
        Tensor xb = random_tensor({2, 2, 6, 6, 6}, rng);
        const Tensor g = input_gradient(m, xb);
        const double e = max_rel_err(g, central_diff(xb, [&] {
            double s = 0.0;
            for (const auto &d : predict(m, xb))
                for (double v : d) s += std::log(v);
            return s;
        }, 1e-5));
        note_first(e, "input");
        o.require(e < 1e-4, "input gradient");
    }

    // Penalty parameter gradient (second order, softplus network).
    {
        Model m = build_model(every_layer_spec(), 13);
        perturb_model(m, rng);
        const Tensor xb = random_tensor({2, 2, 6, 6, 6}, rng);
        const Tensor q = random_tensor(xb.shape(), rng, 0.1, 1.0);
        const auto an = penalty_param_gradient(m, xb, q);
        auto pen = [&] {
            const Tensor g = input_gradient(m, xb);
            double s = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) s += (q[i] * g[i]) * (q[i] * g[i]);
            return s;
        };
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            const double e = max_rel_err(an[i], central_diff(m.params[i], pen, 1e-4), 1e-6);
            second = std::max(second, e);
            o.require(e < 1e-3, "penalty gradient " + m.param_names[i]);
        }
    }

    // Registration cost field gradient on 6^3. Stencils straddling a trilinear node or a
    // histogram bin edge sit on a kink of the piecewise-smooth cost and are skipped.
    std::size_t skipped = 0, checked = 0;
    for (int rep = 0; rep < 3; ++rep) {
        const Volume3D mv = uniform_volume(Dims{6, 6, 6}, rng), fx = uniform_volume(Dims{6, 6, 6}, rng);
        DisplacementField f = bump_field(mv.dims(), rng, 0.8);
        RegistrationConfig cfg;
        cfg.bins = 8;
        cfg.alpha = 0.05;
        DisplacementField g(f.dims());
        registration_cost_gradient(f, mv, fx, cfg, g);
        const IntensityRange mr = IntensityRange::of(mv);
        for (int c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double h = 1e-4, keep = f.comp[static_cast<std::size_t>(c)].values()[i];
                const auto vox = static_cast<std::int64_t>(i);
                const std::int64_t coord = c == 0 ? vox % 6 : c == 1 ? (vox / 6) % 6 : vox / 36;
                const double pos = static_cast<double>(coord) + keep;
                f.comp[static_cast<std::size_t>(c)].values()[i] = keep + h;
                const double up = registration_cost(f, mv, fx, cfg);
                const double bu = to_bin_space(warp(mv, f).values()[i], mr, cfg.bins);
                f.comp[static_cast<std::size_t>(c)].values()[i] = keep - h;
                const double dn = registration_cost(f, mv, fx, cfg);
                const double bd = to_bin_space(warp(mv, f).values()[i], mr, cfg.bins);
                f.comp[static_cast<std::size_t>(c)].values()[i] = keep;
                if (std::floor(pos + h) != std::floor(pos - h) || std::floor(bu) != std::floor(bd)) {
                    ++skipped;
                    continue;
                }
                ++checked;
                const double fd = (up - dn) / (2 * h), an = g.comp[static_cast<std::size_t>(c)].values()[i];
                const double e = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-3});
                note_first(e, "registration");
                o.require(e < 1e-4, "registration gradient entry");
            }
    }
    o.require(skipped * 50 < (skipped + checked), "too many kink-skipped registration entries");
    const double secs = seconds_since(t0);
    o.require(secs < 60.0, "runtime");
    o.detail << "max first-order rel err " << first << " (" << worst_first << "), max second-order rel err " << second
             << ", registration entries checked " << checked << " (kink-skipped " << skipped << "), " << std::fixed
             << std::setprecision(1) << secs << " s";
}

// ---------------------------------------------------------------- criterion 2

DisplacementField linear_field(std::int64_t n, const double a[3][3]) {
    DisplacementField f(Dims{n, n, n});
    for (std::int64_t z = 0; z < n; ++z)
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) {
                const double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
                for (int i = 0; i < 3; ++i)
                    f.comp[static_cast<std::size_t>(i)](x, y, z) = a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2];
            }
    return f;
}

double max_dev(const JacobianSaliencyMap &j, double target, int margin) {
    double worst = 0.0;
    const Dims d = j.dims();
    for (std::int64_t z = margin; z < d.d - margin; ++z)
        for (std::int64_t y = margin; y < d.h - margin; ++y)
            for (std::int64_t x = margin; x < d.w - margin; ++x) worst = std::max(worst, std::fabs(j(x, y, z) - target));
    return worst;
}

void criterion2(Outcome &o) {
    const auto t0 = Clock::now();
    const std::int64_t n = 16;
    const double zero[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    const double dil[3][3] = {{0.1, 0, 0}, {0, 0.1, 0}, {0, 0, 0.1}};
    const double th = 10.0 * M_PI / 180.0;
    const double rot[3][3] = {{std::cos(th) - 1, -std::sin(th), 0}, {std::sin(th), std::cos(th) - 1, 0}, {0, 0, 0}};
    const double shear[3][3] = {{0, 0.3, 0}, {0, 0, 0}, {0, 0, 0}};
    const double e0 = max_dev(compute_jsm(linear_field(n, zero)), 1.0, 0);
    const double e1 = max_dev(compute_jsm(linear_field(n, dil)), 1.331, 1);
    const double e2 = max_dev(compute_jsm(linear_field(n, rot)), 1.0, 1);
    const JacobianSaliencyMap js = compute_jsm(linear_field(n, shear));
    bool exact = true;
    for (double v : js.values()) exact = exact && v == 1.0;
    o.require(e0 <= 1e-12, "zero field");
    o.require(e1 <= 1e-6, "dilation");
    o.require(e2 <= 1e-3, "rotation");
    o.require(exact, "shear");
    const double secs = seconds_since(t0);
    o.require(secs < 5.0, "runtime");
    o.detail << "zero dev " << e0 << ", dilation dev " << e1 << ", rotation dev " << e2 << ", shear exact "
             << (exact ? "yes" : "no") << ", " << std::fixed << std::setprecision(2) << secs << " s";
}

// ---------------------------------------------------------------- criterion 3

void criterion3(Outcome &o) {
    const auto t0 = Clock::now();
    const std::int64_t n = 32;
    const int margin = 4;
    // Textured phantom: Gaussian-smoothed white noise gives structure at every voxel.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    Volume3D noise(Dims{n, n, n});
    for (auto &v : noise.values()) v = g(rng);
    const Volume3D moving = gaussian_smooth(noise, 1.5);

    // Separable sinusoid, amplitude 2 voxels, one period across the volume.
    const double amp = 2.0, k = 2.0 * M_PI / static_cast<double>(n);
    DisplacementField truth(Dims{n, n, n});
    Volume3D true_jsm(Dims{n, n, n});
    for (std::int64_t z = 0; z < n; ++z)
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) {
                truth.comp[0](x, y, z) = amp * std::sin(k * x);
                truth.comp[1](x, y, z) = amp * std::sin(k * y + 1.0);
                truth.comp[2](x, y, z) = amp * std::sin(k * z + 2.0);
                true_jsm(x, y, z) = (1 + amp * k * std::cos(k * x)) * (1 + amp * k * std::cos(k * y + 1.0)) *
                                    (1 + amp * k * std::cos(k * z + 2.0));
            }
    const Volume3D fixed = warp(moving, truth);
    RegistrationConfig cfg;
    cfg.alpha = 0.001;
    cfg.max_iters = 1000;
    const RegistrationResult r = register_volumes(moving, fixed, cfg);
    const JacobianSaliencyMap j = compute_jsm(r.field);
    double err = 0.0, base = 0.0;
    std::size_t count = 0;
    for (std::int64_t z = margin; z < n - margin; ++z)
        for (std::int64_t y = margin; y < n - margin; ++y)
            for (std::int64_t x = margin; x < n - margin; ++x) {
                err += std::fabs(j(x, y, z) - true_jsm(x, y, z));
                base += std::fabs(1.0 - true_jsm(x, y, z));
                ++count;
            }
    err /= static_cast<double>(count);
    base /= static_cast<double>(count);
    bool monotone = true;
    for (std::size_t i = 1; i < r.log.size(); ++i)
        if (r.log[i].level == r.log[i - 1].level && r.log[i].cost > r.log[i - 1].cost) monotone = false;
    const double secs = seconds_since(t0);
    o.require(err < 0.05, "JSM mean abs error");
    o.require(monotone, "cost history");
    o.require(secs < 120.0, "runtime");
    o.detail << "interior JSM mean abs error " << err << " (identity would give " << base << "), " << r.log.size()
             << " accepted steps, non-increasing " << (monotone ? "yes" : "no") << ", " << std::fixed
             << std::setprecision(1) << secs << " s";
}

// ---------------------------------------------------------------- criterion 4

double oracle_mi(const Volume3D &a, const Volume3D &b, int bins) {
    auto weights = [bins](double v, double lo, double hi) {
        std::vector<double> w(static_cast<std::size_t>(bins), 0.0);
        if (hi <= lo) {
            w[0] = 1.0;
            return w;
        }
        const double t = (v - lo) / (hi - lo) * (bins - 1);
        const double base = std::min(std::floor(t), static_cast<double>(bins - 2));
        w[static_cast<std::size_t>(base)] += 1.0 - (t - base);
        w[static_cast<std::size_t>(base) + 1] += t - base;
        return w;
    };
    const auto nb = static_cast<std::size_t>(bins);
    std::vector<double> p(nb * nb, 0.0), qa(nb, 0.0), qb(nb, 0.0);
    const double n = static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto wa = weights(a.values()[i], a.min(), a.max()), wb = weights(b.values()[i], b.min(), b.max());
        for (std::size_t r = 0; r < nb; ++r)
            for (std::size_t c = 0; c < nb; ++c) p[r * nb + c] += wa[r] * wb[c] / n;
    }
    for (std::size_t r = 0; r < nb; ++r)
        for (std::size_t c = 0; c < nb; ++c) {
            qa[r] += p[r * nb + c];
            qb[c] += p[r * nb + c];
        }
    double mi = 0.0;
    for (std::size_t r = 0; r < nb; ++r)
        for (std::size_t c = 0; c < nb; ++c)
            if (p[r * nb + c] > 0) mi += p[r * nb + c] * std::log(p[r * nb + c] / (qa[r] * qb[c]));
    return mi;
}

void criterion4(Outcome &o) {
    std::mt19937_64 rng(404);
    const int bins = 16;
    // MI(X, X) = H(X) for intensities on bin centers (integers 0..bins-1, both ends present).
    double self_err = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
        std::uniform_int_distribution<int> u(0, bins - 1);
        Volume3D x(Dims{12, 12, 12});
        for (auto &v : x.values()) v = u(rng);
        x.values()[0] = 0;
        x.values()[1] = bins - 1;
        std::vector<double> count(static_cast<std::size_t>(bins), 0.0);
        for (double v : x.values()) count[static_cast<std::size_t>(v)] += 1.0;
        double h = 0.0;
        for (double c : count)
            if (c > 0) h -= c / static_cast<double>(x.size()) * std::log(c / static_cast<double>(x.size()));
        self_err = std::max(self_err, std::fabs(mattes_mi(x, x, bins) - h));
    }
    double min_mi = 1e300, asym = 0.0, oracle = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const Volume3D a = uniform_volume(Dims{8, 8, 8}, rng);
        Volume3D b = uniform_volume(Dims{8, 8, 8}, rng);
        if (rep % 2)
            for (std::size_t i = 0; i < b.size(); ++i) b.values()[i] = 0.5 * b.values()[i] + a.values()[i] * a.values()[i];
        const double ab = mattes_mi(a, b, bins), ba = mattes_mi(b, a, bins);
        min_mi = std::min({min_mi, ab, ba});
        asym = std::max(asym, std::fabs(ab - ba));
        const Volume3D s = uniform_volume(Dims{4, 4, 4}, rng), t = uniform_volume(Dims{4, 4, 4}, rng);
        for (int nb : {4, 8, 16}) oracle = std::max(oracle, std::fabs(mattes_mi(s, t, nb) - oracle_mi(s, t, nb)));
    }
    o.require(self_err <= 1e-6, "MI(X,X) = H(X)");
    o.require(min_mi >= -1e-9, "nonnegativity");
    o.require(asym <= 1e-9, "symmetry");
    o.require(oracle <= 1e-12, "oracle");
    o.detail << "|MI(X,X) - H(X)| " << self_err << ", min MI " << min_mi << ", max asymmetry " << asym
             << ", max oracle deviation " << oracle;
}

// ---------------------------------------------------------------- criterion 5

void criterion5(Outcome &o) {
    PhantomSpec spec;
    spec.seed = 55;
    spec.marker_intensity = 1.0;
    const Dataset d = make_benchmark(spec, 6, 0.25);
    const auto train_set = samples_of(d, Split::train);
    bool same = true;
    std::size_t epochs = 0;
    for (FusionMode mode : {FusionMode::early, FusionMode::late}) {
        JALConfig cfg;
        cfg.lambda = 0.0;
        cfg.epochs = 3;
        cfg.learning_rate = 0.03;
        cfg.seed = 5;
        const TrainedModels a = train(train_set, mode, cfg);
        const TrainedModels b = train_ce(train_set, mode, cfg);
        same = same && a.histories == b.histories;
        for (std::size_t i = 0; i < a.models.size(); ++i)
            for (std::size_t p = 0; p < a.models[i].params.size(); ++p)
                same = same && std::memcmp(a.models[i].params[p].data(), b.models[i].params[p].data(),
                                           a.models[i].params[p].size() * sizeof(double)) == 0;
        for (const auto &h : a.histories) epochs += h.epochs.size();
    }
    o.require(same, "bit identity");
    o.detail << "early and late histories (" << epochs << " epoch records) and parameters bit-identical: "
             << (same ? "yes" : "no");
}

// ---------------------------------------------------------------- criterion 6

struct SeedRow {
    std::uint64_t seed;
    bool diverged;
    double acc_without, acc_with, frac_without, frac_with;
};

// A with-JAL run that blows up counts as a loss and is left out of the means.
SeedRow run_seed(const Dataset &d, AblationConfig acfg, FusionMode mode) {
    acfg.modes = {mode};
    SeedRow r{acfg.jal.seed, false, 0, 0, 0, 0};
    try {
        const ModeAblation m = ablate(d, acfg).modes.at(0);
        r.acc_without = m.without_jal.metrics.macro_accuracy;
        r.acc_with = m.with_jal.metrics.macro_accuracy;
        r.frac_without = m.without_jal.debug_fraction;
        r.frac_with = m.with_jal.debug_fraction;
    } catch (const NumericalError &) {
        r.diverged = true;
        JALConfig base = acfg.jal;
        base.lambda = 0.0;
        const ArmReport arm = evaluate_arm(train(samples_of(d, Split::train), mode, base), base,
                                           samples_of(d, Split::test), acfg);
        r.acc_without = arm.metrics.macro_accuracy;
        r.frac_without = arm.debug_fraction;
        r.acc_with = r.frac_with = std::nan("");
    }
    return r;
}

void criterion6(Outcome &o, int seeds) {
    const auto t0 = Clock::now();
    const ConfigMap cfg = read_config_file(fs::path(JSMTK_SOURCE_DIR) / "configs" / "benchmark.ini");
    PhantomSpec spec = phantom_spec_from(cfg);
    const int per_class = static_cast<int>(config_int(cfg, "data.subjects_per_class", 40));
    const double test_fraction = config_double(cfg, "data.test_fraction", 0.25);
    AblationConfig acfg;
    acfg.jal = jal_config_from(cfg);
    std::map<FusionMode, std::vector<SeedRow>> rows;
    for (int s = 1; s <= seeds; ++s) {
        spec.seed = static_cast<std::uint64_t>(s);
        acfg.jal.seed = static_cast<std::uint64_t>(s);
        const Dataset d = make_benchmark(spec, per_class, test_fraction);
        for (FusionMode mode : {FusionMode::early, FusionMode::late}) {
            const SeedRow r = run_seed(d, acfg, mode);
            rows[mode].push_back(r);
            std::cout << "  seed " << std::setw(2) << s << ' ' << std::setw(5) << fusion_mode_name(mode) << ": macro acc "
                      << std::fixed << std::setprecision(4) << r.acc_without << " -> " << r.acc_with
                      << ", debug-region gradient fraction " << r.frac_without << " -> " << r.frac_with
                      << (r.diverged ? " (with-JAL run diverged)" : "") << '\n'
                      << std::defaultfloat << std::flush;
        }
    }
    o.detail << "lambda " << acfg.jal.lambda << ", " << seeds << " seeds;";
    for (const auto &[mode, rs] : rows) {
        int wins = 0, diverged = 0, finite = 0;
        double gain = 0.0, drop = 0.0;
        for (const auto &r : rs) {
            if (r.diverged) {
                ++diverged;
                continue;
            }
            ++finite;
            wins += r.acc_with > r.acc_without ? 1 : 0;
            gain += (r.acc_with - r.acc_without) * 100.0;
            drop += r.frac_without > 0 ? (r.frac_without - r.frac_with) / r.frac_without : 0.0;
        }
        gain = finite ? gain / finite : std::nan("");
        drop = finite ? drop / finite : std::nan("");
        const int need = (9 * static_cast<int>(rs.size()) + 9) / 10;
        const std::string name = fusion_mode_name(mode);
        o.require(wins >= need, name + " (a) wins");
        o.require(gain >= 5.0, name + " (b) mean gain");
        o.require(drop >= 0.5, name + " (c) gradient-mass drop");
        o.detail << ' ' << name << ": wins " << wins << '/' << rs.size() << " (diverged " << diverged
                 << "), mean gain " << std::fixed << std::setprecision(2) << gain
                 << " pp, mean relative debug-mass drop " << std::setprecision(1) << drop * 100.0 << "%;"
                 << std::defaultfloat;
    }
    const double secs = seconds_since(t0);
    o.require(secs < 1800.0, "runtime");
    o.detail << ' ' << std::fixed << std::setprecision(0) << secs << " s";
}

// ---------------------------------------------------------------- criterion 7

void criterion7(Outcome &o) {
    std::mt19937_64 rng(707);
    auto make = [&](const std::vector<int> &counts) {
        std::vector<MultiSample> out;
        for (std::size_t c = 0; c < counts.size(); ++c)
            for (int i = 0; i < counts[c]; ++i) {
                MultiSample s;
                s.id = std::to_string(c) + "-" + std::to_string(i);
                s.label = static_cast<int>(c);
                s.x1 = random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0);
                for (std::size_t v = 0; v < s.x1.size(); ++v) s.x1[v] += 0.25 * static_cast<double>(c);
                s.x2 = random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0);
                s.jsm1 = random_tensor({1, 4, 4, 4}, rng, 0.8, 1.2);
                s.jsm2 = random_tensor({1, 4, 4, 4}, rng, 0.8, 1.2);
                out.push_back(s);
            }
        return out;
    };
    const int k = 5;
    const std::vector<int> counts{40, 25, 20, 15};
    const auto data = make(counts);
    const AdasynResult r = adasyn_oversample(data, k, 1.0, 7);
    std::vector<long> after(4, 0);
    for (const auto &s : r.samples) ++after[static_cast<std::size_t>(s.label)];
    bool within = true;
    for (long c : after) within = within && std::labs(c - 40) <= k;
    std::size_t verified = 0;
    for (std::size_t j = 0; j < r.provenance.size(); ++j) {
        const auto &p = r.provenance[j];
        const MultiSample &s = r.samples[data.size() + j], &a = data[p.i], &b = data[p.z];
        bool ok = a.label == s.label && b.label == s.label && p.u >= 0.0 && p.u <= 1.0 && p.i != p.z;
        for (auto [t, ta, tb] : {std::tuple{&s.x1, &a.x1, &b.x1}, std::tuple{&s.x2, &a.x2, &b.x2},
                                 std::tuple{&s.jsm1, &a.jsm1, &b.jsm1}, std::tuple{&s.jsm2, &a.jsm2, &b.jsm2}})
            for (std::size_t v = 0; v < t->size(); ++v) ok = ok && (*t)[v] == (*ta)[v] + p.u * ((*tb)[v] - (*ta)[v]);
        verified += ok ? 1 : 0;
    }
    const auto balanced = make({10, 10, 10, 10});
    const AdasynResult br = adasyn_oversample(balanced, k, 1.0, 7);
    bool unchanged = br.samples.size() == balanced.size() && br.provenance.empty();
    for (std::size_t i = 0; unchanged && i < balanced.size(); ++i)
        unchanged = br.samples[i].id == balanced[i].id && br.samples[i].x1 == balanced[i].x1;
    o.require(within, "counts within k");
    o.require(!r.provenance.empty() && verified == r.provenance.size(), "provenance");
    o.require(unchanged, "balanced input");
    o.detail << "counts 40/25/20/15 -> " << after[0] << '/' << after[1] << '/' << after[2] << '/' << after[3]
             << " (k = " << k << "), synthetics verified " << verified << '/' << r.provenance.size()
             << ", balanced input unchanged " << (unchanged ? "yes" : "no");
}

// ---------------------------------------------------------------- criterion 8

void criterion8(Outcome &o) {
    std::mt19937_64 rng(808);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    bool valid = true;
    for (int rep = 0; rep < 1000; ++rep) {
        PredictionDist p(4), q(4);
        double sp = 0, sq = 0;
        for (int i = 0; i < 4; ++i) {
            sp += p[static_cast<std::size_t>(i)] = u(rng);
            sq += q[static_cast<std::size_t>(i)] = u(rng);
        }
        for (int i = 0; i < 4; ++i) {
            p[static_cast<std::size_t>(i)] /= sp;
            q[static_cast<std::size_t>(i)] /= sq;
        }
        const PredictionDist m = late_fusion_predict(p, q);
        double total = 0.0;
        for (int i = 0; i < 4; ++i) {
            const auto ii = static_cast<std::size_t>(i);
            worst = std::max(worst, std::fabs(m[ii] - 0.5 * (p[ii] + q[ii])));
            valid = valid && m[ii] >= 0.0;
            total += m[ii];
        }
        valid = valid && std::fabs(total - 1.0) <= 1e-9;
    }
    // Early fusion at desk scale: 2 x 16^3 -> conv 4, pool 8^3 -> conv 8, pool 4^3 -> 8 * 64 = 512.
    const ModelSpec spec = desk_model_spec(2, 16);
    const auto shapes = infer_shapes(spec);
    std::int64_t dense_in = -1;
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].kind == LayerKind::dense) dense_in = spec.layers[i].in_features;
    std::int64_t flat = -1;
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].kind == LayerKind::flatten) flat = shapes[i][0];
    const FusedInput f = early_fusion_pack(random_tensor({1, 16, 16, 16}, rng, 0, 1), random_tensor({1, 16, 16, 16}, rng, 0, 1),
                                           Tensor({1, 16, 16, 16}, 1.0), Tensor({1, 16, 16, 16}, 1.0));
    const Model m = build_model(spec, 1);
    const auto out = predict(m, f.x.reshaped({1, 2, 16, 16, 16}));
    const bool shape_ok = f.x.shape() == Shape{2, 16, 16, 16} && dense_in == 512 && flat == 512 && out.size() == 1 &&
                          out[0].size() == 4;
    o.require(valid && worst <= 1e-9, "late fusion");
    o.require(shape_ok, "early fusion shapes");
    o.detail << "late fusion max deviation from branch mean " << worst << ", valid distributions "
             << (valid ? "yes" : "no") << "; early fusion packed " << f.x.shape()[0] << "x16^3, flatten extent " << flat
             << ", dense input " << dense_in;
}

// ---------------------------------------------------------------- criterion 9

void criterion9(Outcome &o) {
    ConfusionMatrix a(4);
    a.at(0, 0) = 8;
    a.at(0, 1) = 2;
    a.at(1, 0) = 3;
    a.at(1, 1) = 7;
    const MetricsReport ra = per_class_metrics(a);
    bool ok = std::fabs(ra.per_class[0].sensitivity - 0.8) < 1e-15 && std::fabs(ra.per_class[0].specificity - 0.7) < 1e-15 &&
              std::fabs(ra.per_class[1].sensitivity - 0.7) < 1e-15 && std::fabs(ra.per_class[1].specificity - 0.8) < 1e-15 &&
              std::isnan(ra.per_class[2].sensitivity) && ra.warnings.size() == 2;

    // Full 4-class matrix, hand computed. Rows truth, columns prediction; total 40.
    //   CN : 9 1 0 0     class 1: TP 6, FN 4, FP 1+2 = 3, TN 40-6-4-3 = 27
    //   MCI: 1 6 3 0     sens 6/10, spec 27/30, acc 33/40
    //   MLD: 0 2 7 1
    //   SEV: 0 0 2 8
    const int rows[4][4] = {{9, 1, 0, 0}, {1, 6, 3, 0}, {0, 2, 7, 1}, {0, 0, 2, 8}};
    ConfusionMatrix b(4);
    for (int t = 0; t < 4; ++t)
        for (int p = 0; p < 4; ++p) b.at(t, p) = rows[t][p];
    const MetricsReport rb = per_class_metrics(b);
    const double sens[4] = {0.9, 0.6, 0.7, 0.8};
    const double spec[4] = {29.0 / 30, 27.0 / 30, 25.0 / 30, 29.0 / 30};
    const double acc[4] = {38.0 / 40, 33.0 / 40, 32.0 / 40, 37.0 / 40};
    for (int c = 0; c < 4; ++c) {
        const auto &m = rb.per_class[static_cast<std::size_t>(c)];
        ok = ok && std::fabs(m.sensitivity - sens[c]) < 1e-15 && std::fabs(m.specificity - spec[c]) < 1e-15 &&
             std::fabs(m.accuracy - acc[c]) < 1e-15;
    }
    ok = ok && std::fabs(rb.macro_sensitivity - 0.75) < 1e-15 &&
         std::fabs(rb.macro_specificity - (29.0 + 27 + 25 + 29) / 120.0) < 1e-15 &&
         std::fabs(rb.macro_accuracy - (38.0 + 33 + 32 + 37) / 160.0) < 1e-15;

    // The summary-table value is the unweighted mean of the per-class table.
    std::mt19937_64 rng(909);
    std::uniform_int_distribution<int> cls(0, 3);
    double worst = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<int> p(60), l(60);
        for (std::size_t i = 0; i < 60; ++i) {
            p[i] = cls(rng);
            l[i] = cls(rng);
        }
        const MetricsReport r = per_class_metrics(confusion(p, l, 4));
        double s = 0, sp = 0, a4 = 0;
        for (const auto &m : r.per_class) {
            s += m.sensitivity;
            sp += m.specificity;
            a4 += m.accuracy;
        }
        worst = std::max({worst, std::fabs(r.macro_sensitivity - s / 4), std::fabs(r.macro_specificity - sp / 4),
                          std::fabs(r.macro_accuracy - a4 / 4)});
    }
    o.require(ok, "hand-computed matrices");
    o.require(worst <= 1e-15, "macro relation");
    o.detail << "hand-computed 2-class and 4-class matrices " << (ok ? "match" : "differ")
             << ", max macro-vs-mean deviation over 200 reports " << worst;
}

// ---------------------------------------------------------------- criterion 10

std::map<std::string, std::string> snapshot(const fs::path &root) {
    std::map<std::string, std::string> out;
    for (const auto &e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            std::ifstream in(e.path(), std::ios::binary);
            std::stringstream ss;
            ss << in.rdbuf();
            out[fs::relative(e.path(), root).string()] = ss.str();
        }
    return out;
}

int run(const std::string &cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

void criterion10(Outcome &o) {
    const fs::path root = fs::temp_directory_path() / "jsmtk_acceptance_cli";
    fs::remove_all(root);
    fs::create_directories(root);
    const fs::path cfg = root / "small.ini";
    std::ofstream(cfg) << "[data]\nsubjects_per_class = 4\nmarker_intensity = 1.0\n"
                          "[jal]\nepochs = 2\nlearning_rate = 0.03\nlambda = 0.1\n"
                          "[registration]\nlevels = 2\nmax_iters = 20\n[ablation]\nmodes = early\n";
    const std::string cli = JSMTK_CLI_PATH;
    const std::string common = " --config " + cfg.string() + " --seed 7 --threads 1";
    std::vector<std::string> failures;
    for (const char *tag : {"a", "b"}) {
        const fs::path out = root / tag;
        const std::string data = (out / "data").string();
        const std::vector<std::pair<std::string, std::string>> steps = {
            {"gen-data", "gen-data" + common + " --out " + data},
            {"register", "register" + common + " --fixed " + data + "/sub-0015.mod1.jsmv --moving " + data +
                             "/sub-0000.mod1.jsmv --out " + (out / "reg").string()},
            {"jsm", "jsm" + common + " --field " + (out / "reg" / "field.jsmv").string() + " --out " + (out / "jsm").string()},
            {"train", "train" + common + " --data " + data + " --mode late --out " + (out / "model").string()},
            {"eval", "eval" + common + " --data " + data + " --model " + (out / "model").string() + " --out " +
                         (out / "eval").string()},
            {"ablate", "ablate" + common + " --data " + data + " --out " + (out / "ablate").string()},
            {"explain", "explain" + common + " --data " + data + " --model " + (out / "model").string() + " --out " +
                            (out / "explain").string()}};
        for (const auto &[name, args] : steps)
            if (run(cli + " " + args) != 0) failures.push_back(std::string(tag) + ":" + name);
    }
    const auto a = snapshot(root / "a"), b = snapshot(root / "b");
    std::size_t identical = 0;
    std::vector<std::string> differing;
    for (const auto &[name, bytes] : a) {
        const auto it = b.find(name);
        if (it != b.end() && it->second == bytes)
            ++identical;
        else
            differing.push_back(name);
    }
    o.require(failures.empty(), "commands exited nonzero");
    o.require(differing.empty() && a.size() == b.size() && !a.empty(), "byte identity");
    o.detail << "7 subcommands run twice, " << identical << '/' << a.size() << " output files byte-identical";
    for (const auto &d : differing) o.detail << " differs:" << d;
    for (const auto &f : failures) o.detail << " exit!=0:" << f;
    fs::remove_all(root);
}

} // namespace

int main(int argc, char **argv) {
    std::set<int> only;
    int seeds = 10;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string item;
            while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
        } else if (a == "--seeds" && i + 1 < argc) {
            seeds = std::stoi(argv[++i]);
        } else {
            std::cerr << "usage: acceptance [--only N[,M...]] [--seeds K]\n";
            return 2;
        }
    }
    const std::vector<std::pair<int, std::function<void(Outcome &)>>> criteria = {
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
        {6, [seeds](Outcome &o) { criterion6(o, seeds); }}, {7, criterion7}, {8, criterion8}, {9, criterion9},
        {10, criterion10}};
    int failed = 0;
    for (const auto &[id, fn] : criteria) {
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            fn(o);
        } catch (const std::exception &e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        failed += o.pass ? 0 : 1;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail.str() << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
