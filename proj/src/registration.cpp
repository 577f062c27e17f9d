#include "jsmtk/registration.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "jsmtk/errors.hpp"
#include "jsmtk/parallel.hpp"

namespace jsmtk {

void RegistrationConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("registration alpha must be >= 0");
    if (bins < 4) throw ConfigError("registration bins must be >= 4");
    if (levels < 1) throw ConfigError("registration levels must be >= 1");
    if (!(step > 0.0)) throw ConfigError("registration step must be > 0");
    if (max_iters < 0) throw ConfigError("registration max_iters must be >= 0");
    if (!(smooth_sigma >= 0.0)) throw ConfigError("registration smooth_sigma must be >= 0");
    if (!(tol > 0.0)) throw ConfigError("registration tol must be > 0");
}

IntensityRange IntensityRange::of(const Volume3D &vol) { return {vol.min(), vol.max()}; }

double to_bin_space(double value, IntensityRange range, int bins) {
    if (!(range.hi > range.lo)) return 0.0;
    const double t = (value - range.lo) / (range.hi - range.lo) * static_cast<double>(bins - 1);
    return std::clamp(t, 0.0, static_cast<double>(bins - 1));
}

namespace {

// Two-bin tent: weight (1 - frac) at bin, frac at bin + 1.
struct Tent {
    int bin;
    double frac;
};

Tent tent(double t, int bins) {
    int i0 = static_cast<int>(std::floor(t));
    if (i0 >= bins - 1) i0 = bins - 2;
    if (i0 < 0) i0 = 0;
    return {i0, t - static_cast<double>(i0)};
}

void check_same_dims(const Volume3D &a, const Volume3D &b, const char *what) {
    if (a.dims() != b.dims()) throw InputError(std::string(what) + ": volume dims differ");
}

double plogp_ratio(double p, double q1, double q2) { return p > 0.0 ? p * std::log(p / (q1 * q2)) : 0.0; }

double entropy(const std::vector<double> &q) {
    double h = 0.0;
    for (double v : q)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

} // namespace

JointHistogram::JointHistogram(int bins)
    : bins_(bins), p_(static_cast<std::size_t>(bins * bins), 0.0), q_moving_(static_cast<std::size_t>(bins), 0.0),
      q_fixed_(static_cast<std::size_t>(bins), 0.0) {
    if (bins < 4) throw InputError("histogram bins must be >= 4");
}

JointHistogram JointHistogram::build(const Volume3D &moving, const Volume3D &fixed, int bins,
                                     IntensityRange moving_range, IntensityRange fixed_range) {
    check_same_dims(moving, fixed, "joint histogram");
    JointHistogram h(bins);
    auto mv = moving.values();
    auto fv = fixed.values();
    const double inv_n = 1.0 / static_cast<double>(mv.size());
    for (std::size_t i = 0; i < mv.size(); ++i) {
        const Tent tm = tent(to_bin_space(mv[i], moving_range, bins), bins);
        const Tent tf = tent(to_bin_space(fv[i], fixed_range, bins), bins);
        const double wm[2] = {1.0 - tm.frac, tm.frac};
        const double wf[2] = {1.0 - tf.frac, tf.frac};
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                h.p_[static_cast<std::size_t>((tm.bin + a) * bins + tf.bin + b)] += wm[a] * wf[b] * inv_n;
    }
    for (int a = 0; a < bins; ++a)
        for (int b = 0; b < bins; ++b) {
            const double p = h.joint(a, b);
            h.q_moving_[static_cast<std::size_t>(a)] += p;
            h.q_fixed_[static_cast<std::size_t>(b)] += p;
        }
    return h;
}

double JointHistogram::mutual_information() const {
    double mi = 0.0;
    for (int a = 0; a < bins_; ++a)
        for (int b = 0; b < bins_; ++b) mi += plogp_ratio(joint(a, b), moving_marginal(a), fixed_marginal(b));
    return mi;
}

double JointHistogram::moving_entropy() const { return entropy(q_moving_); }
double JointHistogram::fixed_entropy() const { return entropy(q_fixed_); }

Volume3D warp(const Volume3D &moving, const DisplacementField &field, BoundaryPolicy policy) {
    const Dims dm = field.dims();
    Volume3D out(dm, moving.spacing());
    if (moving.dims() != dm) throw InputError("warp: field dims must match the volume dims");
    parallel_for(0, static_cast<std::size_t>(dm.d), [&](std::size_t zi) {
        const auto z = static_cast<std::int64_t>(zi);
        for (std::int64_t y = 0; y < dm.h; ++y)
            for (std::int64_t x = 0; x < dm.w; ++x) {
                const std::size_t i = out.index(x, y, z);
                out.values()[i] = trilinear_sample(moving, static_cast<double>(x) + field.comp[0].values()[i],
                                                   static_cast<double>(y) + field.comp[1].values()[i],
                                                   static_cast<double>(z) + field.comp[2].values()[i], policy);
            }
    });
    return out;
}

double mattes_mi(const Volume3D &warped, const Volume3D &fixed, int bins, IntensityRange warped_range,
                 IntensityRange fixed_range) {
    if (bins < 4) throw InputError("mattes_mi: bins must be >= 4");
    // A degenerate range puts all mass in one bin; MI is exactly zero.
    if (!(warped_range.hi > warped_range.lo) || !(fixed_range.hi > fixed_range.lo)) {
        check_same_dims(warped, fixed, "mattes_mi");
        return 0.0;
    }
    return JointHistogram::build(warped, fixed, bins, warped_range, fixed_range).mutual_information();
}

double mattes_mi(const Volume3D &warped, const Volume3D &fixed, int bins) {
    check_same_dims(warped, fixed, "mattes_mi");
    return mattes_mi(warped, fixed, bins, IntensityRange::of(warped), IntensityRange::of(fixed));
}

namespace {

// Second-difference stencils of the bending energy: three pure (weight 1) and three
// mixed (weight 2, i.e. both orderings of the mixed partial).
struct Stencil {
    int ax, ay, az; // first axis offsets
    int bx, by, bz; // second axis offsets
    double weight;
    bool mixed;
};

constexpr Stencil kStencils[6] = {
    {1, 0, 0, 1, 0, 0, 1.0, false}, {0, 1, 0, 0, 1, 0, 1.0, false}, {0, 0, 1, 0, 0, 1, 1.0, false},
    {1, 0, 0, 0, 1, 0, 2.0, true},  {1, 0, 0, 0, 0, 1, 2.0, true},  {0, 1, 0, 0, 0, 1, 2.0, true},
};

void require_bending_dims(const Dims &d) {
    if (d.w < 3 || d.h < 3 || d.d < 3) throw InputError("bending energy requires dims >= 3 along every axis");
}

template <typename Visit>
void for_each_second_difference(const Volume3D &v, Visit &&visit) {
    const Dims d = v.dims();
    for (std::int64_t z = 1; z < d.d - 1; ++z)
        for (std::int64_t y = 1; y < d.h - 1; ++y)
            for (std::int64_t x = 1; x < d.w - 1; ++x)
                for (const Stencil &s : kStencils) {
                    if (!s.mixed) {
                        const double val = v(x + s.ax, y + s.ay, z + s.az) - 2.0 * v(x, y, z) +
                                           v(x - s.ax, y - s.ay, z - s.az);
                        visit(x, y, z, s, val);
                    } else {
                        const int cx = s.ax + s.bx, cy = s.ay + s.by, cz = s.az + s.bz;
                        const int dx = s.ax - s.bx, dy = s.ay - s.by, dz = s.az - s.bz;
                        const double val = 0.25 * (v(x + cx, y + cy, z + cz) - v(x + dx, y + dy, z + dz) -
                                                   v(x - dx, y - dy, z - dz) + v(x - cx, y - cy, z - cz));
                        visit(x, y, z, s, val);
                    }
                }
}

} // namespace

double bending_energy(const DisplacementField &field) {
    require_bending_dims(field.dims());
    double e = 0.0;
    for (const auto &c : field.comp)
        for_each_second_difference(c, [&](std::int64_t, std::int64_t, std::int64_t, const Stencil &s, double val) {
            e += s.weight * val * val;
        });
    return e;
}

void bending_energy_gradient(const DisplacementField &field, DisplacementField &grad) {
    require_bending_dims(field.dims());
    for (int c = 0; c < 3; ++c) {
        Volume3D &g = grad.comp[c];
        for_each_second_difference(field.comp[c],
                                   [&](std::int64_t x, std::int64_t y, std::int64_t z, const Stencil &s, double val) {
                                       const double k = 2.0 * s.weight * val;
                                       if (!s.mixed) {
                                           g(x + s.ax, y + s.ay, z + s.az) += k;
                                           g(x, y, z) -= 2.0 * k;
                                           g(x - s.ax, y - s.ay, z - s.az) += k;
                                       } else {
                                           const int cx = s.ax + s.bx, cy = s.ay + s.by, cz = s.az + s.bz;
                                           const int dx = s.ax - s.bx, dy = s.ay - s.by, dz = s.az - s.bz;
                                           g(x + cx, y + cy, z + cz) += 0.25 * k;
                                           g(x + dx, y + dy, z + dz) -= 0.25 * k;
                                           g(x - dx, y - dy, z - dz) -= 0.25 * k;
                                           g(x - cx, y - cy, z - cz) += 0.25 * k;
                                       }
                                   });
    }
}

namespace {

void check_registration_inputs(const DisplacementField &field, const Volume3D &moving, const Volume3D &fixed) {
    check_same_dims(moving, fixed, "registration");
    if (field.dims() != fixed.dims()) throw InputError("registration: field dims must match the fixed image");
}

} // namespace

double registration_cost(const DisplacementField &field, const Volume3D &moving, const Volume3D &fixed,
                         const RegistrationConfig &config) {
    check_registration_inputs(field, moving, fixed);
    const Volume3D warped = warp(moving, field, config.policy);
    double cost = -mattes_mi(warped, fixed, config.bins, IntensityRange::of(moving), IntensityRange::of(fixed));
    if (config.alpha > 0.0) cost += config.alpha * bending_energy(field);
    return cost;
}

double registration_cost_gradient(const DisplacementField &field, const Volume3D &moving, const Volume3D &fixed,
                                  const RegistrationConfig &config, DisplacementField &grad) {
    check_registration_inputs(field, moving, fixed);
    const Dims dm = fixed.dims();
    const int bins = config.bins;
    const IntensityRange mr = IntensityRange::of(moving);
    const IntensityRange fr = IntensityRange::of(fixed);
    const std::size_t n = fixed.size();

    // Warped values and their spatial derivatives at the sample points.
    std::vector<SampleWithGradient> samples(n);
    parallel_for(0, static_cast<std::size_t>(dm.d), [&](std::size_t zi) {
        const auto z = static_cast<std::int64_t>(zi);
        for (std::int64_t y = 0; y < dm.h; ++y)
            for (std::int64_t x = 0; x < dm.w; ++x) {
                const std::size_t i = fixed.index(x, y, z);
                samples[i] = trilinear_sample_gradient(moving, static_cast<double>(x) + field.comp[0].values()[i],
                                                       static_cast<double>(y) + field.comp[1].values()[i],
                                                       static_cast<double>(z) + field.comp[2].values()[i],
                                                       config.policy);
            }
    });

    Volume3D warped(dm, fixed.spacing());
    for (std::size_t i = 0; i < n; ++i) warped.values()[i] = samples[i].value;
    const JointHistogram hist = JointHistogram::build(warped, fixed, bins, mr, fr);

    // d MI / dP_ab = log(P_ab / Q1_a) (the remaining terms cancel because the tent
    // weights of every sample sum to one).
    std::vector<double> dlog(static_cast<std::size_t>(bins * bins), 0.0);
    for (int a = 0; a < bins; ++a)
        for (int b = 0; b < bins; ++b) {
            const double p = hist.joint(a, b);
            if (p > 0.0) dlog[static_cast<std::size_t>(a * bins + b)] = std::log(p / hist.moving_marginal(a));
        }

    const double span = mr.hi - mr.lo;
    const double dt_dm = span > 0.0 ? static_cast<double>(bins - 1) / span : 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);

    grad = DisplacementField(dm, fixed.spacing());
    auto fv = fixed.values();
    for (std::size_t i = 0; i < n; ++i) {
        const double m = samples[i].value;
        const double t_raw = dt_dm * (m - mr.lo);
        // Clamped intensities do not move the histogram.
        if (dt_dm == 0.0 || t_raw < 0.0 || t_raw > static_cast<double>(bins - 1)) continue;
        const Tent tm = tent(to_bin_space(m, mr, bins), bins);
        const Tent tf = tent(to_bin_space(fv[i], fr, bins), bins);
        const double wf[2] = {1.0 - tf.frac, tf.frac};
        double dmi_dt = 0.0;
        for (int b = 0; b < 2; ++b) {
            const std::size_t col = static_cast<std::size_t>(tf.bin + b);
            dmi_dt += wf[b] * (dlog[static_cast<std::size_t>(tm.bin + 1) * static_cast<std::size_t>(bins) + col] -
                               dlog[static_cast<std::size_t>(tm.bin) * static_cast<std::size_t>(bins) + col]);
        }
        const double dcost_dm = -dmi_dt * dt_dm * inv_n;
        grad.comp[0].values()[i] = dcost_dm * samples[i].dx;
        grad.comp[1].values()[i] = dcost_dm * samples[i].dy;
        grad.comp[2].values()[i] = dcost_dm * samples[i].dz;
    }

    double cost = -hist.mutual_information();
    if (config.alpha > 0.0) {
        DisplacementField bend(dm, fixed.spacing());
        bending_energy_gradient(field, bend);
        for (int c = 0; c < 3; ++c) {
            auto g = grad.comp[c].values();
            auto bg = bend.comp[c].values();
            for (std::size_t i = 0; i < n; ++i) g[i] += config.alpha * bg[i];
        }
        cost += config.alpha * bending_energy(field);
    }
    return cost;
}

std::string RegistrationResult::log_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "# level iter cost step\n";
    for (const auto &e : log) os << e.level << ' ' << e.iter << ' ' << e.cost << ' ' << e.step << '\n';
    return os.str();
}

namespace {

bool can_halve(const Dims &d) { return d.w >= 8 && d.h >= 8 && d.d >= 8; }

void check_cost(double cost, int level, int iter) {
    if (!std::isfinite(cost))
        throw NumericalError("registration cost is not finite at level " + std::to_string(level) + ", iteration " +
                             std::to_string(iter));
}

} // namespace

RegistrationResult register_volumes(const Volume3D &moving, const Volume3D &fixed, const RegistrationConfig &config) {
    config.validate();
    check_same_dims(moving, fixed, "register");
    if (fixed.dims().w < 3 || fixed.dims().h < 3 || fixed.dims().d < 3)
        throw InputError("register: volumes must be at least 3 voxels along every axis");

    // Pyramid, finest first. Levels stop once a further halving would drop below 4 voxels.
    std::vector<Volume3D> pyr_m{moving}, pyr_f{fixed};
    while (static_cast<int>(pyr_m.size()) < config.levels && can_halve(pyr_m.back().dims())) {
        pyr_m.push_back(downsample2x(pyr_m.back()));
        pyr_f.push_back(downsample2x(pyr_f.back()));
    }
    const int nlev = static_cast<int>(pyr_m.size());

    RegistrationResult result;
    result.converged = true;
    DisplacementField field(pyr_f.back().dims(), pyr_f.back().spacing());
    for (int lvl = 0; lvl < nlev; ++lvl) {
        const Volume3D &m = pyr_m[static_cast<std::size_t>(nlev - 1 - lvl)];
        const Volume3D &f = pyr_f[static_cast<std::size_t>(nlev - 1 - lvl)];
        if (lvl > 0) field = upsample_field(field, f.dims());

        DisplacementField grad;
        double cost = registration_cost_gradient(field, m, f, config, grad);
        check_cost(cost, lvl, 0);
        double step = config.step;
        result.log.push_back({lvl, 0, cost, step});

        bool level_done = false;
        for (int it = 1; it <= config.max_iters && !level_done; ++it) {
            DisplacementField dir(f.dims(), f.spacing());
            double gmax = 0.0;
            for (int c = 0; c < 3; ++c) {
                dir.comp[c] = gaussian_smooth(grad.comp[c], config.smooth_sigma);
                for (double v : dir.comp[c].values()) gmax = std::max(gmax, std::fabs(v));
            }
            if (gmax == 0.0) break;

            bool accepted = false;
            DisplacementField trial, trial_grad;
            double trial_cost = cost;
            while (step >= 1e-4) {
                trial = field;
                const double scale = step / gmax;
                for (int c = 0; c < 3; ++c) {
                    auto t = trial.comp[c].values();
                    auto dv = dir.comp[c].values();
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= scale * dv[i];
                }
                trial_cost = registration_cost_gradient(trial, m, f, config, trial_grad);
                check_cost(trial_cost, lvl, it);
                if (trial_cost < cost) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted) break;

            const double rel = (cost - trial_cost) / std::max(std::fabs(cost), 1e-12);
            field = std::move(trial);
            grad = std::move(trial_grad);
            cost = trial_cost;
            result.log.push_back({lvl, it, cost, step});
            if (rel < config.tol) level_done = true;
            step = std::min(step * 1.5, config.step);
            if (it == config.max_iters && !level_done) result.converged = false;
        }
    }
    if (!field.all_finite()) throw NumericalError("registration produced a non-finite field");
    result.final_cost = registration_cost(field, moving, fixed, config);
    result.field = std::move(field);
    return result;
}

} // namespace jsmtk
