#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "jsmtk/errors.hpp"
#include "jsmtk/registration.hpp"

using namespace jsmtk;

namespace {

Volume3D random_volume(Dims d, std::mt19937_64 &rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Volume3D v(d);
    for (auto &x : v.values()) x = u(rng);
    return v;
}

// Smooth random field: a few Gaussian bumps per component, scaled to `amp` voxels.
DisplacementField smooth_field(Dims d, std::mt19937_64 &rng, double amp) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DisplacementField f(d);
    for (auto &c : f.comp) {
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
    }
    return f;
}

// Smooth blobby phantom on n^3.
Volume3D phantom(std::int64_t n, double shift_x = 0.0) {
    Volume3D v(Dims{n, n, n});
    const double c = 0.5 * static_cast<double>(n - 1);
    const struct {
        double x, y, z, s, a;
    } blobs[] = {{0.0, 0.0, 0.0, 0.22, 1.0}, {0.18, -0.1, 0.05, 0.08, 0.7}, {-0.15, 0.12, -0.08, 0.1, -0.5},
                 {0.05, 0.2, 0.15, 0.07, 0.6}, {-0.1, -0.18, 0.12, 0.09, 0.4}};
    for (std::int64_t z = 0; z < n; ++z)
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) {
                double val = 0.0;
                for (const auto &b : blobs) {
                    const double dx = (x - shift_x - c) / n - b.x, dy = (y - c) / n - b.y, dz = (z - c) / n - b.z;
                    val += b.a * std::exp(-(dx * dx + dy * dy + dz * dz) / (2 * b.s * b.s));
                }
                v(x, y, z) = val;
            }
    return v;
}

// Dense joint histogram oracle written directly from the definition: min-max map to
// [0, bins-1], split each sample between floor(t) and floor(t)+1 by distance.
double oracle_mi(const Volume3D &a, const Volume3D &b, int bins) {
    auto bin_weights = [bins](double v, double lo, double hi) {
        std::vector<double> w(static_cast<std::size_t>(bins), 0.0);
        if (hi <= lo) {
            w[0] = 1.0;
            return w;
        }
        const double t = (v - lo) / (hi - lo) * (bins - 1);
        const double base = std::min(std::floor(t), static_cast<double>(bins - 2));
        const double frac = t - base;
        w[static_cast<std::size_t>(base)] += 1.0 - frac;
        w[static_cast<std::size_t>(base) + 1] += frac;
        return w;
    };
    const double alo = a.min(), ahi = a.max(), blo = b.min(), bhi = b.max();
    std::vector<std::vector<double>> p(static_cast<std::size_t>(bins), std::vector<double>(static_cast<std::size_t>(bins)));
    const double n = static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto wa = bin_weights(a.values()[i], alo, ahi);
        const auto wb = bin_weights(b.values()[i], blo, bhi);
        for (int r = 0; r < bins; ++r)
            for (int c = 0; c < bins; ++c) p[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] += wa[static_cast<std::size_t>(r)] * wb[static_cast<std::size_t>(c)] / n;
    }
    std::vector<double> qa(static_cast<std::size_t>(bins)), qb(static_cast<std::size_t>(bins));
    for (int r = 0; r < bins; ++r)
        for (int c = 0; c < bins; ++c) {
            qa[static_cast<std::size_t>(r)] += p[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            qb[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
    double mi = 0.0;
    for (int r = 0; r < bins; ++r)
        for (int c = 0; c < bins; ++c) {
            const double pv = p[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            if (pv > 0) mi += pv * std::log(pv / (qa[static_cast<std::size_t>(r)] * qb[static_cast<std::size_t>(c)]));
        }
    return mi;
}

// Integer intensities 0..bins-1 (both ends present) land exactly on bin centers.
Volume3D bin_center_volume(Dims d, int bins, std::mt19937_64 &rng) {
    std::uniform_int_distribution<int> u(0, bins - 1);
    Volume3D v(d);
    for (auto &x : v.values()) x = u(rng);
    v.values()[0] = 0;
    v.values()[1] = bins - 1;
    return v;
}

double histogram_entropy(const Volume3D &v, int bins) {
    std::vector<double> count(static_cast<std::size_t>(bins), 0.0);
    for (double x : v.values()) count[static_cast<std::size_t>(x)] += 1.0;
    double h = 0.0;
    for (double c : count)
        if (c > 0) {
            const double p = c / static_cast<double>(v.size());
            h -= p * std::log(p);
        }
    return h;
}

} // namespace

TEST_CASE("warp: identity, translation and per-voxel oracle") {
    std::mt19937_64 rng(21);
    Volume3D m = random_volume(Dims{8, 8, 8}, rng);
    CHECK(warp(m, DisplacementField(m.dims())) == m);

    Volume3D ints(Dims{5, 4, 3});
    for (std::size_t i = 0; i < ints.size(); ++i) ints.values()[i] = static_cast<double>(i);
    DisplacementField shift(ints.dims());
    for (auto &v : shift.comp[0].values()) v = 1.0;
    Volume3D s = warp(ints, shift);
    for (std::int64_t z = 0; z < 3; ++z)
        for (std::int64_t y = 0; y < 4; ++y)
            for (std::int64_t x = 0; x < 5; ++x) CHECK(s(x, y, z) == ints(std::min<std::int64_t>(x + 1, 4), y, z));

    DisplacementField f = smooth_field(m.dims(), rng, 1.5);
    Volume3D w = warp(m, f, BoundaryPolicy::zero);
    for (std::int64_t z = 0; z < 8; ++z)
        for (std::int64_t y = 0; y < 8; ++y)
            for (std::int64_t x = 0; x < 8; ++x)
                CHECK(w(x, y, z) == trilinear_sample(m, x + f.comp[0](x, y, z), y + f.comp[1](x, y, z),
                                                     z + f.comp[2](x, y, z), BoundaryPolicy::zero));
    CHECK_THROWS_AS(warp(m, DisplacementField(Dims{8, 8, 7})), InputError);
}

TEST_CASE("joint histogram invariants") {
    std::mt19937_64 rng(22);
    Volume3D a = random_volume(Dims{6, 5, 4}, rng), b = random_volume(Dims{6, 5, 4}, rng, -2, 3);
    const int bins = 8;
    auto h = JointHistogram::build(a, b, bins, IntensityRange::of(a), IntensityRange::of(b));
    double total = 0.0;
    for (int r = 0; r < bins; ++r) {
        double row = 0.0;
        for (int c = 0; c < bins; ++c) {
            CHECK(h.joint(r, c) >= 0.0);
            row += h.joint(r, c);
        }
        CHECK(row == doctest::Approx(h.moving_marginal(r)).epsilon(1e-14));
        total += row;
    }
    for (int c = 0; c < bins; ++c) {
        double col = 0.0;
        for (int r = 0; r < bins; ++r) col += h.joint(r, c);
        CHECK(col == doctest::Approx(h.fixed_marginal(c)).epsilon(1e-14));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(to_bin_space(5.0, {5.0, 5.0}, bins) == 0.0);
    CHECK(to_bin_space(1.0, {0.0, 1.0}, bins) == bins - 1);
    CHECK_THROWS_AS(JointHistogram(3), InputError);
}

TEST_CASE("mutual information properties") {
    std::mt19937_64 rng(23);
    SUBCASE("self-information equals entropy for bin-center intensities") {
        for (int bins : {4, 8, 32}) {
            Volume3D x = bin_center_volume(Dims{7, 6, 5}, bins, rng);
            CHECK(mattes_mi(x, x, bins) == doctest::Approx(histogram_entropy(x, bins)).epsilon(1e-12));
        }
    }
    SUBCASE("self-information is bounded by the marginal entropy for generic intensities") {
        Volume3D x = random_volume(Dims{6, 6, 6}, rng);
        auto h = JointHistogram::build(x, x, 16, IntensityRange::of(x), IntensityRange::of(x));
        CHECK(h.mutual_information() <= h.moving_entropy() + 1e-12);
        CHECK(h.mutual_information() > 0.5 * h.moving_entropy());
    }
    SUBCASE("constant image carries no information") {
        Volume3D x = random_volume(Dims{5, 5, 5}, rng);
        Volume3D c(x.dims(), Spacing{}, 3.0);
        CHECK(mattes_mi(x, c, 16) == 0.0);
        CHECK(mattes_mi(c, x, 16) == 0.0);
        CHECK(mattes_mi(c, c, 16) == 0.0);
    }
    SUBCASE("nonnegative and symmetric on random pairs") {
        for (int rep = 0; rep < 20; ++rep) {
            Volume3D a = random_volume(Dims{5, 4, 6}, rng), b = random_volume(Dims{5, 4, 6}, rng);
            for (std::size_t i = 0; i < a.size(); i += 3) b.values()[i] = a.values()[i] * a.values()[i];
            const double ab = mattes_mi(a, b, 12), ba = mattes_mi(b, a, 12);
            CHECK(ab >= -1e-9);
            CHECK(std::fabs(ab - ba) <= 1e-9);
        }
    }
    SUBCASE("brute-force histogram oracle on 4x4x4") {
        for (int rep = 0; rep < 10; ++rep) {
            Volume3D a = random_volume(Dims{4, 4, 4}, rng), b = random_volume(Dims{4, 4, 4}, rng, 10, 20);
            for (int bins : {4, 7, 16}) CHECK(std::fabs(mattes_mi(a, b, bins) - oracle_mi(a, b, bins)) <= 1e-12);
        }
        // Hand-chosen intensities including ties and range endpoints.
        std::vector<double> va(64), vb(64);
        for (std::size_t i = 0; i < 64; ++i) {
            va[i] = static_cast<double>(i % 5) * 0.25;
            vb[i] = static_cast<double>((i * 7) % 9) - 4.0;
        }
        Volume3D a(Dims{4, 4, 4}, Spacing{}, va), b(Dims{4, 4, 4}, Spacing{}, vb);
        CHECK(std::fabs(mattes_mi(a, b, 6) - oracle_mi(a, b, 6)) <= 1e-12);
    }
}

TEST_CASE("bending energy examples") {
    CHECK(bending_energy(DisplacementField(Dims{4, 5, 6})) == 0.0);

    DisplacementField affine(Dims{5, 5, 5});
    const double A[3][3] = {{0.1, -0.3, 0.2}, {0.05, 0.4, -0.1}, {-0.2, 0.15, 0.3}};
    for (int c = 0; c < 3; ++c)
        for (std::int64_t z = 0; z < 5; ++z)
            for (std::int64_t y = 0; y < 5; ++y)
                for (std::int64_t x = 0; x < 5; ++x) affine.comp[c](x, y, z) = A[c][0] * x + A[c][1] * y + A[c][2] * z + 0.7;
    CHECK(bending_energy(affine) < 1e-26);

    DisplacementField quad(Dims{5, 5, 5});
    for (std::int64_t z = 0; z < 5; ++z)
        for (std::int64_t y = 0; y < 5; ++y)
            for (std::int64_t x = 0; x < 5; ++x) quad.comp[0](x, y, z) = static_cast<double>(x * x);
    CHECK(bending_energy(quad) == 108.0);

    // vy = x*y: only d2/dxdy = 1 survives, counted for both orderings -> 2 per interior voxel.
    DisplacementField mixed(Dims{5, 5, 5});
    for (std::int64_t z = 0; z < 5; ++z)
        for (std::int64_t y = 0; y < 5; ++y)
            for (std::int64_t x = 0; x < 5; ++x) mixed.comp[1](x, y, z) = static_cast<double>(x * y);
    CHECK(bending_energy(mixed) == 54.0);

    std::mt19937_64 rng(24);
    CHECK(bending_energy(smooth_field(Dims{6, 6, 6}, rng, 1.0)) > 0.0);
    CHECK_THROWS_AS(bending_energy(DisplacementField(Dims{2, 5, 5})), InputError);
}

TEST_CASE("bending energy gradient matches finite differences") {
    std::mt19937_64 rng(25);
    DisplacementField f(Dims{5, 6, 4});
    for (auto &c : f.comp)
        for (auto &v : c.values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    DisplacementField g(f.dims());
    bending_energy_gradient(f, g);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < f.size(); i += 5) {
            const double h = 1e-5, keep = f.comp[c].values()[i];
            f.comp[c].values()[i] = keep + h;
            const double up = bending_energy(f);
            f.comp[c].values()[i] = keep - h;
            const double dn = bending_energy(f);
            f.comp[c].values()[i] = keep;
            CHECK(g.comp[c].values()[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-6));
        }
}

TEST_CASE("registration cost composes its terms") {
    std::mt19937_64 rng(26);
    const int bins = 8;
    Volume3D x = bin_center_volume(Dims{6, 6, 6}, bins, rng);
    RegistrationConfig cfg;
    cfg.bins = bins;
    cfg.alpha = 0.0;
    const DisplacementField zero(x.dims());
    CHECK(registration_cost(zero, x, x, cfg) == doctest::Approx(-histogram_entropy(x, bins)).epsilon(1e-12));
    const double c0 = registration_cost(zero, x, x, cfg);
    cfg.alpha = 5.0;
    CHECK(registration_cost(zero, x, x, cfg) == c0);

    Volume3D m = random_volume(Dims{6, 6, 6}, rng), fx = random_volume(Dims{6, 6, 6}, rng);
    DisplacementField f = smooth_field(m.dims(), rng, 1.0);
    cfg.alpha = 0.3;
    cfg.bins = 10;
    const double direct =
        -mattes_mi(warp(m, f), fx, 10, IntensityRange::of(m), IntensityRange::of(fx)) + 0.3 * bending_energy(f);
    CHECK(registration_cost(f, m, fx, cfg) == doctest::Approx(direct).epsilon(1e-13));
}

TEST_CASE("registration cost gradient matches central differences on 6^3") {
    std::mt19937_64 rng(27);
    for (int rep = 0; rep < 3; ++rep) {
        Volume3D m = random_volume(Dims{6, 6, 6}, rng), fx = random_volume(Dims{6, 6, 6}, rng);
        DisplacementField f = smooth_field(m.dims(), rng, 0.8);
        RegistrationConfig cfg;
        cfg.bins = 8;
        cfg.alpha = 0.05;
        DisplacementField g(f.dims());
        const double cost = registration_cost_gradient(f, m, fx, cfg, g);
        CHECK(cost == doctest::Approx(registration_cost(f, m, fx, cfg)).epsilon(1e-13));
        // Trilinear sampling and tent binning are piecewise smooth; a central difference
        // whose stencil straddles a voxel node or a bin edge does not estimate the
        // derivative, so those entries are skipped (and counted).
        const IntensityRange mr = IntensityRange::of(m);
        double worst = 0.0;
        std::size_t skipped = 0;
        for (int c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double h = 1e-4, keep = f.comp[c].values()[i];
                const auto voxel = static_cast<std::int64_t>(i);
                const std::int64_t coord = c == 0 ? voxel % 6 : c == 1 ? (voxel / 6) % 6 : voxel / 36;
                const double pos = static_cast<double>(coord) + keep;
                f.comp[c].values()[i] = keep + h;
                const double up = registration_cost(f, m, fx, cfg);
                const double bin_up = to_bin_space(warp(m, f).values()[i], mr, cfg.bins);
                f.comp[c].values()[i] = keep - h;
                const double dn = registration_cost(f, m, fx, cfg);
                const double bin_dn = to_bin_space(warp(m, f).values()[i], mr, cfg.bins);
                f.comp[c].values()[i] = keep;
                const bool node_kink = std::floor(pos + h) != std::floor(pos - h);
                const bool bin_kink = std::floor(bin_up) != std::floor(bin_dn);
                if (node_kink || bin_kink) {
                    ++skipped;
                    continue;
                }
                const double fd = (up - dn) / (2 * h), an = g.comp[c].values()[i];
                worst = std::max(worst, std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-3}));
            }
        CHECK(worst < 1e-4);
        CHECK(skipped < f.size() * 3 / 50);
    }
}

TEST_CASE("registering an image to itself keeps the identity") {
    // Quantized to bin centers, MI(X, X) reaches its upper bound H(X) at the identity.
    // Generic intensities do not have this property under tent binning: moving samples
    // onto bin centers sharpens the joint histogram.
    RegistrationConfig cfg;
    Volume3D x = phantom(16);
    const double lo = x.min(), hi = x.max();
    for (auto &v : x.values()) v = std::round((v - lo) / (hi - lo) * (cfg.bins - 1));
    // Single level: downsampled levels are no longer quantized.
    cfg.alpha = 0.0;
    cfg.levels = 1;
    cfg.max_iters = 30;
    auto r = register_volumes(x, x, cfg);
    CHECK(r.field.max_norm() < 0.1);
    CHECK(std::fabs(r.final_cost + histogram_entropy(x, cfg.bins)) < 1e-6);
}

TEST_CASE("registration recovers a 2-voxel translation on a 32^3 phantom") {
    // moving(x) = fixed(x - 2): the recovered v should be +2 along x.
    Volume3D fixed = phantom(32), moving = phantom(32, 2.0);
    RegistrationConfig cfg;
    auto r = register_volumes(moving, fixed, cfg);
    double sum = 0.0;
    int n = 0;
    const double thresh = 0.2 * fixed.max();
    for (std::int64_t z = 0; z < 32; ++z)
        for (std::int64_t y = 0; y < 32; ++y)
            for (std::int64_t x = 0; x < 32; ++x)
                if (fixed(x, y, z) > thresh) {
                    sum += r.field.comp[0](x, y, z);
                    ++n;
                }
    REQUIRE(n > 100);
    const double mean_vx = sum / n;
    MESSAGE("mean recovered vx over support: " << mean_vx);
    CHECK(mean_vx == doctest::Approx(2.0).epsilon(0.25));

    // Cost history is non-increasing over accepted steps within a level.
    for (std::size_t i = 1; i < r.log.size(); ++i)
        if (r.log[i].level == r.log[i - 1].level)
            CHECK(r.log[i].cost <= r.log[i - 1].cost + cfg.tol * std::fabs(r.log[i - 1].cost));
    CHECK(r.field.all_finite());

    std::istringstream lines(r.log_text());
    std::string header;
    std::getline(lines, header);
    CHECK(header == "# level iter cost step");
    int level = -1, iter = -1;
    double cost = 0, step = 0;
    lines >> level >> iter >> cost >> step;
    CHECK(level == 0);
    CHECK(iter == 0);
}

TEST_CASE("registration config validation") {
    RegistrationConfig c;
    c.bins = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.levels = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.step = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.tol = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.alpha = -1.0;
    CHECK_THROWS_AS(register_volumes(phantom(8), phantom(8), c), ConfigError);
    CHECK_THROWS_AS(register_volumes(phantom(8), phantom(9), RegistrationConfig{}), InputError);
}
