#include "jsmtk/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "jsmtk/errors.hpp"
#include "jsmtk/parallel.hpp"
#include "jsmtk/rng.hpp"
#include "jsmtk/volume_io.hpp"

namespace jsmtk {

const char *class_name(int label) {
    static const char *names[kNumClasses] = {"CN", "MCI", "MLD", "SEV"};
    if (label < 0 || label >= kNumClasses) throw InputError("class label out of range: " + std::to_string(label));
    return names[label];
}

void PhantomSpec::validate() const {
    if (dim < 8) throw ConfigError("phantom dim must be >= 8");
    if (blobs < 0) throw ConfigError("blob count must be >= 0");
    if (!(noise_sigma >= 0.0) || !(mod2_noise_sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
    if (atrophy[0] != 0.0) throw ConfigError("CN atrophy amplitude must be 0");
    for (int k = 1; k < kNumClasses; ++k)
        if (!(atrophy[static_cast<std::size_t>(k)] >= atrophy[static_cast<std::size_t>(k - 1)]))
            throw ConfigError("atrophy amplitudes must be non-decreasing CN <= MCI <= MLD <= SEV");
    if (!(atrophy[kNumClasses - 1] < 1.0)) throw ConfigError("atrophy amplitude must stay below 1");
    for (double c : atrophy_center)
        if (!(c > 0.0 && c < 1.0)) throw ConfigError("atrophy center must lie inside the volume");
    if (!(atrophy_radius > 0.0) || !(ventricle_radius > 0.0) || !(blob_sigma > 0.0) || !(random_sigma > 0.0))
        throw ConfigError("radii and sigmas must be > 0");
    for (double c : atrophy_center) {
        const double lo = c * (dim - 1) - 1.5 * atrophy_radius * dim;
        const double hi = c * (dim - 1) + 1.5 * atrophy_radius * dim;
        if (lo < 0.0 || hi > dim - 1) throw ConfigError("atrophy region extends outside the volume");
    }
    if (random_bumps < 0 || !(random_amplitude >= 0.0)) throw ConfigError("random deformation must be >= 0");
    if (!(mod2_gamma > 0.0)) throw ConfigError("mod2_gamma must be > 0");
    if (marker_size < 1 || marker_size > dim / 4) throw ConfigError("marker_size must be in [1, dim/4]");
    if (!(marker_intensity >= 0.0 && marker_intensity <= 1.0)) throw ConfigError("marker_intensity must be in [0, 1]");
    registration.validate();
}

namespace {

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

std::array<double, 3> atrophy_center_voxels(const PhantomSpec &s) {
    return {s.atrophy_center[0] * (s.dim - 1), s.atrophy_center[1] * (s.dim - 1), s.atrophy_center[2] * (s.dim - 1)};
}

Dims cube(int n) { return Dims{n, n, n}; }

} // namespace

Template::Template(const PhantomSpec &spec) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(derive_seed(spec.seed, {0x7E4D}));
    const double n = spec.dim;
    const double c0 = (n - 1) / 2.0;
    std::uniform_real_distribution<double> pos(-0.22 * n, 0.22 * n);
    std::uniform_real_distribution<double> height(-0.2, 0.3);
    std::uniform_real_distribution<double> jitter(0.8, 1.2);
    for (int b = 0; b < spec.blobs; ++b) {
        Blob bl;
        bl.x = c0 + pos(rng);
        bl.y = c0 + pos(rng);
        bl.z = c0 + pos(rng);
        bl.sigma = spec.blob_sigma * n * jitter(rng);
        bl.height = height(rng);
        blobs_.push_back(bl);
    }
}

double Template::operator()(double x, double y, double z) const {
    const double n = spec_.dim;
    const double c0 = (n - 1) / 2.0;
    const double rx = 0.40 * n, ry = 0.36 * n, rz = 0.38 * n;
    const double rho = std::sqrt(std::pow((x - c0) / rx, 2) + std::pow((y - c0) / ry, 2) + std::pow((z - c0) / rz, 2));
    const double brain = sigmoid((1.0 - rho) / 0.06);
    double tissue = 0.55;
    for (const auto &b : blobs_) {
        const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y) + (z - b.z) * (z - b.z);
        tissue += b.height * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
    }
    const auto ca = atrophy_center_voxels(spec_);
    const double dv = std::sqrt((x - ca[0]) * (x - ca[0]) + (y - ca[1]) * (y - ca[1]) + (z - ca[2]) * (z - ca[2]));
    const double vent = sigmoid((spec_.ventricle_radius * n - dv) / 0.6);
    const double v = std::clamp(brain * tissue * (1.0 - 0.85 * vent), 0.0, 1.0);
    return v < 1e-3 ? 0.0 : v;
}

Volume3D Template::render() const {
    Volume3D out(cube(spec_.dim));
    for (std::int64_t z = 0; z < spec_.dim; ++z)
        for (std::int64_t y = 0; y < spec_.dim; ++y)
            for (std::int64_t x = 0; x < spec_.dim; ++x)
                out(x, y, z) = (*this)(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
    return out;
}

double Template::mod2_remap(double v) const { return std::pow(std::clamp(v, 0.0, 1.0), spec_.mod2_gamma); }

Volume3D Template::render_mod2() const {
    Volume3D t = render();
    for (auto &v : t.values()) v = mod2_remap(v);
    return contrast_stretch(t, 1.0, 99.0);
}

Volume3D make_template(const PhantomSpec &spec) { return Template(spec).render(); }

Subject make_subject(const Template &tmpl, int label, const PhantomSpec &spec, std::uint64_t subject_seed,
                     const std::string &id) {
    spec.validate();
    class_name(label);
    const int n = spec.dim;
    const double nd = n;
    const double c0 = (nd - 1) / 2.0;
    std::mt19937_64 rng(subject_seed);

    struct Bump {
        double c[3];
        double a[3];
    };
    std::vector<Bump> bumps(static_cast<std::size_t>(spec.random_bumps));
    std::uniform_real_distribution<double> pos(-0.25 * nd, 0.25 * nd);
    std::normal_distribution<double> amp(0.0, spec.random_amplitude);
    for (auto &b : bumps) {
        for (double &c : b.c) c = c0 + pos(rng);
        for (double &a : b.a) a = amp(rng);
    }
    const double s2 = std::pow(spec.random_sigma * nd, 2);
    const double a_atr = spec.atrophy[static_cast<std::size_t>(label)];
    const double r2 = std::pow(spec.atrophy_radius * nd, 2);
    const auto ca = atrophy_center_voxels(spec);
    const double mask_r2 = std::pow(1.5 * spec.atrophy_radius * nd, 2);

    Subject s;
    s.id = id;
    s.label = label;
    s.seed = subject_seed;
    s.true_field = DisplacementField(cube(n));
    s.true_jsm = Volume3D(cube(n));
    s.mask = Volume3D(cube(n));
    Volume3D clean(cube(n));
    for (std::int64_t z = 0; z < n; ++z)
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) {
                const double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
                double u[3] = {0, 0, 0};
                double J[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
                // atrophy: u = -a (p - c) exp(-|p - c|^2 / 2 r^2)
                double d[3], dd = 0.0;
                for (int i = 0; i < 3; ++i) {
                    d[i] = p[i] - ca[static_cast<std::size_t>(i)];
                    dd += d[i] * d[i];
                }
                if (a_atr != 0.0) {
                    const double e = std::exp(-dd / (2.0 * r2));
                    for (int i = 0; i < 3; ++i) {
                        u[i] -= a_atr * d[i] * e;
                        for (int j = 0; j < 3; ++j) J[i][j] -= a_atr * e * ((i == j ? 1.0 : 0.0) - d[i] * d[j] / r2);
                    }
                }
                // random bumps: u = A exp(-|p - c|^2 / 2 s^2)
                for (const auto &b : bumps) {
                    double q[3], qq = 0.0;
                    for (int i = 0; i < 3; ++i) {
                        q[i] = p[i] - b.c[i];
                        qq += q[i] * q[i];
                    }
                    const double e = std::exp(-qq / (2.0 * s2));
                    for (int i = 0; i < 3; ++i) {
                        u[i] += b.a[i] * e;
                        for (int j = 0; j < 3; ++j) J[i][j] -= b.a[i] * e * q[j] / s2;
                    }
                }
                for (int i = 0; i < 3; ++i) s.true_field.comp[static_cast<std::size_t>(i)](x, y, z) = u[i];
                s.true_jsm(x, y, z) = determinant(Mat3{{{J[0][0], J[0][1], J[0][2]},
                                                        {J[1][0], J[1][1], J[1][2]},
                                                        {J[2][0], J[2][1], J[2][2]}}});
                s.mask(x, y, z) = dd <= mask_r2 ? 1.0 : 0.0;
                clean(x, y, z) = tmpl(p[0] + u[0], p[1] + u[1], p[2] + u[2]);
            }

    std::normal_distribution<double> noise1(0.0, spec.noise_sigma);
    std::normal_distribution<double> noise2(0.0, spec.mod2_noise_sigma);
    s.mod1 = clean;
    for (auto &v : s.mod1.values()) v = std::clamp(v + (spec.noise_sigma > 0 ? noise1(rng) : 0.0), 0.0, 1.0);
    Volume3D remapped = clean;
    for (auto &v : remapped.values()) v = tmpl.mod2_remap(v);
    s.mod2 = contrast_stretch(remapped, 1.0, 99.0);
    for (auto &v : s.mod2.values()) v = std::clamp(v + (spec.mod2_noise_sigma > 0 ? noise2(rng) : 0.0), 0.0, 1.0);

    if (spec.jsm_source == JsmSource::analytic) {
        s.field1 = s.field2 = s.true_field;
        s.jsm1 = s.jsm2 = s.true_jsm;
    } else {
        // moving = template, fixed = subject, so the recovered v lives on the subject grid.
        s.field1 = register_volumes(tmpl.render(), s.mod1, spec.registration).field;
        s.field2 = register_volumes(tmpl.render_mod2(), s.mod2, spec.registration).field;
        s.jsm1 = compute_jsm(s.field1);
        s.jsm2 = compute_jsm(s.field2);
    }
    return s;
}

Volume3D marker_mask(const PhantomSpec &spec) {
    Volume3D m(cube(spec.dim));
    for (std::int64_t z = 0; z < spec.marker_size; ++z)
        for (std::int64_t y = 0; y < spec.marker_size; ++y)
            for (std::int64_t x = 0; x < spec.marker_size; ++x) m(x, y, z) = 1.0;
    return m;
}

void inject_confounder(Subject &s, bool correlated, const PhantomSpec &spec, std::uint64_t rng_seed) {
    const Volume3D marker = marker_mask(spec);
    if (marker.dims() != s.mod1.dims()) throw ConfigError("marker grid does not match the subject");
    for (std::size_t i = 0; i < marker.size(); ++i)
        if (marker.values()[i] > 0.0 && s.mask.values()[i] > 0.0)
            throw ConfigError("confounder marker overlaps the atrophy region");
    int k = s.label;
    if (!correlated) {
        std::mt19937_64 rng(rng_seed);
        k = std::uniform_int_distribution<int>(0, kNumClasses - 1)(rng);
    }
    const double value = spec.marker_intensity * k / 3.0;
    for (std::size_t i = 0; i < marker.size(); ++i)
        if (marker.values()[i] > 0.0) {
            s.mod1.values()[i] = value;
            s.mod2.values()[i] = value;
        }
    s.marker_class = k;
}

AdasynResult adasyn_oversample(const std::vector<MultiSample> &train, int k, double beta, std::uint64_t seed) {
    if (k < 1) throw ConfigError("ADASYN k must be >= 1");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("ADASYN beta must be in [0, 1]");
    AdasynResult res;
    res.samples = train;
    if (train.empty()) return res;

    int nclass = 0;
    for (const auto &s : train) nclass = std::max(nclass, s.label + 1);
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(nclass));
    for (std::size_t i = 0; i < train.size(); ++i) members[static_cast<std::size_t>(train[i].label)].push_back(i);
    std::size_t majority = 0;
    for (const auto &m : members) majority = std::max(majority, m.size());
    res.generated_per_class.assign(static_cast<std::size_t>(nclass), 0);

    // Pairwise squared distances on flattened modality-1 volumes.
    const std::size_t n = train.size();
    std::vector<double> dist(n * n, 0.0);
    parallel_for(0, n, [&](std::size_t i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double *a = train[i].x1.data();
            const double *b = train[j].x1.data();
            double d = 0.0;
            for (std::size_t v = 0; v < train[i].x1.size(); ++v) d += (a[v] - b[v]) * (a[v] - b[v]);
            dist[i * n + j] = d;
        }
    });
    auto nearest = [&](std::size_t i, const std::vector<std::size_t> &pool, std::size_t kk) {
        std::vector<std::size_t> cand;
        for (std::size_t j : pool)
            if (j != i) cand.push_back(j);
        const std::size_t m = std::min(kk, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m), cand.end(),
                          [&](std::size_t a, std::size_t b) {
                              return dist[i * n + a] < dist[i * n + b] || (dist[i * n + a] == dist[i * n + b] && a < b);
                          });
        cand.resize(m);
        return cand;
    };
    std::vector<std::size_t> everyone(n);
    std::iota(everyone.begin(), everyone.end(), 0);

    std::mt19937_64 rng(seed);
    auto blend = [](const Tensor &a, const Tensor &b, double u) {
        Tensor out(a.shape());
        for (std::size_t v = 0; v < a.size(); ++v) out[v] = a[v] + u * (b[v] - a[v]);
        return out;
    };
    for (int c = 0; c < nclass; ++c) {
        const auto &mem = members[static_cast<std::size_t>(c)];
        if (mem.empty() || mem.size() >= majority) continue;
        const auto G = static_cast<double>(majority - mem.size()) * beta;
        if (G <= 0.0) continue;
        if (mem.size() == 1) {
            res.warnings.push_back(std::string("class ") + std::to_string(c) +
                                   " has a single sample; duplicating it with small noise");
            std::normal_distribution<double> jit(0.0, 0.01);
            const auto reps = static_cast<std::size_t>(std::llround(G));
            for (std::size_t r = 0; r < reps; ++r) {
                MultiSample s = train[mem[0]];
                for (auto *t : {&s.x1, &s.x2})
                    for (auto &v : t->values()) v += jit(rng);
                s.id = "syn-" + std::to_string(c) + "-" + std::to_string(r);
                res.samples.push_back(std::move(s));
                res.provenance.push_back({mem[0], mem[0], 0.0});
            }
            res.generated_per_class[static_cast<std::size_t>(c)] = reps;
            continue;
        }
        std::vector<double> ratio(mem.size());
        double total = 0.0;
        for (std::size_t a = 0; a < mem.size(); ++a) {
            const auto nb = nearest(mem[a], everyone, static_cast<std::size_t>(k));
            std::size_t other = 0;
            for (std::size_t j : nb) other += train[j].label != c ? 1 : 0;
            ratio[a] = static_cast<double>(other) / static_cast<double>(k);
            total += ratio[a];
        }
        if (total == 0.0) {
            // No majority neighbors anywhere: spread the budget evenly.
            std::fill(ratio.begin(), ratio.end(), 1.0);
            total = static_cast<double>(mem.size());
            res.warnings.push_back("class " + std::to_string(c) + " has no other-class neighbors; uniform allocation");
        }
        std::size_t made = 0;
        for (std::size_t a = 0; a < mem.size(); ++a) {
            const auto g = static_cast<std::size_t>(std::llround(ratio[a] / total * G));
            const auto nb = nearest(mem[a], mem, static_cast<std::size_t>(k));
            std::uniform_int_distribution<std::size_t> pick(0, nb.size() - 1);
            std::uniform_real_distribution<double> uu(0.0, 1.0);
            for (std::size_t r = 0; r < g; ++r) {
                const std::size_t i = mem[a];
                const std::size_t z = nb[pick(rng)];
                const double u = uu(rng);
                MultiSample s;
                s.id = "syn-" + std::to_string(c) + "-" + std::to_string(made);
                s.label = c;
                s.x1 = blend(train[i].x1, train[z].x1, u);
                s.x2 = blend(train[i].x2, train[z].x2, u);
                s.jsm1 = blend(train[i].jsm1, train[z].jsm1, u);
                s.jsm2 = blend(train[i].jsm2, train[z].jsm2, u);
                res.samples.push_back(std::move(s));
                res.provenance.push_back({i, z, u});
                ++made;
            }
        }
        res.generated_per_class[static_cast<std::size_t>(c)] = made;
    }
    return res;
}

std::vector<Split> split_by_subject(const std::vector<int> &labels, const std::vector<std::string> &ids,
                                    double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0, 1)");
    if (labels.size() != ids.size()) throw InputError("labels and ids differ in length");
    {
        std::vector<std::string> sorted = ids;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw InputError("subject ids must be unique");
    }
    int nclass = 0;
    for (int l : labels) nclass = std::max(nclass, l + 1);
    std::vector<Split> out(labels.size(), Split::train);
    for (int c = 0; c < nclass; ++c) {
        std::vector<std::size_t> mem;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) mem.push_back(i);
        if (mem.empty()) continue;
        if (mem.size() < 2) throw ConfigError("class " + std::to_string(c) + " has fewer than 2 subjects to split");
        std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
        std::shuffle(mem.begin(), mem.end(), rng);
        auto nt = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(mem.size())));
        nt = std::clamp<std::size_t>(nt, 1, mem.size() - 1);
        for (std::size_t i = 0; i < nt; ++i) out[mem[i]] = Split::test;
    }
    return out;
}

Dataset make_benchmark(const PhantomSpec &spec, int n_per_class, double test_fraction, bool confounder) {
    spec.validate();
    if (n_per_class < 2) throw ConfigError("need at least 2 subjects per class");
    Dataset d;
    d.spec = spec;
    const Template tmpl(spec);
    const auto total = static_cast<std::size_t>(n_per_class * kNumClasses);
    d.subjects.resize(total);
    parallel_for(0, total, [&](std::size_t i) {
        char id[32];
        std::snprintf(id, sizeof id, "sub-%04zu", i);
        const int label = static_cast<int>(i / static_cast<std::size_t>(n_per_class));
        d.subjects[i] = make_subject(tmpl, label, spec, derive_seed(spec.seed, {i}), id);
    });
    std::vector<int> labels;
    std::vector<std::string> ids;
    for (const auto &s : d.subjects) {
        labels.push_back(s.label);
        ids.push_back(s.id);
    }
    d.split = split_by_subject(labels, ids, test_fraction, derive_seed(spec.seed, {0x5911}));
    if (confounder)
        for (std::size_t i = 0; i < total; ++i)
            inject_confounder(d.subjects[i], d.split[i] == Split::train, spec, derive_seed(spec.seed, {i, 0xC0F}));
    return d;
}

namespace {

Tensor as_tensor(const Volume3D &v) {
    const Dims &d = v.dims();
    return Tensor(Shape{1, d.d, d.h, d.w}, std::vector<double>(v.values().begin(), v.values().end()));
}

} // namespace

MultiSample to_training_sample(const Subject &s) {
    MultiSample m;
    m.id = s.id;
    m.label = s.label;
    m.x1 = as_tensor(s.mod1);
    m.x2 = as_tensor(s.mod2);
    m.jsm1 = as_tensor(s.jsm1);
    m.jsm2 = as_tensor(s.jsm2);
    return m;
}

std::vector<MultiSample> samples_of(const Dataset &d, Split which) {
    std::vector<MultiSample> out;
    for (std::size_t i = 0; i < d.subjects.size(); ++i)
        if (d.split.at(i) == which) out.push_back(to_training_sample(d.subjects[i]));
    return out;
}

namespace {

std::string join_list(const double *v, std::size_t n) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < n; ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<double> parse_list(const std::string &key, const std::string &s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception &) {
            throw ConfigError(key + ": bad list entry '" + item + "'");
        }
    }
    return out;
}

} // namespace

void write_dataset(const Dataset &d, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    const PhantomSpec &s = d.spec;
    std::ostringstream os;
    os.precision(17);
    os << "# synthetic multimodal dataset\n[data]\n";
    os << "dim = " << s.dim << "\nblobs = " << s.blobs << "\nblob_sigma = " << s.blob_sigma
       << "\nnoise_sigma = " << s.noise_sigma << "\natrophy = " << join_list(s.atrophy.data(), s.atrophy.size())
       << "\natrophy_center = " << join_list(s.atrophy_center.data(), 3) << "\natrophy_radius = " << s.atrophy_radius
       << "\nventricle_radius = " << s.ventricle_radius << "\nrandom_bumps = " << s.random_bumps
       << "\nrandom_amplitude = " << s.random_amplitude << "\nrandom_sigma = " << s.random_sigma
       << "\nmod2_gamma = " << s.mod2_gamma << "\nmod2_noise_sigma = " << s.mod2_noise_sigma
       << "\nmarker_size = " << s.marker_size << "\nmarker_intensity = " << s.marker_intensity
       << "\njsm_source = " << (s.jsm_source == JsmSource::analytic ? "analytic" : "registered")
       << "\nseed = " << s.seed << "\n\n[subjects]\n";
    for (std::size_t i = 0; i < d.subjects.size(); ++i) {
        const Subject &sub = d.subjects[i];
        os << sub.id << " = label:" << sub.label << " class:" << class_name(sub.label)
           << " split:" << (d.split.at(i) == Split::train ? "train" : "test") << " seed:" << sub.seed
           << " marker:" << sub.marker_class << "\n";
        const auto base = dir / sub.id;
        write_volume(sub.mod1, base.string() + ".mod1.jsmv", VoxelType::f64);
        write_volume(sub.mod2, base.string() + ".mod2.jsmv", VoxelType::f64);
        write_volume(sub.jsm1, base.string() + ".jsm1.jsmv", VoxelType::f64);
        write_volume(sub.jsm2, base.string() + ".jsm2.jsmv", VoxelType::f64);
        write_volume(sub.true_jsm, base.string() + ".true_jsm.jsmv", VoxelType::f64);
        write_volume(sub.mask, base.string() + ".mask.jsmv", VoxelType::f64);
        write_field(sub.field1, base.string() + ".field1.jsmv", VoxelType::f64x3);
        write_field(sub.field2, base.string() + ".field2.jsmv", VoxelType::f64x3);
        write_field(sub.true_field, base.string() + ".true_field.jsmv", VoxelType::f64x3);
    }
    std::ofstream out(dir / "manifest.txt", std::ios::trunc);
    if (!out) throw FormatError("cannot write manifest in '" + dir.string() + "'", 0);
    out << os.str();
}

Dataset read_dataset(const std::filesystem::path &dir) {
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw FormatError("no manifest.txt in '" + dir.string() + "'", 0);
    std::ostringstream ss;
    ss << in.rdbuf();
    ConfigMap cfg;
    try {
        cfg = parse_config_text(ss.str());
    } catch (const ConfigError &e) {
        throw FormatError(std::string("manifest: ") + e.what(), 0);
    }
    Dataset d;
    ConfigMap data_keys;
    for (const auto &[k, v] : cfg)
        if (k.starts_with("data.")) data_keys[k] = v;
    d.spec = phantom_spec_from(data_keys);
    for (const auto &[k, v] : cfg) {
        if (!k.starts_with("subjects.")) continue;
        Subject s;
        s.id = k.substr(9);
        std::istringstream fields(v);
        std::string tok;
        Split split = Split::train;
        while (fields >> tok) {
            const auto colon = tok.find(':');
            if (colon == std::string::npos) throw FormatError("manifest: malformed subject entry for " + s.id, 0);
            const std::string key = tok.substr(0, colon), val = tok.substr(colon + 1);
            try {
                if (key == "label") s.label = std::stoi(val);
                else if (key == "seed") s.seed = std::stoull(val);
                else if (key == "marker") s.marker_class = std::stoi(val);
                else if (key == "split") {
                    if (val != "train" && val != "test") throw std::invalid_argument(val);
                    split = val == "train" ? Split::train : Split::test;
                }
            } catch (const std::exception &) {
                throw FormatError("manifest: bad value '" + val + "' for " + key + " of " + s.id, 0);
            }
        }
        const auto base = (dir / s.id).string();
        s.mod1 = read_volume(base + ".mod1.jsmv");
        s.mod2 = read_volume(base + ".mod2.jsmv");
        s.jsm1 = read_volume(base + ".jsm1.jsmv");
        s.jsm2 = read_volume(base + ".jsm2.jsmv");
        s.true_jsm = read_volume(base + ".true_jsm.jsmv");
        s.mask = read_volume(base + ".mask.jsmv");
        s.field1 = read_field(base + ".field1.jsmv");
        s.field2 = read_field(base + ".field2.jsmv");
        s.true_field = read_field(base + ".true_field.jsmv");
        d.subjects.push_back(std::move(s));
        d.split.push_back(split);
    }
    if (d.subjects.empty()) throw FormatError("manifest lists no subjects", 0);
    return d;
}

PhantomSpec phantom_spec_from(const ConfigMap &cfg, PhantomSpec base) {
    static const char *known[] = {"dim", "blobs", "blob_sigma", "noise_sigma", "atrophy", "atrophy_center",
                                  "atrophy_radius", "ventricle_radius", "random_bumps", "random_amplitude",
                                  "random_sigma", "mod2_gamma", "mod2_noise_sigma", "marker_size",
                                  "marker_intensity", "jsm_source", "seed", "subjects_per_class", "test_fraction",
                                  "confounder", "adasyn_k", "adasyn_beta"};
    for (const auto &[k, v] : cfg) {
        if (!k.starts_with("data.")) continue;
        const std::string key = k.substr(5);
        if (std::find_if(std::begin(known), std::end(known), [&](const char *n) { return key == n; }) == std::end(known))
            throw ConfigError("unknown config key '" + k + "'");
    }
    PhantomSpec s = base;
    s.dim = static_cast<int>(config_int(cfg, "data.dim", s.dim));
    s.blobs = static_cast<int>(config_int(cfg, "data.blobs", s.blobs));
    s.blob_sigma = config_double(cfg, "data.blob_sigma", s.blob_sigma);
    s.noise_sigma = config_double(cfg, "data.noise_sigma", s.noise_sigma);
    if (cfg.count("data.atrophy")) {
        const auto v = parse_list("data.atrophy", cfg.at("data.atrophy"));
        if (v.size() != kNumClasses) throw ConfigError("data.atrophy needs 4 amplitudes");
        std::copy(v.begin(), v.end(), s.atrophy.begin());
    }
    if (cfg.count("data.atrophy_center")) {
        const auto v = parse_list("data.atrophy_center", cfg.at("data.atrophy_center"));
        if (v.size() != 3) throw ConfigError("data.atrophy_center needs 3 fractions");
        std::copy(v.begin(), v.end(), s.atrophy_center.begin());
    }
    s.atrophy_radius = config_double(cfg, "data.atrophy_radius", s.atrophy_radius);
    s.ventricle_radius = config_double(cfg, "data.ventricle_radius", s.ventricle_radius);
    s.random_bumps = static_cast<int>(config_int(cfg, "data.random_bumps", s.random_bumps));
    s.random_amplitude = config_double(cfg, "data.random_amplitude", s.random_amplitude);
    s.random_sigma = config_double(cfg, "data.random_sigma", s.random_sigma);
    s.mod2_gamma = config_double(cfg, "data.mod2_gamma", s.mod2_gamma);
    s.mod2_noise_sigma = config_double(cfg, "data.mod2_noise_sigma", s.mod2_noise_sigma);
    s.marker_size = static_cast<int>(config_int(cfg, "data.marker_size", s.marker_size));
    s.marker_intensity = config_double(cfg, "data.marker_intensity", s.marker_intensity);
    const std::string src = config_string(cfg, "data.jsm_source", s.jsm_source == JsmSource::analytic ? "analytic" : "registered");
    if (src == "analytic")
        s.jsm_source = JsmSource::analytic;
    else if (src == "registered")
        s.jsm_source = JsmSource::registered;
    else
        throw ConfigError("data.jsm_source: expected analytic or registered, got '" + src + "'");
    s.seed = static_cast<std::uint64_t>(config_int(cfg, "data.seed", static_cast<long long>(s.seed)));
    s.validate();
    return s;
}

} // namespace jsmtk
