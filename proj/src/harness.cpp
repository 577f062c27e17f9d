#include "jsmtk/harness.hpp"

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

namespace {

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

Tensor with_batch_axis(const Tensor &t) {
    Shape sh{1};
    sh.insert(sh.end(), t.shape().begin(), t.shape().end());
    return t.reshaped(sh);
}

// One model input with its JSM stack and the index of the model that consumes it.
struct Branch {
    Tensor x;
    Tensor jsm;
    std::size_t model;
};

std::vector<Branch> branches(const TrainedModels &tm, const MultiSample &s) {
    if (tm.mode == FusionMode::early) {
        const FusedInput f = early_fusion_pack(s.x1, s.x2, s.jsm1, s.jsm2);
        return {{f.x, f.jsm, 0}};
    }
    return {{s.x1, s.jsm1, 0}, {s.x2, s.jsm2, 1}};
}

void write_text(const std::filesystem::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
    out << text;
    if (!out) throw FormatError("write failed for '" + path.string() + "'", 0);
}

std::string series_csv(const std::vector<std::pair<std::string, const std::vector<double> *>> &cols) {
    std::ostringstream os;
    os << "batch";
    for (const auto &c : cols) os << ',' << c.first;
    os << '\n';
    const std::size_t n = cols.empty() ? 0 : cols.front().second->size();
    for (std::size_t i = 0; i < n; ++i) {
        os << i;
        for (const auto &c : cols) os << ',' << num((*c.second)[i]);
        os << '\n';
    }
    return os.str();
}

std::string histogram_csv(const std::vector<std::pair<std::string, const Histogram *>> &hists) {
    std::ostringstream os;
    os << "bin_lo,bin_hi";
    for (const auto &h : hists) os << ',' << h.first << "_count," << h.first << "_density";
    os << '\n';
    if (hists.empty()) return os.str();
    const Histogram &ref = *hists.front().second;
    const std::size_t bins = ref.counts.size();
    std::vector<std::vector<double>> dens;
    for (const auto &h : hists) dens.push_back(h.second->density());
    for (std::size_t b = 0; b < bins; ++b) {
        const double w = (ref.hi - ref.lo) / static_cast<double>(bins);
        os << num(ref.lo + w * static_cast<double>(b)) << ',' << num(ref.lo + w * static_cast<double>(b + 1));
        for (std::size_t h = 0; h < hists.size(); ++h)
            os << ',' << hists[h].second->counts[b] << ',' << num(dens[h][b]);
        os << '\n';
    }
    return os.str();
}

std::vector<double> finite_only(const std::vector<double> &v) {
    std::vector<double> out;
    for (double x : v)
        if (std::isfinite(x)) out.push_back(x);
    return out;
}

std::vector<std::string> class_names() {
    std::vector<std::string> out;
    for (int c = 0; c < kNumClasses; ++c) out.emplace_back(class_name(c));
    return out;
}

} // namespace

std::vector<int> argmax_labels(const std::vector<PredictionDist> &preds) {
    std::vector<int> out;
    out.reserve(preds.size());
    for (const auto &p : preds) {
        if (p.empty()) throw InputError("empty prediction distribution");
        out.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    }
    return out;
}

std::map<std::string, std::string> describe_config(const JALConfig &c) {
    return {{"jal.lambda", num(c.lambda)},
            {"jal.feature_weight", num(c.weights.feature_weight)},
            {"jal.debug_weight", num(c.weights.debug_weight)},
            {"jal.eps_flat", num(c.weights.eps_flat)},
            {"jal.epochs", std::to_string(c.epochs)},
            {"jal.batch_size", std::to_string(c.batch_size)},
            {"jal.learning_rate", num(c.learning_rate)},
            {"jal.seed", std::to_string(c.seed)},
            {"model.activation", c.activation == Activation::relu ? "relu" : "softplus"},
            {"model.beta", num(c.beta)}};
}

std::vector<std::string> config_diff(const JALConfig &a, const JALConfig &b) {
    const auto da = describe_config(a), db = describe_config(b);
    std::vector<std::string> out;
    for (const auto &[k, v] : da) {
        const std::string &w = db.at(k);
        if (v != w) out.push_back(k + ": " + v + " -> " + w);
    }
    return out;
}

double debug_gradient_fraction(const TrainedModels &tm, const std::vector<MultiSample> &data,
                               const WeightParams &weights) {
    std::vector<double> dbg(data.size(), 0.0), tot(data.size(), 0.0);
    parallel_for(0, data.size(), [&](std::size_t i) {
        for (const Branch &b : branches(tm, data[i])) {
            const Tensor g = input_gradient(tm.models.at(b.model), with_batch_axis(b.x));
            for (std::size_t v = 0; v < g.size(); ++v) {
                const double a = std::fabs(g[v]);
                tot[i] += a;
                if (classify(b.jsm[v], weights.eps_flat) == VolumeChange::none) dbg[i] += a;
            }
        }
    });
    double d = 0.0, t = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        d += dbg[i];
        t += tot[i];
    }
    return t > 0.0 ? d / t : 0.0;
}

ArmReport evaluate_arm(const TrainedModels &tm, const JALConfig &cfg, const std::vector<MultiSample> &test,
                       const AblationConfig &acfg) {
    if (test.empty()) throw InputError("empty test set");
    if (acfg.eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
    ArmReport r;
    r.config = cfg;
    r.models = tm;
    std::vector<int> labels;
    for (const auto &s : test) labels.push_back(s.label);
    const std::vector<int> preds = argmax_labels(predict_dataset(tm, test));
    r.confusion = confusion(preds, labels, kNumClasses);
    r.metrics = per_class_metrics(r.confusion);

    // Test sets are stored class by class; batches are drawn from a seeded permutation.
    std::vector<std::size_t> order(test.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, {0xBA7C}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto bs = static_cast<std::size_t>(acfg.eval_batch_size);
    for (std::size_t start = 0; start < test.size(); start += bs) {
        std::vector<int> p, l;
        for (std::size_t i = start; i < std::min(test.size(), start + bs); ++i) {
            p.push_back(preds[order[i]]);
            l.push_back(labels[order[i]]);
        }
        const MetricsReport m = per_class_metrics(confusion(p, l, kNumClasses));
        r.batch_accuracy.push_back(m.overall_accuracy);
        r.batch_macro_sensitivity.push_back(m.macro_sensitivity);
        r.batch_macro_specificity.push_back(m.macro_specificity);
    }
    r.accuracy_hist = histogram(finite_only(r.batch_accuracy), acfg.histogram_bins);
    r.sensitivity_hist = histogram(finite_only(r.batch_macro_sensitivity), acfg.histogram_bins);
    r.specificity_hist = histogram(finite_only(r.batch_macro_specificity), acfg.histogram_bins);
    r.debug_fraction = debug_gradient_fraction(tm, test, cfg.weights);
    return r;
}

AblationReport ablate(const Dataset &data, const AblationConfig &cfg) {
    cfg.jal.validate();
    if (cfg.modes.empty()) throw ConfigError("ablation needs at least one fusion mode");
    const auto train_set = samples_of(data, Split::train);
    const auto test_set = samples_of(data, Split::test);
    if (train_set.empty() || test_set.empty()) throw InputError("dataset needs both train and test subjects");

    JALConfig without = cfg.jal;
    without.lambda = 0.0;
    AblationReport rep;
    rep.config_diff = config_diff(without, cfg.jal);
    for (FusionMode mode : cfg.modes) {
        ModeAblation m;
        m.mode = mode;
        // Arms run one after the other so both see the same thread schedule.
        m.without_jal = evaluate_arm(train(train_set, mode, without), without, test_set, cfg);
        m.with_jal = evaluate_arm(train(train_set, mode, cfg.jal), cfg.jal, test_set, cfg);
        rep.modes.push_back(std::move(m));
    }
    return rep;
}

std::string AblationReport::summary() const {
    std::ostringstream os;
    os << "# with/without penalty ablation\n[ablation]\nmodes =";
    for (std::size_t i = 0; i < modes.size(); ++i) os << (i ? ", " : " ") << fusion_mode_name(modes[i].mode);
    os << "\nconfig_diff = ";
    for (std::size_t i = 0; i < config_diff.size(); ++i) os << (i ? "; " : "") << config_diff[i];
    os << '\n';
    for (const auto &m : modes) {
        for (const auto *arm : {&m.without_jal, &m.with_jal}) {
            const bool jal = arm == &m.with_jal;
            os << "\n[" << fusion_mode_name(m.mode) << (jal ? ".with_jal" : ".without_jal") << "]\n";
            os << "lambda = " << num(arm->config.lambda) << '\n';
            os << "overall_accuracy = " << num(arm->metrics.overall_accuracy) << '\n';
            os << "macro_accuracy = " << num(arm->metrics.macro_accuracy) << '\n';
            os << "macro_sensitivity = " << num(arm->metrics.macro_sensitivity) << '\n';
            os << "macro_specificity = " << num(arm->metrics.macro_specificity) << '\n';
            os << "debug_gradient_fraction = " << num(arm->debug_fraction) << '\n';
            for (const auto &w : arm->metrics.warnings) os << "# warning: " << w << '\n';
        }
        os << "\n[" << fusion_mode_name(m.mode) << ".delta]\n";
        os << "macro_accuracy = " << num(m.with_jal.metrics.macro_accuracy - m.without_jal.metrics.macro_accuracy)
           << '\n';
        const double base = m.without_jal.debug_fraction;
        os << "debug_fraction_relative_drop = "
           << num(base > 0.0 ? (base - m.with_jal.debug_fraction) / base : std::nan("")) << '\n';
    }
    return os.str();
}

void AblationReport::write(const std::filesystem::path &dir) const {
    std::filesystem::create_directories(dir);
    write_text(dir / "summary.txt", summary());
    for (const auto &m : modes)
        for (const auto *arm : {&m.without_jal, &m.with_jal}) {
            const std::string stem =
                std::string(fusion_mode_name(m.mode)) + (arm == &m.with_jal ? ".with_jal" : ".without_jal");
            write_text(dir / (stem + ".metrics.csv"), arm->metrics.csv(class_names()));
            write_text(dir / (stem + ".batches.csv"),
                       series_csv({{"accuracy", &arm->batch_accuracy},
                                   {"macro_sensitivity", &arm->batch_macro_sensitivity},
                                   {"macro_specificity", &arm->batch_macro_specificity}}));
            write_text(dir / (stem + ".histograms.csv"),
                       histogram_csv({{"accuracy", &arm->accuracy_hist},
                                      {"macro_sensitivity", &arm->sensitivity_hist},
                                      {"macro_specificity", &arm->specificity_hist}}));
            for (std::size_t h = 0; h < arm->models.histories.size(); ++h)
                write_text(dir / (stem + ".history" + std::to_string(h) + ".csv"), arm->models.histories[h].csv());
        }
}

LambdaSweep sweep_lambda(const Dataset &data, const AblationConfig &cfg, const std::vector<double> &lambdas,
                         FusionMode mode) {
    if (lambdas.empty()) throw ConfigError("lambda sweep needs at least one value");
    const auto train_set = samples_of(data, Split::train);
    const auto test_set = samples_of(data, Split::test);
    LambdaSweep sw;
    sw.mode = mode;
    JALConfig base = cfg.jal;
    base.lambda = 0.0;
    const ArmReport ref = evaluate_arm(train(train_set, mode, base), base, test_set, cfg);
    sw.baseline_macro_accuracy = ref.metrics.macro_accuracy;
    sw.baseline_debug_fraction = ref.debug_fraction;
    const SweepRow *best = nullptr;
    for (double lam : lambdas) {
        SweepRow row;
        row.lambda = lam;
        JALConfig c = cfg.jal;
        c.lambda = lam;
        try {
            const ArmReport arm = evaluate_arm(train(train_set, mode, c), c, test_set, cfg);
            row.macro_accuracy = arm.metrics.macro_accuracy;
            row.debug_fraction = arm.debug_fraction;
        } catch (const NumericalError &e) {
            row.diverged = true;
            row.macro_accuracy = std::nan("");
            row.debug_fraction = std::nan("");
            row.note = e.what();
        }
        sw.rows.push_back(row);
    }
    for (const auto &row : sw.rows) {
        if (row.diverged) continue;
        if (!best || row.macro_accuracy > best->macro_accuracy ||
            (row.macro_accuracy == best->macro_accuracy &&
             (row.debug_fraction < best->debug_fraction ||
              (row.debug_fraction == best->debug_fraction && row.lambda < best->lambda))))
            best = &row;
    }
    if (!best) throw NumericalError("every lambda in the sweep diverged");
    sw.chosen = best->lambda;
    return sw;
}

std::string LambdaSweep::csv() const {
    std::ostringstream os;
    os << "mode,lambda,diverged,macro_accuracy,debug_fraction,chosen\n";
    os << fusion_mode_name(mode) << ",0,0," << num(baseline_macro_accuracy) << ',' << num(baseline_debug_fraction)
       << ",0\n";
    for (const auto &r : rows)
        os << fusion_mode_name(mode) << ',' << num(r.lambda) << ',' << (r.diverged ? 1 : 0) << ','
           << num(r.macro_accuracy) << ',' << num(r.debug_fraction) << ',' << (r.lambda == chosen ? 1 : 0) << '\n';
    return os.str();
}

std::vector<Tensor> saliency_maps(const TrainedModels &tm, const MultiSample &s) {
    std::vector<Tensor> out;
    for (const Branch &b : branches(tm, s)) {
        const Tensor g = input_gradient(tm.models.at(b.model), with_batch_axis(b.x));
        const std::int64_t channels = b.x.dim(0);
        const std::size_t per = b.x.size() / static_cast<std::size_t>(channels);
        Shape one = b.x.shape();
        one[0] = 1;
        for (std::int64_t c = 0; c < channels; ++c) {
            Tensor m(one);
            double peak = 0.0;
            for (std::size_t v = 0; v < per; ++v) {
                m[v] = std::fabs(g[static_cast<std::size_t>(c) * per + v]);
                peak = std::max(peak, m[v]);
            }
            if (peak > 0.0)
                for (std::size_t v = 0; v < per; ++v) m[v] /= peak;
            out.push_back(std::move(m));
        }
    }
    return out;
}

SaliencySummary export_saliency(const TrainedModels &tm, const MultiSample &s, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    const std::vector<Tensor> maps = saliency_maps(tm, s);
    const Tensor *jsms[2] = {&s.jsm1, &s.jsm2};
    const std::string id = s.id.empty() ? "subject" : s.id;
    SaliencySummary sum;
    std::ostringstream side;
    side << "# saliency rank correlations\n[saliency]\nid = " << id << "\nmode = " << fusion_mode_name(tm.mode)
         << '\n';
    for (std::size_t k = 0; k < maps.size(); ++k) {
        const Tensor &m = maps[k];
        const Tensor &j = *jsms[k];
        const Dims dims{m.dim(3), m.dim(2), m.dim(1)};
        const std::string stem = id + ".mod" + std::to_string(k + 1);
        const Volume3D sal(dims, {}, std::vector<double>(m.values().begin(), m.values().end()));
        const Volume3D jv(dims, {}, std::vector<double>(j.values().begin(), j.values().end()));
        write_volume(sal, dir / (stem + ".saliency.jsmv"), VoxelType::f64);
        write_volume(jv, dir / (stem + ".jsm.jsmv"), VoxelType::f64);
        sum.files.push_back(dir / (stem + ".saliency.jsmv"));
        sum.files.push_back(dir / (stem + ".jsm.jsmv"));

        // Mid-slice grids: axial (z fixed, rows y), coronal (y fixed, rows z), sagittal (x fixed, rows z).
        const std::int64_t cx = dims.w / 2, cy = dims.h / 2, cz = dims.d / 2;
        auto grid = [&](const char *name, std::int64_t rows, std::int64_t cols, auto at) {
            std::ostringstream os;
            os.precision(17);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t c = 0; c < cols; ++c) os << (c ? "," : "") << at(r, c);
                os << '\n';
            }
            const auto path = dir / (stem + "." + name + ".csv");
            write_text(path, os.str());
            sum.files.push_back(path);
        };
        grid("axial", dims.h, dims.w, [&](std::int64_t r, std::int64_t c) { return sal(c, r, cz); });
        grid("coronal", dims.d, dims.w, [&](std::int64_t r, std::int64_t c) { return sal(c, cy, r); });
        grid("sagittal", dims.d, dims.h, [&](std::int64_t r, std::int64_t c) { return sal(cx, c, r); });

        std::vector<double> a(m.values().begin(), m.values().end()), b(j.values().begin(), j.values().end()), ch;
        for (double v : b) ch.push_back(std::fabs(v - 1.0));
        sum.spearman_jsm.push_back(spearman(a, b));
        sum.spearman_change.push_back(spearman(a, ch));
        side << "spearman_jsm_mod" << k + 1 << " = " << num(sum.spearman_jsm.back()) << '\n';
        side << "spearman_change_mod" << k + 1 << " = " << num(sum.spearman_change.back()) << '\n';
    }
    const auto sidecar = dir / (id + ".saliency.txt");
    write_text(sidecar, side.str());
    sum.files.push_back(sidecar);
    return sum;
}

} // namespace jsmtk
