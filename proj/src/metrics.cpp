#include "jsmtk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "jsmtk/errors.hpp"

namespace jsmtk {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double ratio(std::int64_t num, std::int64_t den) {
    return den == 0 ? kNaN : static_cast<double>(num) / static_cast<double>(den);
}

std::vector<double> average_ranks(const std::vector<double> &v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = rank;
        i = j + 1;
    }
    return r;
}

} // namespace

ConfusionMatrix::ConfusionMatrix(int classes) : k_(classes) {
    if (classes < 0) throw InputError("class count must be >= 0");
    counts_.assign(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0);
}

std::int64_t &ConfusionMatrix::at(int truth, int pred) {
    if (truth < 0 || truth >= k_ || pred < 0 || pred >= k_) throw InputError("confusion index out of range");
    return counts_[static_cast<std::size_t>(truth * k_ + pred)];
}

std::int64_t ConfusionMatrix::at(int truth, int pred) const {
    if (truth < 0 || truth >= k_ || pred < 0 || pred >= k_) throw InputError("confusion index out of range");
    return counts_[static_cast<std::size_t>(truth * k_ + pred)];
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

ConfusionMatrix confusion(const std::vector<int> &preds, const std::vector<int> &labels, int classes) {
    if (preds.size() != labels.size()) throw InputError("predictions and labels differ in length");
    if (classes < 1) throw InputError("need at least one class");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes || preds[i] < 0 || preds[i] >= classes)
            throw InputError("class index out of range at position " + std::to_string(i));
        ++cm.at(labels[i], preds[i]);
    }
    return cm;
}

double mean_defined(const std::vector<double> &values) {
    double sum = 0.0;
    std::size_t n = 0;
    for (double v : values)
        if (std::isfinite(v)) {
            sum += v;
            ++n;
        }
    return n == 0 ? kNaN : sum / static_cast<double>(n);
}

MetricsReport per_class_metrics(const ConfusionMatrix &cm) {
    const std::int64_t total = cm.total();
    if (total <= 0) throw InputError("confusion matrix is empty");
    const int k = cm.classes();
    MetricsReport r;
    std::int64_t trace = 0;
    std::vector<double> sens, spec, acc;
    for (int c = 0; c < k; ++c) {
        std::int64_t tp = cm.at(c, c), fn = 0, fp = 0;
        for (int j = 0; j < k; ++j) {
            if (j == c) continue;
            fn += cm.at(c, j);
            fp += cm.at(j, c);
        }
        const std::int64_t tn = total - tp - fn - fp;
        trace += tp;
        ClassMetrics m;
        m.sensitivity = ratio(tp, tp + fn);
        m.specificity = ratio(tn, tn + fp);
        m.accuracy = ratio(tp + tn, total);
        if (std::isnan(m.sensitivity))
            r.warnings.push_back("class " + std::to_string(c) + " is absent from the truth; sensitivity undefined");
        if (std::isnan(m.specificity))
            r.warnings.push_back("class " + std::to_string(c) + " covers every sample; specificity undefined");
        sens.push_back(m.sensitivity);
        spec.push_back(m.specificity);
        acc.push_back(m.accuracy);
        r.per_class.push_back(m);
    }
    r.macro_sensitivity = mean_defined(sens);
    r.macro_specificity = mean_defined(spec);
    r.macro_accuracy = mean_defined(acc);
    r.overall_accuracy = ratio(trace, total);
    return r;
}

std::string MetricsReport::csv(const std::vector<std::string> &class_names) const {
    std::ostringstream os;
    os.precision(17);
    auto num = [&](double v) {
        if (std::isnan(v))
            os << "nan";
        else
            os << v;
    };
    os << "class,sensitivity,specificity,accuracy\n";
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        os << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ',';
        num(per_class[c].sensitivity);
        os << ',';
        num(per_class[c].specificity);
        os << ',';
        num(per_class[c].accuracy);
        os << '\n';
    }
    os << "macro,";
    num(macro_sensitivity);
    os << ',';
    num(macro_specificity);
    os << ',';
    num(macro_accuracy);
    os << '\n';
    return os.str();
}

std::int64_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

std::vector<double> Histogram::density() const {
    std::vector<double> d(counts.size(), 0.0);
    const std::int64_t n = total();
    if (n == 0 || counts.empty()) return d;
    const double width = (hi - lo) / static_cast<double>(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i)
        d[i] = static_cast<double>(counts[i]) / (static_cast<double>(n) * width);
    return d;
}

Histogram histogram(const std::vector<double> &values, int bins, double lo, double hi) {
    if (bins < 1 || !(hi > lo)) throw InputError("histogram needs bins >= 1 and hi > lo");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (double v : values) {
        if (!std::isfinite(v)) throw InputError("histogram value is not finite");
        auto b = static_cast<long>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::clamp<long>(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

double spearman(const std::vector<double> &a, const std::vector<double> &b) {
    if (a.size() != b.size()) throw InputError("spearman inputs differ in length");
    if (a.size() < 2) return kNaN;
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1.0) / 2.0;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const double da = ra[i] - mean, db = rb[i] - mean;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return kNaN;
    return sab / std::sqrt(saa * sbb);
}

} // namespace jsmtk
