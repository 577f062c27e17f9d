#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace jsmtk {

// Rows are true classes, columns predictions.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes = 0);

    int classes() const { return k_; }
    std::int64_t &at(int truth, int pred);
    std::int64_t at(int truth, int pred) const;
    std::int64_t total() const;

    bool operator==(const ConfusionMatrix &) const = default;

private:
    int k_ = 0;
    std::vector<std::int64_t> counts_;
};

ConfusionMatrix confusion(const std::vector<int> &preds, const std::vector<int> &labels, int classes);

// One-vs-rest rates for a single class. A rate whose denominator is zero is NaN
// ("undefined") and left out of the macro average.
struct ClassMetrics {
    double sensitivity = 0.0;
    double specificity = 0.0;
    double accuracy = 0.0;
};

struct MetricsReport {
    std::vector<ClassMetrics> per_class;
    double macro_sensitivity = 0.0;
    double macro_specificity = 0.0;
    double macro_accuracy = 0.0;
    double overall_accuracy = 0.0; // trace / total
    std::vector<std::string> warnings;

    // class,sensitivity,specificity,accuracy rows plus a macro row; undefined values print as "nan".
    std::string csv(const std::vector<std::string> &class_names = {}) const;
};

MetricsReport per_class_metrics(const ConfusionMatrix &cm);

// Mean of the finite entries; NaN when there are none.
double mean_defined(const std::vector<double> &values);

// Fixed-range histogram. Values outside [lo, hi] are clamped into the end bins.
struct Histogram {
    double lo = 0.0;
    double hi = 1.0;
    std::vector<std::int64_t> counts;

    std::int64_t total() const;
    // counts / (total * bin width); integrates to one.
    std::vector<double> density() const;
};

Histogram histogram(const std::vector<double> &values, int bins = 10, double lo = 0.0, double hi = 1.0);

// Spearman rank correlation with average ranks for ties. NaN when either input is constant.
double spearman(const std::vector<double> &a, const std::vector<double> &b);

} // namespace jsmtk
