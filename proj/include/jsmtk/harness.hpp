#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "jsmtk/jal.hpp"
#include "jsmtk/metrics.hpp"
#include "jsmtk/synth.hpp"

namespace jsmtk {

std::vector<int> argmax_labels(const std::vector<PredictionDist> &preds);

// Flat key -> value rendering of a training config, used for config diffs.
std::map<std::string, std::string> describe_config(const JALConfig &cfg);
// "key: a -> b" for every differing key.
std::vector<std::string> config_diff(const JALConfig &a, const JALConfig &b);

// Share of total |input gradient| that falls on debug-weighted (flat JSM) voxels,
// summed over samples and modalities.
double debug_gradient_fraction(const TrainedModels &tm, const std::vector<MultiSample> &data,
                               const WeightParams &weights);

struct AblationConfig {
    JALConfig jal; // the with-JAL arm; the other arm copies it with lambda = 0
    std::vector<FusionMode> modes{FusionMode::early, FusionMode::late};
    int eval_batch_size = 10;
    int histogram_bins = 10;
};

struct ArmReport {
    JALConfig config;
    ConfusionMatrix confusion;
    MetricsReport metrics;
    // Per test mini-batch over a permutation seeded by config.seed.
    std::vector<double> batch_accuracy;
    std::vector<double> batch_macro_sensitivity;
    std::vector<double> batch_macro_specificity;
    Histogram accuracy_hist, sensitivity_hist, specificity_hist;
    double debug_fraction = 0.0;
    TrainedModels models;
};

// Evaluates trained models on `test`.
ArmReport evaluate_arm(const TrainedModels &tm, const JALConfig &cfg, const std::vector<MultiSample> &test,
                       const AblationConfig &acfg);

struct ModeAblation {
    FusionMode mode = FusionMode::early;
    ArmReport with_jal;
    ArmReport without_jal;
};

struct AblationReport {
    std::vector<ModeAblation> modes;
    std::vector<std::string> config_diff;

    // Structured key = value text.
    std::string summary() const;
    // summary.txt plus per mode and arm: metrics, batch metrics, histograms, training history.
    void write(const std::filesystem::path &dir) const;
};

// Trains both arms on the train split with identical seeds and evaluates on the test split.
AblationReport ablate(const Dataset &data, const AblationConfig &cfg);

struct SweepRow {
    double lambda = 0.0;
    bool diverged = false;
    double macro_accuracy = 0.0;
    double debug_fraction = 0.0;
    std::string note;
};

struct LambdaSweep {
    FusionMode mode = FusionMode::early;
    double baseline_macro_accuracy = 0.0;
    double baseline_debug_fraction = 0.0;
    std::vector<SweepRow> rows;
    double chosen = 0.0; // highest macro accuracy, then lowest debug fraction, then smallest lambda

    std::string csv() const;
};

// Trains one with-JAL arm per lambda (diverging runs are recorded, not fatal).
LambdaSweep sweep_lambda(const Dataset &data, const AblationConfig &cfg, const std::vector<double> &lambdas,
                         FusionMode mode);

// Per modality: |input gradient| scaled to [0, 1] by its maximum (all zero when the
// gradient vanishes), shape [1, D, H, W].
std::vector<Tensor> saliency_maps(const TrainedModels &tm, const MultiSample &s);

struct SaliencySummary {
    std::vector<double> spearman_jsm;    // rank correlation of saliency with the JSM
    std::vector<double> spearman_change; // ... with |JSM - 1|
    std::vector<std::filesystem::path> files;
};

// Writes <id>.mod<k>.saliency.jsmv, <id>.mod<k>.jsm.jsmv, mid-slice CSV grids and
// <id>.saliency.txt with the rank correlations.
SaliencySummary export_saliency(const TrainedModels &tm, const MultiSample &s, const std::filesystem::path &dir);

} // namespace jsmtk
