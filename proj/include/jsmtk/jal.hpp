#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "jsmtk/jsm.hpp"
#include "jsmtk/model.hpp"

namespace jsmtk {

struct JALConfig {
    double lambda = 1.0;
    WeightParams weights;
    int epochs = 20;
    int batch_size = 10;
    double learning_rate = 0.01;
    std::uint64_t seed = 0;
    Activation activation = Activation::softplus;
    double beta = 10.0;

    void validate() const;
};

enum class FusionMode { early, late };

FusionMode parse_fusion_mode(const std::string &s);
const char *fusion_mode_name(FusionMode m);

struct EpochRecord {
    int epoch = 0;
    double ce = 0.0;
    double penalty = 0.0;
    double total = 0.0;
    double accuracy = 0.0;

    bool operator==(const EpochRecord &) const = default;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    std::string csv() const;
    bool operator==(const TrainHistory &) const = default;
};

// One training example: image [C, D, H, W], its JSM stack of the same shape and a label.
struct Sample {
    Tensor x;
    Tensor jsm;
    int label = 0;
};

struct JALTerms {
    double total = 0.0;
    double ce = 0.0;
    double penalty = 0.0;
};

// q = w * JSM with w = weight_mask(JSM), formed per voxel and channel.
Tensor penalty_weights(const Tensor &jsm, const WeightParams &params);

// Mean over the batch of cross_entropy + lambda * sum_{d,p} (q * input_gradient)^2.
// Cross-entropy uses `ce_mode` (train mode draws dropout from `seed`); the input
// gradient always uses eval mode so each sample's penalty is independent of the batch.
JALTerms jal_loss(const Model &model, const std::vector<const Sample *> &batch, const JALConfig &cfg,
                  Mode ce_mode = Mode::eval, std::uint64_t seed = 0);

// One SGD step on the batch mean of the loss above in train mode. Returns the terms
// before the update. Throws NumericalError when the loss is not finite.
JALTerms jal_step(Model &model, const std::vector<const Sample *> &batch, const JALConfig &cfg, std::uint64_t seed);

// Plain cross-entropy SGD step, no penalty machinery. Returns the loss before the update.
double ce_step(Model &model, const std::vector<const Sample *> &batch, double learning_rate, std::uint64_t seed);

// Channel concatenation of two single-modality samples.
struct FusedInput {
    Tensor x;
    Tensor jsm;
};
FusedInput early_fusion_pack(const Tensor &x1, const Tensor &x2, const Tensor &jsm1, const Tensor &jsm2);

PredictionDist late_fusion_predict(const PredictionDist &p1, const PredictionDist &p2);

// Both modalities of a subject, each [1, D, H, W].
struct MultiSample {
    std::string id;
    Tensor x1, x2;
    Tensor jsm1, jsm2;
    int label = 0;
};

struct TrainedModels {
    FusionMode mode = FusionMode::early;
    std::vector<Model> models;           // early: 1, late: 2 (one per modality)
    std::vector<TrainHistory> histories; // one per model
};

// Trains with jal_step; the penalty is skipped when lambda is zero. Early mode fits one
// model on the fused input, late mode one model per modality on its own JSM.
TrainedModels train(const std::vector<MultiSample> &data, FusionMode mode, const JALConfig &cfg);

// Plain cross-entropy training with the same schedule, for comparison.
TrainedModels train_ce(const std::vector<MultiSample> &data, FusionMode mode, const JALConfig &cfg);

std::vector<PredictionDist> predict_dataset(const TrainedModels &tm, const std::vector<MultiSample> &data);

// Sectioned key = value text ("[jal]\nlambda = 1.0"). Keys are stored as "section.key".
using ConfigMap = std::map<std::string, std::string>;
ConfigMap parse_config_text(const std::string &text);
ConfigMap read_config_file(const std::filesystem::path &path);

// Reads [jal] and [model] keys; unknown keys in those sections raise ConfigError.
JALConfig jal_config_from(const ConfigMap &cfg, JALConfig base = {});

double config_double(const ConfigMap &cfg, const std::string &key, double fallback);
long long config_int(const ConfigMap &cfg, const std::string &key, long long fallback);
std::string config_string(const ConfigMap &cfg, const std::string &key, const std::string &fallback);
bool config_bool(const ConfigMap &cfg, const std::string &key, bool fallback);

} // namespace jsmtk
