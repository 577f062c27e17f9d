#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "jsmtk/tape.hpp"
#include "jsmtk/tensor.hpp"

namespace jsmtk {

enum class LayerKind : std::uint8_t { conv3d = 0, batchnorm3d, activation, dropout, maxpool3d, flatten, dense };
enum class Activation : std::uint8_t { relu = 0, softplus = 1 };

const char *layer_kind_name(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::conv3d;
    int in_channels = 0;   // conv3d, batchnorm3d
    int out_channels = 0;  // conv3d
    int kernel = 3;        // conv3d, odd
    double momentum = 0.9; // batchnorm3d: running = momentum * running + (1 - momentum) * batch
    double bn_eps = 1e-5;
    Activation activation = Activation::softplus;
    double beta = 10.0;    // softplus sharpness
    double rate = 0.0;     // dropout
    int in_features = 0;   // dense
    int out_features = 0;  // dense

    static LayerSpec conv(int in, int out, int kernel = 3);
    static LayerSpec batchnorm(int channels, double momentum = 0.9);
    static LayerSpec act(Activation a, double beta = 10.0);
    static LayerSpec dropout(double rate);
    static LayerSpec maxpool();
    static LayerSpec flatten();
    static LayerSpec dense(int in, int out);
};

struct ModelSpec {
    int in_channels = 1;
    int depth = 16, height = 16, width = 16;
    std::vector<LayerSpec> layers;

    Shape input_shape() const { return {in_channels, depth, height, width}; }
    int classes() const;
};

// Two conv blocks (conv, batchnorm, activation, dropout 0.5 / 0.2, pool) with 4 then 8
// channels, flatten, dense to `classes`.
ModelSpec desk_model_spec(int in_channels = 1, int dim = 16, int classes = 4,
                          Activation activation = Activation::softplus, double beta = 10.0);

// Per-layer output shape without the batch axis. Throws ConfigError naming the first
// pair of layers that do not compose.
std::vector<Shape> infer_shapes(const ModelSpec &spec);

struct Model {
    ModelSpec spec;
    std::vector<Tensor> params;   // declaration order
    std::vector<Tensor> buffers;  // batchnorm running mean then running variance, per layer
    std::vector<std::string> param_names;
};

Model build_model(const ModelSpec &spec, std::uint64_t seed);

enum class Mode { train, eval };

// Handles for one model on one tape.
struct BoundModel {
    std::vector<Var> params;
};

BoundModel bind_params(Tape &tape, const Model &model, bool trainable = true);

// Records the forward pass of a batch x [N, C, D, H, W] and returns log-probabilities
// [N, K]. Train mode uses batch statistics and inverted dropout drawn from `seed`; when
// `running` is given the batchnorm running statistics in it are updated.
Var forward_log_probs(Tape &tape, const Model &model, const BoundModel &bound, const Var &x, Mode mode,
                      std::uint64_t seed = 0, std::vector<Tensor> *running = nullptr);

using PredictionDist = std::vector<double>;

// Eval-mode class distributions for a batch.
std::vector<PredictionDist> predict(const Model &model, const Tensor &x);

// -log p[label], with p floored at 1e-12.
double cross_entropy(const PredictionDist &pred, int label);
double cross_entropy(const PredictionDist &pred, const std::vector<double> &one_hot);

// d(sum_k log p_k)/dx in eval mode; for a batch each sample's slice is its own gradient.
Tensor input_gradient(const Model &model, const Tensor &x);

// Parameter gradients of sum_n sum_p (q * input_gradient)^2 by differentiating through
// the recorded backward pass. `penalty` receives the value when non-null.
std::vector<Tensor> penalty_param_gradient(const Model &model, const Tensor &x, const Tensor &q,
                                           double *penalty = nullptr);

// Mean cross-entropy over a batch and its parameter gradients.
std::vector<Tensor> ce_param_gradient(const Model &model, const Tensor &x, const std::vector<int> &labels,
                                      Mode mode, std::uint64_t seed, double *loss = nullptr);

// Stacks per-sample [C, D, H, W] tensors into [N, C, D, H, W].
Tensor stack_batch(const std::vector<const Tensor *> &samples);

void save_checkpoint(const Model &model, const std::filesystem::path &path);
Model load_checkpoint(const std::filesystem::path &path);

} // namespace jsmtk
