#include "jsmtk/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "jsmtk/errors.hpp"
#include "jsmtk/ops.hpp"
#include "jsmtk/rng.hpp"

namespace jsmtk {

const char *layer_kind_name(LayerKind kind) {
    switch (kind) {
    case LayerKind::conv3d: return "conv3d";
    case LayerKind::batchnorm3d: return "batchnorm3d";
    case LayerKind::activation: return "activation";
    case LayerKind::dropout: return "dropout";
    case LayerKind::maxpool3d: return "maxpool3d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    }
    return "?";
}

LayerSpec LayerSpec::conv(int in, int out, int kernel) {
    LayerSpec l;
    l.kind = LayerKind::conv3d;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = kernel;
    return l;
}

LayerSpec LayerSpec::batchnorm(int channels, double momentum) {
    LayerSpec l;
    l.kind = LayerKind::batchnorm3d;
    l.in_channels = channels;
    l.momentum = momentum;
    return l;
}

LayerSpec LayerSpec::act(Activation a, double beta) {
    LayerSpec l;
    l.kind = LayerKind::activation;
    l.activation = a;
    l.beta = beta;
    return l;
}

LayerSpec LayerSpec::dropout(double rate) {
    LayerSpec l;
    l.kind = LayerKind::dropout;
    l.rate = rate;
    return l;
}

LayerSpec LayerSpec::maxpool() {
    LayerSpec l;
    l.kind = LayerKind::maxpool3d;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = LayerKind::flatten;
    return l;
}

LayerSpec LayerSpec::dense(int in, int out) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.in_features = in;
    l.out_features = out;
    return l;
}

int ModelSpec::classes() const {
    const auto shapes = infer_shapes(*this);
    if (shapes.empty() || shapes.back().size() != 1) throw ConfigError("model does not end in a dense layer");
    return static_cast<int>(shapes.back()[0]);
}

ModelSpec desk_model_spec(int in_channels, int dim, int classes, Activation activation, double beta) {
    ModelSpec s;
    s.in_channels = in_channels;
    s.depth = s.height = s.width = dim;
    const int pooled = dim / 4;
    s.layers = {
        LayerSpec::conv(in_channels, 4), LayerSpec::batchnorm(4), LayerSpec::act(activation, beta),
        LayerSpec::dropout(0.5),         LayerSpec::maxpool(),    LayerSpec::conv(4, 8),
        LayerSpec::batchnorm(8),         LayerSpec::act(activation, beta), LayerSpec::dropout(0.2),
        LayerSpec::maxpool(),            LayerSpec::flatten(),    LayerSpec::dense(8 * pooled * pooled * pooled, classes),
    };
    return s;
}

namespace {

std::string layer_pair(const ModelSpec &spec, std::size_t i) {
    const std::string cur = "layer " + std::to_string(i) + " (" + layer_kind_name(spec.layers[i].kind) + ")";
    if (i == 0) return "input -> " + cur;
    return "layer " + std::to_string(i - 1) + " (" + layer_kind_name(spec.layers[i - 1].kind) + ") -> " + cur;
}

} // namespace

std::vector<Shape> infer_shapes(const ModelSpec &spec) {
    if (spec.in_channels < 1 || spec.depth < 1 || spec.height < 1 || spec.width < 1)
        throw ConfigError("model input shape must be positive");
    Shape cur = spec.input_shape();
    std::vector<Shape> out;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec &l = spec.layers[i];
        auto fail = [&](const std::string &why) { throw ConfigError(layer_pair(spec, i) + ": " + why); };
        switch (l.kind) {
        case LayerKind::conv3d:
            if (cur.size() != 4) fail("expects a [C, D, H, W] input, got " + shape_str(cur));
            if (l.kernel < 1 || l.kernel % 2 == 0) fail("kernel must be odd");
            if (l.out_channels < 1) fail("out_channels must be >= 1");
            if (cur[0] != l.in_channels)
                fail("expects " + std::to_string(l.in_channels) + " channels, receives " + std::to_string(cur[0]));
            cur[0] = l.out_channels;
            break;
        case LayerKind::batchnorm3d:
            if (cur.size() != 4) fail("expects a [C, D, H, W] input, got " + shape_str(cur));
            if (cur[0] != l.in_channels)
                fail("expects " + std::to_string(l.in_channels) + " channels, receives " + std::to_string(cur[0]));
            if (!(l.momentum >= 0.0 && l.momentum < 1.0)) fail("momentum must be in [0, 1)");
            if (!(l.bn_eps > 0.0)) fail("eps must be > 0");
            break;
        case LayerKind::activation:
            if (l.activation == Activation::softplus && !(l.beta > 0.0)) fail("softplus beta must be > 0");
            break;
        case LayerKind::dropout:
            if (!(l.rate >= 0.0 && l.rate < 1.0)) fail("dropout rate must be in [0, 1)");
            break;
        case LayerKind::maxpool3d:
            if (cur.size() != 4) fail("expects a [C, D, H, W] input, got " + shape_str(cur));
            if (cur[1] < 2 || cur[2] < 2 || cur[3] < 2) fail("spatial extent below 2 in " + shape_str(cur));
            cur = {cur[0], cur[1] / 2, cur[2] / 2, cur[3] / 2};
            break;
        case LayerKind::flatten:
            cur = {static_cast<std::int64_t>(shape_count(cur))};
            break;
        case LayerKind::dense:
            if (cur.size() != 1) fail("expects a flat input, got " + shape_str(cur));
            if (cur[0] != l.in_features)
                fail("expects " + std::to_string(l.in_features) + " features, receives " + std::to_string(cur[0]));
            if (l.out_features < 1) fail("out_features must be >= 1");
            cur = {l.out_features};
            break;
        }
        out.push_back(cur);
    }
    return out;
}

Model build_model(const ModelSpec &spec, std::uint64_t seed) {
    const auto shapes = infer_shapes(spec);
    if (shapes.empty() || shapes.back().size() != 1) throw ConfigError("model must end with a flat class output");
    Model m;
    m.spec = spec;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec &l = spec.layers[i];
        const std::string tag = "layer" + std::to_string(i) + ".";
        if (l.kind == LayerKind::conv3d) {
            const int k = l.kernel;
            Tensor w(Shape{l.out_channels, l.in_channels, k, k, k});
            std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (l.in_channels * k * k * k)));
            for (auto &v : w.values()) v = nd(rng);
            m.params.push_back(std::move(w));
            m.params.emplace_back(Shape{l.out_channels}, 0.0);
            m.param_names.push_back(tag + "weight");
            m.param_names.push_back(tag + "bias");
        } else if (l.kind == LayerKind::batchnorm3d) {
            m.params.emplace_back(Shape{l.in_channels}, 1.0);
            m.params.emplace_back(Shape{l.in_channels}, 0.0);
            m.param_names.push_back(tag + "gamma");
            m.param_names.push_back(tag + "beta");
            m.buffers.emplace_back(Shape{l.in_channels}, 0.0);
            m.buffers.emplace_back(Shape{l.in_channels}, 1.0);
        } else if (l.kind == LayerKind::dense) {
            Tensor w(Shape{l.out_features, l.in_features});
            std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / l.in_features));
            for (auto &v : w.values()) v = nd(rng);
            m.params.push_back(std::move(w));
            m.params.emplace_back(Shape{l.out_features}, 0.0);
            m.param_names.push_back(tag + "weight");
            m.param_names.push_back(tag + "bias");
        }
    }
    return m;
}

BoundModel bind_params(Tape &tape, const Model &model, bool trainable) {
    BoundModel b;
    for (const auto &p : model.params) b.params.push_back(trainable ? tape.variable(p) : tape.constant(p));
    return b;
}

Var forward_log_probs(Tape &tape, const Model &model, const BoundModel &bound, const Var &x, Mode mode,
                      std::uint64_t seed, std::vector<Tensor> *running) {
    const Shape in = model.spec.input_shape();
    const Shape &xs = x.shape();
    if (xs.size() != 5 || !std::equal(in.begin(), in.end(), xs.begin() + 1))
        throw InputError("model expects input [N, " + shape_str(in).substr(1) + ", got " + shape_str(xs));
    if (bound.params.size() != model.params.size()) throw InputError("bound parameter count mismatch");
    if (running && running->size() != model.buffers.size()) throw InputError("running buffer count mismatch");

    const std::int64_t n = xs[0];
    Var h = x;
    std::size_t pi = 0, bi = 0;
    for (std::size_t li = 0; li < model.spec.layers.size(); ++li) {
        const LayerSpec &l = model.spec.layers[li];
        switch (l.kind) {
        case LayerKind::conv3d:
            h = ops::conv3d(h, bound.params[pi], bound.params[pi + 1]);
            pi += 2;
            break;
        case LayerKind::batchnorm3d: {
            const Var &gamma = bound.params[pi];
            const Var &beta = bound.params[pi + 1];
            pi += 2;
            const Shape hs = h.shape();
            const double count = static_cast<double>(shape_count(hs) / static_cast<std::size_t>(hs[1]));
            Var mean, inv_std;
            if (mode == Mode::train) {
                mean = ops::scale(ops::sum_to_channels(h), 1.0 / count);
                Var centered = ops::sub(h, ops::broadcast_channels(mean, hs));
                Var var = ops::scale(ops::sum_to_channels(ops::square(centered)), 1.0 / count);
                Var eps = tape.constant(Tensor(var.shape(), l.bn_eps));
                inv_std = ops::rsqrt(ops::add(var, eps));
                if (running) {
                    Tensor &rm = (*running)[bi];
                    Tensor &rv = (*running)[bi + 1];
                    for (std::size_t c = 0; c < rm.size(); ++c) {
                        rm[c] = l.momentum * rm[c] + (1.0 - l.momentum) * mean.value()[c];
                        rv[c] = l.momentum * rv[c] + (1.0 - l.momentum) * var.value()[c];
                    }
                }
                h = ops::mul(centered, ops::broadcast_channels(inv_std, hs));
            } else {
                const Tensor &rm = model.buffers[bi];
                const Tensor &rv = model.buffers[bi + 1];
                Tensor is(rv.shape());
                for (std::size_t c = 0; c < rv.size(); ++c) is[c] = 1.0 / std::sqrt(rv[c] + l.bn_eps);
                mean = tape.constant(rm);
                inv_std = tape.constant(std::move(is));
                h = ops::mul(ops::sub(h, ops::broadcast_channels(mean, hs)), ops::broadcast_channels(inv_std, hs));
            }
            h = ops::add(ops::mul(h, ops::broadcast_channels(gamma, hs)), ops::broadcast_channels(beta, hs));
            bi += 2;
            break;
        }
        case LayerKind::activation:
            h = l.activation == Activation::relu ? ops::relu(h) : ops::softplus(h, l.beta);
            break;
        case LayerKind::dropout:
            if (mode == Mode::train && l.rate > 0.0) {
                std::mt19937_64 rng(derive_seed(seed, {li}));
                std::uniform_real_distribution<double> u(0.0, 1.0);
                Tensor mask(h.shape());
                const double keep = 1.0 / (1.0 - l.rate);
                for (auto &v : mask.values()) v = u(rng) < l.rate ? 0.0 : keep;
                h = ops::mul(h, tape.constant(std::move(mask)));
            }
            break;
        case LayerKind::maxpool3d:
            h = ops::maxpool3d(h);
            break;
        case LayerKind::flatten:
            h = ops::reshape(h, Shape{n, static_cast<std::int64_t>(h.value().size() / static_cast<std::size_t>(n))});
            break;
        case LayerKind::dense: {
            Var y = ops::matmul(h, bound.params[pi], false, true);
            h = ops::add(y, ops::broadcast_channels(bound.params[pi + 1], y.shape()));
            pi += 2;
            break;
        }
        }
    }
    if (h.shape().size() != 2) throw ConfigError("model output is not [N, K]");
    return ops::log_softmax(h);
}

std::vector<PredictionDist> predict(const Model &model, const Tensor &x) {
    Tape tape;
    const auto bound = bind_params(tape, model, false);
    const Var lp = forward_log_probs(tape, model, bound, tape.constant(x), Mode::eval);
    const auto n = static_cast<std::size_t>(lp.shape()[0]);
    const auto k = static_cast<std::size_t>(lp.shape()[1]);
    std::vector<PredictionDist> out(n, PredictionDist(k));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i][j] = std::exp(lp.value()[i * k + j]);
    return out;
}

double cross_entropy(const PredictionDist &pred, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= pred.size()) throw InputError("label out of range");
    return -std::log(std::max(pred[static_cast<std::size_t>(label)], 1e-12));
}

double cross_entropy(const PredictionDist &pred, const std::vector<double> &one_hot) {
    if (one_hot.size() != pred.size()) throw InputError("one-hot label length differs from class count");
    double ce = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k)
        if (one_hot[k] != 0.0) ce -= one_hot[k] * std::log(std::max(pred[k], 1e-12));
    return ce;
}

Tensor input_gradient(const Model &model, const Tensor &x) {
    Tape tape;
    const auto bound = bind_params(tape, model, false);
    const Var xv = tape.variable(x);
    const Var s = ops::sum(forward_log_probs(tape, model, bound, xv, Mode::eval));
    return tape.gradient(s, {xv})[0].value();
}

std::vector<Tensor> penalty_param_gradient(const Model &model, const Tensor &x, const Tensor &q, double *penalty) {
    if (q.shape() != x.shape()) throw InputError("weight map shape " + shape_str(q.shape()) + " differs from input " +
                                                 shape_str(x.shape()));
    Tape tape;
    const auto bound = bind_params(tape, model, true);
    const Var xv = tape.variable(x);
    const Var s = ops::sum(forward_log_probs(tape, model, bound, xv, Mode::eval));
    const Var g = tape.gradient(s, {xv}, true)[0];
    const Var p = ops::sum(ops::square(ops::mul(tape.constant(q), g)));
    if (penalty) *penalty = p.value().item();
    std::vector<Tensor> out;
    for (const auto &v : tape.gradient(p, bound.params)) out.push_back(v.value());
    return out;
}

std::vector<Tensor> ce_param_gradient(const Model &model, const Tensor &x, const std::vector<int> &labels, Mode mode,
                                      std::uint64_t seed, double *loss) {
    Tape tape;
    const auto bound = bind_params(tape, model, true);
    const Var lp = forward_log_probs(tape, model, bound, tape.constant(x), mode, seed);
    const auto n = static_cast<std::size_t>(lp.shape()[0]);
    const auto k = static_cast<std::size_t>(lp.shape()[1]);
    if (labels.size() != n) throw InputError("label count differs from batch size");
    Tensor sel(lp.shape());
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw InputError("label out of range");
        sel[i * k + static_cast<std::size_t>(labels[i])] = -1.0 / static_cast<double>(n);
    }
    const Var ce = ops::sum(ops::mul(lp, tape.constant(std::move(sel))));
    if (loss) *loss = ce.value().item();
    std::vector<Tensor> out;
    for (const auto &v : tape.gradient(ce, bound.params)) out.push_back(v.value());
    return out;
}

Tensor stack_batch(const std::vector<const Tensor *> &samples) {
    if (samples.empty()) throw InputError("empty batch");
    const Shape &s0 = samples.front()->shape();
    Shape shape{static_cast<std::int64_t>(samples.size())};
    shape.insert(shape.end(), s0.begin(), s0.end());
    Tensor out(shape);
    const std::size_t per = samples.front()->size();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i]->shape() != s0) throw InputError("batch samples differ in shape");
        std::copy_n(samples[i]->data(), per, out.data() + i * per);
    }
    return out;
}

// Checkpoint layout (native endian):
//   "JSMK" u32 version
//   i32 in_channels, depth, height, width; u32 layer count
//   per layer: u8 kind, u8 activation, i32 in_ch, out_ch, kernel, in_features, out_features,
//              f64 momentum, bn_eps, beta, rate
//   u32 tensor count, per tensor: u32 rank, i64 extents..., f64 values...   (params, then buffers)
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto *p = reinterpret_cast<const unsigned char *>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_tensor(const Tensor &t) {
        put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) put<std::int64_t>(e);
        const auto *p = reinterpret_cast<const unsigned char *>(t.data());
        bytes.insert(bytes.end(), p, p + t.size() * sizeof(double));
    }
    std::vector<unsigned char> bytes;
};

class Reader {
public:
    explicit Reader(std::vector<unsigned char> b) : bytes(std::move(b)) {}
    template <typename T>
    T get() {
        if (pos + sizeof(T) > bytes.size()) throw FormatError("checkpoint truncated", pos);
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    Tensor get_tensor() {
        const auto rank = get<std::uint32_t>();
        if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), pos - 4);
        Shape s(rank);
        for (auto &e : s) {
            e = get<std::int64_t>();
            if (e < 0 || e > (1 << 28)) throw FormatError("implausible tensor extent", pos - 8);
        }
        Tensor t(s);
        const std::size_t nbytes = t.size() * sizeof(double);
        if (pos + nbytes > bytes.size()) throw FormatError("checkpoint truncated in tensor data", pos);
        std::memcpy(t.data(), bytes.data() + pos, nbytes);
        pos += nbytes;
        return t;
    }
    std::vector<unsigned char> bytes;
    std::size_t pos = 0;
};

} // namespace

void save_checkpoint(const Model &model, const std::filesystem::path &path) {
    Writer w;
    for (char c : std::string("JSMK")) w.put<char>(c);
    w.put<std::uint32_t>(kCheckpointVersion);
    const ModelSpec &s = model.spec;
    w.put<std::int32_t>(s.in_channels);
    w.put<std::int32_t>(s.depth);
    w.put<std::int32_t>(s.height);
    w.put<std::int32_t>(s.width);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.layers.size()));
    for (const auto &l : s.layers) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.kind));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.activation));
        w.put<std::int32_t>(l.in_channels);
        w.put<std::int32_t>(l.out_channels);
        w.put<std::int32_t>(l.kernel);
        w.put<std::int32_t>(l.in_features);
        w.put<std::int32_t>(l.out_features);
        w.put<double>(l.momentum);
        w.put<double>(l.bn_eps);
        w.put<double>(l.beta);
        w.put<double>(l.rate);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params.size() + model.buffers.size()));
    for (const auto &t : model.params) w.put_tensor(t);
    for (const auto &t : model.buffers) w.put_tensor(t);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing", 0);
    out.write(reinterpret_cast<const char *>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw FormatError("write failed for '" + path.string() + "'", 0);
}

Model load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'", 0);
    Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
    char magic[4];
    for (char &c : magic) c = r.get<char>();
    if (std::string(magic, 4) != "JSMK") throw FormatError("not a model checkpoint (bad magic)", 0);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);

    ModelSpec s;
    s.in_channels = r.get<std::int32_t>();
    s.depth = r.get<std::int32_t>();
    s.height = r.get<std::int32_t>();
    s.width = r.get<std::int32_t>();
    const auto nlayers = r.get<std::uint32_t>();
    if (nlayers > 1024) throw FormatError("implausible layer count", r.pos - 4);
    for (std::uint32_t i = 0; i < nlayers; ++i) {
        LayerSpec l;
        const std::size_t at = r.pos;
        const auto kind = r.get<std::uint8_t>();
        const auto act = r.get<std::uint8_t>();
        if (kind > static_cast<std::uint8_t>(LayerKind::dense) || act > 1)
            throw FormatError("unknown layer descriptor", at);
        l.kind = static_cast<LayerKind>(kind);
        l.activation = static_cast<Activation>(act);
        l.in_channels = r.get<std::int32_t>();
        l.out_channels = r.get<std::int32_t>();
        l.kernel = r.get<std::int32_t>();
        l.in_features = r.get<std::int32_t>();
        l.out_features = r.get<std::int32_t>();
        l.momentum = r.get<double>();
        l.bn_eps = r.get<double>();
        l.beta = r.get<double>();
        l.rate = r.get<double>();
        s.layers.push_back(l);
    }
    Model m;
    try {
        m = build_model(s, 0);
    } catch (const ConfigError &e) {
        throw FormatError(std::string("inconsistent layer table: ") + e.what(), 8);
    }
    const auto ntensors = r.get<std::uint32_t>();
    if (ntensors != m.params.size() + m.buffers.size())
        throw FormatError("tensor count does not match the layer table", r.pos - 4);
    for (auto *group : {&m.params, &m.buffers})
        for (auto &t : *group) {
            const std::size_t at = r.pos;
            Tensor loaded = r.get_tensor();
            if (loaded.shape() != t.shape())
                throw FormatError("tensor shape " + shape_str(loaded.shape()) + " does not match expected " +
                                      shape_str(t.shape()),
                                  at);
            t = std::move(loaded);
        }
    if (r.pos != r.bytes.size()) throw FormatError("trailing bytes after checkpoint", r.pos);
    return m;
}

} // namespace jsmtk
