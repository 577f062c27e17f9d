#include "jsmtk/jal.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "jsmtk/errors.hpp"
#include "jsmtk/ops.hpp"
#include "jsmtk/parallel.hpp"
#include "jsmtk/rng.hpp"

namespace jsmtk {

void JALConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
    weights.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (activation == Activation::softplus && !(beta > 0.0)) throw ConfigError("softplus beta must be > 0");
}

FusionMode parse_fusion_mode(const std::string &s) {
    if (s == "early") return FusionMode::early;
    if (s == "late") return FusionMode::late;
    throw ConfigError("unknown fusion mode '" + s + "' (expected early or late)");
}

const char *fusion_mode_name(FusionMode m) { return m == FusionMode::early ? "early" : "late"; }

std::string TrainHistory::csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,ce,penalty,total,acc\n";
    for (const auto &e : epochs) os << e.epoch << ',' << e.ce << ',' << e.penalty << ',' << e.total << ',' << e.accuracy << '\n';
    return os.str();
}

Tensor penalty_weights(const Tensor &jsm, const WeightParams &params) {
    params.validate();
    Tensor q(jsm.shape());
    for (std::size_t i = 0; i < jsm.size(); ++i) {
        const double w = classify(jsm[i], params.eps_flat) == VolumeChange::none ? params.debug_weight
                                                                                 : params.feature_weight;
        q[i] = w * jsm[i];
    }
    return q;
}

namespace {

struct BatchTensors {
    Tensor x;
    Tensor q;
    std::vector<int> labels;
};

BatchTensors gather_batch(const std::vector<const Sample *> &batch, const WeightParams *weights) {
    if (batch.empty()) throw InputError("empty batch");
    BatchTensors b;
    std::vector<const Tensor *> xs, qs;
    std::vector<Tensor> q_store;
    if (weights) q_store.reserve(batch.size());
    for (const Sample *s : batch) {
        xs.push_back(&s->x);
        b.labels.push_back(s->label);
        if (weights) {
            if (s->jsm.shape() != s->x.shape())
                throw InputError("JSM shape " + shape_str(s->jsm.shape()) + " differs from input " +
                                 shape_str(s->x.shape()));
            q_store.push_back(penalty_weights(s->jsm, *weights));
            qs.push_back(&q_store.back());
        }
    }
    b.x = stack_batch(xs);
    if (weights) b.q = stack_batch(qs);
    return b;
}

// Mean of -log p[label] over the rows of log-probabilities [N, K].
Var mean_cross_entropy(Tape &tape, const Var &log_probs, const std::vector<int> &labels) {
    const auto n = static_cast<std::size_t>(log_probs.shape()[0]);
    const auto k = static_cast<std::size_t>(log_probs.shape()[1]);
    if (labels.size() != n) throw InputError("label count differs from batch size");
    Tensor sel(log_probs.shape());
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw InputError("label out of range");
        sel[i * k + static_cast<std::size_t>(labels[i])] = -1.0 / static_cast<double>(n);
    }
    return ops::sum(ops::mul(log_probs, tape.constant(std::move(sel))));
}

// Mean over the batch of sum (q * d(sum_k log p_k)/dx)^2, differentiable in the parameters.
Var mean_penalty(Tape &tape, const Model &model, const BoundModel &bound, const Tensor &x, const Tensor &q) {
    const Var xv = tape.variable(x);
    const Var s = ops::sum(forward_log_probs(tape, model, bound, xv, Mode::eval));
    const Var g = tape.gradient(s, {xv}, true)[0];
    return ops::scale(ops::sum(ops::square(ops::mul(tape.constant(q), g))), 1.0 / static_cast<double>(x.dim(0)));
}

int count_correct(const Var &log_probs, const std::vector<int> &labels) {
    const auto k = static_cast<std::size_t>(log_probs.shape()[1]);
    const double *lp = log_probs.value().data();
    int correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto best = static_cast<int>(std::max_element(lp + i * k, lp + (i + 1) * k) - (lp + i * k));
        correct += best == labels[i] ? 1 : 0;
    }
    return correct;
}

void sgd_update(Model &model, const std::vector<Var> &grads, double lr) {
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        double *p = model.params[i].data();
        const double *g = grads[i].value().data();
        for (std::size_t j = 0; j < model.params[i].size(); ++j) p[j] -= lr * g[j];
    }
}

struct StepOutcome {
    JALTerms terms;
    int correct = 0;
};

StepOutcome jal_step_impl(Model &model, const std::vector<const Sample *> &batch, const JALConfig &cfg,
                          std::uint64_t seed) {
    const bool penalized = cfg.lambda > 0.0;
    const BatchTensors b = gather_batch(batch, penalized ? &cfg.weights : nullptr);
    Tape tape;
    const BoundModel bound = bind_params(tape, model, true);
    std::vector<Tensor> running = model.buffers;
    const Var lp = forward_log_probs(tape, model, bound, tape.constant(b.x), Mode::train, seed, &running);
    const Var ce = mean_cross_entropy(tape, lp, b.labels);
    Var total = ce;
    StepOutcome out;
    out.terms.ce = ce.value().item();
    if (penalized) {
        const Var pen = mean_penalty(tape, model, bound, b.x, b.q);
        total = ops::add(ce, ops::scale(pen, cfg.lambda));
        out.terms.penalty = pen.value().item();
    }
    out.terms.total = total.value().item();
    if (!std::isfinite(out.terms.total)) {
        std::ostringstream os;
        os << "non-finite training loss: ce=" << out.terms.ce << " penalty=" << out.terms.penalty
           << " lambda=" << cfg.lambda << " total=" << out.terms.total;
        throw NumericalError(os.str());
    }
    out.correct = count_correct(lp, b.labels);
    sgd_update(model, tape.gradient(total, bound.params), cfg.learning_rate);
    model.buffers = std::move(running);
    return out;
}

StepOutcome ce_step_impl(Model &model, const std::vector<const Sample *> &batch, double lr, std::uint64_t seed) {
    const BatchTensors b = gather_batch(batch, nullptr);
    Tape tape;
    const BoundModel bound = bind_params(tape, model, true);
    std::vector<Tensor> running = model.buffers;
    const Var lp = forward_log_probs(tape, model, bound, tape.constant(b.x), Mode::train, seed, &running);
    const Var ce = mean_cross_entropy(tape, lp, b.labels);
    StepOutcome out;
    out.terms.ce = out.terms.total = ce.value().item();
    if (!std::isfinite(out.terms.ce)) throw NumericalError("non-finite cross-entropy loss: " + std::to_string(out.terms.ce));
    out.correct = count_correct(lp, b.labels);
    sgd_update(model, tape.gradient(ce, bound.params), lr);
    model.buffers = std::move(running);
    return out;
}

} // namespace

JALTerms jal_loss(const Model &model, const std::vector<const Sample *> &batch, const JALConfig &cfg, Mode ce_mode,
                  std::uint64_t seed) {
    cfg.validate();
    const BatchTensors b = gather_batch(batch, &cfg.weights);
    Tape tape;
    const BoundModel bound = bind_params(tape, model, false);
    const Var lp = forward_log_probs(tape, model, bound, tape.constant(b.x), ce_mode, seed);
    JALTerms t;
    t.ce = mean_cross_entropy(tape, lp, b.labels).value().item();
    t.total = t.ce;
    if (cfg.lambda > 0.0) {
        t.penalty = mean_penalty(tape, model, bound, b.x, b.q).value().item();
        t.total = t.ce + cfg.lambda * t.penalty;
    }
    return t;
}

JALTerms jal_step(Model &model, const std::vector<const Sample *> &batch, const JALConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    return jal_step_impl(model, batch, cfg, seed).terms;
}

double ce_step(Model &model, const std::vector<const Sample *> &batch, double learning_rate, std::uint64_t seed) {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    return ce_step_impl(model, batch, learning_rate, seed).terms.ce;
}

FusedInput early_fusion_pack(const Tensor &x1, const Tensor &x2, const Tensor &jsm1, const Tensor &jsm2) {
    auto check = [](const Tensor &a, const char *what) {
        if (a.rank() != 4 || a.dim(0) != 1) throw InputError(std::string(what) + " must be [1, D, H, W]");
    };
    check(x1, "modality-1 image");
    check(x2, "modality-2 image");
    check(jsm1, "modality-1 JSM");
    check(jsm2, "modality-2 JSM");
    if (x1.shape() != x2.shape() || x1.shape() != jsm1.shape() || x1.shape() != jsm2.shape())
        throw InputError("early fusion needs equal spatial dims: " + shape_str(x1.shape()) + ", " +
                         shape_str(x2.shape()) + ", " + shape_str(jsm1.shape()) + ", " + shape_str(jsm2.shape()));
    auto cat = [](const Tensor &a, const Tensor &b) {
        Tensor out(Shape{2, a.dim(1), a.dim(2), a.dim(3)});
        std::copy_n(a.data(), a.size(), out.data());
        std::copy_n(b.data(), b.size(), out.data() + a.size());
        return out;
    };
    return {cat(x1, x2), cat(jsm1, jsm2)};
}

PredictionDist late_fusion_predict(const PredictionDist &p1, const PredictionDist &p2) {
    if (p1.size() != p2.size()) throw InputError("late fusion needs equal class counts");
    PredictionDist out(p1.size());
    for (std::size_t k = 0; k < p1.size(); ++k) out[k] = 0.5 * (p1[k] + p2[k]);
    return out;
}

namespace {

std::vector<Sample> branch_samples(const std::vector<MultiSample> &data, FusionMode mode, int branch) {
    std::vector<Sample> out;
    out.reserve(data.size());
    for (const auto &s : data) {
        if (mode == FusionMode::early) {
            FusedInput f = early_fusion_pack(s.x1, s.x2, s.jsm1, s.jsm2);
            out.push_back({std::move(f.x), std::move(f.jsm), s.label});
        } else if (branch == 0) {
            out.push_back({s.x1, s.jsm1, s.label});
        } else {
            out.push_back({s.x2, s.jsm2, s.label});
        }
    }
    return out;
}

template <typename StepFn>
TrainedModels train_with(const std::vector<MultiSample> &data, FusionMode mode, const JALConfig &cfg, StepFn step) {
    cfg.validate();
    if (data.empty()) throw InputError("cannot train on an empty dataset");
    const Shape &s = data.front().x1.shape();
    if (s.size() != 4 || s[0] != 1) throw InputError("samples must be [1, D, H, W]");
    if (s[1] != s[2] || s[1] != s[3]) throw InputError("desk model expects cubic volumes");
    int classes = 0;
    for (const auto &d : data) classes = std::max(classes, d.label + 1);
    classes = std::max(classes, 4);

    TrainedModels tm;
    tm.mode = mode;
    const int branches = mode == FusionMode::early ? 1 : 2;
    for (int br = 0; br < branches; ++br) {
        const std::vector<Sample> samples = branch_samples(data, mode, br);
        const ModelSpec spec = desk_model_spec(mode == FusionMode::early ? 2 : 1, static_cast<int>(s[1]), classes,
                                               cfg.activation, cfg.beta);
        const auto ubr = static_cast<std::uint64_t>(br);
        Model model = build_model(spec, derive_seed(cfg.seed, {ubr, 0xA11CE}));
        TrainHistory hist;
        std::vector<std::size_t> order(samples.size());
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const auto uep = static_cast<std::uint64_t>(epoch);
            std::iota(order.begin(), order.end(), 0);
            std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {ubr, 0x5EED, uep}));
            std::shuffle(order.begin(), order.end(), shuffle_rng);
            EpochRecord rec;
            rec.epoch = epoch + 1;
            int correct = 0;
            for (std::size_t start = 0, bi = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++bi) {
                const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
                std::vector<const Sample *> batch;
                for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[order[i]]);
                const StepOutcome o = step(model, batch, derive_seed(cfg.seed, {ubr, uep, bi}));
                const auto w = static_cast<double>(batch.size());
                rec.ce += o.terms.ce * w;
                rec.penalty += o.terms.penalty * w;
                rec.total += o.terms.total * w;
                correct += o.correct;
            }
            const auto n = static_cast<double>(samples.size());
            rec.ce /= n;
            rec.penalty /= n;
            rec.total /= n;
            rec.accuracy = correct / n;
            hist.epochs.push_back(rec);
        }
        tm.models.push_back(std::move(model));
        tm.histories.push_back(std::move(hist));
    }
    return tm;
}

} // namespace

TrainedModels train(const std::vector<MultiSample> &data, FusionMode mode, const JALConfig &cfg) {
    return train_with(data, mode, cfg, [&cfg](Model &m, const std::vector<const Sample *> &b, std::uint64_t seed) {
        return jal_step_impl(m, b, cfg, seed);
    });
}

TrainedModels train_ce(const std::vector<MultiSample> &data, FusionMode mode, const JALConfig &cfg) {
    return train_with(data, mode, cfg, [&cfg](Model &m, const std::vector<const Sample *> &b, std::uint64_t seed) {
        return ce_step_impl(m, b, cfg.learning_rate, seed);
    });
}

std::vector<PredictionDist> predict_dataset(const TrainedModels &tm, const std::vector<MultiSample> &data) {
    std::vector<PredictionDist> out(data.size());
    parallel_for(0, data.size(), [&](std::size_t i) {
        const MultiSample &s = data[i];
        auto batch1 = [](const Tensor &t) {
            Shape sh{1};
            sh.insert(sh.end(), t.shape().begin(), t.shape().end());
            return t.reshaped(sh);
        };
        if (tm.mode == FusionMode::early) {
            out[i] = predict(tm.models.at(0), batch1(early_fusion_pack(s.x1, s.x2, s.jsm1, s.jsm2).x))[0];
        } else {
            out[i] = late_fusion_predict(predict(tm.models.at(0), batch1(s.x1))[0],
                                         predict(tm.models.at(1), batch1(s.x2))[0]);
        }
    });
    return out;
}

namespace {

std::string trim(const std::string &s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace

ConfigMap parse_config_text(const std::string &text) {
    ConfigMap out;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        out[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
    }
    return out;
}

ConfigMap read_config_file(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

double config_double(const ConfigMap &cfg, const std::string &key, double fallback) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception &) {
        throw ConfigError(key + ": expected a number, got '" + it->second + "'");
    }
}

long long config_int(const ConfigMap &cfg, const std::string &key, long long fallback) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        std::size_t used = 0;
        const long long v = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception &) {
        throw ConfigError(key + ": expected an integer, got '" + it->second + "'");
    }
}

std::string config_string(const ConfigMap &cfg, const std::string &key, const std::string &fallback) {
    const auto it = cfg.find(key);
    return it == cfg.end() ? fallback : it->second;
}

bool config_bool(const ConfigMap &cfg, const std::string &key, bool fallback) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + it->second + "'");
}

JALConfig jal_config_from(const ConfigMap &cfg, JALConfig base) {
    static const char *known[] = {"jal.lambda",     "jal.feature_weight", "jal.debug_weight", "jal.eps_flat",
                                  "jal.epochs",     "jal.batch_size",     "jal.learning_rate", "jal.seed",
                                  "model.activation", "model.beta"};
    for (const auto &[k, v] : cfg) {
        if (!k.starts_with("jal.") && !k.starts_with("model.")) continue;
        if (std::find_if(std::begin(known), std::end(known), [&](const char *n) { return k == n; }) == std::end(known))
            throw ConfigError("unknown config key '" + k + "'");
    }
    JALConfig c = base;
    c.lambda = config_double(cfg, "jal.lambda", c.lambda);
    c.weights.feature_weight = config_double(cfg, "jal.feature_weight", c.weights.feature_weight);
    c.weights.debug_weight = config_double(cfg, "jal.debug_weight", c.weights.debug_weight);
    c.weights.eps_flat = config_double(cfg, "jal.eps_flat", c.weights.eps_flat);
    c.epochs = static_cast<int>(config_int(cfg, "jal.epochs", c.epochs));
    c.batch_size = static_cast<int>(config_int(cfg, "jal.batch_size", c.batch_size));
    c.learning_rate = config_double(cfg, "jal.learning_rate", c.learning_rate);
    c.seed = static_cast<std::uint64_t>(config_int(cfg, "jal.seed", static_cast<long long>(c.seed)));
    const std::string act = config_string(cfg, "model.activation", c.activation == Activation::relu ? "relu" : "softplus");
    if (act == "relu")
        c.activation = Activation::relu;
    else if (act == "softplus")
        c.activation = Activation::softplus;
    else
        throw ConfigError("model.activation: expected relu or softplus, got '" + act + "'");
    c.beta = config_double(cfg, "model.beta", c.beta);
    c.validate();
    return c;
}

} // namespace jsmtk
