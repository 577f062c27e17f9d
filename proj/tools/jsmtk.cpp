// jsmtk command-line front end: data generation, registration, JSM, training,
// evaluation, ablation and saliency export.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "jsmtk/errors.hpp"
#include "jsmtk/harness.hpp"
#include "jsmtk/jal.hpp"
#include "jsmtk/jsm.hpp"
#include "jsmtk/parallel.hpp"
#include "jsmtk/registration.hpp"
#include "jsmtk/rng.hpp"
#include "jsmtk/synth.hpp"
#include "jsmtk/volume_io.hpp"

namespace fs = std::filesystem;
using namespace jsmtk;

namespace {

enum Exit { ok = 0, config_error = 2, data_error = 3, numerical_error = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 1;
};

void add_common(CLI::App *app, Common &c, bool needs_out = true) {
    app->add_option("--config", c.config, "Sectioned key = value config file")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "Seed override");
    auto *o = app->add_option("--out", c.out, "Output directory");
    if (needs_out) o->required();
    app->add_option("--threads", c.threads, "Worker threads (1 is bit-reproducible)")->check(CLI::PositiveNumber);
}

ConfigMap load(const Common &c) {
    ConfigMap cfg = c.config.empty() ? ConfigMap{} : read_config_file(c.config);
    static const char *sections[] = {"data.", "jal.", "model.", "registration.", "ablation."};
    for (const auto &kv : cfg)
        if (std::none_of(std::begin(sections), std::end(sections), [&](const char *s) { return kv.first.starts_with(s); }))
            throw ConfigError("unknown config key '" + kv.first + "'");
    return cfg;
}

void check_keys(const ConfigMap &cfg, const std::string &section, std::initializer_list<const char *> known) {
    for (const auto &kv : cfg) {
        if (!kv.first.starts_with(section + ".")) continue;
        const std::string key = kv.first.substr(section.size() + 1);
        if (std::none_of(known.begin(), known.end(), [&](const char *k) { return key == k; }))
            throw ConfigError("unknown config key '" + kv.first + "'");
    }
}

RegistrationConfig registration_config(const ConfigMap &cfg) {
    check_keys(cfg, "registration", {"alpha", "bins", "levels", "step", "max_iters", "smooth_sigma", "tol", "boundary"});
    RegistrationConfig r;
    r.alpha = config_double(cfg, "registration.alpha", r.alpha);
    r.bins = static_cast<int>(config_int(cfg, "registration.bins", r.bins));
    r.levels = static_cast<int>(config_int(cfg, "registration.levels", r.levels));
    r.step = config_double(cfg, "registration.step", r.step);
    r.max_iters = static_cast<int>(config_int(cfg, "registration.max_iters", r.max_iters));
    r.smooth_sigma = config_double(cfg, "registration.smooth_sigma", r.smooth_sigma);
    r.tol = config_double(cfg, "registration.tol", r.tol);
    const std::string b = config_string(cfg, "registration.boundary", "clamp");
    if (b == "clamp")
        r.policy = BoundaryPolicy::clamp;
    else if (b == "zero")
        r.policy = BoundaryPolicy::zero;
    else
        throw ConfigError("registration.boundary: expected clamp or zero, got '" + b + "'");
    r.validate();
    return r;
}

JALConfig training_config(const ConfigMap &cfg, const Common &c) {
    JALConfig j = jal_config_from(cfg);
    if (c.seed) j.seed = *c.seed;
    j.validate();
    return j;
}

std::vector<double> parse_doubles(const std::string &key, const std::string &text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
        } catch (const std::logic_error &) {
            throw ConfigError(key + ": bad number '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
    out << text;
    if (!out) throw FormatError("write failed for '" + path.string() + "'", 0);
}

std::string describe(const JALConfig &j) {
    std::ostringstream os;
    std::string section;
    for (const auto &[k, v] : describe_config(j)) {
        const std::string sec = k.substr(0, k.find('.'));
        if (sec != section) {
            os << '[' << sec << "]\n";
            section = sec;
        }
        os << k.substr(sec.size() + 1) << " = " << v << '\n';
    }
    return os.str();
}

// Training set with optional ADASYN balancing (data.adasyn_k = 0 disables it).
std::vector<MultiSample> training_samples(const Dataset &d, const ConfigMap &cfg, std::uint64_t seed,
                                          std::ostream &log) {
    auto train_set = samples_of(d, Split::train);
    const auto k = config_int(cfg, "data.adasyn_k", 5);
    if (k == 0) return train_set;
    const double beta = config_double(cfg, "data.adasyn_beta", 1.0);
    AdasynResult r = adasyn_oversample(train_set, static_cast<int>(k), beta, derive_seed(seed, {0xADA5}));
    for (const auto &w : r.warnings) log << "warning: " << w << '\n';
    std::size_t made = 0;
    for (auto g : r.generated_per_class) made += g;
    if (made) log << "adasyn: " << made << " synthetic samples\n";
    return std::move(r.samples);
}

void save_models(const TrainedModels &tm, const JALConfig &j, const fs::path &dir) {
    fs::create_directories(dir);
    std::ostringstream os;
    os << "# trained models\n[train]\nmode = " << fusion_mode_name(tm.mode) << "\nmodels = " << tm.models.size()
       << "\n\n"
       << describe(j);
    write_text(dir / "model.txt", os.str());
    for (std::size_t i = 0; i < tm.models.size(); ++i) {
        save_checkpoint(tm.models[i], dir / ("model" + std::to_string(i) + ".ckpt"));
        write_text(dir / ("history" + std::to_string(i) + ".csv"), tm.histories[i].csv());
    }
}

TrainedModels load_models(const fs::path &dir) {
    const ConfigMap m = read_config_file(dir / "model.txt");
    TrainedModels tm;
    tm.mode = parse_fusion_mode(config_string(m, "train.mode", "early"));
    const auto n = config_int(m, "train.models", 1);
    if (n != (tm.mode == FusionMode::early ? 1 : 2)) throw FormatError("model.txt: model count does not match mode", 0);
    for (long long i = 0; i < n; ++i) tm.models.push_back(load_checkpoint(dir / ("model" + std::to_string(i) + ".ckpt")));
    return tm;
}

fs::path need_dir(const std::string &path, const char *what) {
    if (path.empty()) throw ConfigError(std::string("missing --") + what);
    if (!fs::is_directory(path)) throw FormatError(std::string(what) + " directory '" + path + "' does not exist", 0);
    return path;
}

int cmd_gen_data(const Common &c) {
    const ConfigMap cfg = load(c);
    PhantomSpec spec = phantom_spec_from(cfg);
    spec.registration = registration_config(cfg);
    if (c.seed) spec.seed = *c.seed;
    const int n = static_cast<int>(config_int(cfg, "data.subjects_per_class", 40));
    const double tf = config_double(cfg, "data.test_fraction", 0.25);
    const bool confounder = config_bool(cfg, "data.confounder", true);
    const Dataset d = make_benchmark(spec, n, tf, confounder);
    write_dataset(d, c.out);
    std::size_t test = std::count(d.split.begin(), d.split.end(), Split::test);
    std::cout << "wrote " << d.subjects.size() << " subjects (" << test << " test) to " << c.out << '\n';
    return ok;
}

int cmd_register(const Common &c, const std::string &fixed_path, const std::string &moving_path) {
    const ConfigMap cfg = load(c);
    const RegistrationConfig rc = registration_config(cfg);
    const Volume3D fixed = read_volume(fixed_path), moving = read_volume(moving_path);
    const RegistrationResult r = register_volumes(moving, fixed, rc);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_field(r.field, out / "field.jsmv", VoxelType::f64x3);
    write_volume(warp(moving, r.field, rc.policy), out / "warped.jsmv", VoxelType::f64);
    write_volume(compute_jsm(r.field), out / "jsm.jsmv", VoxelType::f64);
    write_text(out / "cost_log.txt", r.log_text());
    std::ostringstream os;
    os.precision(17);
    os << "# registration\n[registration]\nfinal_cost = " << r.final_cost
       << "\nconverged = " << (r.converged ? "true" : "false") << "\naccepted_steps = " << r.log.size() << '\n';
    write_text(out / "summary.txt", os.str());
    std::cout << "final cost " << r.final_cost << (r.converged ? " (converged)" : " (iteration limit)") << '\n';
    return ok;
}

int cmd_jsm(const Common &c, const std::string &field_path) {
    const ConfigMap cfg = load(c);
    const JALConfig j = jal_config_from(cfg);
    const DisplacementField f = read_field(field_path);
    const JacobianSaliencyMap jsm = compute_jsm(f);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_volume(jsm, out / "jsm.jsmv", VoxelType::f64);
    write_volume(weight_mask(jsm, j.weights), out / "weights.jsmv", VoxelType::f64);
    const VolumeChangeCounts n = count_classes(classify_voxels(jsm, j.weights.eps_flat));
    std::ostringstream os;
    os.precision(17);
    os << "# jacobian saliency map\n[jsm]\nmin = " << jsm.min() << "\nmax = " << jsm.max()
       << "\nexpansion = " << n.expansion << "\nnone = " << n.none << "\ncompression = " << n.compression << '\n';
    write_text(out / "summary.txt", os.str());
    std::cout << os.str();
    return ok;
}

int cmd_train(const Common &c, const std::string &data_dir, const std::string &mode) {
    const ConfigMap cfg = load(c);
    phantom_spec_from(cfg); // validates [data] keys
    const JALConfig j = training_config(cfg, c);
    const Dataset d = read_dataset(need_dir(data_dir, "data"));
    std::ostringstream log;
    const auto samples = training_samples(d, cfg, j.seed, log);
    const TrainedModels tm = train(samples, parse_fusion_mode(mode), j);
    save_models(tm, j, c.out);
    write_text(fs::path(c.out) / "train_log.txt", log.str());
    std::cout << log.str();
    for (std::size_t i = 0; i < tm.histories.size(); ++i) {
        const auto &e = tm.histories[i].epochs.back();
        std::cout << "model " << i << ": epoch " << e.epoch << " ce " << e.ce << " penalty " << e.penalty
                  << " train acc " << e.accuracy << '\n';
    }
    return ok;
}

int cmd_eval(const Common &c, const std::string &data_dir, const std::string &model_dir, const std::string &split) {
    const Dataset d = read_dataset(need_dir(data_dir, "data"));
    const TrainedModels tm = load_models(need_dir(model_dir, "model"));
    if (split != "train" && split != "test") throw ConfigError("--split: expected train or test");
    const Split which = split == "train" ? Split::train : Split::test;
    const auto samples = samples_of(d, which);
    if (samples.empty()) throw InputError("no subjects in the " + split + " split");
    const auto dists = predict_dataset(tm, samples);
    const auto preds = argmax_labels(dists);
    std::vector<int> labels;
    for (const auto &s : samples) labels.push_back(s.label);
    const ConfusionMatrix cm = confusion(preds, labels, kNumClasses);
    const MetricsReport m = per_class_metrics(cm);

    const fs::path out = c.out;
    fs::create_directories(out);
    std::ostringstream pred;
    pred.precision(17);
    pred << "id,label,predicted";
    for (int k = 0; k < kNumClasses; ++k) pred << ",p_" << class_name(k);
    pred << '\n';
    for (std::size_t i = 0; i < samples.size(); ++i) {
        pred << samples[i].id << ',' << labels[i] << ',' << preds[i];
        for (double p : dists[i]) pred << ',' << p;
        pred << '\n';
    }
    write_text(out / "predictions.csv", pred.str());
    std::ostringstream cmcsv;
    cmcsv << "truth";
    for (int k = 0; k < kNumClasses; ++k) cmcsv << ',' << class_name(k);
    cmcsv << '\n';
    for (int t = 0; t < kNumClasses; ++t) {
        cmcsv << class_name(t);
        for (int p = 0; p < kNumClasses; ++p) cmcsv << ',' << cm.at(t, p);
        cmcsv << '\n';
    }
    write_text(out / "confusion.csv", cmcsv.str());
    std::vector<std::string> names;
    for (int k = 0; k < kNumClasses; ++k) names.emplace_back(class_name(k));
    write_text(out / "metrics.csv", m.csv(names));
    std::cout << m.csv(names);
    for (const auto &w : m.warnings) std::cerr << "warning: " << w << '\n';
    return ok;
}

int cmd_ablate(const Common &c, const std::string &data_dir, const std::string &sweep, const std::string &sweep_mode) {
    const ConfigMap cfg = load(c);
    phantom_spec_from(cfg);
    check_keys(cfg, "ablation", {"modes", "eval_batch_size", "bins", "sweep"});
    AblationConfig a;
    a.jal = training_config(cfg, c);
    a.eval_batch_size = static_cast<int>(config_int(cfg, "ablation.eval_batch_size", a.eval_batch_size));
    a.histogram_bins = static_cast<int>(config_int(cfg, "ablation.bins", a.histogram_bins));
    if (cfg.count("ablation.modes")) {
        a.modes.clear();
        std::stringstream ss(cfg.at("ablation.modes"));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            a.modes.push_back(parse_fusion_mode(item));
        }
    }
    const Dataset d = read_dataset(need_dir(data_dir, "data"));
    const fs::path out = c.out;
    fs::create_directories(out);
    const std::string sweep_list = !sweep.empty() ? sweep : config_string(cfg, "ablation.sweep", "");
    if (!sweep_list.empty()) {
        const LambdaSweep sw = sweep_lambda(d, a, parse_doubles("sweep", sweep_list), parse_fusion_mode(sweep_mode));
        write_text(out / "sweep.csv", sw.csv());
        std::cout << sw.csv() << "chosen lambda " << sw.chosen << '\n';
        return ok;
    }
    const AblationReport rep = ablate(d, a);
    rep.write(out);
    std::cout << rep.summary();
    return ok;
}

int cmd_explain(const Common &c, const std::string &data_dir, const std::string &model_dir, const std::string &subject) {
    const Dataset d = read_dataset(need_dir(data_dir, "data"));
    const TrainedModels tm = load_models(need_dir(model_dir, "model"));
    std::optional<MultiSample> chosen;
    for (std::size_t i = 0; i < d.subjects.size() && !chosen; ++i) {
        const bool match = subject.empty() ? d.split[i] == Split::test : d.subjects[i].id == subject;
        if (match) chosen = to_training_sample(d.subjects[i]);
    }
    if (!chosen) throw InputError("subject '" + subject + "' not found");
    const SaliencySummary s = export_saliency(tm, *chosen, c.out);
    for (std::size_t k = 0; k < s.spearman_jsm.size(); ++k)
        std::cout << chosen->id << " modality " << k + 1 << ": spearman(saliency, jsm) " << s.spearman_jsm[k]
                  << ", spearman(saliency, |jsm-1|) " << s.spearman_change[k] << '\n';
    return ok;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Jacobian saliency toolkit"};
    app.require_subcommand(1);

    Common common;
    std::string fixed, moving, field, data, model, mode = "early", split = "test", sweep, sweep_mode = "early",
                                                       subject;

    auto *gen = app.add_subcommand("gen-data", "Generate a synthetic multimodal dataset");
    add_common(gen, common);

    auto *reg = app.add_subcommand("register", "Deformably register a moving volume onto a fixed volume");
    add_common(reg, common);
    reg->add_option("--fixed", fixed, "Fixed volume (native or NIfTI-1)")->required()->check(CLI::ExistingFile);
    reg->add_option("--moving", moving, "Moving volume (native or NIfTI-1)")->required()->check(CLI::ExistingFile);

    auto *jsm = app.add_subcommand("jsm", "Jacobian saliency map of a displacement field");
    add_common(jsm, common);
    jsm->add_option("--field", field, "Displacement field file")->required()->check(CLI::ExistingFile);

    auto *tr = app.add_subcommand("train", "Train on a dataset directory");
    add_common(tr, common);
    tr->add_option("--data", data, "Dataset directory")->required();
    tr->add_option("--mode", mode, "early or late fusion");

    auto *ev = app.add_subcommand("eval", "Evaluate trained models");
    add_common(ev, common);
    ev->add_option("--data", data, "Dataset directory")->required();
    ev->add_option("--model", model, "Directory written by train")->required();
    ev->add_option("--split", split, "train or test");

    auto *ab = app.add_subcommand("ablate", "With/without penalty ablation, or a lambda sweep");
    add_common(ab, common);
    ab->add_option("--data", data, "Dataset directory")->required();
    ab->add_option("--sweep", sweep, "Comma-separated lambdas; runs a sweep instead of the ablation");
    ab->add_option("--sweep-mode", sweep_mode, "Fusion mode for the sweep");

    auto *ex = app.add_subcommand("explain", "Export input-gradient saliency for one subject");
    add_common(ex, common);
    ex->add_option("--data", data, "Dataset directory")->required();
    ex->add_option("--model", model, "Directory written by train")->required();
    ex->add_option("--subject", subject, "Subject id (default: first test subject)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        set_thread_count(common.threads);
        if (*gen) return cmd_gen_data(common);
        if (*reg) return cmd_register(common, fixed, moving);
        if (*jsm) return cmd_jsm(common, field);
        if (*tr) return cmd_train(common, data, mode);
        if (*ev) return cmd_eval(common, data, model, split);
        if (*ab) return cmd_ablate(common, data, sweep, sweep_mode);
        if (*ex) return cmd_explain(common, data, model, subject);
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const NumericalError &e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return numerical_error;
    } catch (const FormatError &e) {
        std::cerr << "format error: " << e.what() << '\n';
        return data_error;
    } catch (const InputError &e) {
        std::cerr << "data error: " << e.what() << '\n';
        return data_error;
    } catch (const fs::filesystem_error &e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return data_error;
    }
    return config_error;
}
