#include "docklab/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "docklab/digest.hpp"
#include "docklab/errors.hpp"
#include "docklab/rng.hpp"
#include "docklab/text.hpp"

namespace docklab {

using json = nlohmann::json;

const char* train_mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::Base: return "base";
        case TrainMode::Dock: return "dock";
        case TrainMode::Feature: return "feature";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (epochs.empty()) throw ConfigError("train: epoch schedule is empty");
    for (const auto& e : epochs) {
        if (!(e.lr > 0.0)) throw ConfigError("train: learning rate must be > 0");
    }
    if (!(epsilon > 0.0 && epsilon < 0.5)) {
        throw ConfigError("train: epsilon must be in (0, 0.5)");
    }
}

std::string train_config_json(const TrainConfig& config) {
    json j;
    j["mode"] = train_mode_name(config.mode);
    std::vector<std::string> cues;
    for (Cue c : config.cues) cues.emplace_back(cue_name(c));
    j["cues"] = cues;
    json epochs = json::array();
    for (const auto& e : config.epochs) epochs.push_back({{"count", e.count}, {"lr", e.lr}});
    j["epochs"] = std::move(epochs);
    j["seed"] = config.seed;
    j["epsilon"] = config.epsilon;
    j["y_min"] = config.prior_params.y_min;
    j["tau_vis"] = config.prior_params.tau_vis;
    j["nms_iou"] = config.prior_params.nms_iou;
    j["similarity_threshold"] = config.similarity_threshold;
    return j.dump();
}

namespace {

std::string checkpoint_bytes(const HeadParameters& params) {
    std::string bytes;
    auto append = [&](const std::vector<double>& v) {
        bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    append(params.w_r.data());
    append(params.b_r);
    append(params.w_d.data());
    append(params.b_d);
    return bytes;
}

}  // namespace

TrainResult train_detector(const Dataset& train, const KnowledgeBase& kb,
                           const SourceModelBank& bank, const TrainConfig& config) {
    config.validate();
    if (train.empty()) throw ConfigError("train: dataset is empty");

    const std::vector<std::string>& class_order = kb.vocab.target_names;
    const std::size_t n_classes = class_order.size();
    if (n_classes == 0) throw ConfigError("train: no target classes");

    // Per-image inputs are fixed for the whole run: features (possibly with
    // concatenated prior scores), label vector, and the prior matrix.
    std::vector<Matrix> features;
    std::vector<Matrix> priors;
    std::vector<std::vector<double>> labels;
    features.reserve(train.size());
    priors.reserve(train.size());
    labels.reserve(train.size());

    PriorBuilder builder(kb, bank, config.prior_params, config.similarity_threshold);
    for (const auto& img : train) {
        if (img.proposal_count() == 0) {
            throw DataError("train: image '" + img.id + "' has no proposals");
        }
        if (config.mode == TrainMode::Feature) {
            features.push_back(concat_prior_features(img.features, bank));
        } else {
            features.push_back(img.features);
        }
        if (config.mode == TrainMode::Dock) {
            priors.push_back(builder.combined(img, config.cues).values);
        } else {
            priors.push_back(Matrix(img.proposal_count(), n_classes, 1.0));
        }
        labels.push_back(label_vector(img, class_order));
    }

    const std::size_t feature_dim = features.front().cols();
    HeadParameters params = init_head_parameters(feature_dim, n_classes, config.seed);
    Rng shuffle_rng(config.seed ^ 0xD1B54A32D192ED03ULL);

    TrainResult result;
    result.log.config_echo = train_config_json(config);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (const auto& phase : config.epochs) {
        for (std::size_t e = 0; e < phase.count; ++e) {
            const auto start = std::chrono::steady_clock::now();
            shuffle_rng.shuffle(order);
            double loss_sum = 0.0;
            for (std::size_t idx : order) {
                ForwardTrace trace = forward(features[idx], params, priors[idx]);
                const double loss = bce_loss(trace.probs, labels[idx], config.epsilon);
                if (!std::isfinite(loss)) {
                    throw NumericError("train: non-finite loss at image '" +
                                       train[idx].id + "'");
                }
                loss_sum += loss;
                HeadGradients grads = backward(trace, labels[idx], priors[idx], config.epsilon);
                sgd_step(params, grads, phase.lr);
            }
            const auto stop = std::chrono::steady_clock::now();
            result.log.epoch_mean_loss.push_back(loss_sum /
                                                 static_cast<double>(train.size()));
            result.log.epoch_seconds.push_back(
                std::chrono::duration<double>(stop - start).count());
            ++result.total_epochs;
        }
    }

    result.params = std::move(params);
    result.log.checkpoint_digest = sha256_hex(checkpoint_bytes(result.params));
    return result;
}

void save_train_log_csv(const TrainLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << "epoch,mean_loss,seconds\n";
    for (std::size_t i = 0; i < log.epoch_mean_loss.size(); ++i) {
        out << (i + 1) << ',' << format_double(log.epoch_mean_loss[i]) << ','
            << format_double(log.epoch_seconds[i]) << "\n";
    }
}

ModeSpec resolve_mode(const std::string& token) {
    const CueSet joint = {Cue::Similarity, Cue::Attribute, Cue::Spatial};
    ModeSpec spec;
    if (token == "base") {
        spec.train_mode = TrainMode::Base;
    } else if (token == "sim") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = {Cue::Similarity};
    } else if (token == "attr") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = {Cue::Attribute};
    } else if (token == "spatial") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = {Cue::Spatial};
    } else if (token == "scene") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = {Cue::Scene};
    } else if (token == "joint") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = joint;
    } else if (token == "joint_scene") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = {Cue::Similarity, Cue::Attribute, Cue::Spatial, Cue::Scene};
    } else if (token == "feature") {
        spec.train_mode = TrainMode::Feature;
    } else if (token == "postprocess" || token == "post-process") {
        spec.train_mode = TrainMode::Base;
        spec.eval_postprocess = true;
        spec.eval_cues = joint;
    } else if (token == "joint_regressor" || token == "joint+regressor") {
        spec.train_mode = TrainMode::Dock;
        spec.train_cues = joint;
        spec.eval_regressors = true;
    } else {
        throw ConfigError("unknown mode '" + token + "'");
    }
    return spec;
}

AblationResult run_ablation(const Dataset& train, const Dataset& test,
                            const KnowledgeBase& kb, const SourceModelBank& bank,
                            const std::vector<std::string>& modes,
                            const std::vector<std::uint64_t>& seeds,
                            const TrainConfig& base_config, const EvalOptions& eval_options,
                            std::size_t threads, const std::string* cell_root) {
    if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
    if (modes.empty()) throw ConfigError("ablate: need at least one mode");
    for (const auto& m : modes) resolve_mode(m);  // validate up front

    AblationResult result;
    result.class_order = kb.vocab.target_names;
    result.cells.resize(modes.size() * seeds.size());

    PriorBuilder builder(kb, bank, base_config.prior_params,
                         base_config.similarity_threshold);

    std::vector<std::size_t> cell_ids(result.cells.size());
    for (std::size_t i = 0; i < cell_ids.size(); ++i) cell_ids[i] = i;

    std::mutex next_mutex;
    std::size_t next = 0;
    auto worker = [&]() {
        while (true) {
            std::size_t cell;
            {
                std::lock_guard<std::mutex> lock(next_mutex);
                if (next >= cell_ids.size()) return;
                cell = cell_ids[next++];
            }
            const std::size_t mode_idx = cell / seeds.size();
            const std::size_t seed_idx = cell % seeds.size();
            const std::string& token = modes[mode_idx];
            const ModeSpec spec = resolve_mode(token);

            TrainConfig config = base_config;
            config.mode = spec.train_mode;
            config.cues = spec.train_cues;
            config.seed = seeds[seed_idx];
            TrainResult trained = train_detector(train, kb, bank, config);

            EvalOptions opts = eval_options;
            opts.postprocess = spec.eval_postprocess;
            opts.apply_regressors = spec.eval_regressors;
            EvalReport report = evaluate_dataset(
                test, trained.params, kb.vocab.target_names, opts, &bank, &builder,
                spec.eval_postprocess ? &spec.eval_cues : nullptr, &kb.vocab);

            if (cell_root != nullptr) {
                namespace fs = std::filesystem;
                const fs::path dir = fs::path(*cell_root) /
                                     (token + "_s" + std::to_string(seeds[seed_idx]));
                fs::create_directories(dir);
                save_checkpoint((dir / "checkpoint.bin").string(),
                                {trained.params, config.seed, trained.total_epochs});
                save_report_json(report, (dir / "report.json").string());
            }

            AblationCell& out = result.cells[cell];
            out.mode = token;
            out.seed = seeds[seed_idx];
            out.report = std::move(report);
            out.checkpoint_digest = trained.log.checkpoint_digest;
        }
    };

    const std::size_t n_threads =
        std::max<std::size_t>(1, std::min(threads, result.cells.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(n_threads);
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return result;
}

namespace {

std::string csv_value(const std::optional<double>& v) {
    return v ? format_double(*v) : "nan";
}

}  // namespace

std::string ablation_csv(const AblationResult& result) {
    std::ostringstream out;
    out << "mode,seed,mAP,CorLoc,AP_small,AP_medium,AP_large";
    for (const auto& cls : result.class_order) out << ",AP_" << cls;
    out << "\n";

    // Cells arrive mode-major; emit per-seed rows then the mode's mean row.
    std::size_t i = 0;
    while (i < result.cells.size()) {
        const std::string& mode = result.cells[i].mode;
        std::size_t begin = i;
        while (i < result.cells.size() && result.cells[i].mode == mode) ++i;

        for (std::size_t k = begin; k < i; ++k) {
            const AblationCell& cell = result.cells[k];
            out << cell.mode << ',' << cell.seed << ',' << format_double(cell.report.map)
                << ',' << format_double(cell.report.corloc) << ','
                << csv_value(cell.report.ap_small) << ',' << csv_value(cell.report.ap_medium)
                << ',' << csv_value(cell.report.ap_large);
            for (const auto& [cls, ap] : cell.report.per_class_ap) {
                out << ',' << csv_value(ap);
            }
            out << "\n";
        }

        auto mean_of = [&](auto get) -> std::optional<double> {
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t k = begin; k < i; ++k) {
                std::optional<double> v = get(result.cells[k].report);
                if (v) {
                    sum += *v;
                    ++n;
                }
            }
            if (n == 0) return std::nullopt;
            return sum / static_cast<double>(n);
        };
        out << mode << ",mean,"
            << csv_value(mean_of([](const EvalReport& r) { return std::optional(r.map); }))
            << ','
            << csv_value(mean_of([](const EvalReport& r) { return std::optional(r.corloc); }))
            << ',' << csv_value(mean_of([](const EvalReport& r) { return r.ap_small; }))
            << ',' << csv_value(mean_of([](const EvalReport& r) { return r.ap_medium; }))
            << ',' << csv_value(mean_of([](const EvalReport& r) { return r.ap_large; }));
        for (std::size_t c = 0; c < result.class_order.size(); ++c) {
            out << ','
                << csv_value(mean_of(
                       [c](const EvalReport& r) { return r.per_class_ap[c].second; }));
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace docklab
