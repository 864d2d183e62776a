#include "docklab/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "docklab/dataset.hpp"
#include "docklab/digest.hpp"
#include "docklab/errors.hpp"
#include "docklab/evaluation.hpp"
#include "docklab/knowledge_base.hpp"
#include "docklab/manifest.hpp"
#include "docklab/priors.hpp"
#include "docklab/source_models.hpp"
#include "docklab/synthworld.hpp"
#include "docklab/text.hpp"
#include "docklab/training.hpp"

namespace docklab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "seed", "mode", "cues", "epochs", "lr_schedule", "noise_rate", "out_dir",
        "data", "modes", "seeds", "split", "postprocess", "regressors", "fit_models",
        "y_min", "tau_vis", "nms_iou", "score_floor", "epsilon",
        "similarity_threshold", "threads",
        "world.source_classes", "world.target_classes", "world.attributes_per_group",
        "world.scenes", "world.train_images", "world.test_images", "world.proposals",
        "world.feature_dim", "world.embedding_dim", "world.triplets_per_relation",
        "world.part_rate", "world.context_rate", "world.feature_noise",
        "world.unsimilar_targets",
    };
    return keys;
}

// key=value lines, '#' comments. Flags override file entries.
std::map<std::string, std::string> load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) +
                              ": expected key=value");
        }
        const std::string key = trim(stripped.substr(0, eq));
        if (!known_config_keys().count(key)) {
            throw ConfigError(path + ":" + std::to_string(line_no) +
                              ": unknown config key '" + key + "'");
        }
        out[key] = trim(stripped.substr(eq + 1));
    }
    return out;
}

class Settings {
  public:
    void load_file(const std::string& path) { values_ = load_config_file(path); }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& fallback) const {
        return get(key).value_or(fallback);
    }
    double get_double(const std::string& key, double fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        try {
            return parse_double(*v, "config key '" + key + "'");
        } catch (const DataError& e) {
            throw ConfigError(e.what());
        }
    }
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        try {
            std::size_t pos = 0;
            const std::uint64_t n = std::stoull(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument("trailing characters");
            return n;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': bad integer '" + *v + "'");
        }
    }
    bool get_bool(const std::string& key, bool fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw ConfigError("config key '" + key + "': bad boolean '" + *v + "'");
    }

    // Canonical dump for the manifest's config digest. File locations are
    // where a run happens, not what it computes, so they stay out.
    std::string canonical() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) {
            if (k == "out_dir" || k == "data" || k == "checkpoint") continue;
            out << k << '=' << v << '\n';
        }
        return out.str();
    }

  private:
    std::map<std::string, std::string> values_;
};

CueSet parse_cues(const std::string& spec) {
    CueSet cues;
    for (const auto& tok : split(spec, ',')) {
        const std::string t = trim(tok);
        if (t.empty()) continue;
        auto cue = cue_from_name(t);
        if (!cue || *cue == Cue::Combined) {
            throw ConfigError("unknown cue '" + t + "' (use sim,attr,spatial,scene)");
        }
        cues.push_back(*cue);
    }
    if (cues.empty()) throw ConfigError("cue list is empty");
    return cues;
}

std::vector<EpochSpec> parse_lr_schedule(const std::string& spec) {
    std::vector<EpochSpec> epochs;
    for (const auto& tok : split(spec, ',')) {
        const std::string t = trim(tok);
        if (t.empty()) continue;
        const std::size_t colon = t.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("lr_schedule entry '" + t + "' must be count:lr");
        }
        EpochSpec e;
        try {
            e.count = std::stoull(t.substr(0, colon));
        } catch (const std::exception&) {
            throw ConfigError("lr_schedule entry '" + t + "': bad epoch count");
        }
        try {
            e.lr = parse_double(trim(t.substr(colon + 1)), "lr_schedule");
        } catch (const DataError&) {
            throw ConfigError("lr_schedule entry '" + t + "': bad learning rate");
        }
        epochs.push_back(e);
    }
    if (epochs.empty()) throw ConfigError("lr_schedule is empty");
    return epochs;
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
    std::vector<std::uint64_t> seeds;
    for (const auto& tok : split(spec, ',')) {
        const std::string t = trim(tok);
        if (t.empty()) continue;
        try {
            seeds.push_back(std::stoull(t));
        } catch (const std::exception&) {
            throw ConfigError("bad seed '" + t + "'");
        }
    }
    if (seeds.empty()) throw ConfigError("seed list is empty");
    return seeds;
}

std::vector<std::string> parse_tokens(const std::string& spec) {
    std::vector<std::string> out;
    for (const auto& tok : split(spec, ',')) {
        const std::string t = trim(tok);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

std::size_t thread_budget(const Settings& s, std::size_t cells) {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DOCKLAB_THREADS")) {
        try {
            n = std::max<std::size_t>(1, std::stoull(env));
        } catch (const std::exception&) {
            throw ConfigError("DOCKLAB_THREADS: bad integer '" + std::string(env) + "'");
        }
    }
    n = static_cast<std::size_t>(s.get_u64("threads", n));
    return std::min(n, std::max<std::size_t>(1, cells));
}

struct LoadedWorld {
    KnowledgeBase kb;
    SourceModelBank bank;
};

LoadedWorld load_world_models(const std::string& data_dir) {
    LoadedWorld w;
    w.kb = load_knowledge_base(kb_paths_for(data_dir));
    w.bank = load_source_model_bank((fs::path(data_dir) / world_files::kModels).string(),
                                    w.kb);
    return w;
}

Dataset load_split(const std::string& data_dir, const std::string& split, bool with_gt) {
    if (split != "train" && split != "test") {
        throw ConfigError("split must be 'train' or 'test', got '" + split + "'");
    }
    const char* file = split == "train" ? world_files::kTrainImages
                                        : world_files::kTestImages;
    Dataset d = load_images_jsonl((fs::path(data_dir) / file).string());
    if (with_gt && split == "test") {
        load_gt_jsonl((fs::path(data_dir) / world_files::kTestGt).string(), d);
    }
    return d;
}

std::map<std::string, std::string> digest_world_files(const std::string& dir,
                                                      std::initializer_list<const char*> names) {
    std::map<std::string, std::string> out;
    for (const char* name : names) {
        out[name] = sha256_file((fs::path(dir) / name).string());
    }
    return out;
}

WorldConfig world_config_from(const Settings& s) {
    WorldConfig cfg;
    cfg.source_classes = s.get_u64("world.source_classes", cfg.source_classes);
    cfg.target_classes = s.get_u64("world.target_classes", cfg.target_classes);
    cfg.attributes_per_group =
        s.get_u64("world.attributes_per_group", cfg.attributes_per_group);
    cfg.scenes = s.get_u64("world.scenes", cfg.scenes);
    cfg.train_images = s.get_u64("world.train_images", cfg.train_images);
    cfg.test_images = s.get_u64("world.test_images", cfg.test_images);
    cfg.proposals_per_image = s.get_u64("world.proposals", cfg.proposals_per_image);
    cfg.feature_dim = s.get_u64("world.feature_dim", cfg.feature_dim);
    cfg.embedding_dim = s.get_u64("world.embedding_dim", cfg.embedding_dim);
    cfg.triplets_per_relation =
        s.get_u64("world.triplets_per_relation", cfg.triplets_per_relation);
    cfg.part_rate = s.get_double("world.part_rate", cfg.part_rate);
    cfg.context_rate = s.get_double("world.context_rate", cfg.context_rate);
    cfg.feature_noise = s.get_double("world.feature_noise", cfg.feature_noise);
    cfg.unsimilar_targets = s.get_u64("world.unsimilar_targets", cfg.unsimilar_targets);
    cfg.label_noise_rate = s.get_double("noise_rate", cfg.label_noise_rate);
    cfg.seed = s.get_u64("seed", cfg.seed);
    return cfg;
}

TrainConfig train_config_from(const Settings& s) {
    TrainConfig cfg;
    const std::string mode = s.get_or("mode", "dock");
    if (mode == "base") {
        cfg.mode = TrainMode::Base;
    } else if (mode == "dock") {
        cfg.mode = TrainMode::Dock;
    } else if (mode == "feature") {
        cfg.mode = TrainMode::Feature;
    } else {
        throw ConfigError("unknown mode '" + mode + "' (use base, dock or feature)");
    }
    if (auto cues = s.get("cues")) cfg.cues = parse_cues(*cues);
    const auto epochs = s.get("epochs");
    const auto schedule = s.get("lr_schedule");
    if (epochs && schedule) {
        throw ConfigError("give either 'epochs' or 'lr_schedule', not both");
    }
    if (schedule) {
        cfg.epochs = parse_lr_schedule(*schedule);
    } else if (epochs) {
        cfg.epochs = {{s.get_u64("epochs", 30), 1e-2}};
    }
    cfg.seed = s.get_u64("seed", cfg.seed);
    cfg.epsilon = s.get_double("epsilon", cfg.epsilon);
    cfg.prior_params.y_min = s.get_double("y_min", cfg.prior_params.y_min);
    cfg.prior_params.tau_vis = s.get_double("tau_vis", cfg.prior_params.tau_vis);
    cfg.prior_params.nms_iou = s.get_double("nms_iou", cfg.prior_params.nms_iou);
    cfg.similarity_threshold =
        s.get_double("similarity_threshold", cfg.similarity_threshold);
    return cfg;
}

EvalOptions eval_options_from(const Settings& s) {
    EvalOptions opts;
    opts.score_floor = s.get_double("score_floor", opts.score_floor);
    opts.nms_iou = s.get_double("nms_iou", opts.nms_iou);
    return opts;
}

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    }
};

int cmd_gen_data(const Settings& s) {
    Stopwatch watch;
    const std::string out_dir = s.get_or("out_dir", "");
    if (out_dir.empty()) throw ConfigError("gen-data: out_dir is required");

    World world = generate_world(world_config_from(s));
    if (s.get_bool("fit_models", false)) {
        world.bank = fit_source_models(world.train, world.truth.train, world.kb);
    }
    write_world(world, out_dir);

    RunManifest m;
    m.command = "gen-data";
    m.config_digest = sha256_hex(s.canonical());
    m.output_digests = digest_world_files(
        out_dir, {world_files::kClasses, world_files::kEmbeddings, world_files::kAttributes,
                  world_files::kAttributeGroups, world_files::kTriplets, world_files::kScenes,
                  world_files::kModels, world_files::kTrainImages, world_files::kTestImages,
                  world_files::kTestGt, world_files::kWorldTruth});
    m.wall_time_s = watch.seconds();
    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "world written to " << out_dir << "\n";
    return 0;
}

int cmd_build_priors(const Settings& s) {
    Stopwatch watch;
    const std::string data_dir = s.get_or("data", "");
    if (data_dir.empty()) throw ConfigError("build-priors: data is required");
    const std::string out_dir = s.get_or("out_dir", data_dir);
    fs::create_directories(out_dir);
    const std::string split = s.get_or("split", "train");

    LoadedWorld w = load_world_models(data_dir);
    Dataset dataset = load_split(data_dir, split, false);

    TrainConfig tc = train_config_from(s);
    CueSet cues = s.get("cues") ? parse_cues(*s.get("cues"))
                                : CueSet{Cue::Similarity, Cue::Attribute, Cue::Spatial};
    PriorBuilder builder(w.kb, w.bank, tc.prior_params, tc.similarity_threshold);

    const std::string out_path = (fs::path(out_dir) / "priors.jsonl").string();
    std::ofstream out(out_path);
    if (!out) throw DataError(out_path + ": cannot open for writing");
    auto dump = [&](const ImageSample& img, const PriorMatrix& pm) {
        json rec;
        rec["image"] = img.id;
        rec["cue"] = cue_name(pm.cue);
        rec["P"] = pm.values.rows();
        rec["C"] = pm.values.cols();
        json applicable = json::array();
        for (bool b : pm.applicable) applicable.push_back(b);
        rec["applicable"] = std::move(applicable);
        rec["values"] = pm.values.data();
        out << rec.dump() << "\n";
    };
    for (const auto& img : dataset) {
        std::vector<PriorMatrix> mats;
        for (Cue cue : cues) {
            mats.push_back(builder.cue_matrix(img, cue));
            dump(img, mats.back());
        }
        dump(img, combine_priors(mats));
    }
    out.close();

    RunManifest m;
    m.command = "build-priors";
    m.config_digest = sha256_hex(s.canonical());
    m.input_digests = digest_world_files(
        data_dir, {world_files::kClasses, world_files::kEmbeddings, world_files::kAttributes,
                   world_files::kAttributeGroups, world_files::kTriplets,
                   world_files::kScenes, world_files::kModels});
    m.input_digests[split == "train" ? world_files::kTrainImages
                                     : world_files::kTestImages] =
        sha256_file((fs::path(data_dir) /
                     (split == "train" ? world_files::kTrainImages
                                       : world_files::kTestImages))
                        .string());
    m.output_digests["priors.jsonl"] = sha256_file(out_path);
    m.wall_time_s = watch.seconds();
    write_manifest(m, (fs::path(out_dir) / "priors_manifest.json").string());
    std::cout << "priors written to " << out_path << "\n";
    return 0;
}

int cmd_train(const Settings& s) {
    Stopwatch watch;
    const std::string data_dir = s.get_or("data", "");
    if (data_dir.empty()) throw ConfigError("train: data is required");
    const std::string out_dir = s.get_or("out_dir", "");
    if (out_dir.empty()) throw ConfigError("train: out_dir is required");
    fs::create_directories(out_dir);

    LoadedWorld w = load_world_models(data_dir);
    Dataset train = load_split(data_dir, "train", false);
    TrainConfig config = train_config_from(s);

    TrainResult result = train_detector(train, w.kb, w.bank, config);

    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();
    save_checkpoint(ckpt_path, {result.params, config.seed, result.total_epochs});
    const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
    save_train_log_csv(result.log, log_path);
    const std::string cfg_path = (fs::path(out_dir) / "run_config.json").string();
    {
        std::ofstream out(cfg_path);
        out << result.log.config_echo << "\n";
    }

    RunManifest m;
    m.command = "train";
    m.config_digest = sha256_hex(s.canonical());
    m.input_digests = digest_world_files(
        data_dir, {world_files::kClasses, world_files::kEmbeddings, world_files::kAttributes,
                   world_files::kAttributeGroups, world_files::kTriplets,
                   world_files::kScenes, world_files::kModels, world_files::kTrainImages});
    m.output_digests["checkpoint.bin"] = sha256_file(ckpt_path);
    m.output_digests["run_config.json"] = sha256_file(cfg_path);
    m.volatile_digests["train_log.csv"] = sha256_file(log_path);
    m.wall_time_s = watch.seconds();
    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "checkpoint " << result.log.checkpoint_digest.substr(0, 12) << " epochs "
              << result.total_epochs << " final loss "
              << (result.log.epoch_mean_loss.empty() ? 0.0
                                                     : result.log.epoch_mean_loss.back())
              << "\n";
    return 0;
}

int cmd_evaluate(const Settings& s) {
    Stopwatch watch;
    const std::string data_dir = s.get_or("data", "");
    if (data_dir.empty()) throw ConfigError("evaluate: data is required");
    const std::string ckpt_path = s.get_or("checkpoint", "");
    if (ckpt_path.empty()) throw ConfigError("evaluate: checkpoint is required");
    const std::string out_dir = s.get_or("out_dir", "");
    if (out_dir.empty()) throw ConfigError("evaluate: out_dir is required");
    fs::create_directories(out_dir);

    LoadedWorld w = load_world_models(data_dir);
    Dataset test = load_split(data_dir, "test", true);
    Checkpoint ckpt = load_checkpoint(ckpt_path);

    TrainConfig tc = train_config_from(s);
    EvalOptions opts = eval_options_from(s);
    opts.postprocess = s.get_bool("postprocess", false);
    opts.apply_regressors = s.get_bool("regressors", false);
    CueSet cues = s.get("cues") ? parse_cues(*s.get("cues"))
                                : CueSet{Cue::Similarity, Cue::Attribute, Cue::Spatial};

    PriorBuilder builder(w.kb, w.bank, tc.prior_params, tc.similarity_threshold);
    std::vector<Detection> detections;
    EvalReport report =
        evaluate_dataset(test, ckpt.params, w.kb.vocab.target_names, opts, &w.bank,
                         &builder, &cues, &w.kb.vocab, &detections);

    const std::string report_path = (fs::path(out_dir) / "report.json").string();
    save_report_json(report, report_path);
    const std::string det_path = (fs::path(out_dir) / "detections.jsonl").string();
    save_detections_jsonl(detections, det_path);

    RunManifest m;
    m.command = "evaluate";
    m.config_digest = sha256_hex(s.canonical());
    m.input_digests = digest_world_files(
        data_dir, {world_files::kClasses, world_files::kEmbeddings, world_files::kAttributes,
                   world_files::kAttributeGroups, world_files::kTriplets,
                   world_files::kScenes, world_files::kModels, world_files::kTestImages,
                   world_files::kTestGt});
    m.input_digests["checkpoint.bin"] = sha256_file(ckpt_path);
    m.output_digests["report.json"] = sha256_file(report_path);
    m.output_digests["detections.jsonl"] = sha256_file(det_path);
    m.wall_time_s = watch.seconds();
    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "mAP " << report.map << " CorLoc " << report.corloc << "\n";
    return 0;
}

int cmd_ablate(const Settings& s) {
    Stopwatch watch;
    const std::string data_dir = s.get_or("data", "");
    if (data_dir.empty()) throw ConfigError("ablate: data is required");
    const std::string out_dir = s.get_or("out_dir", "");
    if (out_dir.empty()) throw ConfigError("ablate: out_dir is required");
    fs::create_directories(out_dir);

    const std::vector<std::string> modes = parse_tokens(s.get_or(
        "modes", "base,attr,spatial,sim,joint,feature,postprocess,joint_regressor"));
    const std::vector<std::uint64_t> seeds = parse_seeds(s.get_or("seeds", "1"));

    LoadedWorld w = load_world_models(data_dir);
    Dataset train = load_split(data_dir, "train", false);
    Dataset test = load_split(data_dir, "test", true);

    TrainConfig config = train_config_from(s);
    EvalOptions opts = eval_options_from(s);

    const std::string cell_root = (fs::path(out_dir) / "cells").string();
    AblationResult result =
        run_ablation(train, test, w.kb, w.bank, modes, seeds, config, opts,
                     thread_budget(s, modes.size() * seeds.size()), &cell_root);

    const std::string csv_path = (fs::path(out_dir) / "results.csv").string();
    {
        std::ofstream out(csv_path);
        if (!out) throw DataError(csv_path + ": cannot open for writing");
        out << ablation_csv(result);
    }

    RunManifest m;
    m.command = "ablate";
    m.config_digest = sha256_hex(s.canonical());
    m.input_digests = digest_world_files(
        data_dir, {world_files::kClasses, world_files::kEmbeddings, world_files::kAttributes,
                   world_files::kAttributeGroups, world_files::kTriplets,
                   world_files::kScenes, world_files::kModels, world_files::kTrainImages,
                   world_files::kTestImages, world_files::kTestGt});
    m.output_digests["results.csv"] = sha256_file(csv_path);
    for (const auto& cell : result.cells) {
        const std::string rel = "cells/" + cell.mode + "_s" + std::to_string(cell.seed);
        m.output_digests[rel + "/checkpoint.bin"] =
            sha256_file((fs::path(out_dir) / rel / "checkpoint.bin").string());
        m.output_digests[rel + "/report.json"] =
            sha256_file((fs::path(out_dir) / rel / "report.json").string());
    }
    m.wall_time_s = watch.seconds();
    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "results written to " << csv_path << "\n";
    return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
    CLI::App app{"common-sense prior detection laboratory"};
    app.require_subcommand(0, 1);

    struct FlagSet {
        std::string config, seed, mode, cues, out_dir, epochs, lr_schedule, noise_rate;
        std::string data, checkpoint, modes, seeds, split;
        bool postprocess = false, regressors = false, fit_models = false;
    };
    std::map<std::string, FlagSet> flags;

    auto add_common = [&](CLI::App* cmd) {
        FlagSet& f = flags[cmd->get_name()];
        cmd->add_option("--config", f.config, "key=value config file");
        cmd->add_option("--seed", f.seed, "run seed");
        cmd->add_option("--out-dir", f.out_dir, "output directory");
        return &f;
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic world");
    {
        FlagSet* f = add_common(gen);
        gen->add_option("--noise-rate", f->noise_rate, "training label flip rate");
        gen->add_flag("--fit-models", f->fit_models,
                      "fit source models from the generated data instead of "
                      "planting closed-form weights");
    }
    CLI::App* priors = app.add_subcommand("build-priors", "dump per-image prior matrices");
    {
        FlagSet* f = add_common(priors);
        priors->add_option("--data", f->data, "world directory");
        priors->add_option("--cues", f->cues, "comma list of sim,attr,spatial,scene");
        priors->add_option("--split", f->split, "train or test");
    }
    CLI::App* train = app.add_subcommand("train", "train a detection head");
    {
        FlagSet* f = add_common(train);
        train->add_option("--data", f->data, "world directory");
        train->add_option("--mode", f->mode, "base, dock or feature");
        train->add_option("--cues", f->cues, "dock-mode cue subset");
        train->add_option("--epochs", f->epochs, "epoch count (single phase)");
        train->add_option("--lr-schedule", f->lr_schedule, "count:lr,count:lr,...");
    }
    CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
    {
        FlagSet* f = add_common(evaluate);
        evaluate->add_option("--data", f->data, "world directory");
        evaluate->add_option("--checkpoint", f->checkpoint, "checkpoint file");
        evaluate->add_option("--cues", f->cues, "postprocess cue subset");
        evaluate->add_flag("--postprocess", f->postprocess,
                           "modulate test scores by the prior matrix");
        evaluate->add_flag("--regressors", f->regressors, "apply borrowed box regressors");
    }
    CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate a mode/seed grid");
    {
        FlagSet* f = add_common(ablate);
        ablate->add_option("--data", f->data, "world directory");
        ablate->add_option("--modes", f->modes, "comma list of mode tokens");
        ablate->add_option("--seeds", f->seeds, "comma list of seeds");
        ablate->add_option("--epochs", f->epochs, "epoch count (single phase)");
        ablate->add_option("--lr-schedule", f->lr_schedule, "count:lr,count:lr,...");
    }

    std::vector<const char*> argv;
    argv.push_back("docklab");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    CLI::App* cmd = nullptr;
    for (CLI::App* c : {gen, priors, train, evaluate, ablate}) {
        if (c->parsed()) cmd = c;
    }
    if (cmd == nullptr) {
        std::cerr << app.help() << "\n";
        return 2;
    }

    try {
        const FlagSet& f = flags[cmd->get_name()];
        Settings s;
        if (!f.config.empty()) s.load_file(f.config);
        auto override_if = [&](const char* key, const std::string& v) {
            if (!v.empty()) s.set(key, v);
        };
        override_if("seed", f.seed);
        override_if("mode", f.mode);
        override_if("cues", f.cues);
        override_if("out_dir", f.out_dir);
        override_if("epochs", f.epochs);
        override_if("lr_schedule", f.lr_schedule);
        override_if("noise_rate", f.noise_rate);
        override_if("data", f.data);
        override_if("checkpoint", f.checkpoint);
        override_if("modes", f.modes);
        override_if("seeds", f.seeds);
        override_if("split", f.split);
        if (f.postprocess) s.set("postprocess", "true");
        if (f.regressors) s.set("regressors", "true");
        if (f.fit_models) s.set("fit_models", "true");

        const std::string name = cmd->get_name();
        if (name == "gen-data") return cmd_gen_data(s);
        if (name == "build-priors") return cmd_build_priors(s);
        if (name == "train") return cmd_train(s);
        if (name == "evaluate") return cmd_evaluate(s);
        if (name == "ablate") return cmd_ablate(s);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace docklab
