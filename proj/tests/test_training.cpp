#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "docklab/errors.hpp"
#include "docklab/rng.hpp"
#include "docklab/synthworld.hpp"
#include "docklab/training.hpp"

using namespace docklab;
namespace fs = std::filesystem;

namespace {

const World& small_world() {
    static World world = [] {
        WorldConfig cfg;
        cfg.train_images = 40;
        cfg.test_images = 20;
        cfg.seed = 7;
        return generate_world(cfg);
    }();
    return world;
}

TrainConfig quick_config(TrainMode mode, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.epochs = {{4, 1e-2}, {2, 1e-3}};
    cfg.seed = seed;
    return cfg;
}

// A knowledge base that leaves every cue inapplicable: orthogonal
// embeddings, no attributes, no triplets, no scenes.
struct NeutralFixture {
    KnowledgeBase kb;
    SourceModelBank bank;
    Dataset data;

    NeutralFixture() {
        kb.vocab.source_names = {"s0"};
        kb.vocab.target_names = {"t0", "t1"};
        kb.vocab.embedding["s0"] = {1, 0, 0};
        kb.vocab.embedding["t0"] = {0, 1, 0};
        kb.vocab.embedding["t1"] = {0, 0, 1};
        StubScorer s;
        s.weights = {0.3, -0.2, 0.4, 0.1};
        s.bias = -1.0;
        bank.source_order = {"s0"};
        bank.detectors["s0"] = s;

        Rng rng(99);
        for (int i = 0; i < 12; ++i) {
            ImageSample img;
            img.id = "n" + std::to_string(i);
            img.features = Matrix(5, 4);
            for (auto& v : img.features.data()) v = rng.gaussian();
            for (int p = 0; p < 5; ++p) {
                img.proposals.push_back({rng.uniform(0, 0.5), rng.uniform(0, 0.5),
                                         rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)});
            }
            if (rng.bernoulli(0.6)) img.labels.push_back("t0");
            if (rng.bernoulli(0.4)) img.labels.push_back("t1");
            data.push_back(std::move(img));
        }
    }
};

}  // namespace

TEST_CASE("training loss descends on the synthetic world") {
    const World& world = small_world();
    TrainConfig cfg = quick_config(TrainMode::Dock, 7);
    TrainResult result = train_detector(world.train, world.kb, world.bank, cfg);
    REQUIRE(result.log.epoch_mean_loss.size() == 6);
    CHECK(result.log.epoch_mean_loss.back() < result.log.epoch_mean_loss.front());
    for (double loss : result.log.epoch_mean_loss) {
        CHECK(std::isfinite(loss));
        CHECK(loss >= 0.0);
    }
    CHECK(result.total_epochs == 6);
    CHECK(result.log.checkpoint_digest.size() == 64);
}

TEST_CASE("same seed reproduces the loss sequence and checkpoint exactly") {
    const World& world = small_world();
    TrainConfig cfg = quick_config(TrainMode::Dock, 11);
    TrainResult a = train_detector(world.train, world.kb, world.bank, cfg);
    TrainResult b = train_detector(world.train, world.kb, world.bank, cfg);
    CHECK(a.log.epoch_mean_loss == b.log.epoch_mean_loss);  // bitwise
    CHECK(a.params == b.params);
    CHECK(a.log.checkpoint_digest == b.log.checkpoint_digest);

    TrainConfig other = cfg;
    other.seed = 12;
    TrainResult c = train_detector(world.train, world.kb, world.bank, other);
    CHECK(c.log.checkpoint_digest != a.log.checkpoint_digest);
}

TEST_CASE("dock mode with every cue inapplicable equals base mode bit for bit") {
    NeutralFixture fx;
    TrainConfig dock = quick_config(TrainMode::Dock, 5);
    TrainConfig base = quick_config(TrainMode::Base, 5);
    TrainResult a = train_detector(fx.data, fx.kb, fx.bank, dock);
    TrainResult b = train_detector(fx.data, fx.kb, fx.bank, base);
    CHECK(a.params == b.params);
    CHECK(a.log.checkpoint_digest == b.log.checkpoint_digest);
    CHECK(a.log.epoch_mean_loss == b.log.epoch_mean_loss);
}

TEST_CASE("empty dataset is a config error") {
    NeutralFixture fx;
    Dataset empty;
    CHECK_THROWS_AS(train_detector(empty, fx.kb, fx.bank, quick_config(TrainMode::Base, 1)),
                    ConfigError);
}

TEST_CASE("bad schedules are config errors") {
    NeutralFixture fx;
    TrainConfig cfg = quick_config(TrainMode::Base, 1);
    cfg.epochs.clear();
    CHECK_THROWS_AS(train_detector(fx.data, fx.kb, fx.bank, cfg), ConfigError);
    cfg = quick_config(TrainMode::Base, 1);
    cfg.epochs = {{3, 0.0}};
    CHECK_THROWS_AS(train_detector(fx.data, fx.kb, fx.bank, cfg), ConfigError);
}

TEST_CASE("train log csv lists one row per epoch") {
    NeutralFixture fx;
    TrainResult result =
        train_detector(fx.data, fx.kb, fx.bank, quick_config(TrainMode::Base, 3));
    const std::string path =
        (fs::temp_directory_path() / ("docklab_log_" + std::to_string(::getpid()) + ".csv"))
            .string();
    save_train_log_csv(result.log, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,mean_loss,seconds");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 6);
    fs::remove(path);
}

TEST_CASE("resolve_mode maps tokens and rejects junk") {
    CHECK(resolve_mode("base").train_mode == TrainMode::Base);
    CHECK(resolve_mode("joint").train_cues.size() == 3);
    CHECK(resolve_mode("joint_scene").train_cues.size() == 4);
    CHECK(resolve_mode("sim").train_cues == CueSet{Cue::Similarity});
    CHECK(resolve_mode("postprocess").eval_postprocess);
    CHECK(resolve_mode("post-process").eval_postprocess);
    CHECK(resolve_mode("joint_regressor").eval_regressors);
    CHECK(resolve_mode("feature").train_mode == TrainMode::Feature);
    CHECK_THROWS_AS(resolve_mode("warp"), ConfigError);
}

TEST_CASE("run_ablation fills the mode x seed grid deterministically") {
    const World& world = small_world();
    TrainConfig cfg = quick_config(TrainMode::Base, 1);
    EvalOptions opts;
    AblationResult result = run_ablation(world.train, world.test, world.kb, world.bank,
                                         {"base", "joint"}, {1, 2, 3}, cfg, opts, 2);
    REQUIRE(result.cells.size() == 6);
    CHECK(result.cells[0].mode == "base");
    CHECK(result.cells[0].seed == 1);
    CHECK(result.cells[3].mode == "joint");
    CHECK(result.cells[5].seed == 3);
    for (const auto& cell : result.cells) {
        CHECK(cell.report.map >= 0.0);
        CHECK(cell.report.map <= 1.0);
        CHECK(cell.report.corloc >= 0.0);
        CHECK(cell.report.corloc <= 1.0);
    }

    // Same grid sequentially must give identical reports (thread count is
    // presentation only).
    AblationResult sequential = run_ablation(world.train, world.test, world.kb, world.bank,
                                             {"base", "joint"}, {1, 2, 3}, cfg, opts, 1);
    for (std::size_t i = 0; i < result.cells.size(); ++i) {
        CHECK(result.cells[i].checkpoint_digest == sequential.cells[i].checkpoint_digest);
        CHECK(result.cells[i].report.map == sequential.cells[i].report.map);
    }

    const std::string csv = ablation_csv(result);
    // 6 data rows + 2 mean rows + header.
    std::size_t lines = 0;
    for (char ch : csv) {
        if (ch == '\n') ++lines;
    }
    CHECK(lines == 9);
    CHECK(csv.rfind("mode,seed,mAP,CorLoc,AP_small,AP_medium,AP_large", 0) == 0);
    CHECK(csv.find("base,mean,") != std::string::npos);
    CHECK(csv.find("joint,mean,") != std::string::npos);
}

TEST_CASE("feature mode trains and evaluates through concatenated features") {
    const World& world = small_world();
    TrainConfig cfg = quick_config(TrainMode::Feature, 2);
    TrainResult trained = train_detector(world.train, world.kb, world.bank, cfg);
    const std::size_t extra =
        world.bank.source_order.size() + world.bank.attribute_order.size();
    CHECK(trained.params.feature_dim() == world.config.feature_dim + extra);

    EvalOptions opts;
    EvalReport report = evaluate_dataset(world.test, trained.params,
                                         world.kb.vocab.target_names, opts, &world.bank);
    CHECK(report.map >= 0.0);
    CHECK(report.map <= 1.0);
}
