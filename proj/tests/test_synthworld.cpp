#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "docklab/errors.hpp"
#include "docklab/rng.hpp"
#include "docklab/synthworld.hpp"

using namespace docklab;
namespace fs = std::filesystem;

namespace {

WorldConfig small_config() {
    WorldConfig cfg;
    cfg.train_images = 30;
    cfg.test_images = 15;
    cfg.seed = 7;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("docklab_world_" + std::string(tag) + "_" + std::to_string(::getpid()) +
                "_" + std::to_string(counter++));
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("world config validation") {
    WorldConfig cfg = small_config();
    cfg.part_rate = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.feature_dim = 8;  // far below the direction budget
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.train_images = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("same seed produces byte-identical world files") {
    TempDir a("a"), b("b");
    write_world(generate_world(small_config()), a.path.string());
    write_world(generate_world(small_config()), b.path.string());
    for (const char* name :
         {world_files::kClasses, world_files::kEmbeddings, world_files::kAttributes,
          world_files::kAttributeGroups, world_files::kTriplets, world_files::kScenes,
          world_files::kModels, world_files::kTrainImages, world_files::kTestImages,
          world_files::kTestGt, world_files::kWorldTruth}) {
        CHECK(slurp(a.path / name) == slurp(b.path / name));
    }
}

TEST_CASE("different seeds differ") {
    WorldConfig cfg = small_config();
    cfg.seed = 8;
    TempDir a("c"), b("d");
    write_world(generate_world(small_config()), a.path.string());
    write_world(generate_world(cfg), b.path.string());
    CHECK(slurp(a.path / world_files::kTrainImages) !=
          slurp(b.path / world_files::kTrainImages));
}

TEST_CASE("zero noise keeps train labels equal to the planted truth") {
    World world = generate_world(small_config());
    REQUIRE(world.train.size() == world.truth.train.size());
    for (std::size_t i = 0; i < world.train.size(); ++i) {
        std::set<std::string> truth_targets;
        for (const auto& obj : world.truth.train[i].objects) {
            if (world.kb.vocab.is_target(obj.class_name)) {
                truth_targets.insert(obj.class_name);
            }
        }
        std::set<std::string> labels(world.train[i].labels.begin(),
                                     world.train[i].labels.end());
        CHECK(labels == truth_targets);
    }
}

TEST_CASE("label noise flips some labels") {
    WorldConfig cfg = small_config();
    cfg.label_noise_rate = 0.5;
    World noisy = generate_world(cfg);
    World clean = generate_world(small_config());
    std::size_t differing = 0;
    for (std::size_t i = 0; i < noisy.train.size(); ++i) {
        if (noisy.train[i].labels != clean.train[i].labels) ++differing;
    }
    CHECK(differing > 0);
    // Noise only touches labels, never features or the test split.
    CHECK(noisy.train[0].features == clean.train[0].features);
    for (std::size_t i = 0; i < noisy.test.size(); ++i) {
        CHECK(noisy.test[i].labels == clean.test[i].labels);
    }
}

TEST_CASE("train files carry no target ground truth; test files do") {
    TempDir dir("wk");
    write_world(generate_world(small_config()), dir.path.string());
    CHECK(!fs::exists(dir.path / "train_gt.jsonl"));
    const std::string train_text = slurp(dir.path / world_files::kTrainImages);
    CHECK(train_text.find("\"gt\"") == std::string::npos);
    CHECK(fs::exists(dir.path / world_files::kTestGt));

    Dataset test = load_images_jsonl((dir.path / world_files::kTestImages).string());
    load_gt_jsonl((dir.path / world_files::kTestGt).string(), test);
    std::size_t gt_count = 0;
    for (const auto& img : test) gt_count += img.gt.size();
    CHECK(gt_count > 0);
}

TEST_CASE("every planted instance has a proposal with IoU >= 0.5") {
    World world = generate_world(small_config());
    auto check_split = [&](const Dataset& data, const std::vector<ImageTruth>& truth) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            for (const auto& [cls, idx] : truth[i].correct_proposal) {
                const Box* gt_box = nullptr;
                for (const auto& obj : truth[i].objects) {
                    if (obj.class_name == cls) gt_box = &obj.box;
                }
                REQUIRE(gt_box != nullptr);
                CHECK(iou(data[i].proposals[idx], *gt_box) >= 0.5);
            }
        }
    };
    check_split(world.train, world.truth.train);
    check_split(world.test, world.truth.test);
}

TEST_CASE("correct proposal outranks its part confuser under the paired detector") {
    WorldConfig cfg = small_config();
    cfg.part_rate = 1.0;  // force part confusers everywhere
    World world = generate_world(cfg);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < world.train.size(); ++i) {
        const ImageSample& img = world.train[i];
        const ImageTruth& truth = world.truth.train[i];
        for (const auto& [cls, idx] : truth.correct_proposal) {
            auto sims = similar_classes(cls, world.kb.vocab, 0.35);
            if (sims.empty()) continue;
            const StubScorer& det = world.bank.detectors.at(sims.front());
            const double correct_score = det.score_row(img.features, idx);
            // The part confuser, when present, is the next proposal in the
            // instance block that overlaps the truth box below 0.5.
            const Box* gt_box = nullptr;
            for (const auto& obj : truth.objects) {
                if (obj.class_name == cls) gt_box = &obj.box;
            }
            for (std::size_t k = idx + 1; k < img.proposal_count(); ++k) {
                const double ov = iou(img.proposals[k], *gt_box);
                if (ov > 0.1 && ov < 0.5) {
                    CHECK(correct_score > det.score_row(img.features, k));
                    ++checked;
                    break;
                }
            }
        }
    }
    CHECK(checked > 10);
}

TEST_CASE("fitted spatial distributions recover the planted geometry") {
    World world = generate_world(small_config());
    for (const auto& planted : world.truth.planted_relations) {
        const SpatialDistribution* dist =
            world.bank.find_spatial(planted.source, planted.relation);
        REQUIRE(dist != nullptr);
        const std::size_t peak_cell = static_cast<std::size_t>(
            std::max_element(dist->location_map.begin(), dist->location_map.end()) -
            dist->location_map.begin());
        const std::size_t want_cell = dist->location_cell(planted.dx, planted.dy);
        const long px = static_cast<long>(peak_cell % dist->spec.grid);
        const long py = static_cast<long>(peak_cell / dist->spec.grid);
        const long wx = static_cast<long>(want_cell % dist->spec.grid);
        const long wy = static_cast<long>(want_cell / dist->spec.grid);
        CHECK(std::abs(px - wx) <= 1);
        CHECK(std::abs(py - wy) <= 1);

        const std::size_t peak_bin = static_cast<std::size_t>(
            std::max_element(dist->size_hist.begin(), dist->size_hist.end()) -
            dist->size_hist.begin());
        const long want_bin = static_cast<long>(dist->size_bin(planted.log_ratio));
        CHECK(std::abs(static_cast<long>(peak_bin) - want_bin) <= 1);
    }
}

TEST_CASE("world truth round-trips through json") {
    TempDir dir("tr");
    fs::create_directories(dir.path);
    World world = generate_world(small_config());
    const std::string path = (dir.path / "truth.json").string();
    save_world_truth(world.truth, path);
    WorldTruth back = load_world_truth(path);
    REQUIRE(back.planted_relations.size() == world.truth.planted_relations.size());
    CHECK(back.planted_relations[0].dx == world.truth.planted_relations[0].dx);
    REQUIRE(back.train.size() == world.truth.train.size());
    CHECK(back.train[5].correct_proposal == world.truth.train[5].correct_proposal);
    CHECK(back.test[3].objects.size() == world.truth.test[3].objects.size());
}

TEST_CASE("fit_source_models learns a separable fixture perfectly") {
    // Hand-built planted-separable data: the proposal on the truth box
    // carries a clean class direction, everything else is noise.
    KnowledgeBase kb;
    kb.vocab.source_names = {"s0"};
    kb.vocab.target_names = {"t0"};
    kb.vocab.embedding["s0"] = {1, 0};
    kb.vocab.embedding["t0"] = {0, 1};

    Rng rng(71);
    Dataset data;
    std::vector<ImageTruth> truth;
    const Box gt{0.3, 0.3, 0.3, 0.3};
    for (int i = 0; i < 20; ++i) {
        ImageSample img;
        img.id = "sep" + std::to_string(i);
        img.scene = "x";
        img.features = Matrix(8, 4);
        for (std::size_t k = 0; k < 8; ++k) {
            for (std::size_t d = 0; d < 4; ++d) {
                img.features(k, d) = rng.gaussian(0.0, 0.1);
            }
            if (k == 0) {
                img.proposals.push_back(gt);
                img.features(k, 0) += 2.0;
            } else {
                img.proposals.push_back({rng.uniform(0.6, 0.8), rng.uniform(0.6, 0.8),
                                         0.1, 0.1});
            }
        }
        ImageTruth t;
        t.image_id = img.id;
        t.scene = "x";
        t.objects.push_back({"s0", gt});
        truth.push_back(std::move(t));
        data.push_back(std::move(img));
    }

    FitOptions opt;
    opt.iterations = 500;
    opt.lr = 1.0;
    SourceModelBank fitted = fit_source_models(data, truth, kb, opt);
    const StubScorer& det = fitted.detectors.at("s0");
    double min_pos = 1.0, max_neg = 0.0;
    for (const auto& img : data) {
        for (std::size_t k = 0; k < img.proposal_count(); ++k) {
            const double s = det.score_row(img.features, k);
            if (k == 0) {
                min_pos = std::min(min_pos, s);
            } else {
                max_neg = std::max(max_neg, s);
            }
        }
    }
    CHECK(min_pos > max_neg);
}

TEST_CASE("fit_source_models zero-iteration budget yields 0.5 scorers") {
    WorldConfig cfg = small_config();
    cfg.train_images = 80;
    World world = generate_world(cfg);
    FitOptions opt;
    opt.iterations = 0;
    SourceModelBank fitted = fit_source_models(world.train, world.truth.train, world.kb, opt);
    Matrix f(1, world.config.feature_dim, 0.3);
    for (const auto& [name, scorer] : fitted.detectors) {
        CHECK(scorer.score_row(f, 0) == doctest::Approx(0.5));
    }
}

TEST_CASE("regressors fit on aligned proposals predict near-zero offsets") {
    // Images whose only matched proposals sit exactly on the truth boxes.
    WorldConfig cfg = small_config();
    cfg.train_images = 80;
    World world = generate_world(cfg);
    Dataset data = world.train;
    std::vector<ImageTruth> truth = world.truth.train;
    for (std::size_t i = 0; i < data.size(); ++i) {
        // Rewrite every matched proposal to coincide with its truth box and
        // zero the geometry feature dims the planted regressors read.
        for (const auto& obj : truth[i].objects) {
            for (std::size_t k = 0; k < data[i].proposal_count(); ++k) {
                if (iou(data[i].proposals[k], obj.box) >= 0.5) {
                    data[i].proposals[k] = obj.box;
                }
            }
        }
        const std::size_t dim = data[i].feature_dim();
        for (std::size_t k = 0; k < data[i].proposal_count(); ++k) {
            for (std::size_t g = dim - 9; g < dim; ++g) data[i].features(k, g) = 0.0;
        }
    }
    SourceModelBank fitted = fit_source_models(data, truth, world.kb);
    for (std::size_t i = 0; i < 5; ++i) {
        const ImageSample& img = data[i];
        for (const auto& [name, reg] : fitted.regressors) {
            for (std::size_t k = 0; k < 3; ++k) {
                auto t = reg.offsets(img.features, k);
                for (double v : t) CHECK(std::abs(v) < 1e-3);
            }
        }
    }
}

TEST_CASE("fit_source_models rejects starved classes") {
    WorldConfig cfg = small_config();
    cfg.train_images = 2;  // nowhere near 10 positives per source class
    World world = generate_world(cfg);
    CHECK_THROWS_AS(fit_source_models(world.train, world.truth.train, world.kb), DataError);
}

TEST_CASE("unsimilar targets have no similar source class") {
    WorldConfig cfg = small_config();
    cfg.unsimilar_targets = 2;
    World world = generate_world(cfg);
    const auto& targets = world.kb.vocab.target_names;
    CHECK(similar_classes(targets[targets.size() - 1], world.kb.vocab, 0.35).empty());
    CHECK(similar_classes(targets[targets.size() - 2], world.kb.vocab, 0.35).empty());
    CHECK(!similar_classes(targets[0], world.kb.vocab, 0.35).empty());
}
