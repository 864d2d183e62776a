#include <doctest.h>

#include <cmath>

#include "docklab/errors.hpp"
#include "docklab/priors.hpp"
#include "docklab/rng.hpp"

using namespace docklab;

namespace {

// logit helper so stub scorers emit exact probabilities on a 1-d feature.
StubScorer fixed_scorer(double value_at_one) {
    // sigmoid(w*1 + b) == value when w + b = logit(value); use b only.
    StubScorer s;
    s.weights = {0.0};
    s.bias = std::log(value_at_one / (1.0 - value_at_one));
    return s;
}

ImageSample uniform_image(std::size_t proposals) {
    ImageSample img;
    img.id = "img";
    img.features = Matrix(proposals, 1, 1.0);
    for (std::size_t i = 0; i < proposals; ++i) {
        img.proposals.push_back({0.1 + 0.01 * static_cast<double>(i), 0.1, 0.2, 0.2});
    }
    return img;
}

constexpr double kYMin = 0.01;

}  // namespace

TEST_CASE("similarity prior takes the max over similar-class detectors") {
    SourceModelBank bank;
    bank.source_order = {"cow", "horse"};
    bank.detectors["horse"] = fixed_scorer(0.9);
    bank.detectors["cow"] = fixed_scorer(0.4);
    auto img = uniform_image(3);

    auto [col, applicable] = similarity_prior_column(img, {"horse", "cow"}, bank, kYMin);
    CHECK(applicable);
    for (double v : col) CHECK(v == doctest::Approx(0.9).epsilon(1e-12));

    auto [neutral, inapplicable] = similarity_prior_column(img, {}, bank, kYMin);
    CHECK_FALSE(inapplicable);
    for (double v : neutral) CHECK(v == 1.0);

    auto [single, ok] = similarity_prior_column(img, {"cow"}, bank, kYMin);
    CHECK(ok);
    for (double v : single) CHECK(v == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("attribute prior is the mean over non-empty group maxima") {
    SourceModelBank bank;
    bank.attributes["white"] = fixed_scorer(0.8);
    bank.attributes["round"] = fixed_scorer(0.6);
    auto img = uniform_image(2);

    AttributeProfile profile;
    profile.class_name = "clock";
    profile.groups[0].push_back({"white", 9});
    profile.groups[1].push_back({"round", 7});

    auto [col, applicable] = attribute_prior_column(img, &profile, bank, kYMin);
    CHECK(applicable);
    for (double v : col) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

    AttributeProfile one;
    one.class_name = "x";
    one.groups[2].push_back({"white", 1});
    auto [single, ok] = attribute_prior_column(img, &one, bank, kYMin);
    CHECK(ok);
    for (double v : single) CHECK(v == doctest::Approx(0.8).epsilon(1e-12));

    AttributeProfile empty;
    auto [neutral, inapplicable] = attribute_prior_column(img, &empty, bank, kYMin);
    CHECK_FALSE(inapplicable);
    for (double v : neutral) CHECK(v == 1.0);
    auto [neutral2, inapplicable2] = attribute_prior_column(img, nullptr, bank, kYMin);
    CHECK_FALSE(inapplicable2);
}

TEST_CASE("spatial prior looks up the anchored distributions") {
    // One anchor, one fitted distribution with its peak at dx=+1.5, dy=0,
    // log-ratio 0.
    std::vector<RelationTriplet> ts;
    RelationTriplet t;
    t.subject_class = "bowl";
    t.relation = "on";
    t.object_class = "table";
    t.object_box = {0.4, 0.4, 0.2, 0.2};
    t.subject_box = {0.7, 0.4, 0.2, 0.2};  // dx = +1.5 object widths
    ts.push_back(t);

    SourceModelBank bank;
    bank.spatial.emplace(std::pair<std::string, std::string>{"table", "on"},
                         fit_spatial_distributions(ts, "table", "on", {}));

    ImageSample img;
    img.id = "img";
    img.features = Matrix(3, 1, 1.0);
    img.proposals.push_back({0.7, 0.4, 0.2, 0.2});   // at the peak, ratio 1
    img.proposals.push_back({0.1, 0.1, 0.05, 0.05}); // far off, tiny
    img.proposals.push_back({0.4, 0.4, 0.2, 0.2});   // on the anchor itself

    std::vector<SourceDetection> anchors = {{"table", Box{0.4, 0.4, 0.2, 0.2}, 0.9, 0}};
    std::map<std::string, std::string> relations = {{"table", "on"}};

    auto [col, applicable] = spatial_prior_column(img, anchors, relations, bank, kYMin);
    CHECK(applicable);
    CHECK(col[0] == doctest::Approx(1.0));        // (1 + 1) / 2
    CHECK(col[1] == doctest::Approx(0.5));        // both structures at floor 1/2
    CHECK(col[2] == doctest::Approx(0.75));       // location floor, size peak

    auto [neutral, inapplicable] = spatial_prior_column(img, {}, relations, bank, kYMin);
    CHECK_FALSE(inapplicable);
    for (double v : neutral) CHECK(v == 1.0);

    std::map<std::string, std::string> no_rel;
    auto [neutral2, inapplicable2] = spatial_prior_column(img, anchors, no_rel, bank, kYMin);
    CHECK_FALSE(inapplicable2);
}

TEST_CASE("scene prior is constant per image and clamped") {
    SourceModelBank bank;
    bank.scenes["beach"] = fixed_scorer(0.8);
    bank.scenes["coast"] = fixed_scorer(0.7);
    bank.scenes["reef"] = fixed_scorer(0.7);
    auto img = uniform_image(4);

    SceneProfile one;
    one.class_name = "surfboard";
    one.scene_labels = {"beach"};
    auto [col, applicable] = scene_prior_column(img, &one, bank, kYMin);
    CHECK(applicable);
    for (double v : col) CHECK(v == doctest::Approx(0.8).epsilon(1e-12));
    for (double v : col) CHECK(v == col[0]);  // exact constancy

    SceneProfile two;
    two.class_name = "x";
    two.scene_labels = {"coast", "reef"};
    auto [clamped, ok] = scene_prior_column(img, &two, bank, kYMin);
    CHECK(ok);
    for (double v : clamped) CHECK(v == 1.0);  // 1.4 clamped

    auto [neutral, inapplicable] = scene_prior_column(img, nullptr, bank, kYMin);
    CHECK_FALSE(inapplicable);
    for (double v : neutral) CHECK(v == 1.0);
}

TEST_CASE("combine_priors averages applicable cues per class") {
    auto cue = [](Cue tag, double value, bool applicable) {
        PriorMatrix m;
        m.cue = tag;
        m.values = Matrix(2, 1, value);
        m.applicable = {applicable};
        return m;
    };

    SUBCASE("three applicable cues average") {
        auto combined = combine_priors({cue(Cue::Similarity, 0.9, true),
                                        cue(Cue::Attribute, 0.6, true),
                                        cue(Cue::Spatial, 0.3, true)});
        CHECK(combined.values(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
        CHECK(combined.applicable[0]);
    }
    SUBCASE("only applicable cues participate") {
        auto combined = combine_priors({cue(Cue::Similarity, 0.9, true),
                                        cue(Cue::Attribute, 0.2, false)});
        CHECK(combined.values(0, 0) == doctest::Approx(0.9));
    }
    SUBCASE("nothing applicable leaves the neutral ones column") {
        auto combined = combine_priors({cue(Cue::Similarity, 0.9, false),
                                        cue(Cue::Attribute, 0.2, false)});
        CHECK(combined.values(0, 0) == 1.0);
        CHECK_FALSE(combined.applicable[0]);
    }
    SUBCASE("shape mismatch is an error") {
        PriorMatrix a = cue(Cue::Similarity, 0.9, true);
        PriorMatrix b = cue(Cue::Attribute, 0.2, true);
        b.values = Matrix(3, 1, 0.2);
        CHECK_THROWS_AS(combine_priors({a, b}), DataError);
    }
}

TEST_CASE("prior values stay in [y_min, 1] and respect monotonicity") {
    Rng rng(41);
    SourceModelBank bank;
    bank.source_order = {"s0", "s1"};
    for (const auto& name : bank.source_order) {
        StubScorer s;
        s.weights = {rng.gaussian(), rng.gaussian()};
        s.bias = rng.gaussian();
        bank.detectors[name] = s;
    }

    ImageSample img;
    img.id = "img";
    img.features = Matrix(8, 2);
    for (std::size_t i = 0; i < 8; ++i) {
        img.proposals.push_back({rng.uniform(0, 0.5), rng.uniform(0, 0.5),
                                 rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)});
        img.features(i, 0) = rng.gaussian(0, 3);
        img.features(i, 1) = rng.gaussian(0, 3);
    }

    auto [col, applicable] = similarity_prior_column(img, {"s0", "s1"}, bank, kYMin);
    CHECK(applicable);
    for (double v : col) {
        CHECK(v >= kYMin);
        CHECK(v <= 1.0);
    }

    // Raising a detector's bias raises its scores; no prior cell may drop.
    SourceModelBank raised = bank;
    raised.detectors["s0"].bias += 1.0;
    auto [col2, applicable2] = similarity_prior_column(img, {"s0", "s1"}, raised, kYMin);
    CHECK(applicable2);
    for (std::size_t i = 0; i < col.size(); ++i) CHECK(col2[i] >= col[i]);
}
