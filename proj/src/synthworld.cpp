#include "docklab/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "docklab/errors.hpp"
#include "docklab/rng.hpp"

namespace docklab {

using json = nlohmann::json;

void WorldConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v < 1) throw ConfigError(std::string("world.") + name + " must be >= 1");
    };
    positive(source_classes, "source_classes");
    positive(target_classes, "target_classes");
    positive(attributes_per_group, "attributes_per_group");
    positive(scenes, "scenes");
    positive(train_images, "train_images");
    positive(test_images, "test_images");
    positive(proposals_per_image, "proposals_per_image");
    positive(feature_dim, "feature_dim");
    positive(embedding_dim, "embedding_dim");
    positive(triplets_per_relation, "triplets_per_relation");
    auto rate = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw ConfigError(std::string("world.") + name + " must be in [0, 1]");
        }
    };
    rate(part_rate, "part_rate");
    rate(context_rate, "context_rate");
    rate(source_cooccur_rate, "source_cooccur_rate");
    rate(lone_source_rate, "lone_source_rate");
    rate(label_noise_rate, "label_noise_rate");
    if (unsimilar_targets > target_classes) {
        throw ConfigError("world.unsimilar_targets exceeds target_classes");
    }
    const std::size_t needed_feature_dims =
        source_classes + target_classes + kAttributeGroupCount * attributes_per_group +
        scenes + 4;
    if (feature_dim < needed_feature_dims) {
        throw ConfigError("world.feature_dim must be >= " +
                          std::to_string(needed_feature_dims) +
                          " for this class/attribute/scene layout");
    }
    if (embedding_dim < source_classes + target_classes) {
        throw ConfigError("world.embedding_dim must be >= source_classes + target_classes");
    }
}

namespace {

// Planted feature coefficients. The part confuser carries a stronger
// target-class signature than the correctly framed proposal, which is
// exactly what makes the bare network latch onto parts; the source-class
// signature only appears at full extent, so the similarity cue can undo it.
constexpr double kSourceCoeff = 2.0;
constexpr double kTargetCoeff = 1.0;
constexpr double kPartTargetCoeff = 1.6;
constexpr double kSimCoeff = 1.5;
constexpr double kAttrCoeff = 1.0;
constexpr double kPartAttrCoeff = 0.3;
constexpr double kSceneCoeff = 0.5;
constexpr double kContextSceneCoeff = 2.0;
constexpr double kPlantedCosine = 0.6;
constexpr double kBaseSourceBox = 0.18;
constexpr double kPartScale = 0.45;
// Geometry dims are kept tighter than the appearance noise so the planted
// regressors refine boxes instead of scrambling them.
constexpr double kGeometryNoise = 0.02;

constexpr double kDetectorGain = 4.0, kDetectorBias = -5.0;
constexpr double kAttributeGain = 4.0, kAttributeBias = -2.0;
constexpr double kSceneGain = 8.0, kSceneBias = -2.0;

struct Geometry {
    double dx, dy, log_ratio;
};

const Geometry kGeometryPalette[6] = {
    {0.0, -1.2, -1.0}, {1.2, 0.0, -0.5}, {0.0, 0.6, 1.0},
    {-1.2, 0.0, -1.5}, {0.9, 0.9, -0.5}, {-0.9, 0.9, 0.5},
};

const char* kRelationTokens[6] = {"on", "beside", "above", "under", "near", "along"};

std::string zero_pad(std::size_t v) {
    std::string s = std::to_string(v);
    return s.size() < 2 ? "0" + s : s;
}

// Feature-dimension layout bookkeeping.
struct Layout {
    std::size_t n_src, n_tgt, attrs_per_group, n_scenes;
    std::size_t src(std::size_t s) const { return s; }
    std::size_t tgt(std::size_t t) const { return n_src + t; }
    std::size_t attr(std::size_t group, std::size_t k) const {
        return n_src + n_tgt + group * attrs_per_group + k;
    }
    std::size_t scene(std::size_t sc) const {
        return n_src + n_tgt + kAttributeGroupCount * attrs_per_group + sc;
    }
    std::size_t geom(std::size_t i) const {
        return n_src + n_tgt + kAttributeGroupCount * attrs_per_group + n_scenes + i;
    }
};

struct WorldPlan {
    WorldConfig cfg;
    Layout layout;
    std::vector<std::string> sources, targets, scenes;
    std::vector<std::string> attr_names;   // grouped: color block, shape, texture
    std::vector<Geometry> geometry;        // per target
    std::vector<std::string> relations;    // per target
    std::vector<std::size_t> pair_source;  // per target
    std::vector<std::size_t> home_scene;   // per target
    std::vector<std::size_t> attr_index;   // per target (same index in each group)
    std::vector<std::size_t> src_attr_index;  // per source

    bool target_has_similar(std::size_t t) const {
        return t < cfg.target_classes - cfg.unsimilar_targets;
    }
};

WorldPlan make_plan(const WorldConfig& cfg) {
    WorldPlan plan;
    plan.cfg = cfg;
    plan.layout = {cfg.source_classes, cfg.target_classes, cfg.attributes_per_group,
                   cfg.scenes};
    for (std::size_t s = 0; s < cfg.source_classes; ++s) {
        plan.sources.push_back("src" + zero_pad(s));
    }
    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        plan.targets.push_back("tgt" + zero_pad(t));
    }
    for (std::size_t sc = 0; sc < cfg.scenes; ++sc) {
        plan.scenes.push_back("scene" + zero_pad(sc));
    }
    const char* prefixes[kAttributeGroupCount] = {"col", "shp", "tex"};
    for (std::size_t g = 0; g < kAttributeGroupCount; ++g) {
        for (std::size_t k = 0; k < cfg.attributes_per_group; ++k) {
            plan.attr_names.push_back(std::string(prefixes[g]) + zero_pad(k));
        }
    }
    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        plan.geometry.push_back(kGeometryPalette[t % 6]);
        plan.relations.push_back(t < 6 ? kRelationTokens[t] : "rel" + zero_pad(t));
        plan.pair_source.push_back(t % cfg.source_classes);
        plan.home_scene.push_back(t % cfg.scenes);
        plan.attr_index.push_back(t % cfg.attributes_per_group);
    }
    for (std::size_t s = 0; s < cfg.source_classes; ++s) {
        // Shifted so a source rarely shares attributes with the targets it
        // co-occurs with; collisions in exotic configs only blunt the cue.
        plan.src_attr_index.push_back((s + 2) % cfg.attributes_per_group);
    }
    return plan;
}

KnowledgeBase build_knowledge(const WorldPlan& plan) {
    const WorldConfig& cfg = plan.cfg;
    KnowledgeBase kb;
    kb.vocab.source_names = plan.sources;
    kb.vocab.target_names = plan.targets;

    for (std::size_t s = 0; s < cfg.source_classes; ++s) {
        std::vector<double> e(cfg.embedding_dim, 0.0);
        e[s] = 1.0;
        kb.vocab.embedding[plan.sources[s]] = std::move(e);
    }
    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        std::vector<double> e(cfg.embedding_dim, 0.0);
        if (plan.target_has_similar(t)) {
            e[plan.pair_source[t]] = kPlantedCosine;
            e[cfg.source_classes + t] = std::sqrt(1.0 - kPlantedCosine * kPlantedCosine);
        } else {
            e[cfg.source_classes + t] = 1.0;
        }
        kb.vocab.embedding[plan.targets[t]] = std::move(e);
    }

    for (std::size_t g = 0; g < kAttributeGroupCount; ++g) {
        for (std::size_t k = 0; k < cfg.attributes_per_group; ++k) {
            kb.attribute_groups[plan.attr_names[g * cfg.attributes_per_group + k]] =
                static_cast<AttributeGroup>(g);
        }
    }
    auto profile_for = [&](const std::string& cls, std::size_t attr_idx) {
        std::map<std::string, std::int64_t> counts;
        const std::int64_t freq[kAttributeGroupCount] = {9, 7, 5};
        for (std::size_t g = 0; g < kAttributeGroupCount; ++g) {
            counts[plan.attr_names[g * cfg.attributes_per_group + attr_idx]] = freq[g];
        }
        return attribute_profile(cls, counts, kb.attribute_groups, 3);
    };
    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        kb.profiles[plan.targets[t]] = profile_for(plan.targets[t], plan.attr_index[t]);
    }
    for (std::size_t s = 0; s < cfg.source_classes; ++s) {
        kb.profiles[plan.sources[s]] = profile_for(plan.sources[s], plan.src_attr_index[s]);
    }

    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        SceneProfile sp;
        sp.class_name = plan.targets[t];
        sp.scene_labels.insert(plan.scenes[plan.home_scene[t]]);
        kb.scenes[plan.targets[t]] = std::move(sp);
    }
    return kb;
}

void build_triplets(const WorldPlan& plan, KnowledgeBase& kb, Rng& rng) {
    const WorldConfig& cfg = plan.cfg;
    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        const Geometry& geom = plan.geometry[t];
        const std::string& source = plan.sources[plan.pair_source[t]];
        auto emit = [&](const std::string& relation, double jitter) {
            const double src_w = kBaseSourceBox * rng.uniform(0.8, 1.2);
            const double cx = rng.uniform(0.45, 0.55);
            const double cy = rng.uniform(0.45, 0.55);
            const double dx = geom.dx + rng.gaussian(0.0, jitter);
            const double dy = geom.dy + rng.gaussian(0.0, jitter);
            const double lr = geom.log_ratio + rng.gaussian(0.0, jitter);
            const double sub_w = src_w * std::sqrt(std::exp2(lr));
            RelationTriplet tr;
            tr.relation = relation;
            tr.subject_class = plan.targets[t];
            tr.object_class = source;
            tr.object_box = {cx - 0.5 * src_w, cy - 0.5 * src_w, src_w, src_w};
            tr.subject_box = {cx + dx * src_w - 0.5 * sub_w, cy + dy * src_w - 0.5 * sub_w,
                              sub_w, sub_w};
            tr.subject_box = clip_to_frame(tr.subject_box);
            if (!(tr.subject_box.w > 0.0) || !(tr.subject_box.h > 0.0)) {
                throw DataError("triplet geometry left the frame; offsets too large");
            }
            kb.triplets.push_back(std::move(tr));
        };
        for (std::size_t i = 0; i < cfg.triplets_per_relation; ++i) {
            emit(plan.relations[t], 0.05);
        }
        for (std::size_t i = 0; i < cfg.noise_triplets; ++i) {
            emit("misc_" + plan.targets[t], 0.15);
        }
    }
}

SourceModelBank build_planted_bank(const WorldPlan& plan, const KnowledgeBase& kb) {
    const WorldConfig& cfg = plan.cfg;
    const Layout& ly = plan.layout;
    SourceModelBank bank;
    bank.source_order = kb.vocab.source_names;
    bank.attribute_order = kb.attribute_order();
    bank.scene_order = kb.scene_order();

    auto axis_scorer = [&](std::size_t dim, double gain, double bias) {
        StubScorer s;
        s.weights.assign(cfg.feature_dim, 0.0);
        s.weights[dim] = gain;
        s.bias = bias;
        return s;
    };
    for (std::size_t s = 0; s < cfg.source_classes; ++s) {
        bank.detectors[plan.sources[s]] =
            axis_scorer(ly.src(s), kDetectorGain, kDetectorBias);
        BoxRegressor reg;
        reg.tx = axis_scorer(ly.geom(0), 1.0, 0.0);
        reg.ty = axis_scorer(ly.geom(1), 1.0, 0.0);
        reg.tw = axis_scorer(ly.geom(2), 1.0, 0.0);
        reg.th = axis_scorer(ly.geom(3), 1.0, 0.0);
        bank.regressors[plan.sources[s]] = std::move(reg);
    }
    for (std::size_t g = 0; g < kAttributeGroupCount; ++g) {
        for (std::size_t k = 0; k < cfg.attributes_per_group; ++k) {
            bank.attributes[plan.attr_names[g * cfg.attributes_per_group + k]] =
                axis_scorer(ly.attr(g, k), kAttributeGain, kAttributeBias);
        }
    }
    for (std::size_t sc = 0; sc < cfg.scenes; ++sc) {
        bank.scenes[plan.scenes[sc]] = axis_scorer(ly.scene(sc), kSceneGain, kSceneBias);
    }
    for (const auto& t : kb.triplets) {
        std::pair<std::string, std::string> key{t.object_class, t.relation};
        if (!bank.spatial.count(key) && kb.vocab.is_source(t.object_class)) {
            bank.spatial.emplace(
                key, fit_spatial_distributions(kb.triplets, key.first, key.second, {}));
        }
    }
    return bank;
}

struct InstancePlacement {
    Box source_box;
    Box target_box;
};

InstancePlacement place_instance(const WorldPlan& plan, std::size_t t, Rng& rng) {
    const Geometry& geom = plan.geometry[t];
    const double ts = std::sqrt(std::exp2(geom.log_ratio));
    const double unit_radius = kBaseSourceBox * (std::max(std::abs(geom.dx), std::abs(geom.dy)) +
                                                 0.5 + 0.6 * ts + 0.15);
    const double m_max = 0.48 / unit_radius;
    if (m_max < 0.55) {
        throw DataError("instance geometry for " + plan.targets[t] +
                        " does not fit the unit frame");
    }
    const double m = rng.uniform(0.55, std::min(1.45, m_max));
    const double src_w = kBaseSourceBox * m;
    const double r = unit_radius * m;
    const double cx = rng.uniform(r, 1.0 - r);
    const double cy = rng.uniform(r, 1.0 - r);

    InstancePlacement out;
    out.source_box = {cx - 0.5 * src_w, cy - 0.5 * src_w, src_w, src_w};
    const double tw = src_w * ts;
    const double tcx = cx + geom.dx * src_w + rng.gaussian(0.0, 0.02 * src_w);
    const double tcy = cy + geom.dy * src_w + rng.gaussian(0.0, 0.02 * src_w);
    out.target_box = {tcx - 0.5 * tw, tcy - 0.5 * tw, tw, tw};
    return out;
}

enum class ProposalKind { Source, Correct, Part, Context, Background };

struct ProposalDraft {
    Box box;
    ProposalKind kind;
    std::size_t class_index = 0;  // source index or target index, by kind
    const InstancePlacement* placement = nullptr;
    const Box* gt = nullptr;  // box the geometry dims point to
};

void fill_features(const WorldPlan& plan, const ProposalDraft& draft, std::size_t scene,
                   Matrix& features, std::size_t row, Rng& rng) {
    const WorldConfig& cfg = plan.cfg;
    const Layout& ly = plan.layout;
    for (std::size_t k = 0; k < cfg.feature_dim; ++k) {
        features(row, k) = rng.gaussian(0.0, cfg.feature_noise);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        features(row, ly.geom(i)) = rng.gaussian(0.0, kGeometryNoise);
    }
    features(row, ly.scene(scene)) += kSceneCoeff;

    auto add_attrs = [&](std::size_t attr_idx, double coeff) {
        for (std::size_t g = 0; g < kAttributeGroupCount; ++g) {
            features(row, ly.attr(g, attr_idx)) += coeff;
        }
    };
    auto add_geometry = [&](const Box& b, const Box& gt) {
        features(row, ly.geom(0)) += (gt.x - b.x) / b.w;
        features(row, ly.geom(1)) += (gt.y - b.y) / b.h;
        features(row, ly.geom(2)) += std::log(gt.w / b.w);
        features(row, ly.geom(3)) += std::log(gt.h / b.h);
    };

    switch (draft.kind) {
        case ProposalKind::Source:
            features(row, ly.src(draft.class_index)) += kSourceCoeff;
            add_attrs(plan.src_attr_index[draft.class_index], kAttrCoeff);
            add_geometry(draft.box, *draft.gt);
            break;
        case ProposalKind::Correct:
            features(row, ly.tgt(draft.class_index)) += kTargetCoeff;
            features(row, ly.src(plan.pair_source[draft.class_index])) += kSimCoeff;
            add_attrs(plan.attr_index[draft.class_index], kAttrCoeff);
            add_geometry(draft.box, *draft.gt);
            break;
        case ProposalKind::Part:
            features(row, ly.tgt(draft.class_index)) += kPartTargetCoeff;
            add_attrs(plan.attr_index[draft.class_index], kPartAttrCoeff);
            add_geometry(draft.box, *draft.gt);
            break;
        case ProposalKind::Context:
            features(row, ly.scene(scene)) += kContextSceneCoeff;
            break;
        case ProposalKind::Background:
            break;
    }
}

ImageSample make_image(const WorldPlan& plan, const std::string& id, Rng& rng,
                       ImageTruth& truth) {
    const WorldConfig& cfg = plan.cfg;
    ImageSample img;
    img.id = id;
    truth.image_id = id;

    const std::size_t scene = rng.index(cfg.scenes);
    img.scene = plan.scenes[scene];
    truth.scene = img.scene;

    std::vector<std::size_t> residents;
    for (std::size_t t = 0; t < cfg.target_classes; ++t) {
        if (plan.home_scene[t] == scene) residents.push_back(t);
    }
    std::vector<std::size_t> chosen;
    if (residents.empty()) {
        chosen.push_back(rng.index(cfg.target_classes));
    } else {
        const std::size_t first = residents[rng.index(residents.size())];
        chosen.push_back(first);
        if (residents.size() >= 2 && rng.bernoulli(0.4)) {
            std::size_t second = residents[rng.index(residents.size())];
            if (second != first) chosen.push_back(second);
        }
    }
    if (rng.bernoulli(0.1)) {
        const std::size_t extra = rng.index(cfg.target_classes);
        if (std::find(chosen.begin(), chosen.end(), extra) == chosen.end()) {
            chosen.push_back(extra);
        }
    }

    std::vector<InstancePlacement> placements;
    placements.reserve(chosen.size());
    for (std::size_t t : chosen) placements.push_back(place_instance(plan, t, rng));

    std::vector<ProposalDraft> drafts;
    std::deque<Box> lone_boxes;  // stable addresses for lone-source truth boxes
    std::vector<std::size_t> correct_index(chosen.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const std::size_t t = chosen[i];
        const InstancePlacement& pl = placements[i];
        truth.objects.push_back({plan.targets[t], pl.target_box});

        const bool with_source = rng.bernoulli(cfg.source_cooccur_rate);
        if (with_source) {
            truth.objects.push_back({plan.sources[plan.pair_source[t]], pl.source_box});
            Box b = pl.source_box;
            const double j = 0.02 * b.w;
            b.x += rng.gaussian(0.0, j);
            b.y += rng.gaussian(0.0, j);
            b = clip_to_frame(b);
            drafts.push_back({b, ProposalKind::Source, plan.pair_source[t], &pl,
                              &pl.source_box});
        }
        {
            Box b = pl.target_box;
            const double shift = 0.04 * b.w;
            b.x += rng.gaussian(0.0, shift);
            b.y += rng.gaussian(0.0, shift);
            const double scale = rng.uniform(0.9, 1.12);
            b.w *= scale;
            b.h *= scale;
            b = clip_to_frame(b);
            if (iou(b, pl.target_box) < 0.5) b = pl.target_box;  // keep the invariant
            correct_index[i] = drafts.size();
            drafts.push_back({b, ProposalKind::Correct, t, &pl, &pl.target_box});
        }
        if (rng.bernoulli(cfg.part_rate)) {
            const Box& g = pl.target_box;
            const double pw = kPartScale * g.w;
            const double ph = kPartScale * g.h;
            const bool right = rng.bernoulli(0.5);
            const bool bottom = rng.bernoulli(0.5);
            Box b{right ? g.x + g.w - pw : g.x, bottom ? g.y + g.h - ph : g.y, pw, ph};
            drafts.push_back({clip_to_frame(b), ProposalKind::Part, t, &pl, &pl.target_box});
        }
        if (rng.bernoulli(cfg.context_rate)) {
            // A co-occurring blob mirrored across the relation direction, or
            // simply offset from the target when no source was planted.
            const Geometry& geom = plan.geometry[t];
            const double src_w = pl.source_box.w;
            const double w = pl.target_box.w * rng.uniform(0.8, 1.2);
            Box b{pl.source_box.cx() - geom.dx * src_w - 0.5 * w,
                  pl.source_box.cy() - geom.dy * src_w - 0.5 * w, w, w};
            b = clip_to_frame(b);
            if (b.w > 0.01 && b.h > 0.01) {
                drafts.push_back({b, ProposalKind::Context, t, &pl, nullptr});
            }
        }
    }
    if (rng.bernoulli(cfg.lone_source_rate)) {
        const std::size_t s = rng.index(cfg.source_classes);
        const double w = kBaseSourceBox * rng.uniform(0.55, 1.45);
        Box gt{rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - w), w, w};
        truth.objects.push_back({plan.sources[s], gt});
        lone_boxes.push_back(gt);
        Box b = gt;
        b.x += rng.gaussian(0.0, 0.02 * w);
        b.y += rng.gaussian(0.0, 0.02 * w);
        b = clip_to_frame(b);
        drafts.push_back({b, ProposalKind::Source, s, nullptr, &lone_boxes.back()});
    }
    if (drafts.size() > cfg.proposals_per_image) {
        throw DataError("proposal budget " + std::to_string(cfg.proposals_per_image) +
                        " too small for " + std::to_string(drafts.size()) +
                        " instance proposals");
    }
    while (drafts.size() < cfg.proposals_per_image) {
        const double w = rng.uniform(0.05, 0.3);
        const double h = rng.uniform(0.05, 0.3);
        Box b{rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h), w, h};
        drafts.push_back({b, ProposalKind::Background, 0, nullptr, nullptr});
    }

    img.features = Matrix(drafts.size(), cfg.feature_dim);
    for (std::size_t i = 0; i < drafts.size(); ++i) {
        img.proposals.push_back(drafts[i].box);
        fill_features(plan, drafts[i], scene, img.features, i, rng);
    }

    std::set<std::string> labels;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        labels.insert(plan.targets[chosen[i]]);
        truth.correct_proposal[plan.targets[chosen[i]]] = correct_index[i];
    }
    img.labels.assign(labels.begin(), labels.end());
    return img;
}

void apply_label_noise(const WorldPlan& plan, Dataset& dataset, Rng& rng) {
    const double rate = plan.cfg.label_noise_rate;
    if (rate <= 0.0) return;
    for (auto& img : dataset) {
        std::set<std::string> labels(img.labels.begin(), img.labels.end());
        for (const auto& cls : plan.targets) {
            if (rng.bernoulli(rate)) {
                if (labels.count(cls)) {
                    labels.erase(cls);
                } else {
                    labels.insert(cls);
                }
            }
        }
        img.labels.assign(labels.begin(), labels.end());
    }
}

}  // namespace

World generate_world(const WorldConfig& config) {
    config.validate();
    WorldPlan plan = make_plan(config);

    World world;
    world.config = config;
    world.kb = build_knowledge(plan);

    Rng triplet_rng(config.seed * 1000003ULL + 1);
    build_triplets(plan, world.kb, triplet_rng);
    world.bank = build_planted_bank(plan, world.kb);

    for (std::size_t t = 0; t < config.target_classes; ++t) {
        world.truth.planted_relations.push_back(
            {plan.targets[t], plan.sources[plan.pair_source[t]], plan.relations[t],
             plan.geometry[t].dx, plan.geometry[t].dy, plan.geometry[t].log_ratio});
    }

    Rng train_rng(config.seed * 1000003ULL + 2);
    for (std::size_t i = 0; i < config.train_images; ++i) {
        ImageTruth truth;
        world.train.push_back(
            make_image(plan, "train_" + std::to_string(i), train_rng, truth));
        world.truth.train.push_back(std::move(truth));
    }
    Rng noise_rng(config.seed * 1000003ULL + 3);
    apply_label_noise(plan, world.train, noise_rng);

    Rng test_rng(config.seed * 1000003ULL + 4);
    for (std::size_t i = 0; i < config.test_images; ++i) {
        ImageTruth truth;
        ImageSample img = make_image(plan, "test_" + std::to_string(i), test_rng, truth);
        for (const auto& obj : truth.objects) {
            img.gt.push_back({obj.class_name, obj.box});
        }
        world.test.push_back(std::move(img));
        world.truth.test.push_back(std::move(truth));
    }
    return world;
}

KnowledgeBasePaths kb_paths_for(const std::string& dir) {
    namespace fs = std::filesystem;
    KnowledgeBasePaths paths;
    paths.classes = (fs::path(dir) / world_files::kClasses).string();
    paths.embeddings = (fs::path(dir) / world_files::kEmbeddings).string();
    paths.attributes = (fs::path(dir) / world_files::kAttributes).string();
    paths.attribute_groups = (fs::path(dir) / world_files::kAttributeGroups).string();
    paths.triplets = (fs::path(dir) / world_files::kTriplets).string();
    paths.scenes = (fs::path(dir) / world_files::kScenes).string();
    return paths;
}

void save_world_truth(const WorldTruth& truth, const std::string& path) {
    json j;
    json planted = json::array();
    for (const auto& p : truth.planted_relations) {
        planted.push_back({{"target", p.target},
                           {"source", p.source},
                           {"relation", p.relation},
                           {"dx", p.dx},
                           {"dy", p.dy},
                           {"log_ratio", p.log_ratio}});
    }
    j["planted_relations"] = std::move(planted);
    auto dump_split = [](const std::vector<ImageTruth>& split) {
        json arr = json::array();
        for (const auto& t : split) {
            json objs = json::array();
            for (const auto& o : t.objects) {
                objs.push_back({{"class", o.class_name},
                                {"box", {o.box.x, o.box.y, o.box.w, o.box.h}}});
            }
            json correct = json::object();
            for (const auto& [cls, idx] : t.correct_proposal) correct[cls] = idx;
            arr.push_back({{"id", t.image_id},
                           {"scene", t.scene},
                           {"objects", std::move(objs)},
                           {"correct_proposal", std::move(correct)}});
        }
        return arr;
    };
    j["train"] = dump_split(truth.train);
    j["test"] = dump_split(truth.test);
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << j.dump(2) << "\n";
}

WorldTruth load_world_truth(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(path + ": " + e.what());
    }
    WorldTruth truth;
    for (const auto& p : j.at("planted_relations")) {
        truth.planted_relations.push_back({p.at("target").get<std::string>(),
                                           p.at("source").get<std::string>(),
                                           p.at("relation").get<std::string>(),
                                           p.at("dx").get<double>(), p.at("dy").get<double>(),
                                           p.at("log_ratio").get<double>()});
    }
    auto load_split = [](const json& arr) {
        std::vector<ImageTruth> split;
        for (const auto& rec : arr) {
            ImageTruth t;
            t.image_id = rec.at("id").get<std::string>();
            t.scene = rec.at("scene").get<std::string>();
            for (const auto& o : rec.at("objects")) {
                const auto& b = o.at("box");
                t.objects.push_back({o.at("class").get<std::string>(),
                                     Box{b[0].get<double>(), b[1].get<double>(),
                                         b[2].get<double>(), b[3].get<double>()}});
            }
            for (const auto& [cls, idx] : rec.at("correct_proposal").items()) {
                t.correct_proposal[cls] = idx.get<std::size_t>();
            }
            split.push_back(std::move(t));
        }
        return split;
    };
    truth.train = load_split(j.at("train"));
    truth.test = load_split(j.at("test"));
    return truth;
}

void write_world(const World& world, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_knowledge_base(world.kb, kb_paths_for(dir));
    save_source_models(world.bank, (fs::path(dir) / world_files::kModels).string());
    save_images_jsonl(world.train, (fs::path(dir) / world_files::kTrainImages).string());
    save_images_jsonl(world.test, (fs::path(dir) / world_files::kTestImages).string());
    save_gt_jsonl(world.test, (fs::path(dir) / world_files::kTestGt).string());
    save_world_truth(world.truth, (fs::path(dir) / world_files::kWorldTruth).string());
}

namespace {

StubScorer fit_logistic(const std::vector<const double*>& rows, std::size_t dim,
                        const std::vector<double>& labels, const FitOptions& opt) {
    StubScorer s;
    s.weights.assign(dim, 0.0);
    s.bias = 0.0;
    const std::size_t n = rows.size();
    if (n == 0 || opt.iterations == 0) return s;
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> grad(dim, 0.0);
    for (std::size_t it = 0; it < opt.iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_b = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z = s.bias;
            for (std::size_t k = 0; k < dim; ++k) z += s.weights[k] * rows[i][k];
            const double err = sigmoid(z) - labels[i];
            for (std::size_t k = 0; k < dim; ++k) grad[k] += err * rows[i][k];
            grad_b += err;
        }
        for (std::size_t k = 0; k < dim; ++k) {
            s.weights[k] -= opt.lr * (grad[k] * inv_n + opt.ridge * s.weights[k]);
        }
        s.bias -= opt.lr * grad_b * inv_n;
    }
    return s;
}

// Ridge least squares with the bias folded in; Gaussian elimination with
// partial pivoting is plenty at this dimensionality.
StubScorer fit_least_squares(const std::vector<const double*>& rows, std::size_t dim,
                             const std::vector<double>& targets, double ridge) {
    const std::size_t d = dim + 1;
    std::vector<std::vector<double>> a(d, std::vector<double>(d, 0.0));
    std::vector<double> b(d, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto x = [&](std::size_t k) { return k < dim ? rows[i][k] : 1.0; };
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < d; ++c) a[r][c] += x(r) * x(c);
            b[r] += x(r) * targets[i];
        }
    }
    for (std::size_t r = 0; r < d; ++r) a[r][r] += ridge;

    for (std::size_t col = 0; col < d; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < d; ++r) {
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        }
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        if (a[col][col] == 0.0) throw DataError("fit_source_models: singular system");
        const double inv = 1.0 / a[col][col];
        for (std::size_t r = 0; r < d; ++r) {
            if (r == col) continue;
            const double f = a[r][col] * inv;
            if (f == 0.0) continue;
            for (std::size_t c = col; c < d; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    StubScorer s;
    s.weights.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) s.weights[k] = b[k] / a[k][k];
    s.bias = b[dim] / a[dim][dim];
    return s;
}

}  // namespace

SourceModelBank fit_source_models(const Dataset& train, const std::vector<ImageTruth>& truth,
                                  const KnowledgeBase& kb, const FitOptions& options) {
    std::map<std::string, const ImageTruth*> truth_by_id;
    for (const auto& t : truth) truth_by_id[t.image_id] = &t;

    const std::size_t dim = train.empty() ? 0 : train.front().feature_dim();

    // Proposal rows matched to each source class's boxes, plus regression
    // targets derived from (proposal box -> ground-truth box).
    struct Matched {
        std::vector<const double*> rows;
        std::vector<std::array<double, 4>> box_targets;
    };
    std::map<std::string, Matched> matched;
    std::vector<const double*> all_rows;
    std::vector<std::string> row_source;  // source class of each row, "" if none
    std::vector<std::string> row_scene;

    for (const auto& img : train) {
        auto it = truth_by_id.find(img.id);
        if (it == truth_by_id.end()) continue;
        const ImageTruth& t = *it->second;
        for (std::size_t i = 0; i < img.proposal_count(); ++i) {
            const double* row = &img.features.data()[i * img.feature_dim()];
            all_rows.push_back(row);
            row_scene.push_back(img.scene);
            std::string best_class;
            const Box* best_box = nullptr;
            double best_iou = options.match_iou;
            for (const auto& obj : t.objects) {
                if (!kb.vocab.is_source(obj.class_name)) continue;
                const double ov = iou(img.proposals[i], obj.box);
                if (ov >= best_iou) {
                    best_iou = ov;
                    best_class = obj.class_name;
                    best_box = &obj.box;
                }
            }
            row_source.push_back(best_class);
            if (best_box != nullptr) {
                const Box& p = img.proposals[i];
                matched[best_class].rows.push_back(row);
                matched[best_class].box_targets.push_back(
                    {(best_box->x - p.x) / p.w, (best_box->y - p.y) / p.h,
                     std::log(best_box->w / p.w), std::log(best_box->h / p.h)});
            }
        }
    }

    SourceModelBank bank;
    bank.source_order = kb.vocab.source_names;
    bank.attribute_order = kb.attribute_order();
    bank.scene_order = kb.scene_order();

    for (const auto& cls : bank.source_order) {
        std::vector<double> labels(all_rows.size(), 0.0);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < all_rows.size(); ++i) {
            if (row_source[i] == cls) {
                labels[i] = 1.0;
                ++pos;
            }
        }
        const std::size_t neg = all_rows.size() - pos;
        if (pos < options.min_positives || neg < options.min_negatives) {
            throw DataError("fit_source_models: class '" + cls + "' has " +
                            std::to_string(pos) + " positives / " + std::to_string(neg) +
                            " negatives; need " + std::to_string(options.min_positives) +
                            "/" + std::to_string(options.min_negatives));
        }
        bank.detectors[cls] = fit_logistic(all_rows, dim, labels, options);

        const Matched& m = matched[cls];
        BoxRegressor reg;
        StubScorer* parts[4] = {&reg.tx, &reg.ty, &reg.tw, &reg.th};
        for (std::size_t c = 0; c < 4; ++c) {
            std::vector<double> targets;
            targets.reserve(m.box_targets.size());
            for (const auto& bt : m.box_targets) targets.push_back(bt[c]);
            *parts[c] = fit_least_squares(m.rows, dim, targets, options.ridge);
        }
        bank.regressors[cls] = std::move(reg);
    }

    // Attribute classifiers from source instances whose class carries the
    // attribute; attributes no source class exhibits fall back to a
    // constant-0.5 scorer so the bank still covers the attribute universe.
    for (const auto& attr : bank.attribute_order) {
        std::vector<std::string> positive_classes;
        for (const auto& cls : bank.source_order) {
            auto pit = kb.profiles.find(cls);
            if (pit == kb.profiles.end()) continue;
            for (const auto& group : pit->second.groups) {
                for (const auto& e : group) {
                    if (e.name == attr) positive_classes.push_back(cls);
                }
            }
        }
        std::vector<double> labels(all_rows.size(), 0.0);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < all_rows.size(); ++i) {
            if (!row_source[i].empty() &&
                std::find(positive_classes.begin(), positive_classes.end(), row_source[i]) !=
                    positive_classes.end()) {
                labels[i] = 1.0;
                ++pos;
            }
        }
        if (pos == 0) {
            StubScorer zero;
            zero.weights.assign(dim, 0.0);
            bank.attributes[attr] = zero;
        } else {
            bank.attributes[attr] = fit_logistic(all_rows, dim, labels, options);
        }
    }

    std::vector<const double*> image_rows;
    std::vector<std::vector<double>> image_feats;
    image_feats.reserve(train.size());
    for (const auto& img : train) image_feats.push_back(image_feature(img.features));
    for (const auto& f : image_feats) image_rows.push_back(f.data());
    for (const auto& scene : bank.scene_order) {
        std::vector<double> labels(train.size(), 0.0);
        for (std::size_t i = 0; i < train.size(); ++i) {
            if (train[i].scene == scene) labels[i] = 1.0;
        }
        bank.scenes[scene] = fit_logistic(image_rows, dim, labels, options);
    }

    for (const auto& t : kb.triplets) {
        std::pair<std::string, std::string> key{t.object_class, t.relation};
        if (!bank.spatial.count(key) && kb.vocab.is_source(t.object_class)) {
            bank.spatial.emplace(
                key, fit_spatial_distributions(kb.triplets, key.first, key.second, {}));
        }
    }
    return bank;
}

}  // namespace docklab
