#include "docklab/priors.hpp"

#include <algorithm>
#include <cmath>

#include "docklab/errors.hpp"

namespace docklab {

const char* cue_name(Cue cue) {
    switch (cue) {
        case Cue::Similarity: return "similarity";
        case Cue::Attribute: return "attribute";
        case Cue::Spatial: return "spatial";
        case Cue::Scene: return "scene";
        case Cue::Combined: return "combined";
    }
    return "?";
}

std::optional<Cue> cue_from_name(const std::string& s) {
    if (s == "similarity" || s == "sim") return Cue::Similarity;
    if (s == "attribute" || s == "attr") return Cue::Attribute;
    if (s == "spatial") return Cue::Spatial;
    if (s == "scene") return Cue::Scene;
    if (s == "combined") return Cue::Combined;
    return std::nullopt;
}

PriorMatrix PriorMatrix::neutral(Cue cue, std::size_t proposals, std::size_t classes) {
    PriorMatrix m;
    m.cue = cue;
    m.values = Matrix(proposals, classes, 1.0);
    m.applicable.assign(classes, false);
    return m;
}

std::pair<std::vector<double>, bool> similarity_prior_column(
    const ImageSample& image, const std::vector<std::string>& similar_sources,
    const SourceModelBank& bank, double y_min) {
    const std::size_t p = image.proposal_count();
    if (similar_sources.empty()) return {std::vector<double>(p, 1.0), false};
    std::vector<double> col(p, 0.0);
    for (const auto& cls : similar_sources) {
        const auto scores = score_proposals(bank.detectors.at(cls), image.features);
        for (std::size_t i = 0; i < p; ++i) col[i] = std::max(col[i], scores[i]);
    }
    for (double& v : col) v = std::max(v, y_min);
    return {col, true};
}

std::pair<std::vector<double>, bool> attribute_prior_column(
    const ImageSample& image, const AttributeProfile* profile,
    const SourceModelBank& bank, double y_min) {
    const std::size_t p = image.proposal_count();
    if (profile == nullptr || profile->empty()) {
        return {std::vector<double>(p, 1.0), false};
    }
    std::vector<double> col(p, 0.0);
    std::size_t active_groups = 0;
    for (const auto& group : profile->groups) {
        if (group.empty()) continue;
        ++active_groups;
        std::vector<double> group_max(p, 0.0);
        for (const auto& entry : group) {
            const auto scores =
                score_proposals(bank.attributes.at(entry.name), image.features);
            for (std::size_t i = 0; i < p; ++i) {
                group_max[i] = std::max(group_max[i], scores[i]);
            }
        }
        for (std::size_t i = 0; i < p; ++i) col[i] += group_max[i];
    }
    const double inv = 1.0 / static_cast<double>(active_groups);
    for (double& v : col) v = std::max(v * inv, y_min);
    return {col, true};
}

std::pair<std::vector<double>, bool> spatial_prior_column(
    const ImageSample& image, const std::vector<SourceDetection>& anchors,
    const std::map<std::string, std::string>& relations,
    const SourceModelBank& bank, double y_min) {
    const std::size_t p = image.proposal_count();
    std::vector<std::pair<const SourceDetection*, const SpatialDistribution*>> usable;
    for (const auto& anchor : anchors) {
        auto rel = relations.find(anchor.source_class);
        if (rel == relations.end()) continue;
        const SpatialDistribution* dist = bank.find_spatial(anchor.source_class, rel->second);
        if (dist != nullptr) usable.emplace_back(&anchor, dist);
    }
    if (usable.empty()) return {std::vector<double>(p, 1.0), false};

    std::vector<double> col(p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        const Box& r = image.proposals[i];
        for (const auto& [anchor, dist] : usable) {
            const Box& a = anchor->box;
            const double dx = (r.cx() - a.cx()) / a.w;
            const double dy = (r.cy() - a.cy()) / a.h;
            const double lr = std::log2(r.area() / a.area());
            const double v = 0.5 * (dist->location(dx, dy) + dist->size(lr));
            col[i] = std::max(col[i], v);
        }
        col[i] = std::max(col[i], y_min);
    }
    return {col, true};
}

std::pair<std::vector<double>, bool> scene_prior_column(
    const ImageSample& image, const SceneProfile* scenes,
    const SourceModelBank& bank, double y_min) {
    const std::size_t p = image.proposal_count();
    if (scenes == nullptr || scenes->scene_labels.empty()) {
        return {std::vector<double>(p, 1.0), false};
    }
    const auto feat = image_feature(image.features);
    double sum = 0.0;
    for (const auto& label : scenes->scene_labels) {
        sum += bank.scenes.at(label).score(feat);
    }
    const double v = std::clamp(sum, y_min, 1.0);
    return {std::vector<double>(p, v), true};
}

PriorMatrix combine_priors(const std::vector<PriorMatrix>& cues) {
    if (cues.empty()) {
        throw std::invalid_argument("combine_priors: no cue matrices");
    }
    const std::size_t p = cues.front().values.rows();
    const std::size_t c = cues.front().values.cols();
    for (const auto& m : cues) {
        if (m.values.rows() != p || m.values.cols() != c || m.applicable.size() != c) {
            throw DataError("combine_priors: cue matrix shape mismatch");
        }
    }
    PriorMatrix out = PriorMatrix::neutral(Cue::Combined, p, c);
    for (std::size_t j = 0; j < c; ++j) {
        std::size_t n = 0;
        for (const auto& m : cues)
            if (m.applicable[j]) ++n;
        if (n == 0) continue;
        out.applicable[j] = true;
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < p; ++i) {
            double sum = 0.0;
            for (const auto& m : cues) {
                if (m.applicable[j]) sum += m.values(i, j);
            }
            out.values(i, j) = sum * inv;
        }
    }
    return out;
}

PriorBuilder::PriorBuilder(const KnowledgeBase& kb, const SourceModelBank& bank,
                           const PriorParams& params, double similarity_threshold)
    : kb_(kb), bank_(bank), params_(params), targets_(kb.vocab.target_names) {
    similar_.reserve(targets_.size());
    profiles_.reserve(targets_.size());
    scenes_.reserve(targets_.size());
    relations_.reserve(targets_.size());
    for (const auto& target : targets_) {
        similar_.push_back(similar_classes(target, kb_.vocab, similarity_threshold));
        auto pit = kb_.profiles.find(target);
        profiles_.push_back(pit == kb_.profiles.end() ? nullptr : &pit->second);
        auto sit = kb_.scenes.find(target);
        scenes_.push_back(sit == kb_.scenes.end() ? nullptr : &sit->second);
        std::map<std::string, std::string> rels;
        for (const auto& source : kb_.vocab.source_names) {
            if (auto rel = top_relation(target, source, kb_.triplets)) {
                rels[source] = *rel;
            }
        }
        relations_.push_back(std::move(rels));
    }
}

PriorMatrix PriorBuilder::cue_matrix(const ImageSample& image, Cue cue) const {
    const std::size_t p = image.proposal_count();
    const std::size_t c = targets_.size();
    PriorMatrix m = PriorMatrix::neutral(cue, p, c);

    std::vector<SourceDetection> anchors;
    if (cue == Cue::Spatial) {
        anchors = visible_sources(bank_, image, params_.tau_vis, params_.nms_iou);
    }
    for (std::size_t j = 0; j < c; ++j) {
        std::pair<std::vector<double>, bool> col;
        switch (cue) {
            case Cue::Similarity:
                col = similarity_prior_column(image, similar_[j], bank_, params_.y_min);
                break;
            case Cue::Attribute:
                col = attribute_prior_column(image, profiles_[j], bank_, params_.y_min);
                break;
            case Cue::Spatial:
                col = spatial_prior_column(image, anchors, relations_[j], bank_,
                                           params_.y_min);
                break;
            case Cue::Scene:
                col = scene_prior_column(image, scenes_[j], bank_, params_.y_min);
                break;
            case Cue::Combined:
                throw std::invalid_argument("cue_matrix: combined is not a base cue");
        }
        m.applicable[j] = col.second;
        for (std::size_t i = 0; i < p; ++i) m.values(i, j) = col.first[i];
    }
    return m;
}

PriorMatrix PriorBuilder::combined(const ImageSample& image, const CueSet& cues) const {
    if (cues.empty()) {
        return PriorMatrix::neutral(Cue::Combined, image.proposal_count(), targets_.size());
    }
    std::vector<PriorMatrix> mats;
    mats.reserve(cues.size());
    for (Cue cue : cues) mats.push_back(cue_matrix(image, cue));
    return combine_priors(mats);
}

}  // namespace docklab
