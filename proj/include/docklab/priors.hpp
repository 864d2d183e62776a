#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docklab/dataset.hpp"
#include "docklab/knowledge_base.hpp"
#include "docklab/matrix.hpp"
#include "docklab/source_models.hpp"

namespace docklab {

enum class Cue { Similarity, Attribute, Spatial, Scene, Combined };

const char* cue_name(Cue cue);
std::optional<Cue> cue_from_name(const std::string& s);

using CueSet = std::vector<Cue>;

// Per-image prior over (proposal, class). Values live in [y_min, 1];
// a class a cue cannot speak for gets a neutral all-ones column and is
// excluded from cue averaging.
struct PriorMatrix {
    Cue cue = Cue::Combined;
    Matrix values;                 // proposals x classes
    std::vector<bool> applicable;  // per class

    static PriorMatrix neutral(Cue cue, std::size_t proposals, std::size_t classes);
};

struct PriorParams {
    double y_min = 0.01;    // floor; keeps bad priors recoverable by training
    double tau_vis = 0.5;   // source visibility threshold
    double nms_iou = 0.4;
    SpatialGridSpec grid;
};

// Column builders. Each returns the per-proposal values for one target
// class plus the applicability flag; inapplicable columns are all ones.
std::pair<std::vector<double>, bool> similarity_prior_column(
    const ImageSample& image, const std::vector<std::string>& similar_sources,
    const SourceModelBank& bank, double y_min);

std::pair<std::vector<double>, bool> attribute_prior_column(
    const ImageSample& image, const AttributeProfile* profile,
    const SourceModelBank& bank, double y_min);

// anchors: the visible source detections of this image;
// relations: per source class of the target, the selected relation token.
std::pair<std::vector<double>, bool> spatial_prior_column(
    const ImageSample& image, const std::vector<SourceDetection>& anchors,
    const std::map<std::string, std::string>& relations,
    const SourceModelBank& bank, double y_min);

std::pair<std::vector<double>, bool> scene_prior_column(
    const ImageSample& image, const SceneProfile* scenes,
    const SourceModelBank& bank, double y_min);

// Per class: mean over the cue matrices whose applicable flag is set for
// that class; none applicable leaves the neutral ones column.
PriorMatrix combine_priors(const std::vector<PriorMatrix>& cues);

// Precomputes the per-target knowledge artifacts (similar classes,
// profiles, relations) and builds cue / combined matrices per image.
class PriorBuilder {
  public:
    PriorBuilder(const KnowledgeBase& kb, const SourceModelBank& bank,
                 const PriorParams& params, double similarity_threshold = 0.35);

    PriorMatrix cue_matrix(const ImageSample& image, Cue cue) const;
    PriorMatrix combined(const ImageSample& image, const CueSet& cues) const;

    const std::vector<std::string>& target_names() const { return targets_; }
    const std::vector<std::string>& similar_sources(std::size_t target_index) const {
        return similar_[target_index];
    }
    const std::map<std::string, std::string>& relations(std::size_t target_index) const {
        return relations_[target_index];
    }

  private:
    const KnowledgeBase& kb_;
    const SourceModelBank& bank_;
    PriorParams params_;
    std::vector<std::string> targets_;
    std::vector<std::vector<std::string>> similar_;        // per target
    std::vector<const AttributeProfile*> profiles_;        // per target, may be null
    std::vector<const SceneProfile*> scenes_;              // per target, may be null
    std::vector<std::map<std::string, std::string>> relations_;  // per target: source -> rel
};

}  // namespace docklab
