#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "docklab/dataset.hpp"
#include "docklab/geometry.hpp"
#include "docklab/knowledge_base.hpp"
#include "docklab/matrix.hpp"

namespace docklab {

// Affine-sigmoid probability emitter. Stands in for any pre-trained
// detector / attribute / scene classifier: score(x) = sigmoid(w.x + b).
struct StubScorer {
    std::vector<double> weights;
    double bias = 0.0;

    double score(const std::vector<double>& x) const;
    double score_row(const Matrix& features, std::size_t row) const;
};

struct BoxRegressor {
    StubScorer tx, ty, tw, th;  // raw affine outputs, no sigmoid

    // (tx, ty, tw, th) for one proposal's feature row.
    std::array<double, 4> offsets(const Matrix& features, std::size_t row) const;
};

struct SourceDetection {
    std::string source_class;
    Box box;
    double score = 0.0;
    std::size_t proposal_index = 0;
};

struct SourceModelBank {
    std::vector<std::string> source_order;     // detector/regressor key order
    std::vector<std::string> attribute_order;  // classifier key order
    std::vector<std::string> scene_order;
    std::map<std::string, StubScorer> detectors;
    std::map<std::string, StubScorer> attributes;
    std::map<std::string, StubScorer> scenes;
    std::map<std::string, BoxRegressor> regressors;
    // keyed by (source class, relation)
    std::map<std::pair<std::string, std::string>, SpatialDistribution> spatial;

    const SpatialDistribution* find_spatial(const std::string& source,
                                            const std::string& relation) const;
};

double sigmoid(double z);

// Elementwise sigmoid of the affine map over all proposal rows.
std::vector<double> score_proposals(const StubScorer& scorer, const Matrix& features);

// Mean of the proposal feature rows; the scene classifiers run on this.
std::vector<double> image_feature(const Matrix& features);

// Per source class: threshold at tau_vis, then greedy per-class NMS.
// Output ordered by source class, then by (score desc, index asc).
std::vector<SourceDetection> visible_sources(const SourceModelBank& bank,
                                             const ImageSample& image,
                                             double tau_vis,
                                             double nms_iou);

// Load affine models from models.json and fit spatial distributions from
// the knowledge-base triplets. Key sets are checked against the
// vocabulary, attribute universe and scene labels.
SourceModelBank load_source_model_bank(const std::string& models_path,
                                       const KnowledgeBase& kb,
                                       const SpatialGridSpec& spec = {});

void save_source_models(const SourceModelBank& bank, const std::string& models_path);

}  // namespace docklab
