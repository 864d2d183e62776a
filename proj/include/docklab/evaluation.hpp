#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docklab/dataset.hpp"
#include "docklab/detector_head.hpp"
#include "docklab/knowledge_base.hpp"
#include "docklab/matrix.hpp"
#include "docklab/priors.hpp"
#include "docklab/source_models.hpp"

namespace docklab {

struct Detection {
    std::string image_id;
    std::string class_name;
    Box box;
    double score = 0.0;
    std::size_t proposal_index = 0;
};

struct EvalCounts {
    std::size_t images = 0;
    std::size_t detections = 0;
    std::size_t ground_truths = 0;
};

struct EvalReport {
    // Class order follows the target vocabulary; nullopt when a class has
    // neither ground truth nor detections.
    std::vector<std::pair<std::string, std::optional<double>>> per_class_ap;
    double map = 0.0;
    double corloc = 0.0;
    std::optional<double> ap_small;
    std::optional<double> ap_medium;
    std::optional<double> ap_large;
    EvalCounts counts;
};

struct EvalOptions {
    bool postprocess = false;        // multiply test-time scores by the prior
    bool apply_regressors = false;   // borrow source-class box regressors
    double score_floor = 1e-4;
    double nms_iou = 0.4;
    double corloc_iou = 0.5;
    double match_iou = 0.5;
    double small_area = 0.01;        // area fraction bucket edges
    double large_area = 0.09;
};

// Greedy NMS over one class: keep by descending score (ties to the lower
// proposal index), drop anything overlapping a kept box above the threshold.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

// prior may be null in plain mode; postprocess multiplies X by it.
std::vector<Detection> infer_image(const ImageSample& image, const HeadParameters& params,
                                   const std::vector<std::string>& class_order,
                                   const EvalOptions& options,
                                   const Matrix* prior = nullptr);

// Refine each detection with the regressor of its class's nearest source
// class (by embedding cosine).
std::vector<Detection> apply_borrowed_regressors(const std::vector<Detection>& detections,
                                                 const ImageSample& image,
                                                 const ClassVocabulary& vocab,
                                                 const SourceModelBank& bank);

// All-points average precision (running-max interpolated PR area) for one
// class. Ground truths are (image id, box) pairs. nullopt when there are
// neither ground truths nor detections.
std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<std::pair<std::string, Box>>& gts,
                                        double match_iou);

// AP table and mAP from already-inferred detections; corloc_hits /
// corloc_total are folded in by evaluate_dataset.
EvalReport compute_report(const std::vector<Detection>& detections, const Dataset& dataset,
                          const std::vector<std::string>& class_order,
                          const EvalOptions& options);

// Full inference pass. The builder/cues are only consulted in postprocess
// mode; the bank only when regressors are applied or the checkpoint was
// trained on concatenated prior features.
EvalReport evaluate_dataset(const Dataset& dataset, const HeadParameters& params,
                            const std::vector<std::string>& class_order,
                            const EvalOptions& options,
                            const SourceModelBank* bank = nullptr,
                            const PriorBuilder* priors = nullptr,
                            const std::vector<Cue>* cues = nullptr,
                            const ClassVocabulary* vocab = nullptr,
                            std::vector<Detection>* out_detections = nullptr);

void save_detections_jsonl(const std::vector<Detection>& detections, const std::string& path);
void save_report_json(const EvalReport& report, const std::string& path);

}  // namespace docklab
