#pragma once

#include <string>
#include <vector>

#include "docklab/geometry.hpp"
#include "docklab/matrix.hpp"

namespace docklab {

struct GtObject {
    std::string class_name;
    Box box;
};

// One image: proposal boxes with feature rows, image-level labels, and
// (test split only) held-out ground-truth boxes.
struct ImageSample {
    std::string id;
    std::string scene;                 // latent scene label, may be empty
    std::vector<std::string> labels;   // target classes marked present
    std::vector<Box> proposals;
    Matrix features;                   // proposals x feature_dim
    std::vector<GtObject> gt;          // empty on training data

    std::size_t proposal_count() const { return proposals.size(); }
    std::size_t feature_dim() const { return features.cols(); }
    bool has_label(const std::string& cls) const;
};

using Dataset = std::vector<ImageSample>;

// 0/1 indicator over the given class order.
std::vector<double> label_vector(const ImageSample& image,
                                 const std::vector<std::string>& class_order);

Dataset load_images_jsonl(const std::string& path);
void save_images_jsonl(const Dataset& dataset, const std::string& path);

// Attaches ground truth to matching image ids; unknown ids are an error.
void load_gt_jsonl(const std::string& path, Dataset& dataset);
void save_gt_jsonl(const Dataset& dataset, const std::string& path);

}  // namespace docklab
