#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "docklab/dataset.hpp"
#include "docklab/knowledge_base.hpp"
#include "docklab/source_models.hpp"

namespace docklab {

// Controls for the generated micro-universe. The defaults keep a full
// ablation under a minute while still planting the phenomena the priors
// are supposed to repair: part confusers, co-occurring context, noisy
// labels, characteristic attributes, spatial relations and scenes.
struct WorldConfig {
    std::size_t source_classes = 4;
    std::size_t target_classes = 6;
    std::size_t attributes_per_group = 3;
    std::size_t scenes = 4;
    std::size_t train_images = 200;
    std::size_t test_images = 100;
    std::size_t proposals_per_image = 32;
    std::size_t feature_dim = 32;
    std::size_t embedding_dim = 16;
    std::size_t triplets_per_relation = 30;
    std::size_t noise_triplets = 3;
    double part_rate = 0.3;     // chance a target instance gets a part confuser
    double context_rate = 0.3;  // chance of a co-occurring background blob
    // How often a target instance comes with its related source object, and
    // how often a source shows up on its own; lone sources keep source
    // evidence from being mistaken for target evidence.
    double source_cooccur_rate = 0.75;
    double lone_source_rate = 0.35;
    double label_noise_rate = 0.0;
    double feature_noise = 0.1;
    // Targets at the end of the list that get no similar source class
    // (cosine below every threshold); used to exercise inapplicable cues.
    std::size_t unsimilar_targets = 0;
    std::uint64_t seed = 7;

    void validate() const;  // throws ConfigError
};

struct PlantedRelation {
    std::string target;
    std::string source;
    std::string relation;
    double dx = 0.0;       // target center offset in source-box units
    double dy = 0.0;
    double log_ratio = 0.0;  // log2(target area / source area)
};

struct InstanceTruth {
    std::string class_name;
    Box box;
};

struct ImageTruth {
    std::string image_id;
    std::string scene;
    std::vector<InstanceTruth> objects;  // sources and targets
    // Index of the correctly-framed proposal, per planted target class.
    std::map<std::string, std::size_t> correct_proposal;
};

struct WorldTruth {
    std::vector<PlantedRelation> planted_relations;
    std::vector<ImageTruth> train;
    std::vector<ImageTruth> test;
};

struct World {
    WorldConfig config;
    KnowledgeBase kb;
    SourceModelBank bank;  // planted closed-form weights
    Dataset train;         // labels may carry the configured noise
    Dataset test;          // ground truth attached
    WorldTruth truth;
};

World generate_world(const WorldConfig& config);

// File names used inside a world directory.
namespace world_files {
inline constexpr const char* kClasses = "classes.json";
inline constexpr const char* kEmbeddings = "embeddings.tsv";
inline constexpr const char* kAttributes = "attributes.json";
inline constexpr const char* kAttributeGroups = "attribute_groups.json";
inline constexpr const char* kTriplets = "triplets.jsonl";
inline constexpr const char* kScenes = "scenes.json";
inline constexpr const char* kModels = "models.json";
inline constexpr const char* kTrainImages = "train_images.jsonl";
inline constexpr const char* kTestImages = "test_images.jsonl";
inline constexpr const char* kTestGt = "test_gt.jsonl";
inline constexpr const char* kWorldTruth = "world_truth.json";
}  // namespace world_files

KnowledgeBasePaths kb_paths_for(const std::string& dir);

void write_world(const World& world, const std::string& dir);
void save_world_truth(const WorldTruth& truth, const std::string& path);
WorldTruth load_world_truth(const std::string& path);

struct FitOptions {
    std::size_t iterations = 200;  // logistic-regression GD steps
    double lr = 0.5;
    double ridge = 1e-3;
    std::size_t min_positives = 10;
    std::size_t min_negatives = 10;
    double match_iou = 0.5;
};

// Alternative to planted weights: logistic-regression scorers and
// least-squares box regressors fit from source-class supervision only.
// Spatial distributions are fit from the knowledge-base triplets either way.
SourceModelBank fit_source_models(const Dataset& train, const std::vector<ImageTruth>& truth,
                                  const KnowledgeBase& kb, const FitOptions& options = {});

}  // namespace docklab
