#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "docklab/geometry.hpp"

namespace docklab {

// Source classes come with detectors and box supervision; target classes
// only ever have image-level labels. Every class name carries one
// embedding vector, all of the same dimension.
struct ClassVocabulary {
    std::vector<std::string> source_names;
    std::vector<std::string> target_names;
    std::map<std::string, std::vector<double>> embedding;

    std::size_t embedding_dim() const {
        return embedding.empty() ? 0 : embedding.begin()->second.size();
    }
    bool is_source(const std::string& name) const;
    bool is_target(const std::string& name) const;
    bool has_class(const std::string& name) const {
        return embedding.count(name) != 0;
    }
};

enum class AttributeGroup { Color, Shape, Texture };

constexpr std::size_t kAttributeGroupCount = 3;

const char* attribute_group_name(AttributeGroup g);
std::optional<AttributeGroup> attribute_group_from_name(const std::string& s);

struct AttributeProfile {
    struct Entry {
        std::string name;
        std::int64_t count = 0;
    };
    std::string class_name;
    // Indexed by AttributeGroup; per group sorted by descending count,
    // ties by name.
    std::vector<std::vector<Entry>> groups{kAttributeGroupCount};

    bool empty() const {
        for (const auto& g : groups)
            if (!g.empty()) return false;
        return true;
    }
};

struct RelationTriplet {
    std::string subject_class;
    std::string relation;
    std::string object_class;
    Box subject_box;
    Box object_box;
};

// Grid parameterization for the relative location map and size histogram.
// Odd cell counts keep zero offsets at a cell center.
struct SpatialGridSpec {
    std::size_t grid = 21;     // location cells per axis over [-range, range]
    double range = 3.0;        // offsets in units of the anchor box size
    std::size_t bins = 17;     // size histogram bins over [-size_range, size_range]
    double size_range = 4.0;   // log2 of proposal/anchor area ratio
};

// Relative placement statistics of other objects around one source class
// under one relation. Max-normalized with add-one smoothing, so every cell
// is in (0, 1] and lookups never multiply a hard zero into the priors.
struct SpatialDistribution {
    std::string source_class;
    std::string relation;
    SpatialGridSpec spec;
    std::vector<double> location_map;  // grid x grid, row-major (dy, dx)
    std::vector<double> size_hist;     // bins
    double smoothing_floor = 0.0;      // lower bound across both structures

    // dx, dy in units of the anchor box width/height.
    double location(double dx, double dy) const;
    // log2(area / anchor_area)
    double size(double log_ratio) const;

    std::size_t location_cell(double dx, double dy) const;
    std::size_t size_bin(double log_ratio) const;
};

struct SceneProfile {
    std::string class_name;
    std::set<std::string> scene_labels;
};

struct KnowledgeBasePaths {
    std::string classes;
    std::string embeddings;
    std::string attributes;
    std::string attribute_groups;
    std::string triplets;
    std::string scenes;
};

struct KnowledgeBase {
    ClassVocabulary vocab;
    std::map<std::string, AttributeProfile> profiles;
    std::map<std::string, AttributeGroup> attribute_groups;
    std::vector<RelationTriplet> triplets;
    std::map<std::string, SceneProfile> scenes;
    std::size_t dropped_triplets = 0;  // referenced unknown classes

    std::vector<std::string> attribute_order() const;
    std::vector<std::string> scene_order() const;
};

// ---- operations -----------------------------------------------------------

double cosine_similarity(const std::vector<double>& u, const std::vector<double>& v);

// Source classes with cosine(target, source) >= threshold, sorted by
// descending similarity (ties by name).
std::vector<std::string> similar_classes(const std::string& target,
                                         const ClassVocabulary& vocab,
                                         double threshold);

// Most frequent relation among triplets with the given subject and object;
// ties resolved toward the lexicographically smaller token.
std::optional<std::string> top_relation(const std::string& target,
                                        const std::string& source,
                                        const std::vector<RelationTriplet>& triplets);

// Deposit every triplet with object_class == source and the given relation,
// then add-one smooth and max-normalize. Throws DataError when no triplet
// matches (callers treat the cue as inapplicable instead).
SpatialDistribution fit_spatial_distributions(const std::vector<RelationTriplet>& triplets,
                                              const std::string& source,
                                              const std::string& relation,
                                              const SpatialGridSpec& spec);

// Group raw attribute counts and keep the top_k most frequent per group.
AttributeProfile attribute_profile(const std::string& class_name,
                                   const std::map<std::string, std::int64_t>& associations,
                                   const std::map<std::string, AttributeGroup>& group_map,
                                   std::size_t top_k);

struct KnowledgeBaseOptions {
    std::size_t attribute_top_k = 3;
};

KnowledgeBase load_knowledge_base(const KnowledgeBasePaths& paths,
                                  const KnowledgeBaseOptions& options = {});

// Writes the same formats load_knowledge_base consumes; a save/load cycle
// reproduces every structure exactly.
void save_knowledge_base(const KnowledgeBase& kb, const KnowledgeBasePaths& paths);

}  // namespace docklab
