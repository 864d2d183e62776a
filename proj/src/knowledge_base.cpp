#include "docklab/knowledge_base.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "docklab/errors.hpp"
#include "docklab/text.hpp"

namespace docklab {

using json = nlohmann::json;

namespace {

json parse_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(path + ": " + e.what());
    }
}

// nlohmann silently keeps the last value for duplicate keys; the knowledge
// formats treat a doubly-assigned attribute as a format error, so detect
// duplicates with a parser callback.
json parse_json_file_strict(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::vector<std::set<std::string>> scopes;
    bool duplicate = false;
    std::string dup_key;
    auto cb = [&](int /*depth*/, json::parse_event_t event, json& parsed) {
        if (event == json::parse_event_t::object_start) {
            scopes.emplace_back();
        } else if (event == json::parse_event_t::object_end) {
            scopes.pop_back();
        } else if (event == json::parse_event_t::key) {
            const std::string k = parsed.get<std::string>();
            if (!scopes.empty() && !scopes.back().insert(k).second && !duplicate) {
                duplicate = true;
                dup_key = k;
            }
        }
        return true;
    };
    json j;
    try {
        j = json::parse(in, cb);
    } catch (const json::parse_error& e) {
        throw DataError(path + ": " + e.what());
    }
    if (duplicate) {
        throw DataError(path + ": duplicate key '" + dup_key + "'");
    }
    return j;
}

Box box_from_json(const json& j, const std::string& context) {
    if (!j.is_array() || j.size() != 4) {
        throw DataError(context + ": box must be [x,y,w,h]");
    }
    Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
    if (!(b.w > 0.0) || !(b.h > 0.0)) {
        throw DataError(context + ": box needs positive width and height");
    }
    return b;
}

}  // namespace

bool ClassVocabulary::is_source(const std::string& name) const {
    return std::find(source_names.begin(), source_names.end(), name) != source_names.end();
}

bool ClassVocabulary::is_target(const std::string& name) const {
    return std::find(target_names.begin(), target_names.end(), name) != target_names.end();
}

const char* attribute_group_name(AttributeGroup g) {
    switch (g) {
        case AttributeGroup::Color: return "color";
        case AttributeGroup::Shape: return "shape";
        case AttributeGroup::Texture: return "texture";
    }
    return "?";
}

std::optional<AttributeGroup> attribute_group_from_name(const std::string& s) {
    if (s == "color") return AttributeGroup::Color;
    if (s == "shape") return AttributeGroup::Shape;
    if (s == "texture") return AttributeGroup::Texture;
    return std::nullopt;
}

std::vector<std::string> KnowledgeBase::attribute_order() const {
    std::vector<std::string> names;
    names.reserve(attribute_groups.size());
    for (const auto& [name, group] : attribute_groups) names.push_back(name);
    return names;  // std::map iteration is already sorted
}

std::vector<std::string> KnowledgeBase::scene_order() const {
    std::set<std::string> labels;
    for (const auto& [cls, profile] : scenes) {
        labels.insert(profile.scene_labels.begin(), profile.scene_labels.end());
    }
    return std::vector<std::string>(labels.begin(), labels.end());
}

double cosine_similarity(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size()) {
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero vector");
    }
    return dot / (std::sqrt(nu) * std::sqrt(nv));
}

std::vector<std::string> similar_classes(const std::string& target,
                                         const ClassVocabulary& vocab,
                                         double threshold) {
    auto it = vocab.embedding.find(target);
    if (it == vocab.embedding.end()) {
        throw std::invalid_argument("similar_classes: unknown target '" + target + "'");
    }
    std::vector<std::pair<double, std::string>> hits;
    for (const auto& name : vocab.source_names) {
        const double sim = cosine_similarity(it->second, vocab.embedding.at(name));
        if (sim >= threshold) hits.emplace_back(sim, name);
    }
    std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::string> out;
    out.reserve(hits.size());
    for (auto& [sim, name] : hits) out.push_back(std::move(name));
    return out;
}

std::optional<std::string> top_relation(const std::string& target,
                                        const std::string& source,
                                        const std::vector<RelationTriplet>& triplets) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : triplets) {
        if (t.subject_class == target && t.object_class == source) {
            ++counts[t.relation];
        }
    }
    if (counts.empty()) return std::nullopt;
    // counts is sorted by token, so scanning with strict > keeps the
    // lexicographically smallest token on ties.
    std::string best;
    std::size_t best_count = 0;
    for (const auto& [rel, n] : counts) {
        if (n > best_count) {
            best = rel;
            best_count = n;
        }
    }
    return best;
}

std::size_t SpatialDistribution::location_cell(double dx, double dy) const {
    const double r = spec.range;
    const std::size_t g = spec.grid;
    const double w = 2.0 * r / static_cast<double>(g);
    auto axis = [&](double v) {
        v = std::clamp(v, -r, r);
        auto i = static_cast<long long>(std::floor((v + r) / w));
        i = std::clamp<long long>(i, 0, static_cast<long long>(g) - 1);
        return static_cast<std::size_t>(i);
    };
    return axis(dy) * g + axis(dx);
}

std::size_t SpatialDistribution::size_bin(double log_ratio) const {
    const double s = spec.size_range;
    const std::size_t b = spec.bins;
    const double w = 2.0 * s / static_cast<double>(b);
    const double v = std::clamp(log_ratio, -s, s);
    auto i = static_cast<long long>(std::floor((v + s) / w));
    i = std::clamp<long long>(i, 0, static_cast<long long>(b) - 1);
    return static_cast<std::size_t>(i);
}

double SpatialDistribution::location(double dx, double dy) const {
    return location_map[location_cell(dx, dy)];
}

double SpatialDistribution::size(double log_ratio) const {
    return size_hist[size_bin(log_ratio)];
}

SpatialDistribution fit_spatial_distributions(const std::vector<RelationTriplet>& triplets,
                                              const std::string& source,
                                              const std::string& relation,
                                              const SpatialGridSpec& spec) {
    SpatialDistribution d;
    d.source_class = source;
    d.relation = relation;
    d.spec = spec;

    std::vector<std::int64_t> loc_counts(spec.grid * spec.grid, 0);
    std::vector<std::int64_t> size_counts(spec.bins, 0);
    std::size_t matched = 0;
    for (const auto& t : triplets) {
        if (t.object_class != source || t.relation != relation) continue;
        ++matched;
        const double dx = (t.subject_box.cx() - t.object_box.cx()) / t.object_box.w;
        const double dy = (t.subject_box.cy() - t.object_box.cy()) / t.object_box.h;
        const double lr = std::log2(t.subject_box.area() / t.object_box.area());
        ++loc_counts[d.location_cell(dx, dy)];
        ++size_counts[d.size_bin(lr)];
    }
    if (matched == 0) {
        throw DataError("fit_spatial_distributions: no triplet matches (" + source +
                        ", " + relation + ")");
    }

    auto normalize = [](const std::vector<std::int64_t>& counts) {
        std::int64_t max_count = 0;
        for (auto c : counts) max_count = std::max(max_count, c);
        std::vector<double> out(counts.size());
        const double denom = static_cast<double>(max_count + 1);
        for (std::size_t i = 0; i < counts.size(); ++i) {
            out[i] = static_cast<double>(counts[i] + 1) / denom;
        }
        return std::pair{out, 1.0 / denom};
    };
    auto [loc, loc_floor] = normalize(loc_counts);
    auto [sz, size_floor] = normalize(size_counts);
    d.location_map = std::move(loc);
    d.size_hist = std::move(sz);
    d.smoothing_floor = std::min(loc_floor, size_floor);
    return d;
}

AttributeProfile attribute_profile(const std::string& class_name,
                                   const std::map<std::string, std::int64_t>& associations,
                                   const std::map<std::string, AttributeGroup>& group_map,
                                   std::size_t top_k) {
    AttributeProfile profile;
    profile.class_name = class_name;
    for (const auto& [attr, count] : associations) {
        auto it = group_map.find(attr);
        if (it == group_map.end()) {
            throw DataError("attribute_profile: attribute '" + attr +
                            "' of class '" + class_name + "' has no group");
        }
        if (count < 1) {
            throw DataError("attribute_profile: attribute '" + attr +
                            "' of class '" + class_name + "' needs count >= 1");
        }
        profile.groups[static_cast<std::size_t>(it->second)].push_back({attr, count});
    }
    for (auto& group : profile.groups) {
        std::sort(group.begin(), group.end(), [](const auto& a, const auto& b) {
            if (a.count != b.count) return a.count > b.count;
            return a.name < b.name;
        });
        if (group.size() > top_k) group.resize(top_k);
    }
    return profile;
}

namespace {

ClassVocabulary load_vocabulary(const std::string& classes_path,
                                const std::string& embeddings_path) {
    ClassVocabulary vocab;
    json classes = parse_json_file(classes_path);
    if (!classes.contains("source") || !classes.contains("target")) {
        throw DataError(classes_path + ": needs 'source' and 'target' lists");
    }
    for (const auto& n : classes["source"]) vocab.source_names.push_back(n.get<std::string>());
    for (const auto& n : classes["target"]) vocab.target_names.push_back(n.get<std::string>());
    for (const auto& n : vocab.source_names) {
        if (std::find(vocab.target_names.begin(), vocab.target_names.end(), n) !=
            vocab.target_names.end()) {
            throw DataError(classes_path + ": class '" + n + "' is both source and target");
        }
    }

    std::ifstream in(embeddings_path);
    if (!in) throw DataError(embeddings_path + ": cannot open");
    std::string line;
    std::size_t line_no = 0;
    std::size_t dim = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::string where = embeddings_path + ":" + std::to_string(line_no);
        auto fields = split(line, '\t');
        if (fields.size() < 2) throw DataError(where + ": expected name and values");
        const std::string name = trim(fields[0]);
        if (name.empty()) throw DataError(where + ": empty class name");
        std::vector<double> vec;
        vec.reserve(fields.size() - 1);
        double norm2 = 0.0;
        for (std::size_t i = 1; i < fields.size(); ++i) {
            const double v = parse_double(trim(fields[i]), where);
            vec.push_back(v);
            norm2 += v * v;
        }
        if (dim == 0) dim = vec.size();
        if (vec.size() != dim) {
            throw DataError(where + ": embedding dimension " + std::to_string(vec.size()) +
                            " != " + std::to_string(dim));
        }
        if (norm2 == 0.0) throw DataError(where + ": zero embedding for '" + name + "'");
        if (!vocab.embedding.emplace(name, std::move(vec)).second) {
            throw DataError(where + ": duplicate embedding for '" + name + "'");
        }
    }
    for (const auto& n : vocab.source_names) {
        if (!vocab.embedding.count(n)) {
            throw DataError(embeddings_path + ": missing embedding for source '" + n + "'");
        }
    }
    for (const auto& n : vocab.target_names) {
        if (!vocab.embedding.count(n)) {
            throw DataError(embeddings_path + ": missing embedding for target '" + n + "'");
        }
    }
    return vocab;
}

}  // namespace

KnowledgeBase load_knowledge_base(const KnowledgeBasePaths& paths,
                                  const KnowledgeBaseOptions& options) {
    KnowledgeBase kb;
    kb.vocab = load_vocabulary(paths.classes, paths.embeddings);

    json groups = parse_json_file_strict(paths.attribute_groups);
    for (const auto& [attr, group] : groups.items()) {
        auto g = attribute_group_from_name(group.get<std::string>());
        if (!g) {
            throw DataError(paths.attribute_groups + ": attribute '" + attr +
                            "' has unknown group '" + group.get<std::string>() + "'");
        }
        kb.attribute_groups[attr] = *g;
    }

    json attrs = parse_json_file_strict(paths.attributes);
    for (const auto& [cls, assoc] : attrs.items()) {
        std::map<std::string, std::int64_t> counts;
        for (const auto& [attr, count] : assoc.items()) {
            counts[attr] = count.get<std::int64_t>();
        }
        kb.profiles[cls] =
            attribute_profile(cls, counts, kb.attribute_groups, options.attribute_top_k);
    }

    std::ifstream in(paths.triplets);
    if (!in) throw DataError(paths.triplets + ": cannot open");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::string where = paths.triplets + ":" + std::to_string(line_no);
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(where + ": " + e.what());
        }
        for (const char* key : {"subject", "relation", "object", "subject_box", "object_box"}) {
            if (!rec.contains(key)) throw DataError(where + ": missing '" + key + "'");
        }
        RelationTriplet t;
        t.subject_class = rec["subject"].get<std::string>();
        t.relation = rec["relation"].get<std::string>();
        t.object_class = rec["object"].get<std::string>();
        t.subject_box = box_from_json(rec["subject_box"], where);
        t.object_box = box_from_json(rec["object_box"], where);
        if (!kb.vocab.has_class(t.subject_class) || !kb.vocab.has_class(t.object_class)) {
            ++kb.dropped_triplets;
            continue;
        }
        kb.triplets.push_back(std::move(t));
    }

    json scenes = parse_json_file(paths.scenes);
    for (const auto& [cls, labels] : scenes.items()) {
        SceneProfile profile;
        profile.class_name = cls;
        for (const auto& l : labels) profile.scene_labels.insert(l.get<std::string>());
        if (!profile.scene_labels.empty()) kb.scenes[cls] = std::move(profile);
    }
    return kb;
}

void save_knowledge_base(const KnowledgeBase& kb, const KnowledgeBasePaths& paths) {
    {
        json classes;
        classes["source"] = kb.vocab.source_names;
        classes["target"] = kb.vocab.target_names;
        std::ofstream out(paths.classes);
        out << classes.dump(2) << "\n";
    }
    {
        std::ofstream out(paths.embeddings);
        auto write_row = [&](const std::string& name) {
            out << name;
            for (double v : kb.vocab.embedding.at(name)) out << '\t' << format_double(v);
            out << '\n';
        };
        for (const auto& n : kb.vocab.source_names) write_row(n);
        for (const auto& n : kb.vocab.target_names) write_row(n);
    }
    {
        json attrs = json::object();
        for (const auto& [cls, profile] : kb.profiles) {
            json counts = json::object();
            for (const auto& group : profile.groups) {
                for (const auto& e : group) counts[e.name] = e.count;
            }
            attrs[cls] = counts;
        }
        std::ofstream out(paths.attributes);
        out << attrs.dump(2) << "\n";
    }
    {
        json groups = json::object();
        for (const auto& [attr, g] : kb.attribute_groups) {
            groups[attr] = attribute_group_name(g);
        }
        std::ofstream out(paths.attribute_groups);
        out << groups.dump(2) << "\n";
    }
    {
        std::ofstream out(paths.triplets);
        for (const auto& t : kb.triplets) {
            json rec;
            rec["subject"] = t.subject_class;
            rec["relation"] = t.relation;
            rec["object"] = t.object_class;
            rec["subject_box"] = {t.subject_box.x, t.subject_box.y, t.subject_box.w,
                                  t.subject_box.h};
            rec["object_box"] = {t.object_box.x, t.object_box.y, t.object_box.w,
                                 t.object_box.h};
            out << rec.dump() << "\n";
        }
    }
    {
        json scenes = json::object();
        for (const auto& [cls, profile] : kb.scenes) {
            scenes[cls] = std::vector<std::string>(profile.scene_labels.begin(),
                                                   profile.scene_labels.end());
        }
        std::ofstream out(paths.scenes);
        out << scenes.dump(2) << "\n";
    }
}

}  // namespace docklab
