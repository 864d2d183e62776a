#include "docklab/source_models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "docklab/errors.hpp"

namespace docklab {

using json = nlohmann::json;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

namespace {

double affine(const std::vector<double>& w, double b, const Matrix& features,
              std::size_t row) {
    if (w.size() != features.cols()) {
        throw DataError("scorer dimension " + std::to_string(w.size()) +
                        " != feature dimension " + std::to_string(features.cols()));
    }
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * features(row, j);
    return z;
}

}  // namespace

double StubScorer::score(const std::vector<double>& x) const {
    if (weights.size() != x.size()) {
        throw DataError("scorer dimension " + std::to_string(weights.size()) +
                        " != feature dimension " + std::to_string(x.size()));
    }
    double z = bias;
    for (std::size_t j = 0; j < x.size(); ++j) z += weights[j] * x[j];
    return sigmoid(z);
}

double StubScorer::score_row(const Matrix& features, std::size_t row) const {
    return sigmoid(affine(weights, bias, features, row));
}

std::array<double, 4> BoxRegressor::offsets(const Matrix& features, std::size_t row) const {
    return {affine(tx.weights, tx.bias, features, row),
            affine(ty.weights, ty.bias, features, row),
            affine(tw.weights, tw.bias, features, row),
            affine(th.weights, th.bias, features, row)};
}

const SpatialDistribution* SourceModelBank::find_spatial(const std::string& source,
                                                         const std::string& relation) const {
    auto it = spatial.find({source, relation});
    return it == spatial.end() ? nullptr : &it->second;
}

std::vector<double> score_proposals(const StubScorer& scorer, const Matrix& features) {
    std::vector<double> out(features.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) {
        out[i] = scorer.score_row(features, i);
    }
    return out;
}

std::vector<double> image_feature(const Matrix& features) {
    std::vector<double> mean(features.cols(), 0.0);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        for (std::size_t j = 0; j < features.cols(); ++j) mean[j] += features(i, j);
    }
    const double inv = 1.0 / static_cast<double>(features.rows());
    for (double& v : mean) v *= inv;
    return mean;
}

std::vector<SourceDetection> visible_sources(const SourceModelBank& bank,
                                             const ImageSample& image,
                                             double tau_vis,
                                             double nms_iou) {
    std::vector<SourceDetection> out;
    for (const auto& cls : bank.source_order) {
        const auto scores = score_proposals(bank.detectors.at(cls), image.features);
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= tau_vis) order.push_back(i);
        }
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return a < b;
        });
        std::vector<std::size_t> kept;
        for (std::size_t i : order) {
            bool suppressed = false;
            for (std::size_t k : kept) {
                if (iou(image.proposals[i], image.proposals[k]) > nms_iou) {
                    suppressed = true;
                    break;
                }
            }
            if (!suppressed) {
                kept.push_back(i);
                out.push_back({cls, image.proposals[i], scores[i], i});
            }
        }
    }
    return out;
}

namespace {

StubScorer scorer_from_json(const json& j, const std::string& context) {
    StubScorer s;
    if (!j.contains("weights") || !j.contains("bias")) {
        throw DataError(context + ": model needs 'weights' and 'bias'");
    }
    for (const auto& v : j["weights"]) s.weights.push_back(v.get<double>());
    s.bias = j["bias"].get<double>();
    return s;
}

json scorer_to_json(const StubScorer& s) {
    json j;
    j["weights"] = s.weights;
    j["bias"] = s.bias;
    return j;
}

void check_keys(const std::string& role, const std::set<std::string>& have,
                const std::vector<std::string>& want) {
    std::set<std::string> want_set(want.begin(), want.end());
    if (have != want_set) {
        std::string msg = "models.json: " + role + " keys do not match the knowledge base;";
        for (const auto& k : want_set)
            if (!have.count(k)) msg += " missing '" + k + "'";
        for (const auto& k : have)
            if (!want_set.count(k)) msg += " unexpected '" + k + "'";
        throw DataError(msg);
    }
}

}  // namespace

SourceModelBank load_source_model_bank(const std::string& models_path,
                                       const KnowledgeBase& kb,
                                       const SpatialGridSpec& spec) {
    std::ifstream in(models_path);
    if (!in) throw DataError(models_path + ": cannot open");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(models_path + ": " + e.what());
    }

    SourceModelBank bank;
    bank.source_order = kb.vocab.source_names;
    bank.attribute_order = kb.attribute_order();
    bank.scene_order = kb.scene_order();

    auto load_role = [&](const char* role, std::map<std::string, StubScorer>& into) {
        if (!j.contains(role)) throw DataError(std::string(models_path) + ": missing '" + role + "'");
        for (const auto& [name, model] : j[role].items()) {
            into[name] = scorer_from_json(model, models_path + ":" + role + ":" + name);
        }
    };
    load_role("detectors", bank.detectors);
    load_role("attributes", bank.attributes);
    load_role("scenes", bank.scenes);

    if (!j.contains("regressors")) throw DataError(models_path + ": missing 'regressors'");
    for (const auto& [name, model] : j["regressors"].items()) {
        BoxRegressor r;
        const std::string ctx = models_path + ":regressors:" + name;
        r.tx = scorer_from_json(model.at("tx"), ctx);
        r.ty = scorer_from_json(model.at("ty"), ctx);
        r.tw = scorer_from_json(model.at("tw"), ctx);
        r.th = scorer_from_json(model.at("th"), ctx);
        bank.regressors[name] = std::move(r);
    }

    auto keys = [](const auto& m) {
        std::set<std::string> ks;
        for (const auto& [k, v] : m) ks.insert(k);
        return ks;
    };
    check_keys("detectors", keys(bank.detectors), bank.source_order);
    check_keys("regressors", keys(bank.regressors), bank.source_order);
    check_keys("attributes", keys(bank.attributes), bank.attribute_order);
    check_keys("scenes", keys(bank.scenes), bank.scene_order);

    // Fit relative-placement statistics once per (source, relation) pair
    // present in the triplets.
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& t : kb.triplets) {
        if (kb.vocab.is_source(t.object_class)) {
            pairs.insert({t.object_class, t.relation});
        }
    }
    for (const auto& [source, relation] : pairs) {
        bank.spatial.emplace(std::pair{source, relation},
                             fit_spatial_distributions(kb.triplets, source, relation, spec));
    }
    return bank;
}

void save_source_models(const SourceModelBank& bank, const std::string& models_path) {
    json j;
    json detectors = json::object();
    for (const auto& [name, s] : bank.detectors) detectors[name] = scorer_to_json(s);
    j["detectors"] = std::move(detectors);
    json attributes = json::object();
    for (const auto& [name, s] : bank.attributes) attributes[name] = scorer_to_json(s);
    j["attributes"] = std::move(attributes);
    json scenes = json::object();
    for (const auto& [name, s] : bank.scenes) scenes[name] = scorer_to_json(s);
    j["scenes"] = std::move(scenes);
    json regressors = json::object();
    for (const auto& [name, r] : bank.regressors) {
        json reg;
        reg["tx"] = scorer_to_json(r.tx);
        reg["ty"] = scorer_to_json(r.ty);
        reg["tw"] = scorer_to_json(r.tw);
        reg["th"] = scorer_to_json(r.th);
        regressors[name] = std::move(reg);
    }
    j["regressors"] = std::move(regressors);
    std::ofstream out(models_path);
    if (!out) throw DataError(models_path + ": cannot open for writing");
    out << j.dump(2) << "\n";
}

}  // namespace docklab
