#include "docklab/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "docklab/errors.hpp"
#include "docklab/text.hpp"

namespace docklab {

using json = nlohmann::json;

bool ImageSample::has_label(const std::string& cls) const {
    return std::find(labels.begin(), labels.end(), cls) != labels.end();
}

std::vector<double> label_vector(const ImageSample& image,
                                 const std::vector<std::string>& class_order) {
    std::vector<double> y(class_order.size(), 0.0);
    for (std::size_t c = 0; c < class_order.size(); ++c) {
        if (image.has_label(class_order[c])) y[c] = 1.0;
    }
    return y;
}

namespace {

Box box_from_json(const json& j, const std::string& context) {
    if (!j.is_array() || j.size() != 4) {
        throw DataError(context + ": box must be [x,y,w,h]");
    }
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
               j[3].get<double>()};
}

json box_to_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

}  // namespace

Dataset load_images_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    Dataset dataset;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(where + ": " + e.what());
        }
        ImageSample img;
        img.id = rec.at("id").get<std::string>();
        img.scene = rec.value("scene", std::string());
        if (rec.contains("labels")) {
            for (const auto& l : rec["labels"]) img.labels.push_back(l.get<std::string>());
        }
        const auto& props = rec.at("proposals");
        const auto& feats = rec.at("features");
        if (props.empty()) throw DataError(where + ": image needs at least one proposal");
        if (feats.size() != props.size()) {
            throw DataError(where + ": feature rows != proposal count");
        }
        const std::size_t dim = feats[0].size();
        img.features = Matrix(props.size(), dim);
        for (std::size_t i = 0; i < props.size(); ++i) {
            img.proposals.push_back(box_from_json(props[i], where));
            if (feats[i].size() != dim) {
                throw DataError(where + ": ragged feature rows");
            }
            for (std::size_t j = 0; j < dim; ++j) {
                img.features(i, j) = feats[i][j].get<double>();
            }
        }
        dataset.push_back(std::move(img));
    }
    return dataset;
}

void save_images_jsonl(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    for (const auto& img : dataset) {
        json rec;
        rec["id"] = img.id;
        rec["scene"] = img.scene;
        rec["labels"] = img.labels;
        json props = json::array();
        for (const auto& b : img.proposals) props.push_back(box_to_json(b));
        rec["proposals"] = std::move(props);
        json feats = json::array();
        for (std::size_t i = 0; i < img.features.rows(); ++i) {
            json row = json::array();
            for (std::size_t j = 0; j < img.features.cols(); ++j) {
                row.push_back(img.features(i, j));
            }
            feats.push_back(std::move(row));
        }
        rec["features"] = std::move(feats);
        out << rec.dump() << "\n";
    }
}

void load_gt_jsonl(const std::string& path, Dataset& dataset) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::map<std::string, ImageSample*> by_id;
    for (auto& img : dataset) by_id[img.id] = &img;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(where + ": " + e.what());
        }
        const std::string id = rec.at("id").get<std::string>();
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError(where + ": unknown image id '" + id + "'");
        for (const auto& obj : rec.at("objects")) {
            GtObject g;
            g.class_name = obj.at("class").get<std::string>();
            g.box = box_from_json(obj.at("box"), where);
            it->second->gt.push_back(std::move(g));
        }
    }
}

void save_gt_jsonl(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    for (const auto& img : dataset) {
        json rec;
        rec["id"] = img.id;
        json objs = json::array();
        for (const auto& g : img.gt) {
            json o;
            o["class"] = g.class_name;
            o["box"] = box_to_json(g.box);
            objs.push_back(std::move(o));
        }
        rec["objects"] = std::move(objs);
        out << rec.dump() << "\n";
    }
}

}  // namespace docklab
