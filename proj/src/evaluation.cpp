#include "docklab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "docklab/errors.hpp"
#include "docklab/priors.hpp"

namespace docklab {

using json = nlohmann::json;

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
    std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.proposal_index < b.proposal_index;
    });
    std::vector<Detection> kept;
    for (const auto& d : detections) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (iou(d.box, k.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

namespace {

// Scores used at test time: plain X, or X .* Y in postprocess mode.
Matrix score_matrix(const Matrix& features, const HeadParameters& params,
                    const EvalOptions& options, const Matrix* prior) {
    Matrix ones(features.rows(), params.class_count(), 1.0);
    ForwardTrace t = forward(features, params, ones);
    Matrix scores = t.x;
    if (options.postprocess) {
        if (prior == nullptr) {
            throw ConfigError("postprocess inference requires a prior matrix");
        }
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            for (std::size_t j = 0; j < scores.cols(); ++j) {
                scores(i, j) *= (*prior)(i, j);
            }
        }
    }
    return scores;
}

std::vector<Detection> detections_from_scores(const ImageSample& image, const Matrix& scores,
                                              const std::vector<std::string>& class_order,
                                              const EvalOptions& options) {
    std::vector<Detection> out;
    for (std::size_t j = 0; j < class_order.size(); ++j) {
        std::vector<Detection> cls;
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            if (scores(i, j) < options.score_floor) continue;
            cls.push_back({image.id, class_order[j], image.proposals[i], scores(i, j), i});
        }
        auto kept = nms(std::move(cls), options.nms_iou);
        out.insert(out.end(), kept.begin(), kept.end());
    }
    return out;
}

}  // namespace

std::vector<Detection> infer_image(const ImageSample& image, const HeadParameters& params,
                                   const std::vector<std::string>& class_order,
                                   const EvalOptions& options, const Matrix* prior) {
    const Matrix scores = score_matrix(image.features, params, options, prior);
    return detections_from_scores(image, scores, class_order, options);
}

std::vector<Detection> apply_borrowed_regressors(const std::vector<Detection>& detections,
                                                 const ImageSample& image,
                                                 const ClassVocabulary& vocab,
                                                 const SourceModelBank& bank) {
    // Nearest source class per target class, by embedding cosine.
    std::map<std::string, std::string> nearest;
    auto nearest_source = [&](const std::string& target) -> const std::string& {
        auto it = nearest.find(target);
        if (it != nearest.end()) return it->second;
        const auto& emb = vocab.embedding.at(target);
        std::string best;
        double best_sim = -2.0;
        for (const auto& src : vocab.source_names) {
            const double sim = cosine_similarity(emb, vocab.embedding.at(src));
            if (sim > best_sim || (sim == best_sim && src < best)) {
                best_sim = sim;
                best = src;
            }
        }
        if (best.empty()) {
            throw DataError("apply_borrowed_regressors: no source classes in vocabulary");
        }
        return nearest.emplace(target, std::move(best)).first->second;
    };

    std::vector<Detection> out;
    out.reserve(detections.size());
    for (const auto& d : detections) {
        const auto& reg = bank.regressors.at(nearest_source(d.class_name));
        const auto t = reg.offsets(image.features, d.proposal_index);
        Detection refined = d;
        refined.box.x = d.box.x + t[0] * d.box.w;
        refined.box.y = d.box.y + t[1] * d.box.h;
        refined.box.w = d.box.w * std::exp(t[2]);
        refined.box.h = d.box.h * std::exp(t[3]);
        refined.box = clip_to_frame(refined.box);
        out.push_back(refined);
    }
    return out;
}

std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<std::pair<std::string, Box>>& gts,
                                        double match_iou) {
    if (gts.empty() && detections.empty()) return std::nullopt;
    if (gts.empty()) return 0.0;
    if (detections.empty()) return 0.0;

    std::vector<std::size_t> order(detections.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const Detection& da = detections[a];
        const Detection& db = detections[b];
        if (da.score != db.score) return da.score > db.score;
        if (da.image_id != db.image_id) return da.image_id < db.image_id;
        return da.proposal_index < db.proposal_index;
    });

    std::vector<bool> gt_used(gts.size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (std::size_t idx : order) {
        const Detection& d = detections[idx];
        // Best unmatched ground truth in the same image, by IoU;
        // ties toward the lower ground-truth index.
        double best_iou = 0.0;
        std::size_t best_gt = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gt_used[g] || gts[g].first != d.image_id) continue;
            const double ov = iou(d.box, gts[g].second);
            if (ov > best_iou) {
                best_iou = ov;
                best_gt = g;
            }
        }
        if (best_gt < gts.size() && best_iou >= match_iou) {
            gt_used[best_gt] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }

    // Area under the running-max interpolated PR curve.
    for (std::size_t i = precision.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

namespace {

struct ClassEval {
    std::vector<Detection> detections;
    std::vector<std::pair<std::string, Box>> gts;
};

std::optional<double> bucket_ap(const ClassEval& ce, const EvalOptions& options,
                                double lo, double hi) {
    // Ground truths restricted to the bucket; detections that match an
    // out-of-bucket ground truth are ignored rather than counted as FPs.
    std::vector<std::pair<std::string, Box>> bucket_gts;
    std::vector<bool> in_bucket(ce.gts.size(), false);
    for (std::size_t g = 0; g < ce.gts.size(); ++g) {
        const double a = ce.gts[g].second.area();
        if (a >= lo && a < hi) {
            in_bucket[g] = true;
            bucket_gts.push_back(ce.gts[g]);
        }
    }
    if (bucket_gts.empty()) return std::nullopt;

    // Replay the global greedy match to find which detections matched
    // out-of-bucket ground truth.
    std::vector<std::size_t> order(ce.detections.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const Detection& da = ce.detections[a];
        const Detection& db = ce.detections[b];
        if (da.score != db.score) return da.score > db.score;
        if (da.image_id != db.image_id) return da.image_id < db.image_id;
        return da.proposal_index < db.proposal_index;
    });
    std::vector<bool> gt_used(ce.gts.size(), false);
    std::vector<Detection> bucket_dets;
    for (std::size_t idx : order) {
        const Detection& d = ce.detections[idx];
        double best_iou = 0.0;
        std::size_t best_gt = ce.gts.size();
        for (std::size_t g = 0; g < ce.gts.size(); ++g) {
            if (gt_used[g] || ce.gts[g].first != d.image_id) continue;
            const double ov = iou(d.box, ce.gts[g].second);
            if (ov > best_iou) {
                best_iou = ov;
                best_gt = g;
            }
        }
        const bool matched = best_gt < ce.gts.size() && best_iou >= options.match_iou;
        if (matched) gt_used[best_gt] = true;
        if (matched && !in_bucket[best_gt]) continue;  // ignore
        bucket_dets.push_back(d);
    }
    return average_precision(bucket_dets, bucket_gts, options.match_iou);
}

}  // namespace

EvalReport compute_report(const std::vector<Detection>& detections, const Dataset& dataset,
                          const std::vector<std::string>& class_order,
                          const EvalOptions& options) {
    std::map<std::string, ClassEval> per_class;
    for (const auto& cls : class_order) per_class[cls];
    for (const auto& d : detections) {
        auto it = per_class.find(d.class_name);
        if (it != per_class.end()) it->second.detections.push_back(d);
    }
    std::size_t total_gt = 0;
    for (const auto& img : dataset) {
        for (const auto& g : img.gt) {
            auto it = per_class.find(g.class_name);
            if (it != per_class.end()) {
                it->second.gts.emplace_back(img.id, g.box);
                ++total_gt;
            }
        }
    }

    EvalReport report;
    report.counts.images = dataset.size();
    report.counts.detections = detections.size();
    report.counts.ground_truths = total_gt;

    double ap_sum = 0.0;
    std::size_t ap_n = 0;
    double small_sum = 0.0, medium_sum = 0.0, large_sum = 0.0;
    std::size_t small_n = 0, medium_n = 0, large_n = 0;
    for (const auto& cls : class_order) {
        const ClassEval& ce = per_class[cls];
        auto ap = average_precision(ce.detections, ce.gts, options.match_iou);
        report.per_class_ap.emplace_back(cls, ap);
        if (ap) {
            ap_sum += *ap;
            ++ap_n;
        }
        if (auto v = bucket_ap(ce, options, 0.0, options.small_area)) {
            small_sum += *v;
            ++small_n;
        }
        if (auto v = bucket_ap(ce, options, options.small_area, options.large_area)) {
            medium_sum += *v;
            ++medium_n;
        }
        if (auto v = bucket_ap(ce, options, options.large_area, 2.0)) {
            large_sum += *v;
            ++large_n;
        }
    }
    report.map = ap_n == 0 ? 0.0 : ap_sum / static_cast<double>(ap_n);
    if (small_n > 0) report.ap_small = small_sum / static_cast<double>(small_n);
    if (medium_n > 0) report.ap_medium = medium_sum / static_cast<double>(medium_n);
    if (large_n > 0) report.ap_large = large_sum / static_cast<double>(large_n);
    return report;
}

EvalReport evaluate_dataset(const Dataset& dataset, const HeadParameters& params,
                            const std::vector<std::string>& class_order,
                            const EvalOptions& options, const SourceModelBank* bank,
                            const PriorBuilder* priors, const std::vector<Cue>* cues,
                            const ClassVocabulary* vocab,
                            std::vector<Detection>* out_detections) {
    if (options.postprocess && (priors == nullptr || cues == nullptr)) {
        throw ConfigError("postprocess evaluation requires a prior builder and cue set");
    }
    if (options.apply_regressors && (bank == nullptr || vocab == nullptr)) {
        throw ConfigError("regressor evaluation requires the model bank and vocabulary");
    }

    std::vector<Detection> all;
    // CorLoc bookkeeping: per class, positive images and localization hits.
    std::map<std::string, std::pair<std::size_t, std::size_t>> corloc;  // hits, total

    for (const auto& img : dataset) {
        Matrix features = img.features;
        if (params.feature_dim() != features.cols()) {
            if (bank == nullptr) {
                throw ConfigError(
                    "checkpoint feature dimension needs concatenated prior features, "
                    "but no model bank was supplied");
            }
            features = concat_prior_features(features, *bank);
            if (params.feature_dim() != features.cols()) {
                throw DataError("checkpoint feature dimension matches neither raw nor "
                                "concatenated features");
            }
        }
        Matrix prior;
        const Matrix* prior_ptr = nullptr;
        if (options.postprocess) {
            PriorMatrix pm = priors->combined(img, *cues);
            prior = std::move(pm.values);
            prior_ptr = &prior;
        }
        const Matrix scores = score_matrix(features, params, options, prior_ptr);
        auto dets = detections_from_scores(img, scores, class_order, options);
        if (options.apply_regressors) {
            dets = apply_borrowed_regressors(dets, img, *vocab, *bank);
        }
        all.insert(all.end(), dets.begin(), dets.end());

        for (std::size_t j = 0; j < class_order.size(); ++j) {
            const std::string& cls = class_order[j];
            std::vector<const Box*> boxes;
            for (const auto& g : img.gt) {
                if (g.class_name == cls) boxes.push_back(&g.box);
            }
            if (boxes.empty()) continue;
            std::size_t best = 0;
            for (std::size_t i = 1; i < scores.rows(); ++i) {
                if (scores(i, j) > scores(best, j)) best = i;
            }
            bool hit = false;
            for (const Box* b : boxes) {
                if (iou(img.proposals[best], *b) >= options.corloc_iou) {
                    hit = true;
                    break;
                }
            }
            auto& [hits, total] = corloc[cls];
            ++total;
            if (hit) ++hits;
        }
    }

    EvalReport report = compute_report(all, dataset, class_order, options);
    if (out_detections != nullptr) *out_detections = all;
    double corloc_sum = 0.0;
    std::size_t corloc_n = 0;
    for (const auto& [cls, ht] : corloc) {
        if (ht.second == 0) continue;
        corloc_sum += static_cast<double>(ht.first) / static_cast<double>(ht.second);
        ++corloc_n;
    }
    report.corloc = corloc_n == 0 ? 0.0 : corloc_sum / static_cast<double>(corloc_n);
    return report;
}

void save_detections_jsonl(const std::vector<Detection>& detections, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    for (const auto& d : detections) {
        json rec;
        rec["image"] = d.image_id;
        rec["class"] = d.class_name;
        rec["box"] = {d.box.x, d.box.y, d.box.w, d.box.h};
        rec["score"] = d.score;
        out << rec.dump() << "\n";
    }
}

void save_report_json(const EvalReport& report, const std::string& path) {
    json j;
    json per_class = json::object();
    for (const auto& [cls, ap] : report.per_class_ap) {
        per_class[cls] = ap ? json(*ap) : json(nullptr);
    }
    j["per_class_ap"] = std::move(per_class);
    j["map"] = report.map;
    j["corloc"] = report.corloc;
    j["ap_small"] = report.ap_small ? json(*report.ap_small) : json(nullptr);
    j["ap_medium"] = report.ap_medium ? json(*report.ap_medium) : json(nullptr);
    j["ap_large"] = report.ap_large ? json(*report.ap_large) : json(nullptr);
    j["counts"] = {{"images", report.counts.images},
                   {"detections", report.counts.detections},
                   {"ground_truths", report.counts.ground_truths}};
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << j.dump(2) << "\n";
}

}  // namespace docklab
