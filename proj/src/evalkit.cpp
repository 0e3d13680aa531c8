#include "usis/evalkit.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "usis/error.hpp"

namespace usis {

MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_thr)
{
    for (const auto& d : dets) {
        for (const auto& g : gts) {
            if (!d.mask.same_shape(g.mask)) {
                throw ShapeError("match_detections: detection and ground-truth masks differ in size");
            }
        }
    }
    MatchResult r;
    r.true_positive.assign(dets.size(), 0);
    r.matched_gt.assign(dets.size(), -1);
    r.iou.assign(dets.size(), 0.0);
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dets[a].score > dets[b].score; });
    std::vector<char> taken(gts.size(), 0);
    for (auto d : order) {
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].category_id != dets[d].category_id) {
                continue;
            }
            const double iou = mask_iou(dets[d].mask, gts[g].mask);
            if (iou >= iou_thr && iou > best_iou) {
                best = static_cast<int>(g);
                best_iou = iou;
            }
        }
        if (best >= 0) {
            taken[best] = 1;
            r.true_positive[d] = 1;
            r.matched_gt[d] = best;
            r.iou[d] = best_iou;
        }
    }
    return r;
}

double average_precision(std::span<const char> true_positive, std::int64_t num_gt)
{
    if (num_gt <= 0) {
        throw UndefinedMetricError("average precision is undefined without ground truth");
    }
    const std::size_t n = true_positive.size();
    std::vector<double> recall(n);
    std::vector<double> precision(n);
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += true_positive[i] ? 1 : 0;
        recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    for (std::size_t i = n; i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double sum = 0.0;
    for (int j = 0; j <= 100; ++j) {
        const double r = j / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) {
            sum += precision[static_cast<std::size_t>(it - recall.begin())];
        }
    }
    return sum / 101.0;
}

double iou_threshold(int i)
{
    return (50 + 5 * i) / 100.0;
}

double ap_at_threshold(std::span<const ImageEval> images, double iou_thr)
{
    struct Scored {
        double score;
        char tp;
    };
    std::vector<Scored> all;
    std::int64_t num_gt = 0;
    for (const auto& img : images) {
        num_gt += static_cast<std::int64_t>(img.ground_truth.size());
        std::vector<Detection> dets = img.detections;
        std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
        if (dets.size() > kMaxDetectionsPerImage) {
            dets.resize(kMaxDetectionsPerImage);
        }
        const auto m = match_detections(dets, img.ground_truth, iou_thr);
        for (std::size_t i = 0; i < dets.size(); ++i) {
            all.push_back({dets[i].score, m.true_positive[i]});
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    std::vector<char> flags;
    flags.reserve(all.size());
    for (const auto& s : all) {
        flags.push_back(s.tp);
    }
    return average_precision(flags, num_gt);
}

std::string to_string(EvalMode m)
{
    return m == EvalMode::ClassAgnostic ? "class-agnostic" : "multi-class";
}

EvalMode parse_eval_mode(const std::string& s)
{
    if (s == "class-agnostic") {
        return EvalMode::ClassAgnostic;
    }
    if (s == "multi-class") {
        return EvalMode::MultiClass;
    }
    throw std::invalid_argument("unknown evaluation mode '" + s + "'");
}

nlohmann::json EvalResult::to_json() const
{
    nlohmann::json j;
    j["schema_version"] = 1;
    j["mode"] = to_string(mode);
    j["mAP"] = map;
    j["AP50"] = ap50;
    j["AP75"] = ap75;
    j["ap_per_threshold"] = ap_per_threshold;
    j["per_category"] = nlohmann::json::object();
    for (const auto& [id, ap] : per_category) {
        j["per_category"][std::to_string(id)] = ap;
    }
    return j;
}

namespace {

std::vector<ImageEval> filter_category(std::span<const ImageEval> images, int category)
{
    std::vector<ImageEval> out;
    out.reserve(images.size());
    for (const auto& img : images) {
        ImageEval e;
        for (const auto& d : img.detections) {
            if (d.category_id == category) {
                e.detections.push_back(d);
            }
        }
        for (const auto& g : img.ground_truth) {
            if (g.category_id == category) {
                e.ground_truth.push_back(g);
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<double> ap_curve(std::span<const ImageEval> images)
{
    std::vector<double> out;
    for (int t = 0; t < kIouThresholdCount; ++t) {
        out.push_back(ap_at_threshold(images, iou_threshold(t)));
    }
    return out;
}

double mean_of(const std::vector<double>& v)
{
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

} // namespace

EvalResult summarize(std::span<const ImageEval> images, EvalMode mode)
{
    EvalResult r;
    r.mode = mode;
    std::set<int> categories;
    for (const auto& img : images) {
        for (const auto& g : img.ground_truth) {
            categories.insert(g.category_id);
        }
    }
    if (categories.empty()) {
        throw UndefinedMetricError("evaluation needs at least one ground-truth instance");
    }
    if (mode == EvalMode::ClassAgnostic) {
        std::vector<ImageEval> merged(images.begin(), images.end());
        for (auto& img : merged) {
            for (auto& d : img.detections) {
                d.category_id = 0;
            }
            for (auto& g : img.ground_truth) {
                g.category_id = 0;
            }
        }
        r.ap_per_threshold = ap_curve(merged);
    } else {
        r.ap_per_threshold.assign(kIouThresholdCount, 0.0);
        for (int c : categories) {
            const auto curve = ap_curve(filter_category(images, c));
            for (int t = 0; t < kIouThresholdCount; ++t) {
                r.ap_per_threshold[t] += curve[t];
            }
            r.per_category[c] = mean_of(curve);
        }
        for (auto& ap : r.ap_per_threshold) {
            ap /= static_cast<double>(categories.size());
        }
    }
    r.map = mean_of(r.ap_per_threshold);
    r.ap50 = r.ap_per_threshold[0];
    r.ap75 = r.ap_per_threshold[5];
    return r;
}

std::vector<ImageEval> ground_truth_images(const Dataset& d)
{
    std::vector<ImageEval> out;
    out.reserve(d.images.size());
    for (const auto& img : d.images) {
        ImageEval e;
        for (const auto* ann : d.annotations_for(img.id)) {
            e.ground_truth.push_back({ann->segmentation.rasterize(img.height, img.width), ann->category_id});
        }
        out.push_back(std::move(e));
    }
    return out;
}

void attach_coco_detections(const Dataset& d, const nlohmann::json& results, std::vector<ImageEval>& images)
{
    if (images.size() != d.images.size()) {
        throw ShapeError("attach_coco_detections: image list does not match the dataset");
    }
    if (!results.is_array()) {
        throw ParseError("detections must be a JSON array");
    }
    std::unordered_map<std::int64_t, std::size_t> index;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        index[d.images[i].id] = i;
    }
    for (const auto& r : results) {
        try {
            const auto image_id = r.at("image_id").get<std::int64_t>();
            const auto it = index.find(image_id);
            if (it == index.end()) {
                throw IntegrityError("detection references unknown image " + std::to_string(image_id));
            }
            const auto& rec = d.images[it->second];
            Detection det;
            det.mask = parse_segmentation(r.at("segmentation")).rasterize(rec.height, rec.width);
            det.score = r.at("score").get<double>();
            det.category_id = r.at("category_id").get<int>();
            images[it->second].detections.push_back(std::move(det));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed detection: ") + e.what());
        }
    }
}

nlohmann::json detections_to_coco(const Dataset& d, std::span<const ImageEval> images)
{
    if (images.size() != d.images.size()) {
        throw ShapeError("detections_to_coco: image list does not match the dataset");
    }
    auto out = nlohmann::json::array();
    for (std::size_t i = 0; i < images.size(); ++i) {
        for (const auto& det : images[i].detections) {
            out.push_back({{"image_id", d.images[i].id},
                           {"category_id", det.category_id},
                           {"score", det.score},
                           {"segmentation", rle_to_json(encode_rle(det.mask))}});
        }
    }
    return out;
}

} // namespace usis
