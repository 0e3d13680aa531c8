// evalkit.hpp
//
// Mask average precision with COCO conventions: score-descending greedy
// matching, 101-point interpolated precision, IoU thresholds 0.50:0.05:0.95
// and at most 100 detections per image.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "usis/datakit.hpp"
#include "usis/geometry.hpp"

namespace usis {

struct Detection {
    BinaryMask mask;
    double score = 0.0;
    int category_id = 0;
};

struct GroundTruth {
    BinaryMask mask;
    int category_id = 0;
};

struct MatchResult {
    /// Parallel to the detection input order.
    std::vector<char> true_positive;
    std::vector<int> matched_gt; // -1 when unmatched
    std::vector<double> iou;     // IoU with the matched gt, 0 otherwise
};

/// Detections are visited by descending score (ties by input order); each
/// takes the unmatched same-category gt with the highest IoU >= iou_thr
/// (ties to the lowest gt index).
MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_thr);

/// 101-point interpolated AP from detections already sorted by descending
/// score. Throws UndefinedMetricError when num_gt == 0.
double average_precision(std::span<const char> true_positive, std::int64_t num_gt);

struct ImageEval {
    std::vector<Detection> detections;
    std::vector<GroundTruth> ground_truth;
};

inline constexpr int kMaxDetectionsPerImage = 100;
inline constexpr int kIouThresholdCount = 10;

/// 0.50, 0.55, ..., 0.95.
double iou_threshold(int i);

/// AP over all images at one threshold, labels taken as given.
double ap_at_threshold(std::span<const ImageEval> images, double iou_thr);

enum class EvalMode { ClassAgnostic, MultiClass };

std::string to_string(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

struct EvalResult {
    EvalMode mode = EvalMode::MultiClass;
    double map = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::vector<double> ap_per_threshold;
    /// Category id -> AP averaged over thresholds (multi-class only).
    std::map<int, double> per_category;

    nlohmann::json to_json() const;
};

EvalResult summarize(std::span<const ImageEval> images, EvalMode mode);

/// Ground truth for each dataset image, in dataset order.
std::vector<ImageEval> ground_truth_images(const Dataset& d);

/// Fills detections from a COCO results array ({image_id, category_id,
/// segmentation, score}) into `images`, which must be in dataset order.
void attach_coco_detections(const Dataset& d, const nlohmann::json& results, std::vector<ImageEval>& images);

/// COCO results array for detections of each dataset image.
nlohmann::json detections_to_coco(const Dataset& d, std::span<const ImageEval> images);

} // namespace usis
