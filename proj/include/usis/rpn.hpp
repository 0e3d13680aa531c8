// rpn.hpp
//
// Region proposal head over the feature pyramid: anchor layout, box delta
// coding, IoU-based anchor labelling with sampling, and NMS.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "usis/geometry.hpp"
#include "usis/nn.hpp"
#include "usis/random.hpp"

namespace usis {

struct RpnConfig {
    /// Anchor side lengths per pyramid level (coarsest first).
    std::vector<std::vector<double>> sizes{{32.0, 45.0}, {16.0, 23.0}, {8.0, 11.0}};
    std::vector<double> ratios{0.5, 1.0, 2.0};
    double positive_iou = 0.7;
    double negative_iou = 0.3;
    int batch_per_image = 256;
    double positive_fraction = 0.5;
    /// Positive anchors per image forwarded to the prompt/decoder path.
    int max_instances_per_image = 32;
    int pre_nms_top = 300;
    double nms_iou = 0.7;
    int post_nms_top = 20;
    double min_box_size = 1.0;

    int anchors_per_cell() const { return static_cast<int>(sizes.front().size() * ratios.size()); }
    void validate() const;
};

/// All anchors in (level, y, x, anchor) order.
std::vector<Box> generate_anchors(const RpnConfig& cfg, const std::vector<int>& level_sizes, int image_size);

/// (dx, dy, dw, dh) of `target` relative to `reference`.
std::array<double, 4> encode_box(const Box& reference, const Box& target);
Box decode_box(const Box& reference, std::span<const double> deltas);
Box clip_box(const Box& b, int image_size);

/// label: 1 positive, 0 negative, -1 ignored. `sampled` marks the anchors
/// that contribute to the objectness loss.
struct AnchorAssignment {
    std::vector<int> label;
    std::vector<int> matched_gt;
    std::vector<char> sampled;

    std::vector<std::int64_t> sampled_positives() const;
};

AnchorAssignment assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts, const RpnConfig& cfg,
                                Rng& rng);

/// Indices kept by greedy NMS, in descending score order (stable ties).
std::vector<std::int64_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold);

struct RpnHead {
    nn::Conv2d shared;
    nn::Conv2d objectness;
    nn::Conv2d deltas;

    static RpnHead build(int channels, int anchors_per_cell, Rng& rng);
    void collect(nn::ParamList& out) const;
};

struct RpnOutput {
    Tensor objectness; // [N]
    Tensor deltas;     // [N, 4]
};

/// Head applied to every level of image `batch_index`, flattened in anchor
/// order.
RpnOutput rpn_forward(const std::vector<Tensor>& levels, int batch_index, const RpnHead& head);

} // namespace usis
