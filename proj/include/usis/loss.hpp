// loss.hpp
//
// Composite training loss: objectness + anchor regression averaged over all
// anchors, plus classification, box regression and mask terms averaged over
// the salient anchors.

#pragma once

#include <vector>

#include "usis/tensor.hpp"

namespace usis {

struct LossInputs {
    // Anchor level, N rows.
    Tensor rpn_objectness;                // [N] logits
    Tensor rpn_deltas;                    // [N, 4]
    std::vector<int> rpn_labels;          // 1 positive, 0 negative, -1 not sampled
    std::vector<double> rpn_delta_targets; // N * 4, read for positives only

    // Instance level, M rows (one per candidate anchor).
    std::vector<int> indicator;            // M values in {0, 1}
    Tensor cls_logits;                     // [M, K + 1]
    std::vector<int> cls_targets;          // M, 0 = background
    Tensor box_deltas;                     // [M, 4]
    std::vector<double> box_targets;       // M * 4
    Tensor mask_logits;                    // [M, S]
    std::vector<double> mask_targets;      // M * S, values in [0, 1]
};

struct LossBreakdown {
    double rpn_loss = 0.0;
    double cls_loss = 0.0;
    double reg_loss = 0.0;
    double seg_loss = 0.0;
    double total = 0.0;
    /// Differentiable total (undefined when built without inputs).
    Tensor total_tensor;
};

inline constexpr double kSmoothL1Beta = 1.0;

/// Throws AlignmentError when the pieces disagree in length.
LossBreakdown compute_loss(const LossInputs& in);

} // namespace usis
