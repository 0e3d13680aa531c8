#include "usis/loss.hpp"

#include "usis/error.hpp"
#include "usis/ops.hpp"

namespace usis {

namespace {

void align(bool ok, const std::string& what)
{
    if (!ok) {
        throw AlignmentError("loss: " + what);
    }
}

std::vector<std::int64_t> rows_where(const std::vector<int>& v, int value)
{
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] == value) {
            out.push_back(static_cast<std::int64_t>(i));
        }
    }
    return out;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::int64_t>& rows, std::size_t width)
{
    std::vector<T> out;
    out.reserve(rows.size() * width);
    for (auto r : rows) {
        out.insert(out.end(), v.begin() + r * width, v.begin() + (r + 1) * width);
    }
    return out;
}

} // namespace

LossBreakdown compute_loss(const LossInputs& in)
{
    align(in.rpn_objectness.defined() && in.rpn_deltas.defined(), "anchor predictions missing");
    const auto n = in.rpn_objectness.numel();
    align(n > 0, "no anchors");
    align(in.rpn_objectness.rank() == 1, "objectness must be [N]");
    align(in.rpn_deltas.shape() == Shape({n, 4}), "anchor deltas must be [N, 4]");
    align(static_cast<std::int64_t>(in.rpn_labels.size()) == n, "anchor labels do not match anchors");
    align(static_cast<std::int64_t>(in.rpn_delta_targets.size()) == 4 * n, "anchor delta targets do not match");

    std::vector<double> obj_target(static_cast<std::size_t>(n));
    std::vector<double> valid(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const int l = in.rpn_labels[i];
        align(l == -1 || l == 0 || l == 1, "anchor label outside {-1, 0, 1}");
        obj_target[i] = l == 1 ? 1.0 : 0.0;
        valid[i] = l >= 0 ? 1.0 : 0.0;
    }
    auto rpn = ops::weighted_sum(ops::bce_with_logits(in.rpn_objectness, obj_target), valid);
    const auto pos = rows_where(in.rpn_labels, 1);
    if (!pos.empty()) {
        const auto reg = ops::smooth_l1_rows(ops::index_rows(in.rpn_deltas, pos), gather(in.rpn_delta_targets, pos, 4),
                                             kSmoothL1Beta);
        rpn = ops::add(rpn, ops::sum(reg));
    }
    rpn = ops::scale(rpn, 1.0 / static_cast<double>(n));

    LossBreakdown out;
    out.rpn_loss = rpn.item();
    auto total = rpn;

    const auto m = static_cast<std::int64_t>(in.indicator.size());
    for (int v : in.indicator) {
        align(v == 0 || v == 1, "indicator outside {0, 1}");
    }
    const auto salient = rows_where(in.indicator, 1);
    if (!salient.empty()) {
        align(in.cls_logits.defined() && in.cls_logits.rank() == 2 && in.cls_logits.dim(0) == m,
              "class logits do not match the indicator");
        align(static_cast<std::int64_t>(in.cls_targets.size()) == m, "class targets do not match the indicator");
        align(in.box_deltas.defined() && in.box_deltas.shape() == Shape({m, 4}), "box deltas must be [M, 4]");
        align(static_cast<std::int64_t>(in.box_targets.size()) == 4 * m, "box targets do not match");
        align(in.mask_logits.defined() && in.mask_logits.rank() == 2 && in.mask_logits.dim(0) == m,
              "mask logits do not match the indicator");
        const auto s = in.mask_logits.dim(1);
        align(static_cast<std::int64_t>(in.mask_targets.size()) == m * s, "mask targets do not match");

        const double inv = 1.0 / static_cast<double>(salient.size());
        const auto cls_t = gather(in.cls_targets, salient, 1);
        const auto cls = ops::scale(ops::sum(ops::cross_entropy_rows(ops::index_rows(in.cls_logits, salient), cls_t)), inv);
        const auto reg = ops::scale(
            ops::sum(ops::smooth_l1_rows(ops::index_rows(in.box_deltas, salient), gather(in.box_targets, salient, 4),
                                         kSmoothL1Beta)),
            inv);
        const auto seg = ops::scale(
            ops::sum(ops::row_mean(ops::bce_with_logits(ops::index_rows(in.mask_logits, salient),
                                                        gather(in.mask_targets, salient, static_cast<std::size_t>(s))))),
            inv);
        out.cls_loss = cls.item();
        out.reg_loss = reg.item();
        out.seg_loss = seg.item();
        total = ops::add(ops::add(ops::add(total, cls), reg), seg);
    }
    out.total = total.item();
    out.total_tensor = total;
    return out;
}

} // namespace usis
