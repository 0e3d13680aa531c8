#include "usis/rpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "usis/error.hpp"

namespace usis {

namespace {

// Caps exp() of predicted log-scales, as in the usual box coder.
const double kMaxLogScale = std::log(1000.0 / 16.0);

} // namespace

void RpnConfig::validate() const
{
    auto need = [](bool ok, const char* what) {
        if (!ok) {
            throw std::invalid_argument(std::string("rpn config: ") + what);
        }
    };
    need(!sizes.empty() && !ratios.empty(), "sizes and ratios must be nonempty");
    for (const auto& s : sizes) {
        need(s.size() == sizes.front().size(), "every level needs the same number of sizes");
    }
    need(negative_iou <= positive_iou, "negative threshold above positive threshold");
    need(batch_per_image > 0 && positive_fraction > 0.0 && positive_fraction <= 1.0, "bad sampling settings");
    need(max_instances_per_image > 0 && pre_nms_top > 0 && post_nms_top > 0, "bad proposal limits");
}

std::vector<Box> generate_anchors(const RpnConfig& cfg, const std::vector<int>& level_sizes, int image_size)
{
    if (level_sizes.size() != cfg.sizes.size()) {
        throw ShapeError("anchors: " + std::to_string(level_sizes.size()) + " levels but " +
                         std::to_string(cfg.sizes.size()) + " size groups");
    }
    std::vector<Box> out;
    for (std::size_t l = 0; l < level_sizes.size(); ++l) {
        const int n = level_sizes[l];
        const double stride = static_cast<double>(image_size) / n;
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const double cx = (x + 0.5) * stride;
                const double cy = (y + 0.5) * stride;
                for (double size : cfg.sizes[l]) {
                    for (double ratio : cfg.ratios) {
                        // ratio = height / width at constant area.
                        const double w = size / std::sqrt(ratio);
                        const double h = size * std::sqrt(ratio);
                        out.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
                    }
                }
            }
        }
    }
    return out;
}

std::array<double, 4> encode_box(const Box& r, const Box& t)
{
    const double rw = r.width();
    const double rh = r.height();
    return {((t.x_min + t.x_max) - (r.x_min + r.x_max)) / 2.0 / rw,
            ((t.y_min + t.y_max) - (r.y_min + r.y_max)) / 2.0 / rh, std::log(t.width() / rw),
            std::log(t.height() / rh)};
}

Box decode_box(const Box& r, std::span<const double> d)
{
    const double rw = r.width();
    const double rh = r.height();
    const double cx = (r.x_min + r.x_max) / 2.0 + d[0] * rw;
    const double cy = (r.y_min + r.y_max) / 2.0 + d[1] * rh;
    const double w = rw * std::exp(std::min(d[2], kMaxLogScale));
    const double h = rh * std::exp(std::min(d[3], kMaxLogScale));
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

Box clip_box(const Box& b, int image_size)
{
    const double s = image_size;
    return {std::clamp(b.x_min, 0.0, s), std::clamp(b.y_min, 0.0, s), std::clamp(b.x_max, 0.0, s),
            std::clamp(b.y_max, 0.0, s)};
}

std::vector<std::int64_t> AnchorAssignment::sampled_positives() const
{
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < label.size(); ++i) {
        if (label[i] == 1 && sampled[i]) {
            out.push_back(static_cast<std::int64_t>(i));
        }
    }
    return out;
}

AnchorAssignment assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts, const RpnConfig& cfg,
                                Rng& rng)
{
    const std::size_t n = anchors.size();
    AnchorAssignment a;
    a.label.assign(n, -1);
    a.matched_gt.assign(n, -1);
    a.sampled.assign(n, 0);
    std::vector<double> best(n, 0.0);
    std::vector<double> gt_best(gts.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double iou = box_iou(anchors[i], gts[g]);
            if (iou > best[i]) {
                best[i] = iou;
                a.matched_gt[i] = static_cast<int>(g);
            }
            gt_best[g] = std::max(gt_best[g], iou);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (best[i] >= cfg.positive_iou) {
            a.label[i] = 1;
        } else if (best[i] <= cfg.negative_iou) {
            a.label[i] = 0;
        }
    }
    // Low-quality matches: every gt keeps the anchors that overlap it best.
    for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gt_best[g] <= 0.0) {
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (box_iou(anchors[i], gts[g]) == gt_best[g]) {
                a.label[i] = 1;
                a.matched_gt[i] = static_cast<int>(g);
            }
        }
    }

    std::vector<std::size_t> pos;
    std::vector<std::size_t> neg;
    for (std::size_t i = 0; i < n; ++i) {
        if (a.label[i] == 1) {
            pos.push_back(i);
        } else if (a.label[i] == 0) {
            neg.push_back(i);
        }
    }
    rng.shuffle(pos.begin(), pos.end());
    rng.shuffle(neg.begin(), neg.end());
    const auto pos_quota = static_cast<std::size_t>(cfg.batch_per_image * cfg.positive_fraction);
    const std::size_t n_pos = std::min(pos.size(), pos_quota);
    const std::size_t n_neg = std::min(neg.size(), static_cast<std::size_t>(cfg.batch_per_image) - n_pos);
    for (std::size_t j = 0; j < n_pos; ++j) {
        a.sampled[pos[j]] = 1;
    }
    for (std::size_t j = 0; j < n_neg; ++j) {
        a.sampled[neg[j]] = 1;
    }
    return a;
}

std::vector<std::int64_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold)
{
    if (boxes.size() != scores.size()) {
        throw ShapeError("nms: boxes and scores differ in length");
    }
    std::vector<std::int64_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return scores[i] > scores[j]; });
    std::vector<std::int64_t> keep;
    std::vector<char> dead(boxes.size(), 0);
    for (std::size_t a = 0; a < order.size(); ++a) {
        const auto i = order[a];
        if (dead[i]) {
            continue;
        }
        keep.push_back(i);
        for (std::size_t b = a + 1; b < order.size(); ++b) {
            const auto j = order[b];
            if (!dead[j] && box_iou(boxes[i], boxes[j]) > iou_threshold) {
                dead[j] = 1;
            }
        }
    }
    return keep;
}

RpnHead RpnHead::build(int channels, int anchors_per_cell, Rng& rng)
{
    RpnHead h;
    h.shared = nn::make_conv(rng, channels, channels, 3, true);
    h.objectness = nn::make_conv(rng, channels, anchors_per_cell, 1, true, 0.01);
    h.deltas = nn::make_conv(rng, channels, anchors_per_cell * 4, 1, true, 0.01);
    return h;
}

void RpnHead::collect(nn::ParamList& out) const
{
    shared.collect(out, "rpn.shared", nn::ParamGroup::Rpn);
    objectness.collect(out, "rpn.objectness", nn::ParamGroup::Rpn);
    deltas.collect(out, "rpn.deltas", nn::ParamGroup::Rpn);
}

RpnOutput rpn_forward(const std::vector<Tensor>& levels, int batch_index, const RpnHead& head)
{
    const auto a = head.objectness.weight.dim(0);
    std::vector<Tensor> obj;
    std::vector<Tensor> del;
    for (const auto& level : levels) {
        const std::int64_t idx[] = {batch_index};
        const auto x = level.dim(0) == 1 ? level : ops::index_rows(level, idx);
        const auto h = ops::relu(head.shared(x));
        const auto hh = x.dim(2);
        const auto ww = x.dim(3);
        // [1, A, H, W] -> [H, W, A]
        obj.push_back(ops::reshape(ops::permute(head.objectness(h), {0, 2, 3, 1}), {hh * ww * a}));
        // [1, A*4, H, W] -> [1, A, 4, H, W] -> [H, W, A, 4]
        const auto d = ops::reshape(head.deltas(h), {1, a, 4, hh, ww});
        del.push_back(ops::reshape(ops::permute(d, {0, 3, 4, 1, 2}), {hh * ww * a, 4}));
    }
    return {ops::concat_rows(obj), ops::concat_rows(del)};
}

} // namespace usis
