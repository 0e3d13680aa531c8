#include "usis/sfpg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "usis/error.hpp"

namespace usis {

void SfpgConfig::validate() const
{
    auto need = [](bool ok, const char* what) {
        if (!ok) {
            throw std::invalid_argument(std::string("sfpg config: ") + what);
        }
    };
    need(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
    need(kernels == std::vector<int>({3, 5, 7}), "kernel set is fixed to {3, 5, 7}");
    need(in_channels > 0 && fusion_channels > 0, "channel counts must be positive");
    need(channel_reduction >= 1 && in_channels % channel_reduction == 0, "channel reduction must divide in_channels");
    need(prompt_tokens >= 2, "at least two prompt tokens are needed for the box corners");
    need(prompt_dim >= 2 && prompt_dim % 2 == 0, "prompt dim must be even");
    need(roi_size >= 1 && prompt_hidden >= 1, "roi size and hidden width must be positive");
    need(canonical_size > 0.0, "canonical size must be positive");
}

void SffmParams::collect(nn::ParamList& out, const std::string& prefix) const
{
    channel.collect(out, prefix + ".channel", nn::ParamGroup::Sfpg);
    for (const auto& c : convs) {
        c.collect(out, prefix + ".conv" + std::to_string(c.weight.dim(2)), nn::ParamGroup::Sfpg);
    }
}

SffmParams make_sffm(Rng& rng, const SfpgConfig& cfg)
{
    SffmParams p;
    p.channel = make_channel_adapter(rng, cfg.in_channels, cfg.channel_reduction, nn::Activation::Relu);
    for (int k : cfg.kernels) {
        p.convs.push_back(nn::make_conv(rng, cfg.in_channels, cfg.fusion_channels, k, true));
    }
    return p;
}

Tensor sffm_scale_fusion(const Tensor& f, const SffmParams& p)
{
    const auto c = channel_adapter_forward(f, p.channel);
    Tensor out;
    for (const auto& conv : p.convs) {
        const auto y = conv(c);
        out = out.defined() ? ops::add(out, y) : y;
    }
    return out;
}

Tensor noise_balance(const Tensor& f, double lambda)
{
    if (f.rank() != 4) {
        throw ShapeError("noise_balance: expects an NCHW map, got " + shape_str(f.shape()));
    }
    return ops::channel_add(ops::scale(f, lambda), ops::scale(ops::channel_mean(f), 1.0 - lambda));
}

Tensor cross_layer_fuse(const Tensor& f, const Tensor& previous, const nn::Conv2d& conv)
{
    if (!previous.defined()) {
        return f;
    }
    if (previous.shape() != f.shape()) {
        throw ShapeError("cross_layer_fuse: " + shape_str(previous.shape()) + " vs " + shape_str(f.shape()));
    }
    return ops::add(f, conv(previous));
}

void PyramidParams::collect(nn::ParamList& out, const std::string& prefix) const
{
    up2.collect(out, prefix + ".up2", nn::ParamGroup::Sfpg);
    up4.collect(out, prefix + ".up4", nn::ParamGroup::Sfpg);
}

FeaturePyramid build_pyramid(const Tensor& f, const PyramidParams& p)
{
    if (f.rank() != 4 || f.dim(2) < 2 || f.dim(3) < 2) {
        throw ShapeError("build_pyramid: expects an NCHW map of at least 2x2");
    }
    FeaturePyramid out;
    out.levels.push_back(f);
    out.levels.push_back(p.up2(f));
    out.levels.push_back(p.up4(out.levels.back()));
    return out;
}

void PromptParams::collect(nn::ParamList& out, const std::string& prefix) const
{
    fc1.collect(out, prefix + ".fc1", nn::ParamGroup::Sfpg);
    fc2.collect(out, prefix + ".fc2", nn::ParamGroup::Sfpg);
}

Sfpg Sfpg::build(const SfpgConfig& cfg, int levels, Rng& rng)
{
    cfg.validate();
    if (levels < 1) {
        throw std::invalid_argument("sfpg needs at least one captured encoder map");
    }
    Sfpg s;
    s.cfg = cfg;
    for (int i = 0; i < levels; ++i) {
        s.sffm.push_back(make_sffm(rng, cfg));
        if (i > 0) {
            s.fuse.push_back(nn::make_conv(rng, cfg.fusion_channels, cfg.fusion_channels, 3, true));
        }
    }
    s.pyramid.up2 = nn::make_upsample(rng, cfg.fusion_channels, cfg.fusion_channels, 2, true);
    s.pyramid.up4 = nn::make_upsample(rng, cfg.fusion_channels, cfg.fusion_channels, 2, true);
    const int pooled = cfg.fusion_channels * cfg.roi_size * cfg.roi_size;
    s.prompt.fc1 = nn::make_linear(rng, pooled, cfg.prompt_hidden, true);
    s.prompt.fc2 = nn::make_linear(rng, cfg.prompt_hidden, cfg.prompt_tokens * cfg.prompt_dim, true);
    s.prompt.corner_encoding = nn::PositionEncoding(rng, cfg.prompt_dim);
    return s;
}

void Sfpg::collect(nn::ParamList& out) const
{
    for (std::size_t i = 0; i < sffm.size(); ++i) {
        sffm[i].collect(out, "sfpg.level" + std::to_string(i + 1));
    }
    for (std::size_t i = 0; i < fuse.size(); ++i) {
        fuse[i].collect(out, "sfpg.fuse" + std::to_string(i + 2), nn::ParamGroup::Sfpg);
    }
    pyramid.collect(out, "sfpg.pyramid");
    prompt.collect(out, "sfpg.prompt");
}

FeaturePyramid sfpg_features(const std::vector<Tensor>& captured, const Sfpg& sfpg)
{
    if (captured.size() != sfpg.sffm.size()) {
        throw ShapeError("sfpg: got " + std::to_string(captured.size()) + " encoder maps, configured for " +
                         std::to_string(sfpg.sffm.size()));
    }
    Tensor fused;
    for (std::size_t i = 0; i < captured.size(); ++i) {
        const auto fa = noise_balance(sffm_scale_fusion(captured[i], sfpg.sffm[i]), sfpg.cfg.lambda);
        fused = i == 0 ? fa : cross_layer_fuse(fa, fused, sfpg.fuse[i - 1]);
    }
    return build_pyramid(fused, sfpg.pyramid);
}

int pyramid_level_for_box(const Box& box, double canonical_size, int levels)
{
    const double side = std::sqrt(std::max(box.area(), 1e-12));
    const int scale = std::clamp(static_cast<int>(std::floor(std::log2(side / canonical_size))), 0, levels - 1);
    // Small boxes pool from the finest (last) level.
    return levels - 1 - scale;
}

Tensor generate_prompts(const FeaturePyramid& pyramid, int batch_index, const std::vector<Box>& proposals,
                        int image_size, const Sfpg& sfpg, std::vector<std::string>* warnings)
{
    const auto& cfg = sfpg.cfg;
    const auto k = cfg.prompt_tokens;
    const auto dim = cfg.prompt_dim;
    const auto p_count = static_cast<std::int64_t>(proposals.size());
    if (p_count == 0) {
        return Tensor::zeros({0, k, dim});
    }
    const int levels = static_cast<int>(pyramid.levels.size());
    const double s = image_size;
    std::vector<Box> boxes;
    for (const auto& b : proposals) {
        Box c{std::clamp(b.x_min, 0.0, s), std::clamp(b.y_min, 0.0, s), std::clamp(b.x_max, 0.0, s),
              std::clamp(b.y_max, 0.0, s)};
        if (warnings && !(c == b)) {
            warnings->push_back("proposal clamped to image bounds");
        }
        // Keep at least one pixel of extent so pooling stays defined.
        c.x_max = std::max(c.x_max, std::min(c.x_min + 1.0, s));
        c.x_min = std::min(c.x_min, c.x_max - 1.0);
        c.y_max = std::max(c.y_max, std::min(c.y_min + 1.0, s));
        c.y_min = std::min(c.y_min, c.y_max - 1.0);
        boxes.push_back(c);
    }

    std::vector<Tensor> parts;
    std::vector<std::int64_t> owner;
    for (int l = 0; l < levels; ++l) {
        const auto& level = pyramid.levels[l];
        const double stride = s / static_cast<double>(level.dim(3));
        std::vector<ops::RoiBox> rois;
        for (std::int64_t i = 0; i < p_count; ++i) {
            if (pyramid_level_for_box(boxes[i], cfg.canonical_size, levels) != l) {
                continue;
            }
            const auto& b = boxes[i];
            rois.push_back({b.x_min / stride, b.y_min / stride, b.x_max / stride, b.y_max / stride});
            owner.push_back(i);
        }
        if (rois.empty()) {
            continue;
        }
        const std::int64_t idx[] = {batch_index};
        const auto image_level = level.dim(0) == 1 ? level : ops::index_rows(level, idx);
        parts.push_back(ops::roi_align(image_level, rois, cfg.roi_size));
    }
    // Back to proposal order.
    std::vector<std::int64_t> order(static_cast<std::size_t>(p_count));
    for (std::size_t j = 0; j < owner.size(); ++j) {
        order[static_cast<std::size_t>(owner[j])] = static_cast<std::int64_t>(j);
    }
    const auto pooled = ops::index_rows(parts.size() == 1 ? parts.front() : ops::concat_rows(parts), order);
    const auto flat = ops::reshape(pooled, {p_count, pooled.numel() / p_count});
    const auto tokens = ops::reshape(sfpg.prompt.fc2(ops::relu(sfpg.prompt.fc1(flat))), {p_count, k, dim});

    std::vector<double> pe(static_cast<std::size_t>(p_count * k * dim), 0.0);
    for (std::int64_t i = 0; i < p_count; ++i) {
        const auto& b = boxes[i];
        const auto c0 = sfpg.prompt.corner_encoding.encode(b.x_min / s, b.y_min / s);
        const auto c1 = sfpg.prompt.corner_encoding.encode(b.x_max / s, b.y_max / s);
        std::copy(c0.begin(), c0.end(), pe.begin() + i * k * dim);
        std::copy(c1.begin(), c1.end(), pe.begin() + i * k * dim + dim);
    }
    return ops::add(tokens, Tensor::from_vector({p_count, k, dim}, std::move(pe)));
}

} // namespace usis
