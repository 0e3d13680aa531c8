// sfpg.hpp
//
// Salient feature prompt generator: multi-scale fusion of the captured
// encoder maps, average-residual noise balancing, cross-layer fusion, the
// deconvolution pyramid and proposal-conditioned prompt embeddings.

#pragma once

#include <string>
#include <vector>

#include "usis/geometry.hpp"
#include "usis/nn.hpp"
#include "usis/uavit.hpp"

namespace usis {

struct SfpgConfig {
    double lambda = 0.8;
    int in_channels = 192;
    int fusion_channels = 32;
    int channel_reduction = 4;
    std::vector<int> kernels{3, 5, 7};
    int prompt_tokens = 4;
    int prompt_dim = 64;
    int roi_size = 7;
    int prompt_hidden = 256;
    /// Box side (pixels) that maps to the finest pyramid level.
    double canonical_size = 8.0;

    void validate() const;
};

/// Channel adapter followed by one same-padded convolution per kernel size.
struct SffmParams {
    ChannelAdapterParams channel;
    std::vector<nn::Conv2d> convs;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

SffmParams make_sffm(Rng& rng, const SfpgConfig& cfg);

/// sum_s conv_s(CA(F)).
Tensor sffm_scale_fusion(const Tensor& f, const SffmParams& p);

/// lambda * F + (1 - lambda) * per-channel spatial mean of F.
Tensor noise_balance(const Tensor& f, double lambda);

/// F + conv3x3(previous), or F when `previous` is undefined.
Tensor cross_layer_fuse(const Tensor& f, const Tensor& previous, const nn::Conv2d& conv);

struct PyramidParams {
    nn::Upsample up2;
    nn::Upsample up4;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// Levels at 1x, 2x and 4x the input grid.
struct FeaturePyramid {
    std::vector<Tensor> levels;
};

FeaturePyramid build_pyramid(const Tensor& f, const PyramidParams& p);

struct PromptParams {
    nn::Linear fc1;
    nn::Linear fc2;
    nn::PositionEncoding corner_encoding;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

struct Sfpg {
    SfpgConfig cfg;
    std::vector<SffmParams> sffm;       // one per captured level
    std::vector<nn::Conv2d> fuse;       // one per level after the first
    PyramidParams pyramid;
    PromptParams prompt;

    static Sfpg build(const SfpgConfig& cfg, int levels, Rng& rng);
    void collect(nn::ParamList& out) const;
};

/// Whole SFFM stack plus pyramid over the captured encoder maps.
FeaturePyramid sfpg_features(const std::vector<Tensor>& captured, const Sfpg& sfpg);

/// Pyramid level (0 = coarsest) pooled for a box of the given side lengths.
int pyramid_level_for_box(const Box& box, double canonical_size, int levels);

/// Per-proposal prompt tokens [P, k, dim] for image `batch_index` of the
/// pyramid. Boxes are in image pixels; out-of-bounds boxes are clamped and a
/// note is appended to `warnings` when given.
Tensor generate_prompts(const FeaturePyramid& pyramid, int batch_index, const std::vector<Box>& proposals,
                        int image_size, const Sfpg& sfpg, std::vector<std::string>* warnings = nullptr);

} // namespace usis
