// model.hpp
//
// Full toy pipeline: UA-ViT encoder -> SFPG pyramid -> RPN -> prompts ->
// mask decoder. Builds the loss for training batches and runs inference.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "usis/datakit.hpp"
#include "usis/decoder.hpp"
#include "usis/evalkit.hpp"
#include "usis/loss.hpp"
#include "usis/rpn.hpp"
#include "usis/sfpg.hpp"
#include "usis/uavit.hpp"

namespace usis {

struct InferenceConfig {
    /// Detections need a score strictly above this.
    double score_threshold = 0.05;
    int max_detections = 100;
    /// Mask probability cut-off.
    double mask_threshold = 0.5;
};

struct ModelConfig {
    EncoderConfig encoder;
    SfpgConfig sfpg;
    RpnConfig rpn;
    DecoderConfig decoder;
    InferenceConfig inference;
    /// Seeds every trainable initialization (the backbone has its own seed).
    std::uint64_t seed = 0;

    void validate() const;
};

class UsisSam {
public:
    explicit UsisSam(const ModelConfig& cfg);
    UsisSam(UsisSam&&) = default;
    UsisSam& operator=(UsisSam&&) = default;
    // Copies would alias parameter storage.
    UsisSam(const UsisSam&) = delete;
    UsisSam& operator=(const UsisSam&) = delete;

    const ModelConfig& config() const { return cfg_; }

    nn::ParamList parameters() const;
    nn::ParamList trainable_parameters() const;

    Encoder encoder;
    Sfpg sfpg;
    RpnHead rpn;
    MaskDecoder decoder;
    std::vector<Box> anchors;

private:
    ModelConfig cfg_;
};

/// [1, 3, H, W] pixel tensor (0..255 values).
Tensor pixels_tensor(const RgbImage& image);

struct TrainSample {
    Tensor pixels;
    std::vector<Box> boxes;
    std::vector<int> labels; // category ids
    std::vector<BinaryMask> masks;
    /// Frozen-prefix tokens cached across epochs.
    Tensor prefix;
};

/// Samples for every image that matches the encoder input size; the frozen
/// prefix is computed once here.
std::vector<TrainSample> prepare_samples(const UsisSam& model, const Dataset& d, std::span<const RgbImage> images);

/// Loss over the concatenated anchors of a batch. `rng` drives anchor
/// sampling.
LossBreakdown batch_loss(const UsisSam& model, std::span<const TrainSample> batch, Rng& rng);

/// Detections for one image, sorted by descending score.
std::vector<Detection> infer_image(const UsisSam& model, const RgbImage& image);

std::vector<std::vector<Detection>> model_forward(const UsisSam& model, std::span<const RgbImage> images);

/// Inference over `images` (parallel to d.images) scored against d.
EvalResult evaluate(const UsisSam& model, const Dataset& d, std::span<const RgbImage> images, EvalMode mode);

/// Bilinear resize of a square logit grid, then threshold on probability.
BinaryMask logits_to_mask(std::span<const double> logits, int side, int height, int width, double probability);

} // namespace usis
