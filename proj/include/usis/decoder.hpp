// decoder.hpp
//
// Small promptable mask decoder: learned output tokens plus prompt tokens go
// through a two-way attention block against the image embedding, then a
// hypernetwork turns the mask token into per-pixel weights over an upscaled
// embedding. Also predicts class logits and box refinements.

#pragma once

#include "usis/nn.hpp"

namespace usis {

struct DecoderConfig {
    int dim = 64;
    int heads = 2;
    int mlp_dim = 128;
    int num_classes = 7; // foreground classes; logits carry one more for background
    int upscale_channels = 16;

    void validate() const;
};

struct MaskDecoder {
    DecoderConfig cfg;
    Tensor output_tokens; // [2, dim]: mask, class
    nn::Attention self_attn;
    nn::LayerNorm norm1;
    nn::Attention token_to_image;
    nn::LayerNorm norm2;
    nn::Linear mlp1, mlp2;
    nn::LayerNorm norm3;
    nn::Attention image_to_token;
    nn::LayerNorm norm4;
    nn::Upsample up1, up2;
    nn::Linear hyper1, hyper2;
    nn::Linear cls1, cls2;
    nn::Linear box1, box2;
    nn::PositionEncoding image_encoding;

    static MaskDecoder build(const DecoderConfig& cfg, Rng& rng);
    void collect(nn::ParamList& out) const;
};

struct DecoderOutput {
    Tensor mask_logits; // [P, 4h * 4w]
    Tensor cls_logits;  // [P, num_classes + 1], index 0 is background
    Tensor box_deltas;  // [P, 4]
    int mask_size = 0;  // side of the square mask grid
};

/// image_embedding [1, dim, h, w] (h == w), prompts [P, k, dim].
DecoderOutput decoder_forward(const Tensor& image_embedding, const Tensor& prompts, const MaskDecoder& dec);

} // namespace usis
