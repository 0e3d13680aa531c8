#include "usis/decoder.hpp"

#include <stdexcept>

#include "usis/error.hpp"

namespace usis {

void DecoderConfig::validate() const
{
    if (dim < 2 || dim % 2 != 0 || heads < 1 || dim % heads != 0) {
        throw std::invalid_argument("decoder config: dim must be even and divisible by heads");
    }
    if (mlp_dim < 1 || num_classes < 1 || upscale_channels < 1 || dim / 2 < 1) {
        throw std::invalid_argument("decoder config: widths and class count must be positive");
    }
}

MaskDecoder MaskDecoder::build(const DecoderConfig& cfg, Rng& rng)
{
    cfg.validate();
    MaskDecoder d;
    d.cfg = cfg;
    const int dim = cfg.dim;
    d.output_tokens = nn::random_tensor(rng, {2, dim}, 1.0, true);
    d.self_attn = nn::make_attention(rng, dim, cfg.heads, true);
    d.norm1 = nn::make_layer_norm(dim, true);
    d.token_to_image = nn::make_attention(rng, dim, cfg.heads, true);
    d.norm2 = nn::make_layer_norm(dim, true);
    d.mlp1 = nn::make_linear(rng, dim, cfg.mlp_dim, true);
    d.mlp2 = nn::make_linear(rng, cfg.mlp_dim, dim, true);
    d.norm3 = nn::make_layer_norm(dim, true);
    d.image_to_token = nn::make_attention(rng, dim, cfg.heads, true);
    d.norm4 = nn::make_layer_norm(dim, true);
    d.up1 = nn::make_upsample(rng, dim, dim / 2, 2, true);
    d.up2 = nn::make_upsample(rng, dim / 2, cfg.upscale_channels, 2, true);
    d.hyper1 = nn::make_linear(rng, dim, dim, true);
    d.hyper2 = nn::make_linear(rng, dim, cfg.upscale_channels, true);
    d.cls1 = nn::make_linear(rng, dim, dim, true);
    d.cls2 = nn::make_linear(rng, dim, cfg.num_classes + 1, true);
    d.box1 = nn::make_linear(rng, dim, dim, true);
    d.box2 = nn::make_linear(rng, dim, 4, true, 0.01);
    d.image_encoding = nn::PositionEncoding(rng, dim);
    return d;
}

void MaskDecoder::collect(nn::ParamList& out) const
{
    const auto g = nn::ParamGroup::Decoder;
    out.push_back({"decoder.output_tokens", g, output_tokens});
    self_attn.collect(out, "decoder.self_attn", g);
    norm1.collect(out, "decoder.norm1", g);
    token_to_image.collect(out, "decoder.token_to_image", g);
    norm2.collect(out, "decoder.norm2", g);
    mlp1.collect(out, "decoder.mlp1", g);
    mlp2.collect(out, "decoder.mlp2", g);
    norm3.collect(out, "decoder.norm3", g);
    image_to_token.collect(out, "decoder.image_to_token", g);
    norm4.collect(out, "decoder.norm4", g);
    up1.collect(out, "decoder.up1", g);
    up2.collect(out, "decoder.up2", g);
    hyper1.collect(out, "decoder.hyper1", g);
    hyper2.collect(out, "decoder.hyper2", g);
    cls1.collect(out, "decoder.cls1", g);
    cls2.collect(out, "decoder.cls2", g);
    box1.collect(out, "decoder.box1", g);
    box2.collect(out, "decoder.box2", g);
}

namespace {

// Row r of a [P, T, D] tensor as [P, D].
Tensor token_at(const Tensor& tokens, std::int64_t r)
{
    const std::int64_t idx[] = {r};
    return ops::reshape(ops::index_rows(ops::permute(tokens, {1, 0, 2}), idx), {tokens.dim(0), tokens.dim(2)});
}

} // namespace

DecoderOutput decoder_forward(const Tensor& image_embedding, const Tensor& prompts, const MaskDecoder& dec)
{
    const int dim = dec.cfg.dim;
    if (image_embedding.rank() != 4 || image_embedding.dim(0) != 1 || image_embedding.dim(1) != dim ||
        image_embedding.dim(2) != image_embedding.dim(3)) {
        throw ShapeError("decoder: image embedding must be [1, " + std::to_string(dim) + ", h, h], got " +
                         shape_str(image_embedding.shape()));
    }
    if (prompts.rank() != 3 || prompts.dim(2) != dim) {
        throw ShapeError("decoder: prompts must be [P, k, " + std::to_string(dim) + "], got " +
                         shape_str(prompts.shape()));
    }
    const auto p = prompts.dim(0);
    const auto h = image_embedding.dim(2);
    const auto hw = h * h;
    const int mask_side = static_cast<int>(4 * h);
    if (p == 0) {
        return {Tensor::zeros({0, static_cast<std::int64_t>(mask_side) * mask_side}),
                Tensor::zeros({0, dec.cfg.num_classes + 1}), Tensor::zeros({0, 4}), mask_side};
    }

    // Tokens [P, 2 + k, D].
    const auto out_tok = ops::permute(ops::repeat_rows(ops::reshape(dec.output_tokens, {1, 2, dim}), p), {1, 0, 2});
    const auto tokens0 = ops::permute(ops::concat_rows({out_tok, ops::permute(prompts, {1, 0, 2})}), {1, 0, 2});

    const auto image_tokens = ops::repeat_rows(ops::grid_to_tokens(image_embedding), p); // [P, hw, D]
    const auto pe = Tensor::from_vector({hw, dim}, dec.image_encoding.grid(static_cast<int>(h), static_cast<int>(h)));
    const auto keys = ops::add(image_tokens, pe);

    auto tokens = dec.norm1(ops::add(tokens0, dec.self_attn(tokens0, tokens0, tokens0)));
    tokens = dec.norm2(ops::add(tokens, dec.token_to_image(ops::add(tokens, tokens0), keys, image_tokens)));
    tokens = dec.norm3(ops::add(tokens, dec.mlp2(ops::relu(dec.mlp1(tokens)))));
    const auto queries = ops::add(tokens, tokens0);
    const auto image = dec.norm4(ops::add(image_tokens, dec.image_to_token(keys, queries, tokens)));

    const auto grid = ops::tokens_to_grid(image, static_cast<int>(h), static_cast<int>(h)); // [P, D, h, h]
    const auto up = ops::gelu(dec.up2(ops::gelu(dec.up1(grid))));                            // [P, c, 4h, 4h]
    const auto c = dec.cfg.upscale_channels;
    const auto pixels = static_cast<std::int64_t>(mask_side) * mask_side;

    const auto mask_token = token_at(tokens, 0);
    const auto cls_token = token_at(tokens, 1);
    const auto hyper = ops::reshape(dec.hyper2(ops::relu(dec.hyper1(mask_token))), {p, 1, c});
    const auto masks = ops::reshape(ops::bmm(hyper, ops::reshape(up, {p, c, pixels})), {p, pixels});

    DecoderOutput out;
    out.mask_logits = masks;
    out.cls_logits = dec.cls2(ops::relu(dec.cls1(cls_token)));
    out.box_deltas = dec.box2(ops::relu(dec.box1(mask_token)));
    out.mask_size = mask_side;
    return out;
}

} // namespace usis
