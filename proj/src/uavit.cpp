#include "usis/uavit.hpp"

#include <stdexcept>

#include "usis/error.hpp"

namespace usis {

void AdapterParams::collect(nn::ParamList& out, const std::string& prefix) const
{
    down.collect(out, prefix + ".down", nn::ParamGroup::Adapter);
    up.collect(out, prefix + ".up", nn::ParamGroup::Adapter);
}

AdapterParams make_adapter(Rng& rng, int dim, int bottleneck, nn::Activation activation)
{
    if (bottleneck < 1 || bottleneck >= dim) {
        throw std::invalid_argument("adapter bottleneck must lie in [1, dim)");
    }
    AdapterParams p;
    p.down = nn::make_linear(rng, dim, bottleneck, true);
    p.up = {nn::constant_tensor({bottleneck, dim}, 0.0, true), nn::constant_tensor({dim}, 0.0, true)};
    p.activation = activation;
    return p;
}

Tensor adapter_forward(const Tensor& f, const AdapterParams& p)
{
    if (f.rank() < 1 || f.dim(-1) != p.down.weight.dim(0)) {
        throw ShapeError("adapter: feature dim " + shape_str(f.shape()) + " does not match adapter dim " +
                         std::to_string(p.down.weight.dim(0)));
    }
    return p.up(nn::activate(p.down(f), p.activation));
}

void ChannelAdapterParams::collect(nn::ParamList& out, const std::string& prefix, nn::ParamGroup group) const
{
    down.collect(out, prefix + ".down", group);
    up.collect(out, prefix + ".up", group);
}

ChannelAdapterParams make_channel_adapter(Rng& rng, int channels, int reduction, nn::Activation activation,
                                          bool trainable)
{
    if (reduction < 1 || channels % reduction != 0) {
        throw std::invalid_argument("channel reduction must be >= 1 and divide the channel count");
    }
    const int hidden = channels / reduction;
    ChannelAdapterParams p;
    p.down = nn::make_linear(rng, channels, hidden, trainable);
    p.up = {nn::constant_tensor({hidden, channels}, 0.0, trainable), nn::constant_tensor({channels}, 1.0, trainable)};
    p.activation = activation;
    return p;
}

Tensor channel_adapter_forward(const Tensor& f, const ChannelAdapterParams& p)
{
    if (f.rank() != 4 || f.dim(1) != p.channels()) {
        throw ShapeError("channel adapter: input " + shape_str(f.shape()) + " does not have " +
                         std::to_string(p.channels()) + " channels");
    }
    const auto gate = p.up(nn::activate(p.down(ops::channel_mean(f)), p.activation));
    return ops::channel_scale(f, gate);
}

void VitBlock::collect(nn::ParamList& out, const std::string& prefix) const
{
    const auto g = nn::ParamGroup::Backbone;
    ln1.collect(out, prefix + ".ln1", g);
    attn.collect(out, prefix + ".attn", g);
    ln2.collect(out, prefix + ".ln2", g);
    fc1.collect(out, prefix + ".fc1", g);
    fc2.collect(out, prefix + ".fc2", g);
}

namespace {

Tensor mlp(const VitBlock& b, const Tensor& h)
{
    return b.fc2(ops::gelu(b.fc1(h)));
}

void check_tokens(const Tensor& tokens, const VitBlock& b)
{
    if (tokens.rank() != 3 || tokens.dim(2) != b.ln1.gamma.dim(0)) {
        throw ShapeError("block: tokens " + shape_str(tokens.shape()) + " do not match block dim " +
                         std::to_string(b.ln1.gamma.dim(0)));
    }
}

} // namespace

Tensor vit_block_forward(const Tensor& tokens, const VitBlock& block)
{
    check_tokens(tokens, block);
    const auto h = block.ln1(tokens);
    const auto x1 = ops::add(tokens, block.attn(h, h, h));
    return ops::add(x1, mlp(block, block.ln2(x1)));
}

Tensor uavit_block_forward(const Tensor& tokens, const UaVitBlock& ua, int grid_h, int grid_w)
{
    const auto& block = *ua.block;
    const auto& ad = *ua.adapters;
    check_tokens(tokens, block);
    if (tokens.dim(1) != static_cast<std::int64_t>(grid_h) * grid_w) {
        throw ShapeError("block: token count does not match the grid");
    }
    const auto h = block.ln1(tokens);
    const auto a = block.attn(h, h, h);
    const auto x1 = ops::add(tokens, ops::add(a, adapter_forward(a, ad.attention)));
    const auto h2 = block.ln2(x1);
    const auto x2 = ops::add(x1, ops::add(mlp(block, h2), adapter_forward(h2, ad.mlp)));
    const auto gated = channel_adapter_forward(ops::tokens_to_grid(x2, grid_h, grid_w), ad.channel);
    return ops::grid_to_tokens(gated);
}

void UaAdapters::collect(nn::ParamList& out, const std::string& prefix) const
{
    attention.collect(out, prefix + ".adapter_attn");
    mlp.collect(out, prefix + ".adapter_mlp");
    channel.collect(out, prefix + ".channel", nn::ParamGroup::ChannelAdapter);
}

void EncoderConfig::validate() const
{
    auto need = [](bool ok, const char* what) {
        if (!ok) {
            throw std::invalid_argument(std::string("encoder config: ") + what);
        }
    };
    need(image_size > 0 && patch > 0 && image_size % patch == 0, "image size must be a positive multiple of patch");
    need(depth >= 1, "depth must be >= 1");
    need(dim > 0 && heads > 0 && dim % heads == 0, "dim must be divisible by heads");
    need(mlp_ratio >= 1, "mlp ratio must be >= 1");
    need(replace_start >= 1, "replacement start must be >= 1");
    need(replace_stride >= 1, "replacement stride must be >= 1");
    need(bottleneck() >= 1 && bottleneck() < dim, "adapter bottleneck must lie in [1, dim)");
    need(channel_reduction >= 1 && dim % channel_reduction == 0, "channel reduction must divide dim");
    need(neck_dim >= 2 && neck_dim % 2 == 0, "neck dim must be even");
    need(in_channels >= 1, "input channels must be >= 1");
}

std::vector<int> plan_replacement(const EncoderConfig& cfg)
{
    std::vector<int> out;
    for (int i = cfg.replace_start; i <= cfg.depth; i += cfg.replace_stride) {
        out.push_back(i);
    }
    return out;
}

Encoder Encoder::build(const EncoderConfig& cfg, Rng& adapter_rng)
{
    cfg.validate();
    Encoder e;
    e.cfg = cfg;
    Rng rng(cfg.backbone_seed);
    const int patch_dim = cfg.in_channels * cfg.patch * cfg.patch;
    const int tokens = cfg.grid() * cfg.grid();
    e.patch_embed = nn::make_linear(rng, patch_dim, cfg.dim, false);
    e.pos_embed = nn::random_tensor(rng, {tokens, cfg.dim}, 0.02, false);
    for (int i = 0; i < cfg.depth; ++i) {
        VitBlock b;
        b.ln1 = nn::make_layer_norm(cfg.dim, false);
        b.attn = nn::make_attention(rng, cfg.dim, cfg.heads, false);
        b.ln2 = nn::make_layer_norm(cfg.dim, false);
        b.fc1 = nn::make_linear(rng, cfg.dim, cfg.dim * cfg.mlp_ratio, false);
        b.fc2 = nn::make_linear(rng, cfg.dim * cfg.mlp_ratio, cfg.dim, false);
        e.blocks.push_back(std::move(b));
    }
    e.neck = nn::make_linear(rng, cfg.dim, cfg.neck_dim, false);
    e.replaced = plan_replacement(cfg);
    for (std::size_t i = 0; i < e.replaced.size(); ++i) {
        UaAdapters a;
        a.attention = make_adapter(adapter_rng, cfg.dim, cfg.bottleneck(), cfg.adapter_activation);
        a.mlp = make_adapter(adapter_rng, cfg.dim, cfg.bottleneck(), cfg.adapter_activation);
        a.channel = make_channel_adapter(adapter_rng, cfg.dim, cfg.channel_reduction, cfg.channel_activation);
        e.adapters.push_back(std::move(a));
    }
    return e;
}

void Encoder::collect(nn::ParamList& out) const
{
    patch_embed.collect(out, "encoder.patch_embed", nn::ParamGroup::Backbone);
    out.push_back({"encoder.pos_embed", nn::ParamGroup::Backbone, pos_embed});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect(out, "encoder.block" + std::to_string(i + 1));
    }
    neck.collect(out, "encoder.neck", nn::ParamGroup::Backbone);
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        adapters[i].collect(out, "encoder.block" + std::to_string(replaced[i]));
    }
}

int Encoder::prefix_depth() const
{
    return replaced.empty() ? cfg.depth : replaced.front() - 1;
}

Tensor normalize_images(const Tensor& pixels)
{
    return ops::add_scalar(ops::scale(pixels, 1.0 / (255.0 * 0.25)), -2.0);
}

Tensor encoder_prefix(const Tensor& images, const Encoder& enc)
{
    const auto& cfg = enc.cfg;
    if (images.rank() != 4 || images.dim(1) != cfg.in_channels || images.dim(2) != cfg.image_size ||
        images.dim(3) != cfg.image_size) {
        throw ShapeError("encoder: expected [B, " + std::to_string(cfg.in_channels) + ", " +
                         std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) + "], got " +
                         shape_str(images.shape()));
    }
    auto x = ops::add(enc.patch_embed(ops::patchify(normalize_images(images), cfg.patch)), enc.pos_embed);
    for (int i = 0; i < enc.prefix_depth(); ++i) {
        x = vit_block_forward(x, enc.blocks[i]);
    }
    return x;
}

EncoderOutput encoder_suffix(const Tensor& prefix_tokens, const Encoder& enc, bool use_adapters)
{
    const int g = enc.cfg.grid();
    EncoderOutput out;
    auto x = prefix_tokens;
    std::size_t next = 0;
    for (int i = enc.prefix_depth(); i < enc.cfg.depth; ++i) {
        const bool replaced = next < enc.replaced.size() && enc.replaced[next] == i + 1;
        if (replaced && use_adapters) {
            x = uavit_block_forward(x, {&enc.blocks[i], &enc.adapters[next]}, g, g);
        } else {
            x = vit_block_forward(x, enc.blocks[i]);
        }
        if (replaced) {
            out.captured.push_back(ops::tokens_to_grid(x, g, g));
            ++next;
        }
    }
    out.final = ops::tokens_to_grid(enc.neck(x), g, g);
    return out;
}

EncoderOutput encoder_forward(const Tensor& images, const Encoder& enc, bool use_adapters)
{
    return encoder_suffix(encoder_prefix(images, enc), enc, use_adapters);
}

EncoderParamCounts count_encoder_params(const Encoder& enc)
{
    nn::ParamList params;
    enc.collect(params);
    EncoderParamCounts c;
    for (const auto& p : params) {
        (p.tensor.requires_grad() ? c.trainable : c.frozen) += p.tensor.numel();
    }
    return c;
}

} // namespace usis
