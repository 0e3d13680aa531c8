// uavit.hpp
//
// Toy-scale underwater adaptive ViT encoder: a frozen pre-LN transformer
// backbone whose selected blocks carry two trainable bottleneck adapters and
// a channel adapter on the block output.

#pragma once

#include <cstdint>
#include <vector>

#include "usis/nn.hpp"

namespace usis {

struct AdapterParams {
    nn::Linear down; // dim -> r
    nn::Linear up;   // r -> dim, zero-initialized
    nn::Activation activation = nn::Activation::Gelu;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

AdapterParams make_adapter(Rng& rng, int dim, int bottleneck, nn::Activation activation);

/// up(act(down(F))) on the last axis.
Tensor adapter_forward(const Tensor& f, const AdapterParams& p);

/// The 1x1 convolutions act on the pooled [B, C] vector, so they are stored
/// as linear maps.
struct ChannelAdapterParams {
    nn::Linear down; // C -> C/rho
    nn::Linear up;   // C/rho -> C, zero weights and unit bias
    nn::Activation activation = nn::Activation::Relu;

    int channels() const { return static_cast<int>(down.weight.dim(0)); }
    void collect(nn::ParamList& out, const std::string& prefix, nn::ParamGroup group) const;
};

ChannelAdapterParams make_channel_adapter(Rng& rng, int channels, int reduction, nn::Activation activation,
                                          bool trainable = true);

/// F * up(act(down(pool(F)))) on an NCHW map; the gate is not squashed.
Tensor channel_adapter_forward(const Tensor& f, const ChannelAdapterParams& p);

struct VitBlock {
    nn::LayerNorm ln1;
    nn::Attention attn;
    nn::LayerNorm ln2;
    nn::Linear fc1;
    nn::Linear fc2;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// Plain pre-LN block: x + attn(ln1 x), then + mlp(ln2 .).
Tensor vit_block_forward(const Tensor& tokens, const VitBlock& block);

/// Trainable parts attached to one replaced block.
struct UaAdapters {
    AdapterParams attention;
    AdapterParams mlp;
    ChannelAdapterParams channel;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

struct UaVitBlock {
    const VitBlock* block = nullptr;
    const UaAdapters* adapters = nullptr;
};

/// a = attn(ln1 x); x1 = x + a + adapter1(a); h = ln2 x1;
/// x2 = x1 + mlp(h) + adapter2(h); out = channel_adapter(x2 as grid).
Tensor uavit_block_forward(const Tensor& tokens, const UaVitBlock& block, int grid_h, int grid_w);

struct EncoderConfig {
    int image_size = 64;
    int in_channels = 3;
    int depth = 12;
    int dim = 192;
    int patch = 8;
    int heads = 4;
    int mlp_ratio = 4;
    int replace_start = 8;
    int replace_stride = 2;
    int adapter_bottleneck = 0; // 0 -> dim / 4
    int channel_reduction = 4;
    int neck_dim = 64;
    nn::Activation adapter_activation = nn::Activation::Gelu;
    nn::Activation channel_activation = nn::Activation::Relu;
    std::uint64_t backbone_seed = 7;

    int grid() const { return image_size / patch; }
    int bottleneck() const { return adapter_bottleneck > 0 ? adapter_bottleneck : dim / 4; }
    /// Throws std::invalid_argument on violated invariants.
    void validate() const;
};

/// 1-based indices {start, start + stride, ...} within [1, depth].
std::vector<int> plan_replacement(const EncoderConfig& cfg);

struct Encoder {
    EncoderConfig cfg;
    nn::Linear patch_embed;
    Tensor pos_embed; // [T, dim]
    std::vector<VitBlock> blocks;
    std::vector<int> replaced;       // 1-based, ascending
    std::vector<UaAdapters> adapters; // parallel to `replaced`
    nn::Linear neck;                 // dim -> neck_dim

    /// Frozen weights depend only on cfg (and its backbone seed); adapter
    /// initialization draws from `adapter_rng`.
    static Encoder build(const EncoderConfig& cfg, Rng& adapter_rng);

    void collect(nn::ParamList& out) const;
    /// Index (0-based) of the first block that may differ from the backbone.
    int prefix_depth() const;
};

struct EncoderOutput {
    /// One [B, dim, g, g] map per replaced block, in depth order.
    std::vector<Tensor> captured;
    /// Final tokens through the neck as [B, neck_dim, g, g].
    Tensor final;
};

/// Pixels [B, 3, H, W] in 0..255 -> normalized input.
Tensor normalize_images(const Tensor& pixels);

/// Patch embedding plus the first prefix_depth() blocks (all frozen).
Tensor encoder_prefix(const Tensor& images, const Encoder& enc);
/// Remaining blocks from prefix tokens. `use_adapters` false runs the bare
/// frozen backbone.
EncoderOutput encoder_suffix(const Tensor& prefix_tokens, const Encoder& enc, bool use_adapters = true);
EncoderOutput encoder_forward(const Tensor& images, const Encoder& enc, bool use_adapters = true);

struct EncoderParamCounts {
    std::int64_t frozen = 0;
    std::int64_t trainable = 0;
    std::int64_t total() const { return frozen + trainable; }
};

EncoderParamCounts count_encoder_params(const Encoder& enc);

} // namespace usis
